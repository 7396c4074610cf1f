"""scikit-learn style wrappers: a text-to-image teacher and a pruned, distilled student."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import NAMED_CONFIGS, UNetConfig
from .corpus import CaptionedImage, FrozenEncoders, tokenize
from .diffusion import make_schedule, sample
from .distill import DistillLossWeights
from .pruning import load_plan, progressive_plans
from .trainer import (
    DistillRunConfig,
    TeacherSchedule,
    TrainHyper,
    distill,
    encode_data,
    evaluate,
    train_teacher,
)
from .validation import check_captions, check_images


def _as_corpus(X, y) -> list[CaptionedImage]:
    X = check_images(X)
    y = check_captions(y, len(X))
    ids = [tokenize(c) if isinstance(c, str) else tuple(int(i) for i in c) for c in y]
    return [CaptionedImage(x, c, "", "", "") for x, c in zip(X, ids)]


class _SamplerMixin:
    """Shared ``predict``: guided sampling decoded back to image space."""

    def _sample_images(self, model, captions, seed):
        captions = check_captions(captions)
        context = self.encoders_.encode_texts(captions)
        n = len(captions)
        size = self.image_size_ // 2
        gen = torch.Generator().manual_seed(self.seed if seed is None else seed)
        z = sample(model, context, None, self.sample_steps, self.guidance_scale, self.schedule_,
                   gen, (n, model.config.in_channels, size, size),
                   null_context=self.encoders_.null_context(n))
        return FrozenEncoders.decode_latent(z).clamp(-1, 1).numpy()

    def _hyper(self, max_steps):
        return TrainHyper(learning_rate=self.learning_rate, batch_size=self.batch_size,
                          max_steps=max_steps, cond_dropout=self.cond_dropout, seed=self.seed)


class DiffusionTeacher(_SamplerMixin, BaseEstimator):
    """Trains a full U-Net denoiser on (image, caption) pairs.

    ``fit(X, y)`` takes N x 3 x H x W images in [-1, 1] and N captions.
    ``predict(captions)`` samples one image per caption; ``score`` is the
    negative held-out noise-prediction error.
    """

    def __init__(self, config="toy", learning_rate=1e-4, batch_size=16, max_steps=2000,
                 cond_dropout=0.1, sample_steps=25, guidance_scale=9.0, seed=0):
        self.config = config
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.cond_dropout = cond_dropout
        self.sample_steps = sample_steps
        self.guidance_scale = guidance_scale
        self.seed = seed

    def _config(self) -> UNetConfig:
        if isinstance(self.config, UNetConfig):
            return self.config
        if self.config in NAMED_CONFIGS:
            return NAMED_CONFIGS[self.config]()
        raise ValueError(f"config must be a UNetConfig or one of {sorted(NAMED_CONFIGS)}")

    def fit(self, X, y):
        corpus = _as_corpus(X, y)
        config = self._config()
        self.encoders_ = FrozenEncoders(context_dim=config.context_dim)
        self.schedule_ = make_schedule()
        self.image_size_ = corpus[0].image.shape[-1]
        self.checkpoint_ = train_teacher(corpus, config, self._hyper(self.max_steps),
                                         self.schedule_, self.encoders_)
        self.model_ = self.checkpoint_.model
        self.n_params_ = sum(p.numel() for p in self.model_.parameters())
        return self

    def predict(self, captions, seed=None) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self._sample_images(self.model_, captions, seed)

    def score(self, X, y) -> float:
        check_is_fitted(self, "model_")
        held = encode_data(_as_corpus(X, y), self.encoders_)
        rec = evaluate(self.model_, self.model_, held, self.schedule_, DistillLossWeights(0, 0))
        return -rec["task"]


class DistilledStudent(_SamplerMixin, BaseEstimator):
    """Prunes a fitted ``DiffusionTeacher`` and distills it on (image, caption) pairs.

    ``plan`` is a plan file path, a canonical plan name, or a float fraction of
    parameters to remove (resolved with the deepest-first progressive order).
    """

    def __init__(self, teacher=None, plan=0.5, lambda_out_kd=1.0, lambda_feat_kd=1.0,
                 learning_rate=1e-4, batch_size=16, max_steps=3000, cond_dropout=0.1,
                 sample_steps=25, guidance_scale=9.0, seed=0):
        self.teacher = teacher
        self.plan = plan
        self.lambda_out_kd = lambda_out_kd
        self.lambda_feat_kd = lambda_feat_kd
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.cond_dropout = cond_dropout
        self.sample_steps = sample_steps
        self.guidance_scale = guidance_scale
        self.seed = seed

    def _plan(self, config):
        if isinstance(self.plan, (int, float)) and not isinstance(self.plan, bool):
            return progressive_plans(config, [float(self.plan)])[0]
        if isinstance(self.plan, str):
            return load_plan(self.plan)
        return self.plan

    def fit(self, X, y):
        if self.teacher is None:
            raise ValueError("a fitted DiffusionTeacher is required")
        check_is_fitted(self.teacher, "model_")
        corpus = _as_corpus(X, y)
        teacher = self.teacher
        self.encoders_ = teacher.encoders_
        self.schedule_ = teacher.schedule_
        self.image_size_ = teacher.image_size_
        self.plan_ = self._plan(teacher.model_.config)
        self.weights_ = DistillLossWeights(self.lambda_out_kd, self.lambda_feat_kd)
        run = DistillRunConfig(self.plan_, TeacherSchedule.single(teacher.checkpoint_),
                               self.weights_, self._hyper(self.max_steps))
        result = distill(run, corpus, self.schedule_, self.encoders_)
        self.model_ = result.checkpoint.model
        self.train_log_ = result.train_log
        self.n_params_ = sum(p.numel() for p in self.model_.parameters())
        return self

    def predict(self, captions, seed=None) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self._sample_images(self.model_, captions, seed)

    def score(self, X, y) -> float:
        """Negative held-out output-level KD error against the teacher."""
        check_is_fitted(self, "model_")
        held = encode_data(_as_corpus(X, y), self.encoders_)
        rec = evaluate(self.model_, self.teacher.model_, held, self.schedule_, self.weights_)
        return -rec["out_kd"]
