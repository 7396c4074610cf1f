from collections import Counter

import numpy as np
import pytest
import torch

from unetdistill.corpus import (
    COLORS,
    MAX_TOKENS,
    NULL_ID,
    SHAPES,
    VOCAB,
    VOCAB_SIZE,
    FrozenEncoders,
    UnknownTokenError,
    generate_toy_corpus,
    heldout_mask,
    load_corpus,
    save_corpus,
    split_corpus,
    tokenize,
)


def test_generation_is_deterministic():
    a, b = generate_toy_corpus(4, 1), generate_toy_corpus(4, 1)
    assert all(np.array_equal(x.image, y.image) and x.caption == y.caption for x, y in zip(a, b))
    c = generate_toy_corpus(4, 2)
    assert any(not np.array_equal(x.image, y.image) for x, y in zip(a, c))


def test_captions_within_vocabulary():
    corpus = generate_toy_corpus(200, 0)
    assert len(VOCAB) == VOCAB_SIZE
    for item in corpus:
        assert all(0 <= i < VOCAB_SIZE for i in item.caption)
        assert len(item.caption) <= MAX_TOKENS
        assert item.color in item.text and item.shape in item.text


@pytest.mark.parametrize("n", [24, 100, 257])
def test_pair_balance(n):
    counts = Counter((x.color, x.shape) for x in generate_toy_corpus(n, 3))
    pairs = len(COLORS) * len(SHAPES)
    assert len(counts) == min(pairs, n)
    assert all(abs(c - n / pairs) <= 1 for c in counts.values())


def test_images_in_range():
    for item in generate_toy_corpus(20, 0):
        assert item.image.shape == (3, 16, 16)
        assert item.image.min() >= -1 and item.image.max() <= 1


def test_split_is_stable_and_disjoint():
    corpus = generate_toy_corpus(500, 0)
    train, held = split_corpus(corpus, 0)
    assert len(train) + len(held) == 500
    assert 25 <= len(held) <= 75
    assert np.array_equal(heldout_mask(500, 0), heldout_mask(500, 0))
    assert np.array_equal(heldout_mask(1000, 0)[:500], heldout_mask(500, 0))


def test_save_load_round_trip(tmp_path):
    corpus = generate_toy_corpus(10, 5)
    save_corpus(tmp_path, corpus, 5)
    loaded, meta = load_corpus(tmp_path)
    assert meta["n"] == 10 and meta["seed"] == 5
    for x, y in zip(corpus, loaded):
        assert np.array_equal(x.image, y.image)
        assert x.caption == y.caption and x.color == y.color


def test_tokenize_rejects_unknown_words():
    with pytest.raises(UnknownTokenError):
        tokenize("small purple circle on white")


def test_null_caption_is_unconditional_context():
    enc = FrozenEncoders()
    assert torch.equal(enc.encode_text((NULL_ID,)), enc.null_context(1)[0])
    assert enc.null_context(3).shape == (3, MAX_TOKENS, 64)


def test_text_encoding_is_frozen_lookup():
    enc = FrozenEncoders()
    a = enc.encode_text("small red circle on white")
    assert torch.equal(a, enc.encode_text("small red circle on white"))
    b = enc.encode_text("small red square on white")
    differs = [i for i in range(MAX_TOKENS) if not torch.equal(a[i], b[i])]
    assert differs == [2]
    assert torch.equal(a, FrozenEncoders().encode_text("small red circle on white"))


def test_unknown_token_id_rejected():
    with pytest.raises(UnknownTokenError):
        FrozenEncoders().encode_text((VOCAB_SIZE,))


def test_encode_shape_contract():
    z = FrozenEncoders.encode_image(torch.zeros(2, 3, 16, 16))
    assert z.shape == (2, 12, 8, 8)
    assert FrozenEncoders.decode_latent(z).shape == (2, 3, 16, 16)
    with pytest.raises(ValueError):
        FrozenEncoders.encode_image(torch.zeros(3, 15, 16))


def test_constant_image_round_trips_exactly():
    x = torch.full((3, 16, 16), 0.25)
    assert torch.equal(FrozenEncoders.decode_latent(FrozenEncoders.encode_image(x)), x)


def test_round_trip_error_bounded_by_block_range():
    gen = torch.Generator().manual_seed(0)
    x = torch.rand(3, 16, 16, generator=gen) * 2 - 1
    err = (FrozenEncoders.decode_latent(FrozenEncoders.encode_image(x)) - x).abs()
    for c in range(3):
        for i in range(0, 16, 2):
            for j in range(0, 16, 2):
                block = x[c, i:i + 2, j:j + 2]
                bound = (block.max() - block.min()).item()
                assert err[c, i:i + 2, j:j + 2].max().item() <= bound + 1e-7


def test_encoder_hash_stable():
    enc = FrozenEncoders()
    h = enc.content_hash()
    enc.encode_texts(["small red circle on white"] * 3)
    assert enc.content_hash() == h == FrozenEncoders().content_hash()
    assert FrozenEncoders(seed=1).content_hash() != h
