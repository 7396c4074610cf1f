"""Reproducibility switches and a hardware descriptor for reports and manifests."""
from __future__ import annotations

import os
import platform
import random

import numpy as np
import torch


def set_deterministic(seed: int = 0, threads: int = 1) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def hardware_descriptor() -> str:
    parts = [
        platform.machine(),
        platform.processor() or platform.system(),
        f"cpus={os.cpu_count()}",
        f"torch_threads={torch.get_num_threads()}",
        f"torch={torch.__version__}",
    ]
    if torch.cuda.is_available():
        parts.append(f"cuda={torch.cuda.get_device_name(0)}")
    return " ".join(parts)
