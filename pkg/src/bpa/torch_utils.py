from __future__ import annotations

import contextlib
import os

import numpy as np
import torch

DEVICE_ENV = "BPA_DEVICE"


def default_device() -> torch.device:
    return torch.device(os.environ.get(DEVICE_ENV, "cpu"))


@contextlib.contextmanager
def deterministic_mode(enabled: bool = True):
    """Force deterministic kernels for the duration of the block."""
    if not enabled:
        yield
        return
    prev = torch.are_deterministic_algorithms_enabled()
    prev_threads = torch.get_num_threads()
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)
        torch.set_num_threads(prev_threads)


def torch_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def to_nchw(X: np.ndarray, device=None) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(X.transpose(0, 3, 1, 2))).to(device or "cpu")


def to_nhwc(x: torch.Tensor) -> np.ndarray:
    return x.detach().cpu().permute(0, 2, 3, 1).contiguous().numpy()


def lsgan_real(pred: torch.Tensor) -> torch.Tensor:
    return torch.mean((pred - 1.0) ** 2)


def lsgan_fake(pred: torch.Tensor) -> torch.Tensor:
    return torch.mean(pred**2)
