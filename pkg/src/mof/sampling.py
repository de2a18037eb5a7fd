"""Frame samplers shared by training and evaluation."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


def _frames_of(video) -> np.ndarray:
    return video.data if isinstance(video, Tensor) else np.asarray(video)


def uniform_indices(n: int, k: int) -> list[int]:
    """Segment centres: index_j = floor((j + 0.5) N / k)."""
    if not 1 <= k <= n:
        raise ValueError(f"cannot sample {k} frames from a {n}-frame video")
    return [(2 * j + 1) * n // (2 * k) for j in range(k)]


def uniform_sample(video, k: int) -> tuple[Tensor, list[int]]:
    arr = _frames_of(video)
    idx = uniform_indices(arr.shape[0], k)
    return Tensor(arr[idx]), idx


def random_sample(video, k: int, rng: np.random.Generator) -> tuple[Tensor, list[int]]:
    """k distinct frames without replacement, kept in temporal order."""
    arr = _frames_of(video)
    n = arr.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"cannot sample {k} frames from a {n}-frame video")
    idx = sorted(int(i) for i in rng.choice(n, size=k, replace=False))
    return Tensor(arr[idx]), idx
