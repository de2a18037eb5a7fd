"""Text-to-video retrieval metrics: R@K and median rank."""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import ModelParams, encode_texts, encode_videos
from .sampling import uniform_sample

DEFAULT_KS = (1, 5, 10)


class EvalError(ValueError):
    pass


@dataclass
class RetrievalReport:
    r_at: dict[int, float]
    med_r: float
    n_queries: int
    frames_used: int
    wall_ms: float = 0.0
    ranks: list[int] = field(default_factory=list, repr=False)

    def __post_init__(self):
        check_report(self)

    def to_json(self) -> dict:
        return {
            "r1": self.r_at.get(1),
            "r5": self.r_at.get(5),
            "r10": self.r_at.get(10),
            "medr": self.med_r,
            "n": self.n_queries,
            "frames_used": self.frames_used,
            "wall_ms": self.wall_ms,
        }

    @classmethod
    def from_json(cls, d: dict) -> "RetrievalReport":
        r_at = {k: d[f"r{k}"] for k in DEFAULT_KS if d.get(f"r{k}") is not None}
        return cls(r_at=r_at, med_r=d["medr"], n_queries=d["n"], frames_used=d["frames_used"], wall_ms=d["wall_ms"])

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def check_report(rep: RetrievalReport) -> None:
    """Structural invariants, asserted on every report constructed."""
    ks = sorted(rep.r_at)
    vals = [rep.r_at[k] for k in ks]
    if any(b < a for a, b in zip(vals, vals[1:])):
        raise EvalError(f"R@K not monotone in K: {rep.r_at}")
    if any(not 0.0 <= v <= 1.0 for v in vals):
        raise EvalError(f"R@K outside [0, 1]: {rep.r_at}")
    if rep.n_queries and rep.med_r < 1:
        raise EvalError(f"median rank {rep.med_r} below 1")
    for v in vals:
        count = v * rep.n_queries
        if abs(count - round(count)) > 0.5:
            raise EvalError(f"R@K {v} is not a fraction of {rep.n_queries} queries")


def similarity_matrix(ev: Tensor | np.ndarray, et: Tensor | np.ndarray) -> np.ndarray:
    """S[i, j] = text_i . video_j (rows are text queries)."""
    ev = ev.data if isinstance(ev, Tensor) else np.asarray(ev)
    et = et.data if isinstance(et, Tensor) else np.asarray(et)
    if ev.ndim != 2 or ev.shape != et.shape:
        raise EvalError(f"embedding shapes differ: {ev.shape} vs {et.shape}")
    return et @ ev.T


def rank_of_positives(sim: np.ndarray) -> list[int]:
    """1-based rank of column i in row i; ties share the mean rank, rounded half up."""
    sim = sim.data if isinstance(sim, Tensor) else np.asarray(sim)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise EvalError(f"similarity matrix must be square, got {sim.shape}")
    ranks = []
    for i, row in enumerate(sim):
        pos = row[i]
        others = np.delete(row, i)
        better = int(np.count_nonzero(others > pos))
        ties = int(np.count_nonzero(others == pos))
        # mean of positions better+1 .. better+1+ties is better+1+ties/2
        ranks.append(better + 1 + (ties + 1) // 2)
    return ranks


def _median(xs: Sequence[float]) -> float:
    s = sorted(xs)
    n = len(s)
    mid = n // 2
    return float(s[mid]) if n % 2 else (s[mid - 1] + s[mid]) / 2.0


def report_from_ranks(ranks: Sequence[int], ks=DEFAULT_KS, frames_used: int = 0, wall_ms: float = 0.0) -> RetrievalReport:
    q = len(ranks)
    if q == 0:
        raise EvalError("no queries")
    r_at = {k: sum(1 for r in ranks if r <= k) / q for k in ks}
    return RetrievalReport(r_at=r_at, med_r=_median(ranks), n_queries=q, frames_used=frames_used,
                           wall_ms=wall_ms, ranks=list(ranks))


def report(sim: np.ndarray, ks=DEFAULT_KS, frames_used: int = 0, wall_ms: float = 0.0) -> RetrievalReport:
    return report_from_ranks(rank_of_positives(sim), ks, frames_used, wall_ms)


def _embed_chunk(theta: ModelParams, part, k_test: int) -> tuple[np.ndarray, np.ndarray]:
    dtype = theta.video.proj.dtype
    with ad.no_grad():
        frames = np.stack([uniform_sample(p.video, k_test)[0].data for p in part]).astype(dtype)
        ev = encode_videos(theta, ad.Tensor(frames)).data
        et = encode_texts(theta, [p.tokens for p in part]).data
    return ev, et


def embed_split(theta: ModelParams, pairs, k_test: int, chunk: int = 64, workers: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Embed every pair; with workers > 1 chunks run concurrently over read-only params
    and are reassembled in index order."""
    parts = [pairs[s : s + chunk] for s in range(0, len(pairs), chunk)]
    if workers > 1 and len(parts) > 1:
        with ThreadPoolExecutor(workers) as pool:
            outs = list(pool.map(lambda part: _embed_chunk(theta, part, k_test), parts))
    else:
        outs = [_embed_chunk(theta, part, k_test) for part in parts]
    return np.concatenate([o[0] for o in outs]), np.concatenate([o[1] for o in outs])


def evaluate(theta: ModelParams, pairs, k_test: int, ks=DEFAULT_KS, workers: int = 1) -> RetrievalReport:
    """Text-to-video retrieval over ``pairs`` using k_test uniformly sampled frames."""
    if not pairs:
        raise EvalError("empty test split")
    n = pairs[0].video.shape[0]
    if not 1 <= k_test <= n:
        raise EvalError(f"k_test={k_test} outside 1..{n}")
    t0 = time.perf_counter()
    ev, et = embed_split(theta, pairs, k_test, workers=workers)
    ranks = rank_of_positives(similarity_matrix(ev, et))
    wall_ms = (time.perf_counter() - t0) * 1000.0
    return report_from_ranks(ranks, ks, frames_used=k_test, wall_ms=wall_ms)


def chance_r1_band(q: int, sigmas: float = 3.0) -> tuple[float, float]:
    p = 1.0 / q
    sd = math.sqrt(p * (1 - p) / q)
    return p - sigmas * sd, p + sigmas * sd
