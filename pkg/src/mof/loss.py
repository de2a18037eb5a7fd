from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_SIGMA = 0.05
NORM_TOL = 1e-4


class LossError(ValueError):
    pass


@dataclass
class LossBreakdown:
    l_v2t: Tensor
    l_t2v: Tensor
    l_c: Tensor
    logits: Tensor

    def values(self) -> dict[str, float]:
        return {"l_v2t": self.l_v2t.item(), "l_t2v": self.l_t2v.item(), "l_c": self.l_c.item()}


def _check_unit_rows(x: Tensor, name: str) -> None:
    norms = np.sqrt((x.data.astype(np.float64) ** 2).sum(axis=1))
    bad = np.abs(norms - 1.0) > NORM_TOL
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise LossError(f"{name} row {i} has norm {norms[i]:.6g}, expected unit norm")


def _mean_neg_log_softmax_diag(logits: Tensor) -> Tensor:
    """-(1/B) sum_i log softmax(logits)[i, i], in log-sum-exp form."""
    b = logits.shape[0]
    shift = ad.Tensor(logits.data.max(axis=1))
    eye = ad.Tensor(np.eye(b, dtype=logits.dtype))
    diag = ad.sum(ad.mul(logits, eye), 1)
    lse = ad.log(ad.sum(ad.exp(ad.sub(logits, ad.expand(shift, 1, b))), 1))
    return ad.neg(ad.mean(ad.sub(ad.sub(diag, shift), lse)))


def pairwise_logits(ev: Tensor, et: Tensor, sigma: float) -> Tensor:
    # explicit product-and-sum keeps logits(ev, et) == logits(et, ev).T bitwise
    b = ev.shape[0]
    prod = ad.mul(ad.expand(ev, 1, b), ad.expand(et, 0, b))
    return ad.scale(ad.sum(prod, 2), 1.0 / sigma)


def contrastive_loss(ev: Tensor, et: Tensor, sigma: float = DEFAULT_SIGMA) -> LossBreakdown:
    """Symmetric InfoNCE over a batch of matched video/text embeddings."""
    if sigma <= 0:
        raise LossError(f"temperature must be positive, got {sigma}")
    if ev.ndim != 2 or ev.shape != et.shape:
        raise LossError(f"embedding shapes differ or are not [B, D]: {ev.shape} vs {et.shape}")
    _check_unit_rows(ev, "video embedding")
    _check_unit_rows(et, "text embedding")
    logits = pairwise_logits(ev, et, sigma)
    l_v2t = _mean_neg_log_softmax_diag(logits)
    l_t2v = _mean_neg_log_softmax_diag(ad.transpose(logits))
    return LossBreakdown(l_v2t=l_v2t, l_t2v=l_t2v, l_c=ad.add(l_v2t, l_t2v), logits=logits)
