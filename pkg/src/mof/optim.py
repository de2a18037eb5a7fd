from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# α is 1e-5 when finetuning pretrained weights; the toy encoder
# trains from scratch, so its default model lr is larger.
FINETUNE_MODEL_LR = 1e-5
FRAME_LR = 8e-4
TOY_MODEL_LR = 1e-3


class OptimError(ValueError):
    pass


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> "AdamState":
        return cls(m=[np.zeros_like(p.data) for p in params], v=[np.zeros_like(p.data) for p in params], **kw)


@dataclass
class AdamWState(AdamState):
    weight_decay: float = 0.01


def sgd_step_differentiable(params: Sequence[Tensor], loss: Tensor, lr: float) -> list[Tensor]:
    """One unrolled gradient-descent step that stays on the tape."""
    grads = ad.grad(loss, params, create_graph=True)
    return [ad.sub(p, ad.scale(g, lr)) for p, g in zip(params, grads)]


def _check(params, grads, state: AdamState, lr: float) -> None:
    if lr < 0:
        raise OptimError(f"learning rate must be nonnegative, got {lr}")
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise OptimError("params, grads and optimizer state differ in length")
    for i, (p, g, m) in enumerate(zip(params, grads, state.m)):
        gs = g.shape if hasattr(g, "shape") else np.shape(g)
        if p.shape != gs or p.shape != m.shape:
            raise OptimError(f"shape mismatch at parameter {i}: {p.shape}, grad {gs}, state {m.shape}")


def _adam_update(params, grads, state: AdamState, lr: float) -> None:
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = g.data if isinstance(g, Tensor) else np.asarray(g)
        dt = p.data.dtype.type
        m = dt(b1) * state.m[i] + dt(1.0 - b1) * g
        v = dt(b2) * state.v[i] + dt(1.0 - b2) * (g * g)
        state.m[i], state.v[i] = m, v
        m_hat = m / dt(bc1)
        v_hat = v / dt(bc2)
        p.data = p.data - dt(lr) * (m_hat / (np.sqrt(v_hat) + dt(state.eps)))


def adam_step(params: Sequence[Tensor], grads, state: AdamState, lr: float) -> None:
    _check(params, grads, state, lr)
    _adam_update(params, grads, state, lr)


def adamw_step(params: Sequence[Tensor], grads, state: AdamWState, lr: float) -> None:
    """Decoupled weight decay, then the Adam update."""
    _check(params, grads, state, lr)
    if state.weight_decay:
        for p in params:
            dt = p.data.dtype.type
            p.data = p.data - dt(lr * state.weight_decay) * p.data
    _adam_update(params, grads, state, lr)


def state_to_records(state: AdamState, prefix: str, names: Sequence[str]) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for name, m, v in zip(names, state.m, state.v):
        out[f"{prefix}.m.{name}"] = m
        out[f"{prefix}.v.{name}"] = v
    out[f"{prefix}.step_count"] = np.asarray(float(state.step_count))
    out[f"{prefix}.hyper"] = np.asarray(
        [state.beta1, state.beta2, state.eps, getattr(state, "weight_decay", 0.0)], dtype=np.float64
    )
    return out


def state_from_records(records: dict[str, np.ndarray], prefix: str, names: Sequence[str], cls=AdamState) -> AdamState:
    try:
        m = [records[f"{prefix}.m.{n}"] for n in names]
        v = [records[f"{prefix}.v.{n}"] for n in names]
        step = int(records[f"{prefix}.step_count"])
        b1, b2, eps, wd = (float(x) for x in records[f"{prefix}.hyper"])
    except KeyError as exc:
        raise OptimError(f"optimizer state record missing: {exc.args[0]}") from exc
    kw = dict(m=m, v=v, step_count=step, beta1=b1, beta2=b2, eps=eps)
    if cls is AdamWState:
        kw["weight_decay"] = wd
    return cls(**kw)
