"""Finite-difference oracle battery.

Every check compares the tape's analytic gradient against a central
difference computed on plain numpy forward passes, in f64.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_err) and self.max_rel_err <= self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<32s} max_rel_err={self.max_rel_err:.3e} tol={self.tol:.0e}"


def rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def central_difference(f: Callable[[list[np.ndarray]], float], xs: list[np.ndarray], which: int,
                       idx: tuple[int, ...], h: float) -> float:
    plus = [x.copy() for x in xs]
    minus = [x.copy() for x in xs]
    plus[which][idx] += h
    minus[which][idx] -= h
    return (f(plus) - f(minus)) / (2 * h)


def check_function(fn: Callable[..., Tensor], arrays: list[np.ndarray], h: float = 1e-5,
                   n_coords: int | None = None, rng: np.random.Generator | None = None,
                   floor: float = 1e-8) -> float:
    """Max relative error of grad(sum(fn(*xs) * probe)) vs central differences.

    A fixed random probe turns any tensor-valued op into a scalar objective.
    """
    rng = rng or np.random.default_rng(0)
    xs = [ad.Tensor(a, "f64", requires_grad=True) for a in arrays]
    out = fn(*xs)
    probe = rng.standard_normal(out.shape)

    def scalar(vals: list[np.ndarray]) -> float:
        # grad mode stays on: second-order cases take a gradient inside fn
        o = fn(*[ad.Tensor(v, "f64") for v in vals])
        return float((o.data * probe).sum())

    obj = ad.sum(ad.mul(out, ad.Tensor(probe)))
    grads = ad.grad(obj, xs)
    worst = 0.0
    for i, a in enumerate(arrays):
        coords = list(np.ndindex(a.shape))
        if n_coords is not None and len(coords) > n_coords:
            coords = [coords[j] for j in rng.choice(len(coords), n_coords, replace=False)]
        for idx in coords:
            fd = central_difference(scalar, [np.asarray(x, dtype=np.float64) for x in arrays], i, idx, h)
            worst = max(worst, rel_err(fd, float(grads[i].data[idx]), floor))
    return worst


def _primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    pos = rng.uniform(0.5, 2.0, (3, 4))
    return {
        "add": (ad.add, [a, b]),
        "sub": (ad.sub, [a, b]),
        "mul": (ad.mul, [a, b]),
        "div": (ad.div, [a, pos]),
        "exp": (ad.exp, [a]),
        "log": (ad.log, [pos]),
        "tanh": (ad.tanh, [a]),
        "gelu": (ad.gelu, [a]),
        "neg": (ad.neg, [a]),
        "sqrt": (ad.sqrt, [pos]),
        "scale": (lambda x: ad.scale(x, 1.7), [a]),
        "scalar-broadcast": (lambda x, s: ad.mul(x, s), [a, np.asarray(rng.standard_normal())]),
        "matmul": (ad.matmul, [a, rng.standard_normal((4, 2))]),
        "sum": (lambda x: ad.sum(x, 1), [a]),
        "mean": (lambda x: ad.mean(x, 0), [a]),
        "max": (lambda x: ad.amax(x, 1), [a]),
        "reshape": (lambda x: ad.reshape(x, (2, 6)), [a]),
        "transpose": (ad.transpose, [a]),
        "expand": (lambda x: ad.expand(x, 1, 3), [a]),
        "row_gather": (lambda x: ad.row_gather(x, [2, 0, 2]), [a]),
        "concat": (lambda x, y: ad.concat([x, y], 1), [a, b]),
        "softmax_rows": (ad.softmax_rows, [a]),
        "l2_normalize_rows": (ad.l2_normalize_rows, [a]),
    }


def _second_order_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    """Gradients of gradients: differentiate x -> grad(f)(x) . w."""
    w = rng.standard_normal((3, 4))

    def through_grad(f):
        def g(x):
            xx = x if x.requires_grad else ad.Tensor(x.data, x.precision, requires_grad=True)
            (gx,) = ad.grad(ad.sum(f(xx)), [xx], create_graph=True)
            return ad.mul(gx, ad.Tensor(w))
        return g

    a = rng.standard_normal((3, 4))
    return {
        "d2 gelu": (through_grad(ad.gelu), [a]),
        "d2 tanh": (through_grad(ad.tanh), [a]),
        "d2 softmax_rows": (through_grad(lambda x: ad.mul(ad.softmax_rows(x), ad.Tensor(w))), [a]),
        "d2 l2_normalize_rows": (through_grad(lambda x: ad.mul(ad.l2_normalize_rows(x), ad.Tensor(w))), [a]),
    }


def hvp_quadratic_error(n: int, rng: np.random.Generator) -> float:
    m = rng.standard_normal((n, n))
    a = m.T @ m
    x = ad.Tensor(rng.standard_normal((n, 1)), requires_grad=True)
    v = rng.standard_normal((n, 1))
    loss = ad.scale(ad.sum(ad.mul(x, ad.matmul(ad.Tensor(a), x))), 0.5)
    (hv,) = ad.hvp(loss, [x], [ad.Tensor(v)])
    expected = a @ v
    return float(np.abs(hv.data - expected).max() / max(np.abs(expected).max(), 1e-12))


def autodiff_battery(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, (fn, arrays) in {**_primitive_cases(rng), **_second_order_cases(rng)}.items():
        t0 = time.perf_counter()
        err = check_function(fn, arrays, h=1e-5, rng=rng)
        results.append(CheckResult(f"grad {name}", err, 1e-6, time.perf_counter() - t0))

    t0 = time.perf_counter()
    x = ad.Tensor(2.0, requires_grad=True)
    (g,) = ad.grad(ad.mul(ad.mul(x, x), x), [x], create_graph=True)
    (g2,) = ad.grad(g, [x])
    results.append(CheckResult("d2(x^3)/dx2 at 2 == 12", rel_err(g2.item(), 12.0), 1e-6, time.perf_counter() - t0))

    t0 = time.perf_counter()
    err = max(hvp_quadratic_error(5, rng) for _ in range(5))
    results.append(CheckResult("hvp 5x5 quadratic", err, 1e-6, time.perf_counter() - t0))
    return results


def loss_battery(seed: int = 0) -> list[CheckResult]:
    from .loss import contrastive_loss

    rng = np.random.default_rng(seed)
    worst = 0.0
    t0 = time.perf_counter()
    for _ in range(3):
        ev = rng.standard_normal((4, 8))
        et = rng.standard_normal((4, 8))

        def fn(a, b):
            return contrastive_loss(ad.l2_normalize_rows(a), ad.l2_normalize_rows(b), 0.5).l_c

        worst = max(worst, check_function(fn, [ev, et], h=1e-5, rng=rng))
    return [CheckResult("contrastive loss B=4 D=8", worst, 1e-6, time.perf_counter() - t0)]


def micro_problem(seed: int, b: int = 2, u: int = 2, r: int = 4):
    """Micro-model setup shared by the meta-gradient oracles: hidden 4, embed 4,
    U=2 meta-frames, R=4 regular frames, 8x8 RGB frames, batch of 2, f64."""
    from .encoders import EncoderDims, init_params

    rng = np.random.default_rng(seed)
    dims = EncoderDims(patch=4, height=8, width=8, channels=3, hidden=4, embed=4, max_frames=8, vocab=10)
    theta = init_params(dims, seed, "f64")
    eps_np = [rng.uniform(0, 1, (u, 3, 8, 8)) for _ in range(b)]
    regular = [ad.Tensor(rng.uniform(0, 1, (r, 3, 8, 8))) for _ in range(b)]
    captions = [sorted(rng.choice(10, 3, replace=False).tolist()) for _ in range(b)]
    return theta, eps_np, regular, captions, rng


def meta_gradient_check(seed: int, n_pixels: int = 10, h: float = 1e-3, alpha: float = 0.5,
                        inner_steps: int = 1) -> float:
    """Max rel error of the frame meta-gradient against central differences."""
    from .bop import meta_loss_and_grad, meta_loss_value

    theta, eps_np, regular, captions, rng = micro_problem(seed)
    eps = [ad.Tensor(e, requires_grad=True) for e in eps_np]
    _, grads = meta_loss_and_grad(theta, eps, regular, captions, alpha, inner_steps)

    def f(vals):
        return meta_loss_value(theta, vals, regular, captions, alpha, inner_steps)

    worst = 0.0
    for _ in range(n_pixels):
        which = int(rng.integers(len(eps_np)))
        idx = tuple(int(rng.integers(s)) for s in eps_np[0].shape)
        fd = central_difference(f, eps_np, which, idx, h)
        worst = max(worst, rel_err(fd, float(grads[which][idx])))
    return worst


def descent_trial(seed: int, beta: float = 1e-6, alpha: float = 0.5) -> tuple[float, float]:
    """Meta loss before and after one plain descent step eps - beta * g."""
    from .bop import meta_loss_and_grad, meta_loss_value

    theta, eps_np, regular, captions, _ = micro_problem(seed)
    eps = [ad.Tensor(e, requires_grad=True) for e in eps_np]
    before, grads = meta_loss_and_grad(theta, eps, regular, captions, alpha)
    stepped = [e - beta * g for e, g in zip(eps_np, grads)]
    return before, meta_loss_value(theta, stepped, regular, captions, alpha)


def meta_battery(seeds=range(5)) -> list[CheckResult]:
    out = []
    for s in seeds:
        t0 = time.perf_counter()
        out.append(CheckResult(f"meta-gradient seed {s}", meta_gradient_check(s), 1e-3, time.perf_counter() - t0))
    return out


def full_battery(seed: int = 0) -> list[CheckResult]:
    return autodiff_battery(seed) + loss_battery(seed) + meta_battery(range(seed, seed + 5))
