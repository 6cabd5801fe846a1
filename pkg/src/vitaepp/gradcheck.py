"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, no_grad


def rel_error(a: float | np.ndarray, b: float | np.ndarray, floor: float = 1e-300) -> float:
    """Norm-wise relative error ``|a - b| / max(|a|, |b|)`` (2-norm for arrays)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    den = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / den)


def numerical_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Dense central-difference gradient of scalar ``f()`` with respect to ``x``."""
    g = np.zeros(x.shape, dtype=np.float64)
    flat = x.data.reshape(-1)
    gf = g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f().item()
            flat[i] = old - h
            fm = f().item()
            flat[i] = old
            gf[i] = (fp - fm) / (2 * h)
    return g


def check_grads(f: Callable[[], Tensor], inputs: list[Tensor], h: float = 1e-5) -> float:
    """Worst relative error between analytic and dense numerical gradients."""
    for x in inputs:
        x.grad = None
    f().backward()
    analytic = [x.grad.copy() for x in inputs]
    for x in inputs:
        x.grad = None
    worst = 0.0
    for x, ga in zip(inputs, analytic):
        gn = numerical_grad(f, x, h)
        worst = max(worst, rel_error(ga, gn, floor=1e-7))
    return worst


@dataclass
class ParamCheck:
    name: str
    directional_rel_error: float
    entry_rel_error: float

    @property
    def worst(self) -> float:
        return max(self.directional_rel_error, self.entry_rel_error)


def check_param_grads(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    n_entries: int = 2,
    seed: int = 0,
) -> list[ParamCheck]:
    """Check every parameter tensor of a large model.

    Per tensor: one directional derivative along a random unit direction
    (covers all entries at once) plus the ``n_entries`` largest-magnitude
    entries individually. Dense differencing of every scalar is infeasible
    at model scale.
    """
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.grad = None
    f().backward()
    grads = {k: p.grad.astype(np.float64).copy() for k, p in params.items()}
    for p in params.values():
        p.grad = None

    def central(p: Tensor, direction: np.ndarray) -> float:
        base = p.data.copy()
        with no_grad():
            p.data[...] = base + h * direction
            fp = f().item()
            p.data[...] = base - h * direction
            fm = f().item()
        p.data[...] = base
        return (fp - fm) / (2 * h)

    out = []
    for name, p in params.items():
        g = grads[name]
        v = rng.standard_normal(p.shape)
        v /= np.linalg.norm(v)
        dir_err = rel_error(float((g * v).sum()), central(p, v))
        ent_err = 0.0
        for flat_i in np.argsort(-np.abs(g).reshape(-1))[:n_entries]:
            e = np.zeros(p.size)
            e[flat_i] = 1.0
            ent_err = max(ent_err, rel_error(g.reshape(-1)[flat_i], central(p, e.reshape(p.shape))))
        out.append(ParamCheck(name, dir_err, ent_err))
    return out
