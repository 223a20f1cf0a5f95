"""Adam baseline, sharpness-aware minimisation, and a top-Hessian-eigenvalue probe."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from . import numerics as nx
from .numerics import NonFiniteError, ParamSet, Tensor

LossFn = Callable[[dict[str, Tensor], Any], Tensor]


@dataclass
class OptimizerState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    warmup: int = 0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def current_lr(self) -> float:
        if self.warmup > 0 and self.step < self.warmup:
            return self.lr * self.step / self.warmup
        return self.lr


@dataclass
class SamConfig:
    rho: float = 0.15
    enabled: bool = True
    inner_batch: int | None = None
    debug: bool = False

    def __post_init__(self):
        if self.enabled and self.rho <= 0:
            raise ValueError("rho must be > 0 when SAM is enabled")


def _moment(store: dict[str, np.ndarray], name: str, like: np.ndarray) -> np.ndarray:
    buf = store.get(name)
    if buf is None:
        buf = store[name] = np.zeros_like(like)
    elif buf.shape != like.shape:
        # the atomic head grew: new rows start with zero moments
        grown = np.zeros_like(like)
        grown[tuple(slice(0, s) for s in buf.shape)] = buf
        buf = store[name] = grown
    return buf


def base_step(params: ParamSet, grads: dict[str, np.ndarray], state: OptimizerState) -> ParamSet:
    """One bias-corrected Adam update, in place."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise nx.ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.betas
    lr = state.current_lr()
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        m = _moment(state.m, name, p)
        v = _moment(state.v, name, p)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def value_and_grad(loss_fn: LossFn, params: ParamSet, batch) -> tuple[float, dict[str, np.ndarray]]:
    leaves = params.track()
    loss = loss_fn(leaves, batch)
    return float(loss.data), nx.grad(loss, leaves)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def sam_perturb(grads: dict[str, np.ndarray], rho: float) -> dict[str, np.ndarray]:
    """rho * g / ||g||_2 over all parameters jointly; zero when g is zero."""
    if rho <= 0:
        raise ValueError("rho must be > 0")
    norm = global_norm(grads)
    if norm == 0.0:
        return {k: np.zeros_like(g) for k, g in grads.items()}
    return {k: (rho / norm) * g for k, g in grads.items()}


def sam_gradient(params: ParamSet, batch, loss_fn: LossFn, sam: SamConfig) -> tuple[float, dict[str, np.ndarray]]:
    """Gradient evaluated at the adversarially perturbed point w + eps(w).

    Returns the loss at w and the perturbed-point gradient; ``params`` are
    left exactly as they were.
    """
    inner = batch if sam.inner_batch is None else batch[: sam.inner_batch]
    loss, g1 = value_and_grad(loss_fn, params, inner)
    eps = sam_perturb(g1, sam.rho)
    if sam.debug and global_norm(g1) > 0:
        assert abs(global_norm(eps) - sam.rho) <= 1e-9 * max(1.0, sam.rho)
    saved = {k: params[k].copy() for k in eps}
    try:
        for k, e in eps.items():
            np.add(params[k], e, out=params[k])
        _, g2 = value_and_grad(loss_fn, params, batch)
    finally:
        for k, v in saved.items():
            params[k][...] = v
    return loss, g2


def sam_step(params: ParamSet, batch, loss_fn: LossFn, state: OptimizerState, sam: SamConfig) -> float:
    """Two gradient evaluations, then a base update at w using the perturbed gradient."""
    if not sam.enabled:
        raise ValueError("sam_step called with SAM disabled")
    loss, g2 = sam_gradient(params, batch, loss_fn, sam)
    base_step(params, g2, state)
    return loss


def train_step(params: ParamSet, batch, loss_fn: LossFn, state: OptimizerState,
               sam: SamConfig | None = None) -> float:
    if sam is not None and sam.enabled:
        return sam_step(params, batch, loss_fn, state, sam)
    loss, g = value_and_grad(loss_fn, params, batch)
    base_step(params, g, state)
    return loss


def sharpness_estimate(params: ParamSet, batch, loss_fn: LossFn, iters: int = 20, seed: int = 0) -> float:
    """Power iteration for the top Hessian eigenvalue.

    Hessian-vector products are central differences of the gradient,
    Hv ~ (g(w + h v) - g(w - h v)) / 2h with h = 1e-4 (1 + ||w||).
    """
    if iters < 10:
        raise ValueError("iters must be >= 10")
    names = params.names()
    shapes = [params[n].shape for n in names]
    sizes = [params[n].size for n in names]
    w0 = params.flat().copy()
    h = 1e-4 * (1.0 + float(np.linalg.norm(w0)))

    def set_flat(vec: np.ndarray) -> None:
        off = 0
        for n, shp, sz in zip(names, shapes, sizes):
            params[n][...] = vec[off:off + sz].reshape(shp)
            off += sz

    def flat_grad() -> np.ndarray:
        _, g = value_and_grad(loss_fn, params, batch)
        return np.concatenate([g[n].ravel() for n in names])

    def hvp(v: np.ndarray) -> np.ndarray:
        try:
            set_flat(w0 + h * v)
            gp = flat_grad()
            set_flat(w0 - h * v)
            gm = flat_grad()
        finally:
            set_flat(w0)
        out = (gp - gm) / (2.0 * h)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError("non-finite Hessian-vector product")
        return out

    v = np.random.default_rng(seed).normal(size=w0.size)
    v /= np.linalg.norm(v)
    for _ in range(iters):
        hv = hvp(v)
        norm = np.linalg.norm(hv)
        if norm == 0.0:
            return 0.0
        v = hv / norm
    return float(v @ hvp(v))
