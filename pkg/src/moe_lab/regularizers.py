"""Auxiliary routing losses: importance (coefficient of variation) and sample similarity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

REG_KINDS = ("none", "importance", "similarity")


@dataclass
class RegConfig:
    kind: str = "none"
    w_importance: float = 0.0
    beta_s: float = 0.0
    beta_d: float = 0.0

    def __post_init__(self):
        if self.kind not in REG_KINDS:
            raise ValueError(f"kind must be one of {REG_KINDS}, got {self.kind!r}")
        for name in ("w_importance", "beta_s", "beta_d"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def importance_loss(p: Tensor, w_importance: float) -> Tensor:
    """w * sigma(I) / mu(I) with I the per-expert column sums of ``p``.

    sigma is the population standard deviation. A single expert gives 0.
    """
    if p.ndim != 2:
        raise DimensionError(f"gate probabilities must be N x M, got {p.shape}")
    if p.shape[1] == 1:
        return Tensor(0.0)
    imp = p.sum(axis=0)
    mu = imp.mean()
    sigma = T.sqrt(((imp - mu) ** 2).mean())
    return sigma / mu * w_importance


def pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    """||x_i - x_j||^2 for rows of a flattened batch, diagonal exactly 0."""
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    sq = np.einsum("ij,ij->i", x, x)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def similarity_loss(x, p: Tensor, beta_s: float, beta_d: float) -> Tensor:
    """Sample-similarity routing loss over all ordered pairs x != x'.

    With d = ||x - x'||^2 and s = sum_e p(e|x) p(e|x'):

        S = beta_s / M * s * d
        D = beta_d / (M^2 - M) * (sum_e p(e|x) * sum_e' p(e'|x') - s) * d
        loss = sum_{x != x'} (S - D) / (N^2 - N)

    The second factor of D is the e != e' cross sum. ``x`` is constant (raw
    flattened pixels); gradients flow through ``p`` only. N < 2 gives 0, and
    M = 1 drops the D term.
    """
    n, m = p.shape
    if n < 2:
        return Tensor(0.0)
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if len(x) != n:
        raise DimensionError(f"{len(x)} samples but gate probabilities for {n}")
    d = Tensor(pairwise_sq_dists(x))
    same = p @ p.T
    total = (same * d).sum() * (beta_s / m)
    if m > 1 and beta_d != 0.0:
        r = p.sum(axis=1, keepdims=True)
        cross = r @ r.T - same
        total = total - (cross * d).sum() * (beta_d / (m * m - m))
    return total * (1.0 / (n * n - n))


def regularizer(reg: RegConfig, x, p: Tensor) -> Tensor | None:
    if reg.kind == "importance":
        return importance_loss(p, reg.w_importance)
    if reg.kind == "similarity":
        return similarity_loss(x, p, reg.beta_s, reg.beta_d)
    return None


def total_loss(task_loss: Tensor, reg_value: Tensor | None) -> Tensor:
    return task_loss if reg_value is None else task_loss + reg_value
