"""Reconciliation of base forecasts onto the coherent subspace.

All functions take node-major forecasts: an ``n``-vector or an ``n x H``
matrix whose columns are reconciled independently.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
import scipy.linalg

from . import diffcore as dc
from . import qp
from .diffcore import Tensor
from .errors import ConfigError, DimensionMismatch, Infeasible, InfeasibleBand, InsufficientSamples, SingularW
from .hierarchy import Hierarchy

Method = Literal["bottom_up", "projection", "mint_ols", "mint_shr", "opt_qp"]

CLI_METHODS = {
    "bu": "bottom_up",
    "proj": "projection",
    "mint-ols": "mint_ols",
    "mint-shr": "mint_shr",
    "opt": "opt_qp",
}

SHRINK_FLOOR = 1e-3


@dataclass(frozen=True)
class ReconcileConfig:
    method: Method = "projection"
    delta1: float = -0.2
    delta2: float = 0.2
    eps1: float = 0.01
    eps2: float = 0.01
    nonneg: bool = False

    def __post_init__(self):
        if self.method not in CLI_METHODS.values():
            raise ConfigError(f"unknown reconciliation method {self.method!r}")
        if not self.delta1 <= 0.0 <= self.delta2:
            raise ConfigError(f"band needs delta1 <= 0 <= delta2, got delta1={self.delta1}, delta2={self.delta2}")
        if self.eps1 < 0 or self.eps2 < 0:
            raise ConfigError(f"band slacks must be >= 0, got eps1={self.eps1}, eps2={self.eps2}")


@dataclass(frozen=True)
class ErrorCovariance:
    W: np.ndarray
    shrinkage: float | None = None


def _as_columns(Y, n: int) -> tuple[np.ndarray, bool]:
    Y = np.asarray(Y, dtype=float)
    vector = Y.ndim == 1
    Y2 = Y[:, None] if vector else Y
    if Y2.ndim != 2 or Y2.shape[0] != n:
        raise DimensionMismatch(f"expected {n} rows, got shape {Y.shape}")
    return Y2, vector


def _restore(Y2: np.ndarray, vector: bool) -> np.ndarray:
    return Y2[:, 0] if vector else Y2


def bottom_up(Y, h: Hierarchy) -> np.ndarray:
    """Replace every upper node by the aggregate of the bottom level."""
    Y2, vector = _as_columns(Y, h.n)
    return _restore(h.matrices.S @ Y2[h.r :], vector)


def project(Y, M: np.ndarray) -> np.ndarray:
    """Orthogonal projection onto the coherent subspace."""
    M = np.asarray(M, dtype=float)
    Y2, vector = _as_columns(Y, M.shape[0])
    return _restore(M @ Y2, vector)


def mint_operator(h: Hierarchy, W) -> np.ndarray:
    """P = (S' W^-1 S)^-1 S' W^-1, an ``m x n`` matrix."""
    W = np.asarray(W.W if isinstance(W, ErrorCovariance) else W, dtype=float)
    S = h.matrices.S
    if W.shape != (h.n, h.n):
        raise DimensionMismatch(f"W has shape {W.shape}, expected {(h.n, h.n)}")
    try:
        cW = scipy.linalg.cho_factor(W)
        WinvS = scipy.linalg.cho_solve(cW, S)
        cG = scipy.linalg.cho_factor(S.T @ WinvS)
    except np.linalg.LinAlgError as exc:
        raise SingularW("error covariance is not positive definite") from exc
    return scipy.linalg.cho_solve(cG, WinvS.T)


def mint(Y, h: Hierarchy, W) -> np.ndarray:
    Y2, vector = _as_columns(Y, h.n)
    P = mint_operator(h, W)
    return _restore(h.matrices.S @ (P @ Y2), vector)


def shr_covariance(residuals, shrinkage: float | None = None) -> ErrorCovariance:
    """Shrink the sample covariance toward its diagonal.

    ``residuals`` is ``samples x n``.  The intensity is the standard
    estimator for a diagonal target (sum of the estimated variances of the
    off-diagonal correlations over the sum of their squares), clipped to
    ``[1e-3, 1]``; pass ``shrinkage`` to force a value.
    """
    E = np.asarray(residuals, dtype=float)
    if E.ndim != 2:
        raise DimensionMismatch(f"residuals must be samples x n, got shape {E.shape}")
    T, n = E.shape
    if T < 2:
        raise InsufficientSamples(f"need at least 2 residual samples, got {T}")
    Ec = E - E.mean(axis=0)
    cov = Ec.T @ Ec / (T - 1)
    sd = np.sqrt(np.diag(cov))
    if shrinkage is None:
        safe = np.where(sd > 0, sd, 1.0)
        X = Ec / safe
        corr = X.T @ X / (T - 1)
        # variance of each sample correlation entry
        w = np.einsum("ti,tj->tij", X, X)
        var_corr = T / (T - 1) ** 3 * ((w - w.mean(axis=0)) ** 2).sum(axis=0)
        off = ~np.eye(n, dtype=bool)
        denom = (corr[off] ** 2).sum()
        lam = 1.0 if denom <= 0 else var_corr[off].sum() / denom
    else:
        lam = float(shrinkage)
    lam = float(np.clip(lam, SHRINK_FLOOR, 1.0))
    W = lam * np.diag(np.diag(cov)) + (1.0 - lam) * cov
    return ErrorCovariance(W=0.5 * (W + W.T), shrinkage=lam)


# ------------------------------------------------------------ banded QP


def _band_problem(y_hat: np.ndarray, h: Hierarchy, cfg: ReconcileConfig, eps_scale) -> qp.QpProblem:
    n = h.n
    a = np.abs(y_hat)
    e1 = cfg.eps1 * eps_scale
    e2 = cfg.eps2 * eps_scale
    G = [np.eye(n), -np.eye(n)]
    rhs = [y_hat + cfg.delta2 * a + e2, -y_hat - cfg.delta1 * a + e1]
    if cfg.nonneg:
        G.append(-np.eye(n))
        rhs.append(np.zeros(n))
    A = h.matrices.A
    return qp.QpProblem(np.eye(n), y_hat, A, np.zeros(A.shape[0]), np.vstack(G), np.concatenate(rhs))


def _band_solve(cols: np.ndarray, h: Hierarchy, cfg: ReconcileConfig, eps_scale):
    problems = [_band_problem(cols[:, k], h, cfg, eps_scale) for k in range(cols.shape[1])]
    try:
        sols = qp.solve_many(problems)
    except Infeasible as exc:
        raise InfeasibleBand("the band admits no coherent point", exc.solution) from exc
    return problems, sols


def opt_reconcile(Y, h: Hierarchy, cfg: ReconcileConfig | None = None, eps_scale=1.0) -> np.ndarray:
    """Closest coherent forecast whose adjustment stays inside the band

    ``delta1 |y_hat| - eps1 <= y - y_hat <= delta2 |y_hat| + eps2``.

    ``eps_scale`` (scalar or per-node) multiplies the absolute slacks, so
    the slacks can be stated in normalised units.
    """
    cfg = cfg or ReconcileConfig(method="opt_qp")
    Y2, vector = _as_columns(Y, h.n)
    eps_scale = np.broadcast_to(np.asarray(eps_scale, dtype=float), (h.n,))
    _, sols = _band_solve(Y2, h, cfg, eps_scale)
    return _restore(np.stack([s.z for s in sols], axis=1), vector)


def opt_reconcile_layer(
    Y: Tensor, h: Hierarchy, cfg: ReconcileConfig | None = None, copies: int = 1, eps_scale=1.0
) -> Tensor:
    """Differentiable version of :func:`opt_reconcile` on a tape.

    ``Y`` holds ``copies`` stacked forecasts (``copies * n`` rows, one column
    per step); every column of every copy is one problem.
    """
    cfg = cfg or ReconcileConfig(method="opt_qp")
    Y = dc.as_tensor(Y)
    n = h.n
    if Y.shape[0] != copies * n:
        raise DimensionMismatch(f"expected {copies * n} rows, got {Y.shape[0]}")
    steps = Y.shape[1]
    eps_scale = np.broadcast_to(np.asarray(eps_scale, dtype=float), (n,))
    cols = Y.value.reshape(copies, n, steps).transpose(1, 0, 2).reshape(n, copies * steps)
    problems, sols = _band_solve(cols, h, cfg, eps_scale)
    Z = np.stack([s.z for s in sols], axis=1)
    out = Z.reshape(n, copies, steps).transpose(1, 0, 2).reshape(copies * n, steps)
    sign = np.sign(cols)

    def vjp(g):
        gcols = g.reshape(copies, n, steps).transpose(1, 0, 2).reshape(n, copies * steps)
        grads = qp.backward_many(problems, sols, gcols.T)
        dY = np.empty_like(cols)
        for k, bw in enumerate(grads):
            dh_up, dh_lo = bw.dh[:n], bw.dh[n : 2 * n]
            s = sign[:, k]
            dY[:, k] = bw.dq + dh_up * (1.0 + cfg.delta2 * s) - dh_lo * (1.0 + cfg.delta1 * s)
        return (dY.reshape(n, copies, steps).transpose(1, 0, 2).reshape(copies * n, steps),)

    return dc.custom([Y], out, vjp)


def reconcile(Y, h: Hierarchy, cfg: ReconcileConfig, W=None, residuals=None) -> np.ndarray:
    """Dispatch on ``cfg.method``; MinT-SHR needs ``W`` or in-sample ``residuals``."""
    if cfg.method == "bottom_up":
        return bottom_up(Y, h)
    if cfg.method == "projection":
        return project(Y, h.matrices.M)
    if cfg.method == "mint_ols":
        return mint(Y, h, np.eye(h.n))
    if cfg.method == "mint_shr":
        if W is None:
            if residuals is None:
                raise InsufficientSamples("mint_shr needs residuals or a covariance")
            W = shr_covariance(residuals)
        return mint(Y, h, W)
    return opt_reconcile(Y, h, cfg)
