"""Dense convex QP with implicit-differentiation backward pass.

Problem form::

    minimise   1/2 z'Qz - q'z
    subject to Aeq z = beq,  G z <= h

The forward solve is a Mehrotra predictor-corrector primal-dual interior
point method followed by an active-set polish (one equality-constrained KKT
solve on the detected active set), which brings converged solutions to
linear-solve accuracy.  Several problems of equal shape are solved in one
vectorised pass with :func:`solve_many`.

The backward pass differentiates the KKT conditions

    Qz - q + G'lam + Aeq'nu = 0
    diag(lam)(Gz - h)       = 0
    Aeq z - beq             = 0

at the solution and solves the transposed system for the adjoints.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from scipy import optimize

from .errors import (
    DimensionMismatch,
    Infeasible,
    MaxIterations,
    NonConvex,
    SingularKKT,
    TooManyInequalities,
)

Status = Literal["converged", "max_iter", "infeasible"]

REG_THRESHOLD = 1e-10
REG_AMOUNT = 1e-8
NONCONVEX_EIG = -1e-8
CLAMP = 1e-10


@dataclass
class QpProblem:
    Q: np.ndarray
    q: np.ndarray
    Aeq: np.ndarray | None = None
    beq: np.ndarray | None = None
    G: np.ndarray | None = None
    h: np.ndarray | None = None

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.q = np.asarray(self.q, dtype=float).reshape(-1)
        d = self.q.size
        if self.Q.shape != (d, d):
            raise DimensionMismatch(f"Q has shape {self.Q.shape}, expected {(d, d)}")
        if not np.allclose(self.Q, self.Q.T, atol=1e-10, rtol=0):
            raise DimensionMismatch("Q must be symmetric")
        self.Aeq, self.beq = _constraint_pair(self.Aeq, self.beq, d, "equality")
        self.G, self.h = _constraint_pair(self.G, self.h, d, "inequality")

    @property
    def d(self) -> int:
        return self.q.size

    @property
    def n_eq(self) -> int:
        return self.Aeq.shape[0]

    @property
    def n_ineq(self) -> int:
        return self.G.shape[0]

    def objective(self, z) -> float:
        z = np.asarray(z, dtype=float)
        return float(0.5 * z @ self.Q @ z - self.q @ z)

    def to_json(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("Q", "q", "Aeq", "beq", "G", "h")}

    @classmethod
    def from_json(cls, doc: dict) -> "QpProblem":
        d = len(doc["q"])
        fields = {}
        for k in ("Aeq", "G"):
            rows = doc.get(k) or []
            fields[k] = np.asarray(rows, dtype=float).reshape(-1, d)
        return cls(doc["Q"], doc["q"], fields["Aeq"], doc.get("beq") or [], fields["G"], doc.get("h") or [])


def _constraint_pair(M, v, d, kind):
    if M is None:
        M = np.zeros((0, d))
    M = np.asarray(M, dtype=float).reshape(-1, d) if np.size(M) else np.zeros((0, d))
    v = np.zeros(0) if v is None else np.asarray(v, dtype=float).reshape(-1)
    if M.shape[0] != v.size:
        raise DimensionMismatch(f"{kind} matrix has {M.shape[0]} rows but rhs has {v.size}")
    return M, v


@dataclass
class QpSolution:
    z: np.ndarray
    nu: np.ndarray
    lam: np.ndarray
    status: Status
    residuals: dict = field(default_factory=dict)
    iterations: int = 0
    polished: bool = False

    @property
    def slack(self) -> np.ndarray:
        return self.residuals.get("_slack", np.zeros(0))

    def to_json(self) -> dict:
        return {
            "z": self.z.tolist(),
            "nu": self.nu.tolist(),
            "lam": self.lam.tolist(),
            "status": self.status,
            "residuals": {k: v for k, v in self.residuals.items() if not k.startswith("_")},
            "iterations": self.iterations,
        }


@dataclass
class QpBackward:
    dq: np.ndarray
    dbeq: np.ndarray
    dh: np.ndarray
    dQ: np.ndarray | None = None
    dAeq: np.ndarray | None = None
    dG: np.ndarray | None = None
    flagged: bool = False


def save_case(path: str | Path, problem: QpProblem, solution: QpSolution | None = None) -> None:
    doc = {"problem": problem.to_json()}
    if solution is not None:
        doc["solution"] = solution.to_json()
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_case(path: str | Path) -> tuple[QpProblem, dict | None]:
    doc = json.loads(Path(path).read_text())
    return QpProblem.from_json(doc["problem"]), doc.get("solution")


# ------------------------------------------------------------------ helpers


def _regularise(Q: np.ndarray) -> np.ndarray:
    eig = np.linalg.eigvalsh(Q)
    lo = eig[..., 0] if eig.shape[-1] else np.zeros(eig.shape[:-1])
    if np.any(lo < NONCONVEX_EIG):
        raise NonConvex(f"Q has eigenvalue {lo.min():.3e}")
    if np.any(lo < REG_THRESHOLD):
        Q = Q + REG_AMOUNT * np.eye(Q.shape[-1])
    return Q


def _residuals(Q, q, A, b, G, h, z, nu, lam, s):
    rd = np.einsum("bij,bj->bi", Q, z) - q
    if A.shape[1]:
        rd = rd + np.einsum("bji,bj->bi", A, nu)
    if G.shape[1]:
        rd = rd + np.einsum("bji,bj->bi", G, lam)
    rp = np.einsum("bij,bj->bi", A, z) - b
    rg = np.einsum("bij,bj->bi", G, z) + s - h
    return rd, rp, rg


def _inf(x):
    return np.abs(x).max(axis=-1) if x.shape[-1] else np.zeros(x.shape[0])


def _scaled_gap(Q, q, A, b, G, h, z, nu, lam, s):
    rd, rp, rg = _residuals(Q, q, A, b, G, h, z, nu, lam, s)
    scale_d = 1.0 + _inf(q)
    scale_p = 1.0 + _inf(b)
    scale_g = 1.0 + _inf(h)
    comp = _inf(s * lam)
    return np.maximum.reduce([_inf(rd) / scale_d, _inf(rp) / scale_p, _inf(rg) / scale_g, comp]), (rd, rp, rg)


def _max_step(v, dv):
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(dv < 0, -v / dv, np.inf)
    if ratio.shape[-1] == 0:
        return np.ones(v.shape[0])
    return np.minimum(1.0, ratio.min(axis=-1))


def _kkt_solve(K, A, rhs_z, rhs_nu):
    e = A.shape[1]
    if e == 0:
        return np.linalg.solve(K, rhs_z[..., None])[..., 0], np.zeros((K.shape[0], 0))
    B, d = rhs_z.shape
    big = np.zeros((B, d + e, d + e))
    big[:, :d, :d] = K
    big[:, :d, d:] = np.swapaxes(A, 1, 2)
    big[:, d:, :d] = A
    sol = np.linalg.solve(big, np.concatenate([rhs_z, rhs_nu], axis=1)[..., None])[..., 0]
    return sol[:, :d], sol[:, d:]


def _polish(Q, q, A, b, G, h, z, lam, s, feas_tol):
    """Re-solve with the detected active set as equalities; None if rejected."""
    active = lam > s
    Ga = G[active]
    d, e, k = q.size, A.shape[0], int(active.sum())
    K = np.zeros((d + e + k, d + e + k))
    K[:d, :d] = Q
    K[:d, d : d + e] = A.T
    K[:d, d + e :] = Ga.T
    K[d : d + e, :d] = A
    K[d + e :, :d] = Ga
    rhs = np.concatenate([q, b, h[active]])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(sol)):
        return None
    if np.abs(K @ sol - rhs).max() > 1e-9 * (1.0 + np.abs(rhs).max()):
        return None
    zp, nup, lam_a = sol[:d], sol[d : d + e], sol[d + e :]
    scale = 1.0 + np.abs(h).max() if h.size else 1.0
    if h.size and np.any(G @ zp - h > feas_tol * scale):
        return None
    if np.any(lam_a < -feas_tol * (1.0 + np.abs(lam).max())):
        return None
    lam_p = np.zeros_like(lam)
    lam_p[active] = np.maximum(lam_a, 0.0)
    return zp, nup, lam_p


def _phase1_feasible(A, b, G, h) -> bool:
    d = A.shape[1] if A.size else G.shape[1]
    res = optimize.linprog(
        np.zeros(d),
        A_ub=G if G.shape[0] else None,
        b_ub=h if G.shape[0] else None,
        A_eq=A if A.shape[0] else None,
        b_eq=b if A.shape[0] else None,
        bounds=[(None, None)] * d,
        method="highs",
    )
    return res.status != 2


# --------------------------------------------------------------- forward


def _stack(problems: Sequence[QpProblem]):
    first = problems[0]
    for p in problems[1:]:
        if (p.d, p.n_eq, p.n_ineq) != (first.d, first.n_eq, first.n_ineq):
            raise DimensionMismatch("solve_many needs problems of identical shape")
    return (
        np.stack([p.Q for p in problems]),
        np.stack([p.q for p in problems]),
        np.stack([p.Aeq for p in problems]),
        np.stack([p.beq for p in problems]),
        np.stack([p.G for p in problems]),
        np.stack([p.h for p in problems]),
    )


def solve_arrays(Q, q, A, b, G, h, tol=1e-8, max_iter=100):
    """Vectorised core on stacked arrays (leading batch axis).

    Returns ``(z, nu, lam, s, status, iterations, polished)``; ``status``
    is a list of per-problem strings.
    """
    # infeasible members of a batch can blow up before they are frozen
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        return _solve_arrays(Q, q, A, b, G, h, tol, max_iter)


def _ipm_step(Q, q, A, b, G, Gt, h, z, nu, lam, s):
    """One predictor-corrector step; None if the Newton system is singular."""
    rd, rp, rg = _residuals(Q, q, A, b, G, h, z, nu, lam, s)
    g = G.shape[1]
    mu = (s * lam).sum(axis=1) / g
    K = Q + Gt @ ((lam / s)[:, :, None] * G)

    def direction(rc):
        rhs_z = -rd + np.einsum("bij,bj->bi", Gt, (rc - lam * rg) / s)
        dz, dnu = _kkt_solve(K, A, rhs_z, -rp)
        dlam = (-rc + lam * rg + lam * np.einsum("bij,bj->bi", G, dz)) / s
        ds = -rg - np.einsum("bij,bj->bi", G, dz)
        return dz, dnu, dlam, ds

    try:
        dz_a, dnu_a, dlam_a, ds_a = direction(s * lam)
        alpha = np.minimum(_max_step(s, ds_a), _max_step(lam, dlam_a))
        mu_aff = ((s + alpha[:, None] * ds_a) * (lam + alpha[:, None] * dlam_a)).sum(axis=1) / g
        sigma = np.clip(mu_aff / np.maximum(mu, 1e-300), 0.0, 1.0) ** 3
        rc = s * lam + ds_a * dlam_a - (sigma * mu)[:, None]
        dz, dnu, dlam, ds = direction(rc)
    except np.linalg.LinAlgError:
        return None
    alpha = np.minimum(1.0, 0.99 * np.minimum(_max_step(s, ds), _max_step(lam, dlam)))[:, None]
    return (
        z + alpha * dz,
        nu + alpha * dnu,
        np.maximum(lam + alpha * dlam, 1e-300),
        np.maximum(s + alpha * ds, 1e-300),
    )


def _solve_arrays(Q, q, A, b, G, h, tol, max_iter):
    B, d = q.shape
    g = G.shape[1]
    Q = _regularise(Q)
    if g == 0:
        z, nu = _kkt_solve(Q, A, q, b)
        lam = np.zeros((B, 0))
        s = np.zeros((B, 0))
        status = ["converged"] * B
        rp = _inf(np.einsum("bij,bj->bi", A, z) - b)
        for k in range(B):
            if rp[k] > 1e-8 * (1.0 + _inf(b[k : k + 1])[0]):
                status[k] = "infeasible"
        return z, nu, lam, s, status, np.ones(B, dtype=int), np.zeros(B, dtype=bool)

    Gt = np.swapaxes(G, 1, 2)
    # least-squares start: min 1/2 z'Qz - q'z + 1/2 |Gz - h|^2  s.t. Az = b
    K0 = Q + Gt @ G
    z, nu = _kkt_solve(K0, A, q + np.einsum("bij,bj->bi", Gt, h), b)
    gz = np.einsum("bij,bj->bi", G, z)
    s = h - gz
    lam = gz - h
    shift_s = -s.min(axis=1)
    s = np.where((shift_s >= 0)[:, None], s + (1.0 + shift_s)[:, None], s)
    shift_l = -lam.min(axis=1)
    lam = np.where((shift_l >= 0)[:, None], lam + (1.0 + shift_l)[:, None], lam)
    s = np.maximum(s, 1e-8)
    lam = np.maximum(lam, 1e-8)

    done = np.zeros(B, dtype=bool)
    iters = np.zeros(B, dtype=int)
    for it in range(max_iter):
        gap, _ = _scaled_gap(Q, q, A, b, G, h, z, nu, lam, s)
        done |= gap <= tol
        if done.all():
            break
        # iterate only on the problems still running
        k = np.flatnonzero(~done)
        iters[k] += 1
        step = _ipm_step(Q[k], q[k], A[k], b[k], G[k], Gt[k], h[k], z[k], nu[k], lam[k], s[k])
        if step is None:
            break
        z[k], nu[k], lam[k], s[k] = step

    gap, _ = _scaled_gap(Q, q, A, b, G, h, z, nu, lam, s)
    done = gap <= tol
    status = []
    polished = np.zeros(B, dtype=bool)
    for k in range(B):
        if done[k]:
            pol = _polish(Q[k], q[k], A[k], b[k], G[k], h[k], z[k], lam[k], s[k], feas_tol=max(tol, 1e-9))
            if pol is not None:
                z[k], nu[k], lam[k] = pol
                s[k] = np.maximum(h[k] - G[k] @ z[k], 0.0)
                polished[k] = True
            status.append("converged")
        elif _phase1_feasible(A[k], b[k], G[k], h[k]):
            status.append("max_iter")
        else:
            status.append("infeasible")
    return z, nu, lam, s, status, iters, polished


def _package(problem: QpProblem, z, nu, lam, s, status, iters, polished) -> QpSolution:
    Q = problem.Q
    rd = Q @ z - problem.q + problem.Aeq.T @ nu + problem.G.T @ lam
    gz = problem.G @ z
    residuals = {
        "stationarity": float(np.abs(rd).max()) if rd.size else 0.0,
        "primal_eq": float(np.abs(problem.Aeq @ z - problem.beq).max()) if problem.n_eq else 0.0,
        "primal_ineq": float(np.maximum(gz - problem.h, 0.0).max()) if problem.n_ineq else 0.0,
        "complementarity": float(np.abs(lam * (gz - problem.h)).max()) if problem.n_ineq else 0.0,
        "_slack": s,
    }
    return QpSolution(z=z, nu=nu, lam=lam, status=status, residuals=residuals, iterations=int(iters), polished=bool(polished))


def solve_many(problems: Sequence[QpProblem], tol: float = 1e-8, max_iter: int = 100, check: bool = True) -> list[QpSolution]:
    """Solve equally shaped problems in one vectorised pass."""
    if not problems:
        return []
    arrays = _stack(problems)
    z, nu, lam, s, status, iters, polished = solve_arrays(*arrays, tol=tol, max_iter=max_iter)
    sols = [
        _package(p, z[k], nu[k], lam[k], s[k], status[k], iters[k], polished[k]) for k, p in enumerate(problems)
    ]
    if check:
        for sol in sols:
            _raise_for_status(sol)
    return sols


def solve(problem: QpProblem, tol: float = 1e-8, max_iter: int = 100, check: bool = True) -> QpSolution:
    """Solve one problem.  With ``check`` a non-converged status raises."""
    return solve_many([problem], tol=tol, max_iter=max_iter, check=check)[0]


def _raise_for_status(sol: QpSolution) -> None:
    if sol.status == "infeasible":
        raise Infeasible("QP is infeasible", sol)
    if sol.status == "max_iter":
        raise MaxIterations(f"QP did not converge: residuals {sol.to_json()['residuals']}", sol)


# --------------------------------------------------------------- backward


def _kkt_matrix(Q, Aeq, G, z, lam, h):
    d, e, g = Q.shape[0], Aeq.shape[0], G.shape[0]
    lam_c = np.maximum(lam, CLAMP)
    slack = np.minimum(G @ z - h, -CLAMP) if g else np.zeros(0)
    J = np.zeros((d + g + e, d + g + e))
    J[:d, :d] = Q
    J[:d, d : d + g] = G.T
    J[:d, d + g :] = Aeq.T
    J[d : d + g, :d] = lam_c[:, None] * G
    J[d : d + g, d : d + g] = np.diag(slack)
    J[d + g :, :d] = Aeq
    return J


def backward_many(
    problems: Sequence[QpProblem],
    solutions: Sequence[QpSolution],
    dL_dz: np.ndarray,
    full: bool = False,
) -> list[QpBackward]:
    """Adjoints of a scalar loss for several solved problems (one row of
    ``dL_dz`` per problem)."""
    dL_dz = np.atleast_2d(np.asarray(dL_dz, dtype=float))
    for sol in solutions:
        if sol.status != "converged":
            raise SingularKKT(f"backward needs a converged solution, got {sol.status}")
    if not problems:
        return []
    p0 = problems[0]
    d, e, g = p0.d, p0.n_eq, p0.n_ineq
    Js = np.stack([
        _kkt_matrix(_regularise(p.Q[None])[0], p.Aeq, p.G, s.z, s.lam, p.h) for p, s in zip(problems, solutions)
    ])
    rhs = np.zeros((len(problems), d + g + e))
    rhs[:, :d] = dL_dz
    JT = np.swapaxes(Js, 1, 2)
    flagged = np.zeros(len(problems), dtype=bool)
    try:
        W = np.linalg.solve(JT, rhs[..., None])[..., 0]
        bad = ~np.all(np.isfinite(W), axis=1)
    except np.linalg.LinAlgError:
        W = np.zeros_like(rhs)
        bad = np.ones(len(problems), dtype=bool)
    for k in np.flatnonzero(bad):
        W[k] = np.linalg.lstsq(JT[k], rhs[k], rcond=None)[0]
        flagged[k] = True

    out = []
    for k, (p, s) in enumerate(zip(problems, solutions)):
        wz, wl, wn = W[k, :d], W[k, d : d + g], W[k, d + g :]
        lam_c = np.maximum(s.lam, CLAMP) if g else s.lam
        res = QpBackward(dq=wz.copy(), dbeq=wn.copy(), dh=lam_c * wl, flagged=bool(flagged[k]))
        if full:
            res.dQ = -0.5 * (np.outer(wz, s.z) + np.outer(s.z, wz))
            res.dAeq = -np.outer(s.nu, wz) - np.outer(wn, s.z)
            res.dG = -np.outer(s.lam, wz) - np.outer(lam_c * wl, s.z)
        out.append(res)
    return out


def backward(problem: QpProblem, solution: QpSolution, dL_dz, full: bool = False) -> QpBackward:
    return backward_many([problem], [solution], np.asarray(dL_dz, dtype=float).reshape(1, -1), full=full)[0]


# ------------------------------------------------------------------ oracle


def brute_force_oracle(problem: QpProblem, max_ineq: int = 12, tol: float = 1e-9) -> QpSolution:
    """Enumerate active sets; keep the best primal/dual feasible KKT point."""
    p = problem
    g = p.n_ineq
    if g > max_ineq:
        raise TooManyInequalities(f"{g} inequalities exceed enumeration bound {max_ineq}")
    d, e = p.d, p.n_eq
    best = None
    scale = 1.0 + (np.abs(p.h).max() if g else 0.0) + (np.abs(p.beq).max() if e else 0.0)
    for size in range(g + 1):
        for subset in itertools.combinations(range(g), size):
            idx = list(subset)
            Ga = p.G[idx]
            k = len(idx)
            K = np.zeros((d + e + k, d + e + k))
            K[:d, :d] = p.Q
            K[:d, d : d + e] = p.Aeq.T
            K[:d, d + e :] = Ga.T
            K[d : d + e, :d] = p.Aeq
            K[d + e :, :d] = Ga
            rhs = np.concatenate([p.q, p.beq, p.h[idx]])
            sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
            if np.abs(K @ sol - rhs).max() > 1e-8 * (1.0 + np.abs(rhs).max()):
                continue
            z, nu, lam_a = sol[:d], sol[d : d + e], sol[d + e :]
            if g and np.any(p.G @ z - p.h > tol * scale):
                continue
            if np.any(lam_a < -tol * (1.0 + np.abs(sol).max())):
                continue
            obj = p.objective(z)
            if best is None or obj < best[0] - 1e-12 * (1.0 + abs(obj)):
                lam = np.zeros(g)
                lam[idx] = np.maximum(lam_a, 0.0)
                best = (obj, z, nu, lam)
    if best is None:
        raise Infeasible("no feasible KKT point in any active set")
    _, z, nu, lam = best
    s = p.h - p.G @ z if g else np.zeros(0)
    return _package(p, z, nu, lam, s, "converged", 0, False)
