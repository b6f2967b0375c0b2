"""Inventory-style scheduling: per-level penalties, the realised task cost,
and a coherent decision QP driven by base forecasts.

The cost of a decision ``y`` against realised values ``t`` is

    c_u' max(t - y, 0) + c_o' max(y - t, 0) + 1/2 (t - y)' diag(q) (t - y)

and the decision layer minimises the same cost with the forecast standing in
for ``t``, writing the hinges with slack variables ``y_u``, ``y_o``:

    min  c_u'y_u + c_o'y_o - f' diag(q) y + 1/2 y' diag(q) y + rho/2 (|y_u|^2 + |y_o|^2)
    s.t. A y = 0,  y + y_u >= f,  y - y_o <= f,  y, y_u, y_o >= 0.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import qp
from .diffcore import Tensor
from .errors import DataError, DimensionMismatch, MissingLevelRow
from .hierarchy import Hierarchy

RHO = 1e-6
HEADER = ["level", "c_u", "c_o", "q"]


@dataclass(frozen=True)
class PenaltyTable:
    rows: dict  # level -> (c_u, c_o, q)

    def __post_init__(self):
        for level, coeffs in self.rows.items():
            if len(coeffs) != 3 or min(coeffs) < 0:
                raise DataError(f"level {level}: coefficients must be three nonnegative numbers, got {coeffs}")

    @classmethod
    def from_csv(cls, path: str | Path) -> "PenaltyTable":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != HEADER:
                raise DataError(f"{path}: header must be {','.join(HEADER)}, got {header}")
            rows = {}
            for lineno, rec in enumerate(reader, start=2):
                if not rec:
                    continue
                try:
                    rows[int(rec[0])] = tuple(float(v) for v in rec[1:4])
                except (ValueError, IndexError) as exc:
                    raise DataError(f"{path}:{lineno}: cannot parse {rec}") from exc
        return cls(rows)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HEADER)
            for level in sorted(self.rows):
                w.writerow([level, *(repr(float(v)) for v in self.rows[level])])


def default_penalties() -> PenaltyTable:
    """The bundled five-level table."""
    ref = resources.files("coherent_cast") / "data" / "penalties_m5.csv"
    with resources.as_file(ref) as path:
        return PenaltyTable.from_csv(path)


@dataclass(frozen=True)
class NodePenalties:
    c_u: np.ndarray
    c_o: np.ndarray
    q: np.ndarray


def expand_penalties(t: PenaltyTable, h: Hierarchy) -> NodePenalties:
    """Give every node its level's coefficients."""
    missing = sorted(set(h.levels) - set(t.rows))
    if missing:
        raise MissingLevelRow(f"penalty table has no row for level(s) {missing}")
    coeffs = np.array([t.rows[level] for level in h.levels], dtype=float)
    return NodePenalties(c_u=coeffs[:, 0], c_o=coeffs[:, 1], q=coeffs[:, 2])


def _columns(pen: NodePenalties, shape) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    extra = (1,) * (len(shape) - 1)
    return (pen.c_u.reshape(-1, *extra), pen.c_o.reshape(-1, *extra), pen.q.reshape(-1, *extra))


def task_loss(y, truth, pen: NodePenalties) -> float:
    """Realised cost, summed over nodes and any extra columns."""
    y = np.asarray(y, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if y.shape != truth.shape or y.shape[0] != pen.q.size:
        raise DimensionMismatch(f"decision {y.shape}, truth {truth.shape}, penalties for {pen.q.size} nodes")
    cu, co, qv = _columns(pen, y.shape)
    gap = truth - y
    return float((cu * np.maximum(gap, 0.0) + co * np.maximum(-gap, 0.0) + 0.5 * qv * gap**2).sum())


def task_cost_split(y, truth, pen: NodePenalties, h: Hierarchy) -> dict:
    """Under / over / quadratic parts of the cost per level."""
    y = np.asarray(y, dtype=float)
    truth = np.asarray(truth, dtype=float)
    cu, co, qv = _columns(pen, y.shape)
    gap = truth - y
    parts = {
        "under": cu * np.maximum(gap, 0.0),
        "over": co * np.maximum(-gap, 0.0),
        "quadratic": 0.5 * qv * gap**2,
    }
    return {
        name: [float(arr[list(nodes)].sum()) for nodes in h.level_sets] for name, arr in parts.items()
    }


def task_loss_tensor(y: Tensor, truth: np.ndarray, pen: NodePenalties, copies: int = 1) -> Tensor:
    """Tape version of :func:`task_loss` for ``copies`` stacked hierarchies."""
    y = dc.as_tensor(y)
    truth = np.asarray(truth, dtype=float)
    if y.shape != truth.shape:
        raise DimensionMismatch(f"decision {y.shape} vs truth {truth.shape}")
    cu = np.tile(pen.c_u, copies)[:, None]
    co = np.tile(pen.c_o, copies)[:, None]
    qv = np.tile(pen.q, copies)[:, None]
    gap = dc.Tensor(truth) - y
    under = dc.relu(gap) * cu
    over = dc.relu(-gap) * co
    quad = dc.square(gap) * (0.5 * qv)
    return dc.total(under + over + quad)


# ----------------------------------------------------------- decision QP


@dataclass
class SchedulingProblem:
    h: Hierarchy
    pen: NodePenalties
    forecast: np.ndarray
    rho: float = RHO
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rho <= 0:
            raise DataError(f"slack ridge must be positive, got {self.rho}")
        self.forecast = np.asarray(self.forecast, dtype=float)
        if self.forecast.shape[0] != self.h.n:
            raise DimensionMismatch(f"forecast has {self.forecast.shape[0]} rows, expected {self.h.n}")


def decision_qp(f: np.ndarray, h: Hierarchy, pen: NodePenalties, rho: float = RHO) -> qp.QpProblem:
    """The ``3n``-variable QP over ``[y; y_u; y_o]`` for one forecast vector."""
    n = h.n
    I, Z = np.eye(n), np.zeros((n, n))
    Q = np.diag(np.concatenate([pen.q, np.full(2 * n, rho)]))
    lin = np.concatenate([pen.q * f, -pen.c_u, -pen.c_o])
    A = h.matrices.A
    Aeq = np.hstack([A, np.zeros((A.shape[0], 2 * n))])
    G = np.vstack([
        np.hstack([-I, -I, Z]),
        np.hstack([I, Z, -I]),
        -np.eye(3 * n),
    ])
    rhs = np.concatenate([-f, f, np.zeros(3 * n)])
    return qp.QpProblem(Q, lin, Aeq, np.zeros(A.shape[0]), G, rhs)


def decide_full(sp: SchedulingProblem) -> np.ndarray:
    """Solutions ``[y; y_u; y_o]`` stacked as columns (``3n x steps``)."""
    F = sp.forecast[:, None] if sp.forecast.ndim == 1 else sp.forecast
    sols = qp.solve_many([decision_qp(F[:, k], sp.h, sp.pen, sp.rho) for k in range(F.shape[1])])
    return np.stack([s.z for s in sols], axis=1)


def decide(sp: SchedulingProblem) -> np.ndarray:
    Z = decide_full(sp)[: sp.h.n]
    return Z[:, 0] if sp.forecast.ndim == 1 else Z


def decide_layer(F: Tensor, h: Hierarchy, pen: NodePenalties, copies: int = 1, rho: float = RHO) -> Tensor:
    """Differentiable decisions for ``copies`` stacked forecasts (one QP per
    column per copy)."""
    F = dc.as_tensor(F)
    n = h.n
    if F.shape[0] != copies * n:
        raise DimensionMismatch(f"expected {copies * n} rows, got {F.shape[0]}")
    steps = F.shape[1]
    cols = F.value.reshape(copies, n, steps).transpose(1, 0, 2).reshape(n, copies * steps)
    problems = [decision_qp(cols[:, k], h, pen, rho) for k in range(cols.shape[1])]
    sols = qp.solve_many(problems)
    Y = np.stack([s.z[:n] for s in sols], axis=1)
    out = Y.reshape(n, copies, steps).transpose(1, 0, 2).reshape(copies * n, steps)

    def vjp(g):
        gcols = g.reshape(copies, n, steps).transpose(1, 0, 2).reshape(n, copies * steps)
        full = np.zeros((gcols.shape[1], 3 * n))
        full[:, :n] = gcols.T
        grads = qp.backward_many(problems, sols, full)
        dF = np.stack([pen.q * bw.dq[:n] - bw.dh[:n] + bw.dh[n : 2 * n] for bw in grads], axis=1)
        return (dF.reshape(n, copies, steps).transpose(1, 0, 2).reshape(copies * n, steps),)

    return dc.custom([F], out, vjp)


# -------------------------------------------------- reformulation check


@dataclass
class ReformulationReport:
    max_discrepancy: float
    hinge_values: np.ndarray
    slack_values: np.ndarray

    @property
    def passed(self) -> bool:
        return self.max_discrepancy <= 1e-9


def slack_objective(y, y_u, y_o, truth, pen: NodePenalties, rho: float = 0.0) -> float:
    """Slack-form objective with ``truth`` in place of the forecast, plus the
    constant ``1/2 truth' diag(q) truth`` so it is comparable to the cost."""
    y, y_u, y_o, truth = (np.asarray(v, dtype=float) for v in (y, y_u, y_o, truth))
    val = pen.c_u @ y_u + pen.c_o @ y_o - truth @ (pen.q * y) + 0.5 * y @ (pen.q * y)
    val += 0.5 * rho * (y_u @ y_u + y_o @ y_o)
    return float(val + 0.5 * truth @ (pen.q * truth))


def check_reformulation(truth, pen: NodePenalties, grid) -> ReformulationReport:
    """Compare the hinge cost with the slack form after minimising the slacks
    analytically (``y_u = max(truth - y, 0)``, ``y_o = max(y - truth, 0)``)
    for every decision in ``grid``."""
    truth = np.asarray(truth, dtype=float)
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    if grid.shape[1] != truth.size:
        raise DimensionMismatch(f"grid rows have {grid.shape[1]} entries, truth has {truth.size}")
    hinge = np.array([task_loss(y, truth, pen) for y in grid])
    slack = np.array([
        slack_objective(y, np.maximum(truth - y, 0.0), np.maximum(y - truth, 0.0), truth, pen) for y in grid
    ])
    return ReformulationReport(float(np.abs(hinge - slack).max()), hinge, slack)
