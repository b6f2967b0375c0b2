"""Self-checks behind ``coherent-cast verify``.

Each suite returns a list of :class:`Check` rows (name, tolerance, observed
worst value).  Suites are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import data_io, fusion, hierarchy, qp, reconcile, task_opt, temporal, training
from . import diffcore as dc
from .diffcore import Param
from .hierarchy import Hierarchy
from .metrics import co_mape

LABOUR_COUNTS = (1, 8, 16, 32)


@dataclass
class Check:
    name: str
    tol: float
    observed: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.observed)) and self.observed <= self.tol


def tree_set(n_trees: int = 50, seed: int = 0) -> list[Hierarchy]:
    """The example tree, a 57-node four-level tree, and random trees."""
    rng = np.random.default_rng(seed)
    trees = [hierarchy.fig1(), hierarchy.from_level_counts(LABOUR_COUNTS)]
    while len(trees) < n_trees:
        trees.append(hierarchy.random_tree(rng, max_nodes=57))
    return trees


def three_node() -> Hierarchy:
    return hierarchy.from_parent_map([("T", None), ("A", "T"), ("B", "T")])


def _inf(x) -> float:
    return float(np.abs(x).max()) if np.size(x) else 0.0


# ---------------------------------------------------------------- matrices


def suite_matrices(n_trees: int = 50, seed: int = 0) -> list[Check]:
    trees = tree_set(n_trees, seed)
    worst = {"A S = 0": 0.0, "M M = M": 0.0, "A M = 0": 0.0, "M' = M": 0.0, "S P(W=I) = M": 0.0}
    for h in trees:
        mat = h.matrices
        worst["A S = 0"] = max(worst["A S = 0"], _inf(mat.A @ mat.S))
        worst["M M = M"] = max(worst["M M = M"], _inf(mat.M @ mat.M - mat.M))
        worst["A M = 0"] = max(worst["A M = 0"], _inf(mat.A @ mat.M))
        worst["M' = M"] = max(worst["M' = M"], _inf(mat.M.T - mat.M))
        P = reconcile.mint_operator(h, np.eye(h.n))
        worst["S P(W=I) = M"] = max(worst["S P(W=I) = M"], _inf(mat.S @ P - mat.M))
    checks = [Check(k, 1e-10 if k != "S P(W=I) = M" else 1e-8, v, f"{len(trees)} trees") for k, v in worst.items()]
    h3 = three_node()
    got = reconcile.project(np.array([10.0, 4.0, 5.0]), h3.matrices.M)
    checks.append(Check("project([10,4,5]) = [29,13,16]/3", 1e-9, _inf(got - np.array([29.0, 13.0, 16.0]) / 3)))
    checks.extend(coherence_checks(trees, seed))
    return checks


def near_coherent(h: Hierarchy, rng: np.random.Generator, steps: int = 3, noise: float = 0.05) -> np.ndarray:
    base = hierarchy.aggregate_bottom(h, rng.uniform(1.0, 10.0, size=(h.m, steps)))
    return base * (1.0 + noise * rng.normal(size=base.shape))


def head_outputs(h: Hierarchy, Y: np.ndarray, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Every reconciliation method and the decision QP applied to ``Y``."""
    residuals = rng.normal(size=(max(2 * h.n, 10), h.n))
    out = {}
    for cli_name, method in reconcile.CLI_METHODS.items():
        out[cli_name] = reconcile.reconcile(Y, h, reconcile.ReconcileConfig(method), residuals=residuals)
    table = task_opt.PenaltyTable({lv: (1.0 + lv, 10.0, 0.5 * lv) for lv in range(1, h.n_levels + 1)})
    pen = task_opt.expand_penalties(table, h)
    out["decide"] = task_opt.decide(task_opt.SchedulingProblem(h, pen, Y))
    return out


def coherence_checks(trees, seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed + 1)
    worst: dict[str, float] = {}
    for h in trees:
        if h.r == 0:
            continue
        for name, Z in head_outputs(h, near_coherent(h, rng), rng).items():
            worst[name] = max(worst.get(name, 0.0), co_mape(Z, h))
    return [Check(f"co_mape[{name}]", 1e-7, v, "random base forecasts") for name, v in worst.items()]


# ---------------------------------------------------------------------- qp


def random_feasible_qp(rng: np.random.Generator, d_max: int = 8, g_max: int = 8) -> qp.QpProblem:
    d = int(rng.integers(1, d_max + 1))
    g = int(rng.integers(0, g_max + 1))
    e = int(rng.integers(0, min(d - 1, 3) + 1))
    L = rng.normal(size=(d, d))
    Q = L @ L.T + 1e-3 * np.eye(d)
    z0 = rng.normal(size=d)
    A = rng.normal(size=(e, d))
    G = rng.normal(size=(g, d))
    h = G @ z0 + rng.uniform(0.0, 1.0, size=g) * (rng.random(g) < 0.6)
    return qp.QpProblem(Q, rng.normal(size=d) * 3, A, A @ z0, G, h)


def planted_qp(rng: np.random.Generator, d: int = 5, e: int = 1, g: int = 4, margin: float = 0.1) -> qp.QpProblem:
    """QP with a known optimum where each inequality is clearly active
    (multiplier >= margin) or clearly inactive (slack >= margin)."""
    L = rng.normal(size=(d, d))
    Q = L @ L.T + 0.5 * np.eye(d)
    z = rng.normal(size=d)
    A = rng.normal(size=(e, d))
    G = rng.normal(size=(g, d))
    # fewer active rows than free directions, so dz/dq is not identically zero
    n_active = int(rng.integers(0, min(g, d - e - 1) + 1))
    active = np.zeros(g, dtype=bool)
    active[rng.choice(g, size=n_active, replace=False)] = True
    lam = np.where(active, rng.uniform(margin, 2.0, size=g), 0.0)
    h = G @ z + np.where(active, 0.0, rng.uniform(margin, 2.0, size=g))
    nu = rng.normal(size=e)
    q = Q @ z + A.T @ nu + G.T @ lam
    return qp.QpProblem(Q, q, A, A @ z, G, h)


def fd_dq(problem: qp.QpProblem, c: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    out = np.zeros(problem.d)
    for i in range(problem.d):
        e = np.zeros(problem.d)
        e[i] = eps
        up = qp.solve(qp.QpProblem(problem.Q, problem.q + e, problem.Aeq, problem.beq, problem.G, problem.h)).z
        dn = qp.solve(qp.QpProblem(problem.Q, problem.q - e, problem.Aeq, problem.beq, problem.G, problem.h)).z
        out[i] = c @ (up - dn) / (2 * eps)
    return out


def suite_qp(seed: int = 0, n_oracle: int = 200, n_backward: int = 50) -> list[Check]:
    rng = np.random.default_rng(seed)
    primal, comp = 0.0, 0.0
    for _ in range(n_oracle):
        p = random_feasible_qp(rng)
        sol = qp.solve(p)
        ref = qp.brute_force_oracle(p)
        primal = max(primal, _inf(sol.z - ref.z))
        comp = max(comp, sol.residuals["complementarity"])
    checks = [
        Check("QP primal vs enumeration", 1e-6, primal, f"{n_oracle} problems"),
        Check("QP complementarity", 1e-7, comp, f"{n_oracle} problems"),
    ]
    worst = 0.0
    for _ in range(n_backward):
        p = planted_qp(rng)
        sol = qp.solve(p)
        c = rng.normal(size=p.d)
        analytic = qp.backward(p, sol, c).dq
        numeric = fd_dq(p, c)
        worst = max(worst, _inf(analytic - numeric) / max(_inf(numeric), 1e-12))
    checks.append(Check("dL/dq vs finite differences", 1e-4, worst, f"{n_backward} problems"))
    checks.extend(reformulation_checks(seed))
    return checks


def reformulation_checks(seed: int = 0) -> list[Check]:
    table = task_opt.default_penalties()
    root = hierarchy.from_parent_map([("T", None)])
    pen1 = task_opt.expand_penalties(table, root)
    worked = task_opt.check_reformulation([10.0], pen1, [[8.0]])
    rng = np.random.default_rng(seed + 2)
    h3 = three_node()
    pen3 = task_opt.expand_penalties(table, h3)
    truth = rng.uniform(0.0, 20.0, size=3)
    grid = task_opt.check_reformulation(truth, pen3, rng.uniform(0.0, 25.0, size=(100, 3)))
    return [
        Check("slack form = hinge cost (grid)", 1e-9, grid.max_discrepancy, "100 decisions"),
        Check("worked cost (truth 10, decision 8)", 1e-9, abs(worked.hinge_values[0] - 5.0) + worked.max_discrepancy),
    ]


# ------------------------------------------------------------------- grads


def _check(name: str, f: Callable, params, tol: float) -> Check:
    report = dc.grad_check(f, params, eps=1e-6, tol=tol)
    return Check(f"grad {name}", tol, report.max_rel_err)


def tiny_windows(h: Hierarchy, C: int = 6, H: int = 2, copies: int = 2, seed: int = 0):
    panel = data_io.synth_generate(h, 60, seed, data_io.SynthConfig(season_period=12))
    ws = data_io.make_windows(panel, C, H, stride=5)
    return ws, ws.train[:copies]


def suite_grads(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    h = hierarchy.fig1()
    d_h = 4
    checks = []

    gru = temporal.init_gru(2, d_h, 1, rng)
    x = rng.normal(size=(h.n, 2))
    h0 = Param(rng.normal(size=(h.n, d_h)) * 0.5, name="h0")
    w_out = rng.normal(size=(h.n, d_h))
    checks.append(_check("GRU cell", lambda: dc.total(temporal.gru_cell(x, h0, gru.layers[0]) * w_out), gru.params() + [h0], 1e-4))

    index = fusion.TreeIndex.build(h, copies=2)
    Hbar = Param(rng.normal(size=(2 * h.n, d_h)), name="Hbar")
    Hhat = Param(rng.normal(size=(2 * h.n, d_h)), name="Hhat")
    conv = fusion.init_conv(h.n_levels, d_h, rng)
    for b in conv.biases:
        b.value[...] = rng.uniform(0.2, 0.5, size=b.shape)
    wc = rng.normal(size=(2 * h.n, d_h))
    checks.append(_check("top-down conv", lambda: dc.total(fusion.td_conv(Hbar, index, conv) * wc), conv.params() + [Hbar], 1e-4))

    attn = fusion.init_attn(d_h, rng)
    for scope in ("children", "level"):
        checks.append(
            _check(
                f"bottom-up attention ({scope})",
                lambda scope=scope: dc.total(fusion.bu_attention(Hbar, Hhat, index, attn, scope) * wc),
                attn.params() + [Hbar, Hhat],
                1e-4,
            )
        )
    gate = fusion.init_mlp([d_h, d_h], rng, "gate")
    Ht = Param(rng.normal(size=(2 * h.n, d_h)), name="Htilde")
    checks.append(_check("residual gate", lambda: dc.total(fusion.residual_gate(Ht, Hbar, gate)[1] * wc), gate.params() + [Ht, Hbar], 1e-4))
    head = fusion.init_mlp([d_h, 2], rng, "head")
    wh = rng.normal(size=(2 * h.n, 2))
    checks.append(_check("base head", lambda: dc.total(fusion.base_forecast(Hbar, head, 2, loc=1.0, scale=2.0) * wh), head.params() + [Hbar], 1e-4))

    for head_name, loss, tol in (("none", "mse", 1e-4), ("proj", "mse", 1e-4), ("opt", "mse", 1e-3), ("decide", "task", 1e-3)):
        checks.append(full_model_check(h, head_name, loss, tol, seed))
    return checks


def full_model_check(h: Hierarchy, head: str, loss: str, tol: float, seed: int = 0) -> Check:
    cfg = training.ModelConfig(seed=seed, d_h=4, context=6, horizon=2, head=head, loss=loss, epochs=0)
    ws, windows = tiny_windows(h, cfg.context, cfg.horizon)
    model = training.Forecaster(cfg, h, ws.normalizer)

    def f():
        _, final = model.forward(windows)
        return model.loss(final, windows)

    return _check(f"full model ({head} head, {loss} loss)", f, model.params(), tol)


SUITES = {"matrices": suite_matrices, "qp": suite_qp, "grads": suite_grads}


def run(suite: str) -> list[Check]:
    names = list(SUITES) if suite == "all" else [suite]
    out = []
    for name in names:
        out.extend(SUITES[name]())
    return out


def format_table(checks: list[Check]) -> str:
    width = max(len(c.name) for c in checks)
    lines = [f"{'check'.ljust(width)}  {'tolerance':>10}  {'observed':>10}  result"]
    for c in checks:
        lines.append(f"{c.name.ljust(width)}  {c.tol:10.1e}  {c.observed:10.2e}  {'pass' if c.passed else 'FAIL'}")
    return "\n".join(lines)
