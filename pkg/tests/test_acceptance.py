"""Acceptance criteria 1-10.  Each test prints one PASS/FAIL line; run with
``pytest -s tests/test_acceptance.py`` to see them."""

import json
import time
from importlib import resources

import numpy as np
import pytest

from coherent_cast import cli, data_io, hierarchy, metrics, qp, reconcile, task_opt, training, verification
from coherent_cast.training import ModelConfig

DATA = resources.files("coherent_cast") / "data"
SEEDS = [0, 1, 2, 3, 4]


def report(number: int, passed: bool, summary: str, seconds: float) -> None:
    print(f"\n[criterion {number:2d}] {'PASS' if passed else 'FAIL'}  {summary}  ({seconds:.1f} s)")


def inf(x) -> float:
    return float(np.max(np.abs(x))) if np.size(x) else 0.0


@pytest.fixture(scope="module")
def trees():
    return verification.tree_set(50, seed=0)


def test_criterion_01_matrix_identities(trees):
    t0 = time.perf_counter()
    worst = {"A S": 0.0, "M M - M": 0.0, "A M": 0.0, "M' - M": 0.0}
    for h in trees:
        S, A, M = h.matrices.S, h.matrices.A, h.matrices.M
        worst["A S"] = max(worst["A S"], inf(A @ S))
        worst["M M - M"] = max(worst["M M - M"], inf(M @ M - M))
        worst["A M"] = max(worst["A M"], inf(A @ M))
        worst["M' - M"] = max(worst["M' - M"], inf(M.T - M))
    shapes = [h.level_counts() for h in trees]
    seconds = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-10 and [1, 2, 5] in shapes and [1, 8, 16, 32] in shapes and seconds < 10
    report(1, ok, f"{len(trees)} trees, n <= {max(h.n for h in trees)}, worst {max(worst.values()):.1e}", seconds)
    assert [1, 2, 5] in shapes and [1, 8, 16, 32] in shapes
    assert max(h.n for h in trees) <= 57
    for name, value in worst.items():
        assert value <= 1e-10, name
    assert seconds < 10


def test_criterion_02_projection_mint_equivalence(trees):
    t0 = time.perf_counter()
    worst = max(inf(h.matrices.S @ reconcile.mint_operator(h, np.eye(h.n)) - h.matrices.M) for h in trees)
    three = verification.three_node()
    got = reconcile.project(np.array([10.0, 4.0, 5.0]), three.matrices.M)
    err = inf(got - np.array([29.0, 13.0, 16.0]) / 3)
    seconds = time.perf_counter() - t0
    ok = worst <= 1e-8 and err <= 1e-9 and seconds < 10
    report(2, ok, f"S P(W=I) - M worst {worst:.1e}; project([10,4,5]) error {err:.1e}", seconds)
    assert worst <= 1e-8
    assert err <= 1e-9
    assert seconds < 10


def test_criterion_03_qp_vs_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    primal = comp = 0.0
    for _ in range(200):
        p = verification.random_feasible_qp(rng, d_max=8, g_max=8)
        sol = qp.solve(p)
        ref = qp.brute_force_oracle(p)
        primal = max(primal, inf(sol.z - ref.z))
        if p.G is not None and len(p.h):
            comp = max(comp, inf(sol.lam * (p.h - p.G @ sol.z)))
    seconds = time.perf_counter() - t0
    ok = primal <= 1e-6 and comp <= 1e-7 and seconds < 60
    report(3, ok, f"200 QPs: primal gap {primal:.1e}, complementarity {comp:.1e}", seconds)
    assert primal <= 1e-6
    assert comp <= 1e-7
    assert seconds < 60


def test_criterion_04_qp_backward_vs_fd():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(50):
        p = verification.planted_qp(rng, d=int(rng.integers(3, 8)), e=int(rng.integers(0, 2)), g=int(rng.integers(2, 7)))
        c = rng.normal(size=p.q.size)
        dq = qp.backward(p, qp.solve(p), c).dq
        fd = verification.fd_dq(p, c)
        worst = max(worst, inf(dq - fd) / max(inf(fd), 1e-12))
    seconds = time.perf_counter() - t0
    ok = worst <= 1e-4 and seconds < 60
    report(4, ok, f"50 planted QPs: dL/dq relative error {worst:.1e}", seconds)
    assert worst <= 1e-4
    assert seconds < 60


def test_criterion_05_layer_gradients():
    t0 = time.perf_counter()
    checks = verification.suite_grads()
    seconds = time.perf_counter() - t0
    names = " ".join(c.name for c in checks)
    for part in ("GRU cell", "top-down conv", "bottom-up attention", "residual gate", "base head", "full model"):
        assert part in names, part
    bad = [c.name for c in checks if not c.passed]
    worst = max(c.observed / c.tol for c in checks)
    report(5, not bad and seconds < 120, f"{len(checks)} gradient checks, worst error/tol {worst:.2f}", seconds)
    print(verification.format_table(checks))
    assert not bad, bad
    assert seconds < 120


def test_criterion_06_coherence(trees):
    t0 = time.perf_counter()
    worst: dict[str, float] = {}
    rng = np.random.default_rng(6)
    for h in trees:
        Y = verification.near_coherent(h, rng)
        for name, y in verification.head_outputs(h, Y, rng).items():
            worst[name] = max(worst.get(name, 0.0), metrics.co_mape(y, h))

    # trained-model outputs: the base forecasts of a short run through every method,
    # and the head output of a model trained with each reconciling head
    h = hierarchy.fig1()
    panel = data_io.synth_generate(h, 120, 0, data_io.SynthConfig(season_period=12))
    small = dict(d_h=4, context=6, horizon=2, epochs=2, batch_size=8, lr=3e-3, stride=3)
    ws = data_io.make_windows(panel, 6, 2, stride=3)
    ckpt, _ = training.train(ModelConfig(seed=0, head="none", **small), ws, h)
    pred = training.predict(ckpt.model(), ws.test)
    for base in pred.base:
        for name, y in verification.head_outputs(h, base, rng).items():
            key = f"trained base -> {name}"
            worst[key] = max(worst.get(key, 0.0), metrics.co_mape(y, h))
    for head, loss in (("bu", "mae"), ("proj", "mae"), ("opt", "mae"), ("decide", "task")):
        ckpt, _ = training.train(ModelConfig(seed=0, head=head, loss=loss, **small), ws, h)
        final = training.predict(ckpt.model(), ws.test).final
        worst[f"trained {head} head"] = max(metrics.co_mape(y, h) for y in final)
    seconds = time.perf_counter() - t0

    for method in ("bu", "proj", "mint-ols", "mint-shr", "opt", "decide"):
        assert method in worst and f"trained base -> {method}" in worst
    top = max(worst.values())
    ok = top <= 1e-7 and seconds < 30
    report(6, ok, f"{len(worst)} method/source pairs, worst co_mape {top:.1e}", seconds)
    for name, value in worst.items():
        assert value <= 1e-7, name
    assert seconds < 30


def test_criterion_07_reformulation():
    t0 = time.perf_counter()
    table = task_opt.default_penalties()
    assert table.rows[1] == (2.0, 50.0, 0.5)
    checks = verification.reformulation_checks()
    lone = hierarchy.from_parent_map([("root", None)])
    worked = task_opt.task_loss(np.array([8.0]), np.array([10.0]), task_opt.expand_penalties(table, lone))
    seconds = time.perf_counter() - t0
    worst = max(c.observed for c in checks)
    ok = worst <= 1e-9 and abs(worked - 5.0) <= 1e-9 and seconds < 5
    report(7, ok, f"slack form vs hinge worst {worst:.1e}; worked cost {worked:.6f}", seconds)
    for c in checks:
        assert c.passed, c.name
    assert abs(worked - 5.0) <= 1e-9
    assert seconds < 5


@pytest.mark.slow
def test_criterion_08_ablation_direction():
    t0 = time.perf_counter()
    h = hierarchy.fig1()
    ws = data_io.make_windows(data_io.synth_generate(h, 400, 0), 24, 8, 1)
    cfg = ModelConfig(seed=0, head="none", epochs=30, batch_size=8, lr=3e-3)
    rep = training.ablate(cfg, ws, h, ["base_only", "+buattn", "full"], SEEDS)["variants"]
    seconds = time.perf_counter() - t0
    base, attn, full = rep["base_only"], rep["+buattn"], rep["full"]
    wins = sum(a <= b for a, b in zip(attn["co_mape"], base["co_mape"]))
    ok = full["mean_mape"] <= base["mean_mape"] and wins >= 3 and seconds < 900
    report(
        8,
        ok,
        f"mean mape full {full['mean_mape']:.4f} vs base_only {base['mean_mape']:.4f}; "
        f"+buattn co_mape <= base_only on {wins}/5 seeds",
        seconds,
    )
    for name, row in rep.items():
        print(f"  {name:10s} mape {np.round(row['mape'], 4).tolist()}  co_mape {np.round(row['co_mape'], 4).tolist()}")
    assert full["mean_mape"] <= base["mean_mape"]
    assert wins >= 3
    assert seconds < 900


def scheduling_run(h, ws, pen, head: str, loss: str, seed: int) -> tuple[float, float]:
    cfg = ModelConfig(seed=seed, head=head, loss=loss, context=14, horizon=7, epochs=20, batch_size=8, lr=3e-3)
    ckpt, _ = training.train(cfg, ws, h)
    pred = training.predict(ckpt.model(), ws.test)
    cost = sum(task_opt.task_loss(y, t, pen) for y, t in zip(pred.final, pred.target))
    per_step = cost / (len(ws.test) * cfg.horizon)
    return per_step, metrics.mape(pred.pooled("target"), pred.pooled("final"))


@pytest.mark.slow
def test_criterion_09_task_direction():
    t0 = time.perf_counter()
    h = hierarchy.load_json(DATA / "sched5.json")
    panel = data_io.synth_generate(h, 400, 0, data_io.SynthConfig(season_period=7))
    ws = data_io.make_windows(panel, 14, 7, 1)
    pen = task_opt.expand_penalties(task_opt.default_penalties(), h)
    rows = {"bu + mae": [], "decide + task": []}
    for seed in SEEDS:
        rows["bu + mae"].append(scheduling_run(h, ws, pen, "bu", "mae", seed))
        rows["decide + task"].append(scheduling_run(h, ws, pen, "decide", "task", seed))
    seconds = time.perf_counter() - t0
    mean = {k: np.mean(v, axis=0) for k, v in rows.items()}
    ok = mean["decide + task"][0] <= mean["bu + mae"][0] and seconds < 900
    report(
        9,
        ok,
        f"mean task cost/step decide {mean['decide + task'][0]:.3f} vs bu {mean['bu + mae'][0]:.3f}; "
        f"mape decide {mean['decide + task'][1]:.4f} vs bu {mean['bu + mae'][1]:.4f}",
        seconds,
    )
    for name, vals in rows.items():
        print(f"  {name:14s} cost {[round(c, 3) for c, _ in vals]}  mape {[round(m, 4) for _, m in vals]}")
    assert mean["decide + task"][0] <= mean["bu + mae"][0]
    assert seconds < 900


def test_criterion_10_determinism(tmp_path):
    t0 = time.perf_counter()
    fig1 = str(DATA / "fig1.json")
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 5, "d_h": 4, "context": 6, "horizon": 2, "epochs": 2, "batch_size": 8, "lr": 3e-3, "stride": 3, "head": "opt"}))
    same = []
    manifests = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        assert cli.main(["generate", "--hierarchy", fig1, "--out", str(d / "p.csv"), "--length", "120", "--season", "12", "--seed", "3"]) == 0
        assert cli.main(["train", "--config", str(cfg), "--data", str(d / "p.csv"), "--hierarchy", fig1, "--out", str(d / "run")]) == 0
        docs = [json.loads((d / name).read_text()) for name in ("p.csv.manifest.json", "run/manifest.json")]
        manifests.append(docs)
    for name in ("p.csv", "run/checkpoint.json", "run/history.csv"):
        same.append((tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes())
    for a, b in zip(*manifests):
        assert a["artifact_sha256"] == b["artifact_sha256"]
        assert a["seed"] == b["seed"] and a["command"] == b["command"]
    seconds = time.perf_counter() - t0
    report(10, all(same), "generate and train reruns byte-identical" if all(same) else "outputs differ", seconds)
    assert all(same)
