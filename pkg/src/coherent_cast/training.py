"""Model assembly, training loop, checkpoints, forecasting and ablations.

A forward pass for a batch of windows runs the shared recurrence over every
node of every window (windows are stacked copies of the hierarchy), fuses
features along the tree, produces base forecasts in data units and passes
them through the configured head:

    none    base forecasts unchanged
    bu      bottom-level forecasts aggregated upward
    proj    orthogonal projection onto the coherent subspace
    opt     banded QP reconciliation (differentiable)
    decide  coherent scheduling decisions (differentiable)
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data_io, fusion, metrics, task_opt
from . import diffcore as dc
from .data_io import Normalizer, WindowBatch, WindowSet
from .diffcore import Param, Tensor
from .errors import ConfigError, NonFiniteLoss, QpError, ShapeMismatch
from .hierarchy import Hierarchy, NodeSpec, build
from .reconcile import ReconcileConfig, opt_reconcile_layer
from .temporal import extract_features, init_gru

log = logging.getLogger(__name__)

HEADS = ("none", "bu", "proj", "opt", "decide")
LOSSES = ("mae", "mse", "task")
MAX_SKIP_FRACTION = 0.01
HISTORY_HEADER = ["epoch", "train_loss", "val_loss", "mape", "w_mape", "co_mape"]
D_X = 2


@dataclass
class ModelConfig:
    seed: int | None = None
    d_h: int = 16
    gru_layers: int = 1
    attention_scope: str = "children"
    kernel_mode: str = "channel"
    context: int = 24
    horizon: int = 8
    head: str = "proj"
    loss: str = "mae"
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 1
    stride: int = 1
    use_tdconv: bool = True
    use_buattn: bool = True
    head_hidden: int = 0
    split: list = field(default_factory=lambda: [0.7, 0.1, 0.2])
    reconcile: dict = field(default_factory=dict)
    penalties: str | None = None

    def validate(self) -> "ModelConfig":
        if self.seed is None:
            raise ConfigError("seed: a seed is required")
        if self.head not in HEADS:
            raise ConfigError(f"head: must be one of {HEADS}, got {self.head!r}")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss: must be one of {LOSSES}, got {self.loss!r}")
        if self.loss == "task" and self.head != "decide":
            raise ConfigError(f"loss/head: loss 'task' requires head 'decide', got head {self.head!r}")
        if self.attention_scope not in ("children", "level"):
            raise ConfigError(f"attention_scope: must be 'children' or 'level', got {self.attention_scope!r}")
        if self.kernel_mode not in ("channel", "scalar"):
            raise ConfigError(f"kernel_mode: must be 'channel' or 'scalar', got {self.kernel_mode!r}")
        for name in ("d_h", "gru_layers", "context", "horizon", "batch_size", "stride"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name}: must be >= 1, got {getattr(self, name)}")
        if self.epochs < 0 or self.lr < 0 or self.head_hidden < 0:
            raise ConfigError("epochs, lr and head_hidden must be nonnegative")
        self.reconcile_config()
        return self

    def reconcile_config(self) -> ReconcileConfig:
        try:
            return ReconcileConfig(method="opt_qp", **self.reconcile)
        except TypeError as exc:
            raise ConfigError(f"reconcile: {exc}") from exc

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown config field")
        return cls(**doc).validate()


def _line_of(text: str, key: str) -> int | None:
    needle = f'"{key}"'
    for lineno, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return lineno
    return None


def load_config(path: str | Path, **overrides) -> ModelConfig:
    """Read a JSON config; validation messages carry the offending line."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}:1: config must be a JSON object")
    doc.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ModelConfig.from_dict(doc)
    except (ConfigError, TypeError) as exc:
        msg = str(exc)
        key = msg.split(":", 1)[0].split("/")[0]
        lineno = _line_of(text, key)
        where = f"{path}:{lineno}" if lineno else str(path)
        raise ConfigError(f"{where}: {msg}") from exc


# ------------------------------------------------------------------ model


class Forecaster:
    """All parameters plus the forward pass.  Parameters are drawn in a fixed
    order from one seeded generator: recurrence, convolution, attention,
    gate, head; disabled stages draw nothing."""

    def __init__(self, cfg: ModelConfig, h: Hierarchy, normalizer: Normalizer):
        self.cfg = cfg
        self.h = h
        self.normalizer = normalizer
        rng = np.random.default_rng(cfg.seed)
        self.gru = init_gru(D_X, cfg.d_h, cfg.gru_layers, rng)
        self.conv = fusion.init_conv(h.n_levels, cfg.d_h, rng, cfg.kernel_mode) if cfg.use_tdconv else None
        self.attn = fusion.init_attn(cfg.d_h, rng) if cfg.use_buattn else None
        self.gate = fusion.init_mlp([cfg.d_h, cfg.d_h], rng, "gate") if (cfg.use_tdconv or cfg.use_buattn) else None
        sizes = [cfg.d_h, cfg.head_hidden, cfg.horizon] if cfg.head_hidden else [cfg.d_h, cfg.horizon]
        self.head = fusion.init_mlp(sizes, rng, "head")
        self.band = cfg.reconcile_config()
        self.penalties = None
        if cfg.head == "decide" or cfg.loss == "task":
            table = task_opt.PenaltyTable.from_csv(cfg.penalties) if cfg.penalties else task_opt.default_penalties()
            self.penalties = task_opt.expand_penalties(table, h)
        self._index: dict[int, fusion.TreeIndex] = {}
        self._ops: dict[tuple[str, int], np.ndarray] = {}

    def params(self) -> list[Param]:
        out = list(self.gru.params())
        if self.conv is not None:
            out += self.conv.params()
        if self.attn is not None:
            out += self.attn.params()
        if self.gate is not None:
            out += self.gate.params()
        return out + self.head.params()

    def load_state(self, values: dict[str, np.ndarray]) -> None:
        for p in self.params():
            if p.name not in values:
                raise ShapeMismatch(f"checkpoint has no parameter {p.name}")
            if values[p.name].shape != p.value.shape:
                raise ShapeMismatch(f"{p.name}: checkpoint shape {values[p.name].shape}, model {p.value.shape}")
            p.value[...] = values[p.name]

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.params()}

    def index(self, copies: int) -> fusion.TreeIndex:
        if copies not in self._index:
            self._index[copies] = fusion.TreeIndex.build(self.h, copies)
        return self._index[copies]

    def _operator(self, kind: str, copies: int) -> np.ndarray:
        key = (kind, copies)
        if key not in self._ops:
            mats = self.h.matrices
            if kind == "bu":
                one = np.zeros((self.h.n, self.h.n))
                one[:, self.h.r :] = mats.S
            else:
                one = mats.M
            self._ops[key] = np.kron(np.eye(copies), one)
        return self._ops[key]

    def inputs(self, windows: Sequence[WindowBatch]) -> list[np.ndarray]:
        per_window = [data_io.covariates(w, self.normalizer) for w in windows]
        return [np.vstack([steps[k] for steps in per_window]) for k in range(len(per_window[0]))]

    def forward(self, windows: Sequence[WindowBatch]) -> tuple[Tensor, Tensor]:
        """Base forecasts and head output, both ``(B n) x H`` in data units."""
        for w in windows:
            if w.context.shape[0] != self.h.n or w.C != self.cfg.context:
                raise ShapeMismatch(f"window context {w.context.shape} does not match n={self.h.n}, C={self.cfg.context}")
        copies = len(windows)
        states = extract_features(self.inputs(windows), self.gru)
        bank = fusion.fuse(states[-1], self.index(copies), self.conv, self.attn, self.gate, self.cfg.attention_scope)
        loc = np.tile(self.normalizer.loc, copies)
        scale = np.tile(self.normalizer.scale, copies)
        base = fusion.base_forecast(bank.H, self.head, self.cfg.horizon, loc=loc, scale=scale)
        return base, self.apply_head(base, copies)

    def apply_head(self, base: Tensor, copies: int) -> Tensor:
        head = self.cfg.head
        if head == "none":
            return base
        if head in ("bu", "proj"):
            return dc.matmul(dc.Tensor(self._operator(head, copies)), base)
        if head == "opt":
            return opt_reconcile_layer(base, self.h, self.band, copies=copies, eps_scale=self.normalizer.scale)
        return task_opt.decide_layer(base, self.h, self.penalties, copies=copies)

    def loss(self, final: Tensor, windows: Sequence[WindowBatch]) -> Tensor:
        target = np.vstack([w.target for w in windows])
        copies = len(windows)
        if self.cfg.loss == "task":
            cost = task_opt.task_loss_tensor(final, target, self.penalties, copies=copies)
            return dc.scale(cost, 1.0 / (copies * self.cfg.horizon))
        inv = 1.0 / np.tile(self.normalizer.scale, copies)[:, None]
        err = (final - dc.Tensor(target)) * inv
        return dc.mean(dc.absolute(err) if self.cfg.loss == "mae" else dc.square(err))


# ------------------------------------------------------------ checkpoints


@dataclass
class Checkpoint:
    config: ModelConfig
    hierarchy: Hierarchy
    normalizer: Normalizer
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def model(self) -> Forecaster:
        m = Forecaster(self.config, self.hierarchy, self.normalizer)
        m.load_state(self.params)
        return m

    def save(self, path: str | Path) -> None:
        meta = {
            "config": self.config.to_json(),
            "hierarchy": [{"id": s.id, "parent": s.parent} for s in self.hierarchy.node_specs()],
            "normalizer": self.normalizer.to_json(),
            **self.meta,
        }
        m = self.model()
        dc.save_params(path, m.params(), meta)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        values, meta = dc.load_params(path)
        meta = dict(meta)
        cfg = ModelConfig.from_dict(meta.pop("config"))
        h = build([NodeSpec(d["id"], d["parent"]) for d in meta.pop("hierarchy")])
        norm = Normalizer.from_json(meta.pop("normalizer"))
        return cls(cfg, h, norm, values, meta)


# ---------------------------------------------------------------- training


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    mape: list[float] = field(default_factory=list)
    w_mape: list[float] = field(default_factory=list)
    co_mape: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    skipped: int = 0
    best_epoch: int = 0

    def rows(self) -> list[list]:
        return [
            [k + 1, self.train_loss[k], self.val_loss[k], self.mape[k], self.w_mape[k], self.co_mape[k]]
            for k in range(len(self.train_loss))
        ]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_HEADER)
            for row in self.rows():
                w.writerow([row[0], *(repr(float(v)) for v in row[1:])])


def _batches(items: list, size: int) -> list[list]:
    return [items[k : k + size] for k in range(0, len(items), size)]


@dataclass
class Prediction:
    base: np.ndarray  # windows x n x H
    final: np.ndarray
    target: np.ndarray

    def pooled(self, which: str) -> np.ndarray:
        arr = getattr(self, which)
        return arr.transpose(1, 0, 2).reshape(arr.shape[1], -1)


def predict(model: Forecaster, windows: Sequence[WindowBatch], chunk: int = 64) -> Prediction:
    """Forward pass without a tape, chunked over windows."""
    n, H = model.h.n, model.cfg.horizon
    base, final = [], []
    for part in _batches(list(windows), chunk):
        b, f = model.forward(part)
        base.append(b.value.reshape(len(part), n, H))
        final.append(f.value.reshape(len(part), n, H))
    target = np.stack([w.target for w in windows])
    return Prediction(np.concatenate(base), np.concatenate(final), target)


def _loss_value(model: Forecaster, pred: Prediction) -> float:
    if model.cfg.loss == "task":
        cost = task_opt.task_loss(pred.pooled("final"), pred.pooled("target"), model.penalties)
        return cost / (pred.final.shape[0] * model.cfg.horizon)
    err = (pred.final - pred.target) / model.normalizer.scale[None, :, None]
    return float(np.abs(err).mean() if model.cfg.loss == "mae" else (err**2).mean())


def _scores(model: Forecaster, pred: Prediction) -> tuple[float, float, float]:
    truth, final = pred.pooled("target"), pred.pooled("final")
    co = metrics.co_mape(final, model.h) if model.h.r else 0.0
    return metrics.mape(truth, final), metrics.w_mape(truth, final), co


def train(cfg: ModelConfig, data: WindowSet, h: Hierarchy) -> tuple[Checkpoint, TrainHistory]:
    """Adam on the configured loss; returns the best-validation checkpoint.

    Batches that hit a QP failure are skipped and counted; the run fails if
    more than 1% of batches were skipped.
    """
    cfg.validate()
    if not data.train:
        raise ShapeMismatch("no training windows")
    model = Forecaster(cfg, h, data.normalizer)
    params = model.params()
    state = dc.AdamState.zeros_like(params)
    order_rng = np.random.default_rng([cfg.seed, 1])
    hist = TrainHistory()
    best, best_val = model.state(), np.inf
    val_windows = data.val or data.train
    per_epoch = -(-len(data.train) // cfg.batch_size)
    allowed = MAX_SKIP_FRACTION * per_epoch * cfg.epochs

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        perm = order_rng.permutation(len(data.train))
        losses = []
        for batch_idx in _batches(list(perm), cfg.batch_size):
            batch = [data.train[k] for k in batch_idx]
            try:
                with dc.Tape() as tape:
                    _, final = model.forward(batch)
                    loss = model.loss(final, batch)
                    tape.backward(loss)
            except NonFiniteLoss as exc:
                raise NonFiniteLoss(f"epoch {epoch + 1}: {exc}; lower the learning rate or check the data") from exc
            except QpError as exc:
                hist.skipped += 1
                log.warning("epoch %d: skipped batch after QP failure: %s", epoch + 1, exc)
                if hist.skipped > allowed:
                    raise QpError(f"{hist.skipped} batches skipped after QP failures (limit {allowed:g})") from exc
                continue
            dc.adam_step(params, [p.grad for p in params], state, cfg.lr)
            losses.append(loss.item())

        pred = predict(model, val_windows)
        val = _loss_value(model, pred)
        mape, w_mape, co = _scores(model, pred)
        hist.train_loss.append(float(np.mean(losses)) if losses else float("nan"))
        hist.val_loss.append(val)
        hist.mape.append(mape)
        hist.w_mape.append(w_mape)
        hist.co_mape.append(co)
        hist.seconds.append(time.perf_counter() - t0)
        if val < best_val:
            best_val, best = val, model.state()
            hist.best_epoch = epoch + 1
    if cfg.epochs == 0:
        best = model.state()
    ckpt = Checkpoint(cfg, h, data.normalizer, best, {"best_epoch": hist.best_epoch})
    return ckpt, hist


def forecast(ckpt: Checkpoint, window: WindowBatch) -> dict[str, np.ndarray]:
    """``{"base": n x H, "final": n x H}`` in data units."""
    if window.context.shape[0] != ckpt.hierarchy.n:
        raise ShapeMismatch(f"window has {window.context.shape[0]} rows, checkpoint hierarchy has {ckpt.hierarchy.n}")
    model = ckpt.model()
    base, final = model.forward([window])
    return {"base": base.value, "final": final.value}


def evaluate(ckpt: Checkpoint, windows: Sequence[WindowBatch]) -> metrics.EvalReport:
    model = ckpt.model()
    pred = predict(model, windows)
    report = metrics.evaluate(pred.pooled("target"), pred.pooled("final"), model.h)
    report.extra["base_co_mape"] = metrics.co_mape(pred.pooled("base"), model.h) if model.h.r else None
    report.extra["windows"] = len(windows)
    return report


# ---------------------------------------------------------------- ablation

VARIANTS = {
    "base_only": (False, False),
    "+tdconv": (True, False),
    "+buattn": (False, True),
    "full": (True, True),
}


def ablate(
    cfg: ModelConfig,
    data: WindowSet,
    h: Hierarchy,
    variants: Sequence[str] = tuple(VARIANTS),
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
) -> dict:
    """Train each variant on the same windows for every seed and score the
    test split: mape of the head output, co_mape of the base forecasts."""
    report: dict = {"seeds": list(seeds), "variants": {}}
    for name in variants:
        tdconv, buattn = VARIANTS[name]
        rows = {"mape": [], "co_mape": []}
        for seed in seeds:
            vcfg = ModelConfig(**{**cfg.to_json(), "seed": seed, "use_tdconv": tdconv, "use_buattn": buattn})
            ckpt, _ = train(vcfg, data, h)
            pred = predict(ckpt.model(), data.test)
            rows["mape"].append(metrics.mape(pred.pooled("target"), pred.pooled("final")))
            rows["co_mape"].append(metrics.co_mape(pred.pooled("base"), h))
        rows["mean_mape"] = float(np.mean(rows["mape"]))
        rows["mean_co_mape"] = float(np.mean(rows["co_mape"]))
        report["variants"][name] = rows
    return report
