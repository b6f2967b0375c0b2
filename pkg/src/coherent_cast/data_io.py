"""Panels of hierarchical series: CSV I/O, a synthetic generator, and
context/target windowing with train-only normalisation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics
from .errors import DataError, DuplicateRow, GapInSeries, MissingSeries, UnknownSeriesId, WindowTooLong
from .hierarchy import Hierarchy, aggregate_bottom

log = logging.getLogger(__name__)

HEADER = ["series_id", "timestamp", "value"]
COHERENCE_TOL = 1e-9


@dataclass
class SeriesPanel:
    hierarchy: Hierarchy
    values: np.ndarray  # n x T, rows in hierarchy order
    timestamps: list[str]
    freq: str = "step"
    coherence: float | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.hierarchy.n, len(self.timestamps)):
            raise DataError(
                f"values shape {self.values.shape} does not match {self.hierarchy.n} nodes x {len(self.timestamps)} timestamps"
            )

    @property
    def T(self) -> int:
        return self.values.shape[1]


def _sort_key(stamp: str):
    try:
        return (0, float(stamp), stamp)
    except ValueError:
        return (1, 0.0, stamp)


def load_csv(data_path: str | Path, hierarchy: Hierarchy) -> SeriesPanel:
    """Read ``series_id,timestamp,value`` rows into a panel.

    Every node must have a value at every timestamp.  Timestamps sort
    numerically when they all parse as numbers, lexically otherwise (so ISO
    dates work).  Incoherent data is accepted with a warning; the coherence
    gap is stored on the panel.
    """
    cells: dict[tuple[str, str], float] = {}
    stamps: set[str] = set()
    with open(data_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != HEADER:
            raise DataError(f"{data_path}: header must be {','.join(HEADER)}, got {header}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 3:
                raise DataError(f"{data_path}:{lineno}: expected 3 fields, got {len(rec)}")
            sid, stamp, raw = rec
            if sid not in hierarchy._index:
                raise UnknownSeriesId(f"{data_path}:{lineno}: series {sid!r} is not in the hierarchy")
            if (sid, stamp) in cells:
                raise DuplicateRow(f"{data_path}:{lineno}: duplicate row for ({sid}, {stamp})")
            try:
                value = float(raw)
            except ValueError as exc:
                raise DataError(f"{data_path}:{lineno}: value {raw!r} is not a number") from exc
            if not np.isfinite(value):
                raise DataError(f"{data_path}:{lineno}: value {raw!r} is not finite")
            cells[(sid, stamp)] = value
            stamps.add(stamp)

    seen = {sid for sid, _ in cells}
    absent = [lab for lab in hierarchy.labels if lab not in seen]
    if absent:
        raise MissingSeries(f"no rows for series {absent}")
    timestamps = sorted(stamps, key=_sort_key)
    values = np.empty((hierarchy.n, len(timestamps)))
    for i, lab in enumerate(hierarchy.labels):
        for t, stamp in enumerate(timestamps):
            try:
                values[i, t] = cells[(lab, stamp)]
            except KeyError:
                raise GapInSeries(f"series {lab!r} has no value at timestamp {stamp!r}") from None

    coherence = None
    if hierarchy.r > 0:
        terms, _ = metrics.co_mape_terms(values, hierarchy)
        coherence = float(terms.mean()) if terms.size else 0.0
        if coherence > COHERENCE_TOL:
            log.warning("panel is not coherent: co_mape = %.3g", coherence)
    return SeriesPanel(hierarchy, values, timestamps, coherence=coherence)


def save_csv(panel: SeriesPanel, path: str | Path) -> None:
    """Write in the load format; floats use ``repr`` so a reload is exact."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER)
        for i, lab in enumerate(panel.hierarchy.labels):
            for t, stamp in enumerate(panel.timestamps):
                w.writerow([lab, stamp, repr(float(panel.values[i, t]))])


# ------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SynthConfig:
    trend_scale: float = 2.0
    season_period: int = 24
    noise_scale: float = 0.3
    amplitude: float = 1.0
    offset_range: tuple[float, float] = (2.0, 6.0)


def synth_generate(h: Hierarchy, T: int, seed: int, config: SynthConfig | None = None) -> SeriesPanel:
    """Bottom series: offset + trend + sinusoid with a random phase + noise,
    floored at zero; every upper node is the exact sum of its leaves."""
    cfg = config or SynthConfig()
    if T < 2 * cfg.season_period:
        raise DataError(f"length {T} is shorter than two seasons ({2 * cfg.season_period})")
    rng = np.random.default_rng(seed)
    m = h.m
    offset = rng.uniform(*cfg.offset_range, size=m)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=m)
    noise = rng.normal(size=(m, T))
    t = np.arange(T)
    bottom = (
        offset[:, None]
        + cfg.trend_scale * t[None, :] / T
        + cfg.amplitude * np.sin(2.0 * np.pi * t[None, :] / cfg.season_period + phase[:, None])
        + cfg.noise_scale * (noise - noise.mean(axis=1, keepdims=True))
    )
    bottom = np.maximum(bottom, 0.0)
    return SeriesPanel(h, aggregate_bottom(h, bottom), [str(k) for k in range(T)], coherence=0.0)


# ------------------------------------------------------------- windowing


@dataclass(frozen=True)
class Normalizer:
    """Per-node affine scaling fitted on training timestamps."""

    loc: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray) -> "Normalizer":
        loc = values.mean(axis=1)
        scale = values.std(axis=1)
        scale = np.where(scale > 1e-8, scale, 1.0)
        return cls(loc, scale)

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (values - self.loc[:, None]) / self.scale[:, None]

    def invert(self, values: np.ndarray) -> np.ndarray:
        return values * self.scale[:, None] + self.loc[:, None]

    def to_json(self) -> dict:
        return {"loc": self.loc.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "Normalizer":
        return cls(np.asarray(doc["loc"], dtype=float), np.asarray(doc["scale"], dtype=float))


@dataclass(frozen=True)
class WindowBatch:
    """One window: ``context`` (n x C) precedes ``target`` (n x H)."""

    start: int
    context: np.ndarray
    target: np.ndarray
    T: int

    @property
    def C(self) -> int:
        return self.context.shape[1]

    @property
    def H(self) -> int:
        return self.target.shape[1]

    @property
    def target_times(self) -> range:
        return range(self.start + self.C, self.start + self.C + self.H)


@dataclass
class WindowSet:
    train: list[WindowBatch]
    val: list[WindowBatch]
    test: list[WindowBatch]
    normalizer: Normalizer
    bounds: tuple[int, int, int, int]  # 0, train end, val end, T
    extra: dict = field(default_factory=dict)

    def split(self, name: str) -> list[WindowBatch]:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


def split_bounds(T: int, split: Sequence[float]) -> tuple[int, int, int, int]:
    fr = np.asarray(split, dtype=float)
    if fr.size != 3 or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise DataError(f"split fractions must be three nonnegative numbers summing to 1, got {list(split)}")
    t1 = int(round(fr[0] * T))
    t2 = int(round((fr[0] + fr[1]) * T))
    return 0, t1, t2, T


def make_windows(
    panel: SeriesPanel,
    C: int,
    H: int,
    stride: int = 1,
    split: Sequence[float] = (0.7, 0.1, 0.2),
) -> WindowSet:
    """Sliding windows whose targets lie wholly inside one split.

    Splits are contiguous in time (train first).  A context may reach back
    into the previous split; targets never do.
    """
    if C < 1 or H < 1 or stride < 1:
        raise DataError(f"context, horizon and stride must be >= 1, got C={C}, H={H}, stride={stride}")
    bounds = split_bounds(panel.T, split)
    if bounds[1] < C + H:
        raise WindowTooLong(f"context + horizon = {C + H} exceeds the training range of {bounds[1]} steps")
    out = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        first = max(lo - C, 0)
        wins = []
        for s in range(first, hi - C - H + 1, stride):
            if s + C < lo:
                continue
            wins.append(WindowBatch(s, panel.values[:, s : s + C], panel.values[:, s + C : s + C + H], panel.T))
        out.append(wins)
    normalizer = Normalizer.fit(panel.values[:, : bounds[1]])
    return WindowSet(out[0], out[1], out[2], normalizer, bounds)


def covariates(window: WindowBatch, norm: Normalizer) -> list[np.ndarray]:
    """Per-step inputs ``[normalised value, t / T]`` (n x 2 each)."""
    z = norm.apply(window.context)
    n = z.shape[0]
    steps = []
    for k in range(window.C):
        t = (window.start + k) / window.T
        steps.append(np.column_stack([z[:, k], np.full(n, t)]))
    return steps
