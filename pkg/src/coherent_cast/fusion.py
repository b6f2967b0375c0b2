"""Tree-structured feature fusion.

* top-down convolution: each node mixes the features on its root path with
  a per-level kernel, then ReLU;
* bottom-up attention: level by level from the leaves upward, parents
  attend over child value rows (queries from parents' raw features, keys
  from childrens' raw features);
* residual gate between the attention output and the raw features;
* shared MLP head producing every horizon step at once.

Feature banks are tensors with one row per node.  A :class:`TreeIndex`
can describe several stacked copies of the hierarchy (a forest), which is
how a batch of windows is processed in one pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Param, Tensor
from .errors import DimensionMismatch, MissingLevelParams
from .hierarchy import Hierarchy

AttentionScope = Literal["children", "level"]
KernelMode = Literal["channel", "scalar"]


@dataclass(frozen=True)
class TreeIndex:
    """Row bookkeeping for ``copies`` stacked copies of a hierarchy.

    Row ``c * n + i`` holds node ``i`` of copy ``c``.  ``level_rows[l]``
    lists the rows of level ``l + 1``; ``anc[l]`` has one root-first
    ancestor path per such row.
    """

    hierarchy: Hierarchy
    copies: int
    level_rows: tuple[np.ndarray, ...]
    anc: tuple[np.ndarray, ...]
    restore: np.ndarray
    pairs: dict = field(repr=False)

    @property
    def n_rows(self) -> int:
        return self.copies * self.hierarchy.n

    @classmethod
    def build(cls, h: Hierarchy, copies: int = 1) -> "TreeIndex":
        n = h.n
        level_rows, anc = [], []
        for lv, nodes in enumerate(h.level_sets, start=1):
            rows = np.array([c * n + i for c in range(copies) for i in nodes], dtype=np.intp)
            paths = np.array(
                [[c * n + a for a in reversed(h.ancestors[i])] for c in range(copies) for i in nodes],
                dtype=np.intp,
            ).reshape(len(rows), lv)
            level_rows.append(rows)
            anc.append(paths)
        order = np.concatenate(level_rows)
        restore = np.argsort(order, kind="stable")

        pairs: dict = {"children": [], "level": []}
        for lv in range(h.n_levels - 1):
            parent_pos = {int(r): k for k, r in enumerate(level_rows[lv])}
            child_rows = level_rows[lv + 1]
            pp = np.array([parent_pos[(r // n) * n + h.parents[r % n]] for r in child_rows], dtype=np.intp)
            pc = np.arange(len(child_rows), dtype=np.intp)
            pairs["children"].append((pp, pc))
            lp, lc = [], []
            for k, r in enumerate(level_rows[lv]):
                for j, cr in enumerate(child_rows):
                    if cr // n == r // n:
                        lp.append(k)
                        lc.append(j)
            pairs["level"].append((np.array(lp, dtype=np.intp), np.array(lc, dtype=np.intp)))
        for arr in (*level_rows, *anc, restore):
            arr.setflags(write=False)
        return cls(h, copies, tuple(level_rows), tuple(anc), restore, pairs)


# ------------------------------------------------------------------ params


@dataclass
class Mlp:
    layers: list[tuple[Param, Param]]

    def params(self) -> list[Param]:
        return [p for pair in self.layers for p in pair]

    def __call__(self, x) -> Tensor:
        out = x
        for k, (W, b) in enumerate(self.layers):
            out = dc.affine(out, W, b)
            if k < len(self.layers) - 1:
                out = dc.relu(out)
        return out


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, prefix: str) -> Mlp:
    layers = []
    for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(a)
        layers.append(
            (
                Param(rng.uniform(-bound, bound, size=(a, b)), name=f"{prefix}.{k}.W"),
                Param(np.zeros((1, b)), name=f"{prefix}.{k}.b"),
            )
        )
    return Mlp(layers)


@dataclass
class ConvParams:
    """``weights[l]`` has one row per ancestor position of level ``l + 1``:
    row ``k - 1`` multiplies the ancestor ``k - 1`` steps above the node."""

    weights: list[Param]
    biases: list[Param]

    def params(self) -> list[Param]:
        return [*self.weights, *self.biases]


def init_conv(n_levels: int, d_h: int, rng: np.random.Generator, mode: KernelMode = "channel") -> ConvParams:
    weights, biases = [], []
    for lv in range(1, n_levels + 1):
        width = d_h if mode == "channel" else 1
        w = rng.uniform(-1.0, 1.0, size=(lv, width)) / np.sqrt(lv)
        w[0] += 1.0
        weights.append(Param(w, name=f"conv.{lv}.w"))
        biases.append(Param(np.zeros((1, d_h)), name=f"conv.{lv}.b"))
    return ConvParams(weights, biases)


@dataclass
class AttnParams:
    W_q: Param
    b_q: Param
    W_k: Param
    b_k: Param

    def params(self) -> list[Param]:
        return [self.W_q, self.b_q, self.W_k, self.b_k]

    @property
    def d_h(self) -> int:
        return self.W_q.shape[1]


def init_attn(d_h: int, rng: np.random.Generator) -> AttnParams:
    bound = 1.0 / np.sqrt(d_h)

    def draw(name):
        return Param(rng.uniform(-bound, bound, size=(d_h, d_h)), name=name)

    return AttnParams(
        W_q=draw("attn.W_q"),
        b_q=Param(np.zeros((1, d_h)), name="attn.b_q"),
        W_k=draw("attn.W_k"),
        b_k=Param(np.zeros((1, d_h)), name="attn.b_k"),
    )


@dataclass
class FusedBank:
    H_hat: Tensor
    H_tilde: Tensor
    z: Tensor | None
    H: Tensor


# ------------------------------------------------------------- top-down conv


def reorganize(Hbar, h: Hierarchy) -> list[Tensor]:
    """Per node, the root-first stack of ancestor feature rows (level x d_h)."""
    Hbar = dc.as_tensor(Hbar)
    if Hbar.shape[0] != h.n:
        raise DimensionMismatch(f"feature bank has {Hbar.shape[0]} rows, hierarchy has {h.n} nodes")
    return [dc.gather_rows(Hbar, list(reversed(h.ancestors[i]))) for i in range(h.n)]


def _conv_level(Hbar: Tensor, anc: np.ndarray, w: Param, b: Param) -> Tensor:
    # gathered[k, p] is the feature p steps above row k (p = 0 is the node itself)
    idx = anc[:, ::-1]
    gathered = Hbar.value[idx]
    wv = w.value
    pre = np.einsum("kpd,pd->kd", gathered, np.broadcast_to(wv, (wv.shape[0], gathered.shape[2]))) + b.value
    n_rows = Hbar.shape[0]

    def vjp(g):
        gw_full = np.einsum("kpd,kd->pd", gathered, g)
        gw = gw_full if wv.shape[1] == gw_full.shape[1] else gw_full.sum(axis=1, keepdims=True)
        contrib = g[:, None, :] * wv[None, :, :]
        gH = np.zeros((n_rows, g.shape[1]))
        np.add.at(gH, idx.reshape(-1), contrib.reshape(-1, g.shape[1]))
        return gH, gw, g.sum(axis=0, keepdims=True)

    return dc.custom((Hbar, w, b), pre, vjp)


def td_conv(Hbar, index: TreeIndex, p: ConvParams) -> Tensor:
    """Top-down convolution over every node's root path, followed by ReLU."""
    Hbar = dc.as_tensor(Hbar)
    if Hbar.shape[0] != index.n_rows:
        raise DimensionMismatch(f"feature bank has {Hbar.shape[0]} rows, index expects {index.n_rows}")
    if len(p.weights) < index.hierarchy.n_levels:
        raise MissingLevelParams(f"conv params cover {len(p.weights)} levels, need {index.hierarchy.n_levels}")
    blocks = []
    for lv, anc in enumerate(index.anc):
        w = p.weights[lv]
        if w.shape[0] != lv + 1:
            raise MissingLevelParams(f"conv weight for level {lv + 1} has {w.shape[0]} positions")
        blocks.append(dc.relu(_conv_level(Hbar, anc, w, p.biases[lv])))
    return dc.gather_rows(dc.concat_rows(blocks), index.restore)


def td_conv_stacks(stacks: Sequence, levels: Sequence[int], p: ConvParams) -> Tensor:
    """Reference form working on explicit ancestor stacks (one node at a time)."""
    rows = []
    for stack, lv in zip(stacks, levels):
        if lv > len(p.weights):
            raise MissingLevelParams(f"no conv params for level {lv}")
        stack = dc.as_tensor(stack)
        w, b = p.weights[lv - 1], p.biases[lv - 1]
        acc = b
        for k in range(1, lv + 1):
            row = dc.gather_rows(stack, [lv - k])
            wk = dc.gather_rows(w, [k - 1])
            acc = acc + row * wk
        rows.append(dc.relu(acc))
    return dc.concat_rows(rows)


# ---------------------------------------------------------- bottom-up attention


@dataclass
class AttentionTrace:
    """Attention weights per parent level (top level first), for inspection."""

    weights: list[np.ndarray] = field(default_factory=list)
    pairs: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)


def bu_attention(
    Hbar,
    Hhat,
    index: TreeIndex,
    p: AttnParams,
    scope: AttentionScope = "children",
    trace: AttentionTrace | None = None,
) -> Tensor:
    """Bottom-up attention; returns the attention features for every row.

    Leaves keep their top-down features.  For each parent level, from the
    second-to-last upward, a parent's feature is the softmax-weighted sum
    of the value rows one level below, and that level's values are then
    reset to ``h_tilde - h_hat + h_bar``.
    """
    Hbar, Hhat = dc.as_tensor(Hbar), dc.as_tensor(Hhat)
    if Hbar.shape != Hhat.shape or Hbar.shape[0] != index.n_rows:
        raise DimensionMismatch(f"bu_attention: H_bar{Hbar.shape} H_hat{Hhat.shape} rows {index.n_rows}")
    if scope not in ("children", "level"):
        raise ValueError(f"unknown attention scope {scope!r}")
    n_levels = index.hierarchy.n_levels
    inv_sqrt = 1.0 / np.sqrt(Hbar.shape[1])

    bar = [dc.gather_rows(Hbar, rows) for rows in index.level_rows]
    hat = [dc.gather_rows(Hhat, rows) for rows in index.level_rows]
    tilde: list = [None] * n_levels
    tilde[-1] = hat[-1]
    values = hat[-1]
    for lv in range(n_levels - 2, -1, -1):
        pp, pc = index.pairs[scope][lv]
        queries = dc.affine(bar[lv], p.W_q, p.b_q)
        keys = dc.affine(bar[lv + 1], p.W_k, p.b_k)
        scores = dc.scale(dc.sum_rows(dc.gather_rows(queries, pp) * dc.gather_rows(keys, pc)), inv_sqrt)
        n_par = len(index.level_rows[lv])
        alpha = dc.segment_softmax(scores, pp, n_par)
        tilde[lv] = dc.segment_sum(dc.gather_rows(values, pc) * alpha, pp, n_par)
        values = tilde[lv] - hat[lv] + bar[lv]
        if trace is not None:
            trace.weights.insert(0, alpha.value[:, 0].copy())
            trace.pairs.insert(0, (pp, pc))
    return dc.gather_rows(dc.concat_rows(tilde), index.restore)


# -------------------------------------------------------- gate and forecaster


def residual_gate(Htilde, Hbar, gate: Mlp) -> tuple[Tensor, Tensor]:
    """z = sigmoid(MLP(h_tilde)); h = (1 - z) * h_tilde + z * h_bar."""
    Htilde, Hbar = dc.as_tensor(Htilde), dc.as_tensor(Hbar)
    if Htilde.shape != Hbar.shape:
        raise DimensionMismatch(f"residual_gate: {Htilde.shape} vs {Hbar.shape}")
    z = dc.sigmoid(gate(Htilde))
    if z.shape != Htilde.shape:
        raise DimensionMismatch(f"gate output {z.shape} does not match features {Htilde.shape}")
    return z, (1.0 - z) * Htilde + z * Hbar


def base_forecast(H, head: Mlp, horizon: int, loc=None, scale=None) -> Tensor:
    """Shared head: one row of ``horizon`` forecasts per node.

    With ``loc``/``scale`` (one entry per row) the normalised output is
    mapped back to data units.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    out = head(H)
    if out.shape[1] != horizon:
        raise DimensionMismatch(f"head produces {out.shape[1]} steps, horizon is {horizon}")
    if scale is not None:
        out = out * np.asarray(scale, dtype=float).reshape(-1, 1)
    if loc is not None:
        out = out + np.asarray(loc, dtype=float).reshape(-1, 1)
    return out


def fuse(
    Hbar,
    index: TreeIndex,
    conv: ConvParams | None,
    attn: AttnParams | None,
    gate: Mlp | None,
    scope: AttentionScope = "children",
) -> FusedBank:
    """Run the enabled fusion stages.

    Without convolution the top-down features are the raw features; without
    attention the attention features are the top-down ones.  With neither,
    the gate is skipped and the raw features go straight to the head.
    """
    Hbar = dc.as_tensor(Hbar)
    Hhat = td_conv(Hbar, index, conv) if conv is not None else Hbar
    Htilde = bu_attention(Hbar, Hhat, index, attn, scope) if attn is not None else Hhat
    if conv is None and attn is None:
        return FusedBank(Hhat, Htilde, None, Hbar)
    z, H = residual_gate(Htilde, Hbar, gate)
    return FusedBank(Hhat, Htilde, z, H)
