"""Per-node temporal features from a gated recurrent cell shared by all nodes.

Nodes are rows: a window for ``n`` nodes is a list of ``n x d_x`` covariate
matrices, one per step, and every node runs the same recurrence on its own
row.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Param, Tensor
from .errors import DimensionMismatch, EmptyWindow


@dataclass
class GruLayer:
    W_z: Param
    W_r: Param
    W_c: Param
    U_z: Param
    U_r: Param
    U_c: Param
    b_z: Param
    b_r: Param
    b_c: Param

    @property
    def d_in(self) -> int:
        return self.W_z.shape[0]

    @property
    def d_h(self) -> int:
        return self.W_z.shape[1]

    def params(self) -> list[Param]:
        return [self.W_z, self.W_r, self.W_c, self.U_z, self.U_r, self.U_c, self.b_z, self.b_r, self.b_c]


@dataclass
class GruParams:
    layers: list[GruLayer]

    @property
    def d_h(self) -> int:
        return self.layers[-1].d_h

    @property
    def d_x(self) -> int:
        return self.layers[0].d_in

    def params(self) -> list[Param]:
        return [p for layer in self.layers for p in layer.params()]


def init_gru(d_x: int, d_h: int, n_layers: int, rng: np.random.Generator, prefix: str = "gru") -> GruParams:
    """Uniform fan-in initialisation, drawn in a fixed order."""
    layers = []
    for k in range(n_layers):
        d_in = d_x if k == 0 else d_h
        bound = 1.0 / np.sqrt(d_h)
        tag = f"{prefix}.{k}"

        def draw(shape, name):
            return Param(rng.uniform(-bound, bound, size=shape), name=f"{tag}.{name}")

        layers.append(
            GruLayer(
                W_z=draw((d_in, d_h), "W_z"),
                W_r=draw((d_in, d_h), "W_r"),
                W_c=draw((d_in, d_h), "W_c"),
                U_z=draw((d_h, d_h), "U_z"),
                U_r=draw((d_h, d_h), "U_r"),
                U_c=draw((d_h, d_h), "U_c"),
                b_z=Param(np.zeros((1, d_h)), name=f"{tag}.b_z"),
                b_r=Param(np.zeros((1, d_h)), name=f"{tag}.b_r"),
                b_c=Param(np.zeros((1, d_h)), name=f"{tag}.b_c"),
            )
        )
    return GruParams(layers)


def gru_cell(x, h, p: GruLayer) -> Tensor:
    """One step; ``x`` is rows x d_in, ``h`` rows x d_h.

    z = sigmoid(x W_z + h U_z + b_z), r = sigmoid(x W_r + h U_r + b_r),
    c = tanh(x W_c + (r * h) U_c + b_c), h' = (1 - z) * h + z * c.
    """
    x, h = dc.as_tensor(x), dc.as_tensor(h)
    if x.shape[1] != p.d_in or h.shape[1] != p.d_h or x.shape[0] != h.shape[0]:
        raise DimensionMismatch(f"gru_cell: x{x.shape} h{h.shape} for layer {p.d_in}->{p.d_h}")
    z = dc.sigmoid(dc.affine(x, p.W_z, p.b_z) + h @ p.U_z)
    r = dc.sigmoid(dc.affine(x, p.W_r, p.b_r) + h @ p.U_r)
    cand = dc.tanh(dc.affine(x, p.W_c, p.b_c) + (r * h) @ p.U_c)
    return (1.0 - z) * h + z * cand


def extract_features(window: Sequence, p: GruParams) -> list[Tensor]:
    """Run the shared recurrence over a window of per-step covariate matrices.

    Returns the last layer's hidden matrix (nodes x d_h) after every step;
    the initial state is zero.
    """
    if len(window) == 0:
        raise EmptyWindow("window must contain at least one step")
    n_rows = dc.as_tensor(window[0]).shape[0]
    states: list = [Tensor(np.zeros((n_rows, layer.d_h))) for layer in p.layers]
    out = []
    for x_t in window:
        inp = x_t
        for k, layer in enumerate(p.layers):
            states[k] = gru_cell(inp, states[k], layer)
            inp = states[k]
        out.append(states[-1])
    return out
