"""GAT, GCN and MLP node classifiers on top of :mod:`csagat.tensor`.

Weights are stored input-major (``[d_in, d_out]``) so a layer computes
``h @ W`` on row-feature matrices; this is the transpose of the usual
``W x`` column-vector notation.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .graph import Graph
from .tensor import Tensor


@dataclass(frozen=True)
class AttentionMap:
    """Per-head edge weights, shape ``[heads, E]``, aligned with a graph's edge list."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True)
        if v.ndim == 1:
            v = v[None, :]
        if v.ndim != 2:
            raise ValueError(f"attention values must be [heads, E], got shape {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def heads(self) -> int:
        return self.values.shape[0]

    def row_sums(self, g: Graph) -> np.ndarray:
        """Sum of incoming weights per (head, destination node)."""
        out = np.zeros((self.heads, g.n))
        for h in range(self.heads):
            out[h] = np.bincount(g.dst, weights=self.values[h], minlength=g.n)
        return out

    def validate(self, g: Graph, atol: float = 1e-9) -> None:
        if self.values.shape[1] != g.num_edges:
            raise ValueError(f"attention map covers {self.values.shape[1]} edges, graph has {g.num_edges}")
        if (self.values < 0).any():
            raise ValueError("attention weights must be nonnegative")
        if not np.allclose(self.row_sums(g), 1.0, rtol=0.0, atol=atol):
            raise ValueError("attention weights must sum to 1 over every node's incoming edges")

    def head_mean(self) -> np.ndarray:
        return self.values.mean(axis=0)


@dataclass
class GatLayerParams:
    """One multi-head GAT layer.

    ``W[k]`` is ``[d_in, d_out]`` and ``a[k]`` is ``[2*d_out]`` for head ``k``;
    the first half of ``a`` scores the destination (ego) node, the second
    half the source neighbor.
    """

    W: list[Tensor]
    a: list[Tensor]
    slope: float = 0.2
    head_merge: str = "concat"
    activation: Optional[str] = "elu"

    def __post_init__(self):
        if not self.W or len(self.W) != len(self.a):
            raise ValueError("need one W and one a per head (at least one head)")
        d_in, d_out = self.W[0].shape
        for w, a in zip(self.W, self.a):
            if w.shape != (d_in, d_out) or a.shape != (2 * d_out,):
                raise ValueError("per-head parameter dimensions disagree")
        if self.head_merge not in ("concat", "average"):
            raise ValueError(f"unknown head merge {self.head_merge!r}")

    @property
    def heads(self) -> int:
        return len(self.W)

    @property
    def in_dim(self) -> int:
        return self.W[0].shape[0]

    @property
    def head_dim(self) -> int:
        return self.W[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.head_dim * (self.heads if self.head_merge == "concat" else 1)

    def parameters(self) -> list[Tensor]:
        return [*self.W, *self.a]


@dataclass
class LayerTrace:
    input_features: Tensor
    output_features: Tensor
    attention: Optional[AttentionMap]
    layer_index: int
    # live (differentiable) per-head attention; None for overridden or non-attention layers
    attention_tensors: Optional[list[Tensor]] = field(default=None, repr=False)


def glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_gat_layer(rng, d_in, d_out, heads, head_merge="concat", activation="elu", slope=0.2) -> GatLayerParams:
    W = [glorot(rng, (d_in, d_out), d_in, d_out) for _ in range(heads)]
    a = [glorot(rng, (2 * d_out,), 2 * d_out, 1) for _ in range(heads)]
    return GatLayerParams(W, a, slope=slope, head_merge=head_merge, activation=activation)


def _activate(x: Tensor, kind: Optional[str]) -> Tensor:
    if kind is None:
        return x
    if kind == "elu":
        return T.elu(x)
    if kind == "relu":
        return T.relu(x)
    raise ValueError(f"unknown activation {kind!r}")


def _scores_from_projection(z: Tensor, a: Tensor, g: Graph, slope: float) -> Tensor:
    pair = T.concat_cols([T.gather_rows(z, g.dst), T.gather_rows(z, g.src)])
    raw = T.reshape(T.matmul(pair, T.reshape(a, (a.shape[0], 1))), (g.num_edges,))
    return T.leaky_relu(raw, slope)


def gat_scores(h: Tensor, params: GatLayerParams, g: Graph) -> list[Tensor]:
    """Unnormalized edge scores ``LeakyReLU(a . [W h_dst || W h_src])``, one tensor per head."""
    if h.ndim != 2 or h.shape[0] != g.n or h.shape[1] != params.in_dim:
        raise T.ShapeError(f"layer expects [{g.n}, {params.in_dim}] input, got {h.shape}")
    return [_scores_from_projection(T.matmul(h, w), a, g, params.slope) for w, a in zip(params.W, params.a)]


def gat_layer_forward(
    h: Tensor,
    params: GatLayerParams,
    g: Graph,
    attention_override: Optional[AttentionMap] = None,
    *,
    attn_dropout: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    training: bool = False,
) -> tuple[Tensor, AttentionMap, Optional[list[Tensor]]]:
    """Attention-weighted neighbor aggregation.

    With ``attention_override`` the given weights are used as constants:
    scores are not computed, no gradient reaches the override, and no
    attention dropout is applied.  Returns the layer output, the attention
    map that was used (detached), and the live per-head attention tensors
    (``None`` when overridden).
    """
    if h.ndim != 2 or h.shape[0] != g.n or h.shape[1] != params.in_dim:
        raise T.ShapeError(f"layer expects [{g.n}, {params.in_dim}] input, got {h.shape}")
    if attention_override is not None:
        if attention_override.values.shape[1] != g.num_edges:
            raise ValueError(
                f"override covers {attention_override.values.shape[1]} edges, graph has {g.num_edges}"
            )
        if attention_override.heads not in (1, params.heads):
            raise ValueError(f"override has {attention_override.heads} heads, layer has {params.heads}")

    outs, live = [], []
    for k, (w, a) in enumerate(zip(params.W, params.a)):
        z = T.matmul(h, w)
        if attention_override is None:
            alpha = T.segment_softmax(_scores_from_projection(z, a, g, params.slope), g.dst, g.n)
            live.append(alpha)
            weights = T.dropout(alpha, attn_dropout, rng, training) if training and attn_dropout > 0 else alpha
        else:
            row = attention_override.values[k if attention_override.heads > 1 else 0]
            weights = Tensor(row)
        outs.append(T.segment_weighted_sum(T.gather_rows(z, g.src), weights, g.dst, g.n))

    merged = T.concat_cols(outs) if params.head_merge == "concat" else T.mean_of(outs)
    out = _activate(merged, params.activation)
    if attention_override is None:
        used = AttentionMap(np.stack([t.data for t in live]))
        return out, used, live
    return out, attention_override, None


# --------------------------------------------------------------------------
# models
# --------------------------------------------------------------------------


class GAT:
    """Stack of GAT layers; hidden layers concatenate heads and apply ELU,
    the output layer averages heads and emits logits."""

    kind = "gat"

    def __init__(
        self,
        in_dim: int,
        num_classes: int,
        hidden: int = 8,
        heads: int = 8,
        out_heads: int = 1,
        num_layers: int = 2,
        dropout: float = 0.6,
        attn_dropout: float = 0.6,
        slope: float = 0.2,
        rng: Optional[np.random.Generator] = None,
    ):
        if num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = dict(
            in_dim=in_dim, num_classes=num_classes, hidden=hidden, heads=heads, out_heads=out_heads,
            num_layers=num_layers, dropout=dropout, attn_dropout=attn_dropout, slope=slope,
        )
        self.dropout = dropout
        self.attn_dropout = attn_dropout
        self.layers: list[GatLayerParams] = []
        d = in_dim
        for _ in range(num_layers - 1):
            self.layers.append(init_gat_layer(rng, d, hidden, heads, "concat", "elu", slope))
            d = hidden * heads
        self.layers.append(init_gat_layer(rng, d, num_classes, out_heads, "average", None, slope))

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            out += [(f"layers.{i}.W.{k}", w) for k, w in enumerate(layer.W)]
            out += [(f"layers.{i}.a.{k}", a) for k, a in enumerate(layer.a)]
        return out

    def attention_parameters(self) -> list[Tensor]:
        return [a for layer in self.layers for a in layer.a]

    def forward(self, g, train_mode=False, overrides=None, rng=None):
        overrides = dict(overrides or {})
        bad = [k for k in overrides if not 0 <= k < len(self.layers)]
        if bad:
            raise ValueError(f"override for nonexistent layer(s) {bad}")
        if train_mode and rng is None:
            raise ValueError("train_mode needs an rng for dropout")
        h = Tensor(g.features)
        traces = []
        for i, layer in enumerate(self.layers):
            x_in = h
            h = T.dropout(h, self.dropout, rng, train_mode)
            h, att, live = gat_layer_forward(
                h, layer, g, overrides.get(i), attn_dropout=self.attn_dropout, rng=rng, training=train_mode,
            )
            traces.append(LayerTrace(x_in, h, att, i, live))
        return h, traces


class GCN:
    kind = "gcn"

    def __init__(self, in_dim, num_classes, hidden=64, num_layers=2, dropout=0.5, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = dict(in_dim=in_dim, num_classes=num_classes, hidden=hidden, num_layers=num_layers, dropout=dropout)
        self.dropout = dropout
        dims = [in_dim] + [hidden] * (num_layers - 1) + [num_classes]
        self.weights = [glorot(rng, (a, b), a, b) for a, b in zip(dims[:-1], dims[1:])]
        self.biases = [Tensor(np.zeros(b), requires_grad=True) for b in dims[1:]]

    def named_parameters(self):
        return [(f"weights.{i}", w) for i, w in enumerate(self.weights)] + [
            (f"biases.{i}", b) for i, b in enumerate(self.biases)
        ]

    @staticmethod
    def edge_norm(g: Graph) -> np.ndarray:
        """Symmetric normalization ``1/sqrt(deg(src) deg(dst))`` with self-loops counted."""
        deg = g.in_degree().astype(np.float64)
        return 1.0 / np.sqrt(deg[g.src] * deg[g.dst])

    def forward(self, g, train_mode=False, overrides=None, rng=None):
        if overrides:
            raise ValueError("GCN has no attention to override")
        if train_mode and rng is None:
            raise ValueError("train_mode needs an rng for dropout")
        norm = Tensor(self.edge_norm(g))
        h = Tensor(g.features)
        traces = []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x_in = h
            h = T.dropout(h, self.dropout, rng, train_mode)
            z = T.matmul(h, w)
            h = T.add(T.segment_weighted_sum(T.gather_rows(z, g.src), norm, g.dst, g.n), b)
            if i < last:
                h = T.relu(h)
            traces.append(LayerTrace(x_in, h, None, i))
        return h, traces


class MLP:
    kind = "mlp"

    def __init__(self, in_dim, num_classes, hidden=64, num_layers=2, dropout=0.5, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = dict(in_dim=in_dim, num_classes=num_classes, hidden=hidden, num_layers=num_layers, dropout=dropout)
        self.dropout = dropout
        dims = [in_dim] + [hidden] * (num_layers - 1) + [num_classes]
        self.weights = [glorot(rng, (a, b), a, b) for a, b in zip(dims[:-1], dims[1:])]
        self.biases = [Tensor(np.zeros(b), requires_grad=True) for b in dims[1:]]

    named_parameters = GCN.named_parameters

    def forward(self, g, train_mode=False, overrides=None, rng=None):
        if overrides:
            raise ValueError("MLP has no attention to override")
        if train_mode and rng is None:
            raise ValueError("train_mode needs an rng for dropout")
        h = Tensor(g.features)
        traces = []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x_in = h
            h = T.add(T.matmul(T.dropout(h, self.dropout, rng, train_mode), w), b)
            if i < last:
                h = T.relu(h)
            traces.append(LayerTrace(x_in, h, None, i))
        return h, traces


MODEL_KINDS = {"gat": GAT, "gcn": GCN, "mlp": MLP}


def build_model(kind: str, in_dim: int, num_classes: int, rng=None, **arch):
    try:
        cls = MODEL_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown model kind {kind!r}; choose from {sorted(MODEL_KINDS)}") from None
    return cls(in_dim, num_classes, rng=rng, **arch)


def parameters(model) -> list[Tensor]:
    return [p for _, p in model.named_parameters()]


def model_forward(
    model,
    g: Graph,
    train_mode: bool = False,
    overrides: Optional[Mapping[int, AttentionMap]] = None,
    rng: Optional[np.random.Generator] = None,
) -> tuple[Tensor, list[LayerTrace]]:
    """Logits plus one :class:`LayerTrace` per layer.

    ``overrides`` maps layer index to a counterfactual attention map; only
    attention models accept it.  Dropout is active only with ``train_mode``.
    """
    return model.forward(g, train_mode=train_mode, overrides=overrides, rng=rng)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"CSACKPT1"


def save_checkpoint(model, path) -> None:
    """Write ``magic | u64 header length | JSON header | float64 LE payload``.

    The header lists every parameter's name and shape in payload order;
    each tensor is stored row-major.
    """
    named = model.named_parameters()
    header = {
        "format": "csagat-checkpoint",
        "version": 1,
        "architecture": model.kind,
        "config": model.config,
        "tensors": [{"name": name, "shape": list(t.shape)} for name, t in named],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, t in named:
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a csagat checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    model = build_model(header["architecture"], rng=np.random.default_rng(0), **header["config"])
    payload = np.frombuffer(raw[16 + hlen :], dtype="<f8")
    named = dict(model.named_parameters())
    offset = 0
    for entry in header["tensors"]:
        t = named[entry["name"]]
        size = int(np.prod(entry["shape"], dtype=np.int64))
        if tuple(entry["shape"]) != t.shape:
            raise ValueError(f"{path}: shape mismatch for {entry['name']}")
        t.data = payload[offset : offset + size].astype(np.float64).reshape(t.shape)
        offset += size
    if offset != payload.size:
        raise ValueError(f"{path}: payload has {payload.size} values, header describes {offset}")
    return model
