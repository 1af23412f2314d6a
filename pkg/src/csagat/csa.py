"""Counterfactual attention, per-layer causal effects and the CSA loss.

The causal effect of attention at a layer is the difference between a
linear probe's logits on the layer's factual output and on the output
obtained from the same input when the attention is replaced by a
counterfactual map.  Training the probe and the network so that this
difference classifies the nodes correctly pushes the learned attention
away from the counterfactual baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .graph import Graph
from .models import AttentionMap, GatLayerParams, gat_layer_forward, glorot, model_forward
from .tensor import Tensor

SCHEME_KINDS = ("dummy", "uniform", "identity", "historical")


@dataclass(frozen=True)
class CounterfactualScheme:
    kind: str
    lo: float = 0.0
    hi: float = 1.0
    fallback: bool = True

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise ValueError(f"unknown counterfactual kind {self.kind!r}; choose from {SCHEME_KINDS}")
        if self.kind == "uniform" and not self.lo < self.hi:
            raise ValueError("uniform counterfactual needs lo < hi")
        if self.kind == "uniform" and self.lo < 0:
            raise ValueError("uniform counterfactual needs lo >= 0")

    @classmethod
    def dummy(cls):
        return cls("dummy")

    @classmethod
    def uniform(cls, lo=0.0, hi=1.0):
        return cls("uniform", lo, hi)

    @classmethod
    def identity(cls):
        return cls("identity")

    @classmethod
    def historical(cls, fallback=True):
        return cls("historical", fallback=fallback)


@dataclass
class LayerProbe:
    """Linear read-out ``[c, d]`` from a layer's features to class logits."""

    W_probe: Tensor
    layer_index: int

    @classmethod
    def create(cls, d: int, num_classes: int, layer_index: int, rng: np.random.Generator) -> "LayerProbe":
        return cls(glorot(rng, (num_classes, d), d, num_classes), layer_index)

    @property
    def num_classes(self) -> int:
        return self.W_probe.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.W_probe.shape[1]:
            raise T.ShapeError(f"probe expects [n, {self.W_probe.shape[1]}] features, got {x.shape}")
        return T.matmul(x, T.transpose(self.W_probe))


@dataclass
class HistoricalBuffer:
    """Detached factual attention of the previous training iteration, per layer."""

    maps: dict[int, AttentionMap] = field(default_factory=dict)

    def get(self, layer: int) -> Optional[AttentionMap]:
        return self.maps.get(layer)

    def update(self, layer: int, attention: AttentionMap) -> None:
        self.maps[layer] = AttentionMap(attention.values)


def dummy_attention(g: Graph, heads: int = 1) -> AttentionMap:
    row = 1.0 / g.in_degree()[g.dst]
    return AttentionMap(np.tile(row, (heads, 1)))


def identity_attention(g: Graph, heads: int = 1) -> AttentionMap:
    row = (g.src == g.dst).astype(np.float64)
    return AttentionMap(np.tile(row, (heads, 1)))


def _normalize_segments(values: np.ndarray, g: Graph) -> np.ndarray:
    out = np.empty_like(values)
    for h in range(values.shape[0]):
        denom = np.bincount(g.dst, weights=values[h], minlength=g.n)
        out[h] = values[h] / denom[g.dst]
    return out


def make_counterfactual(
    scheme: CounterfactualScheme,
    g: Graph,
    layer: int,
    factual: AttentionMap,
    hist: Optional[HistoricalBuffer] = None,
    rng: Optional[np.random.Generator] = None,
) -> AttentionMap:
    if factual.values.shape[1] != g.num_edges:
        raise ValueError(f"factual map covers {factual.values.shape[1]} edges, graph has {g.num_edges}")
    heads = factual.heads
    if scheme.kind == "dummy":
        return dummy_attention(g, heads)
    if scheme.kind == "identity":
        return identity_attention(g, heads)
    if scheme.kind == "uniform":
        if rng is None:
            raise ValueError("uniform counterfactual needs an rng")
        draws = rng.uniform(scheme.lo, scheme.hi, size=(heads, g.num_edges))
        # all-zero segments are only possible when lo == 0; fall back to uniform weights there
        denom = np.stack([np.bincount(g.dst, weights=d, minlength=g.n) for d in draws])
        for h in range(heads):
            empty = denom[h][g.dst] <= 0
            draws[h, empty] = 1.0
        return AttentionMap(_normalize_segments(draws, g))
    stored = hist.get(layer) if hist is not None else None
    if stored is None:
        if not scheme.fallback:
            raise ValueError(f"no historical attention stored for layer {layer}")
        return dummy_attention(g, heads)
    return stored


def layer_effect(
    trace_input: Tensor,
    layer_params: GatLayerParams,
    g: Graph,
    counterfactual: AttentionMap,
    probe: LayerProbe,
) -> tuple[Tensor, Tensor, Tensor]:
    """Probe logits under factual and counterfactual attention, and their difference.

    Both branches run the layer without dropout on the same factual input.
    Gradients reach ``W`` and the probe through both branches and the
    attention vector ``a`` through the factual branch only.
    """
    if probe.W_probe.shape[1] != layer_params.out_dim:
        raise T.ShapeError(
            f"probe reads {probe.W_probe.shape[1]} features, layer {probe.layer_index} emits {layer_params.out_dim}"
        )
    x_fact, _, _ = gat_layer_forward(trace_input, layer_params, g)
    x_cf, _, _ = gat_layer_forward(trace_input, layer_params, g, attention_override=counterfactual)
    y_fact = probe(x_fact)
    y_cf = probe(x_cf)
    return T.sub(y_fact, y_cf), y_fact, y_cf


def csa_loss(
    effects: Sequence[tuple[int, Tensor]],
    labels: np.ndarray,
    mask: np.ndarray,
    lambdas: Mapping[int, float] | Sequence[float] | float,
) -> Tensor:
    """``sum_l lambda_l * CE(effect_l, labels)`` over the masked nodes."""
    if not effects:
        raise ValueError("csa_loss needs at least one layer effect")
    if isinstance(lambdas, (int, float)):
        lam = {layer: float(lambdas) for layer, _ in effects}
    elif isinstance(lambdas, Mapping):
        lam = {int(k): float(v) for k, v in lambdas.items()}
    else:
        if len(lambdas) != len(effects):
            raise ValueError(f"{len(lambdas)} lambdas for {len(effects)} supervised layers")
        lam = {layer: float(v) for (layer, _), v in zip(effects, lambdas)}
    total = None
    for layer, eff in effects:
        if layer not in lam:
            raise ValueError(f"no lambda for supervised layer {layer}")
        if lam[layer] < 0:
            raise ValueError(f"lambda must be >= 0, got {lam[layer]} for layer {layer}")
        term = T.scale(T.cross_entropy(eff, labels, mask), lam[layer])
        total = term if total is None else T.add(total, term)
    return total


def ablation_last(
    model,
    g: Graph,
    scheme: CounterfactualScheme,
    layers: Sequence[int] = (0,),
    hist: Optional[HistoricalBuffer] = None,
    rng: Optional[np.random.Generator] = None,
) -> tuple[Tensor, list]:
    """Final-logit difference between a factual and an intervened forward pass.

    The intervention replaces attention at ``layers`` and propagates
    through the remaining layers; neither pass uses dropout.  Returns the
    effect logits and the factual traces.
    """
    logits, traces = model_forward(model, g, train_mode=False)
    overrides = {
        layer: make_counterfactual(scheme, g, layer, traces[layer].attention, hist, rng) for layer in layers
    }
    cf_logits, _ = model_forward(model, g, train_mode=False, overrides=overrides)
    return T.sub(logits, cf_logits), traces


def pure_overrides(model, g: Graph) -> dict[int, AttentionMap]:
    return {i: dummy_attention(g, layer.heads) for i, layer in enumerate(model.layers)}


def ablation_pure(model, g: Graph, train_mode: bool = False, rng=None):
    """Forward pass with every attention layer fixed to uniform neighbor weights."""
    if not hasattr(model, "layers"):
        raise ValueError("pure ablation needs an attention model")
    return model_forward(model, g, train_mode=train_mode, overrides=pure_overrides(model, g), rng=rng)
