"""Measure how much a layer's attention matters to a linear read-out.

The causal effect at a layer is the probe's logits on the factual layer
output minus its logits when attention is replaced by a counterfactual
map.  Identical maps give zero effect; uniform and ego-only maps do not.

    python3 demos/02_counterfactual_effect.py
"""

import numpy as np

from csagat.csa import CounterfactualScheme, HistoricalBuffer, LayerProbe, layer_effect, make_counterfactual
from csagat.graph import synthetic_planted
from csagat.models import GAT, model_forward

g, _ = synthetic_planted(blocks=3, nodes_per_block=10, seed=0)
model = GAT(g.feature_dim, g.class_count, rng=np.random.default_rng(0))
_, traces = model_forward(model, g)
layer0 = traces[0]
probe = LayerProbe.create(model.layers[0].out_dim, g.class_count, 0, np.random.default_rng(1))

hist = HistoricalBuffer()
hist.update(0, layer0.attention)
schemes = {
    "uniform weights": CounterfactualScheme.dummy(),
    "random weights": CounterfactualScheme.uniform(),
    "self only": CounterfactualScheme.identity(),
    "previous map": CounterfactualScheme.historical(),
}
for name, scheme in schemes.items():
    cf = make_counterfactual(scheme, g, 0, layer0.attention, hist, np.random.default_rng(2))
    eff, _, _ = layer_effect(layer0.input_features, model.layers[0], g, cf, probe)
    print(f"{name:>16}: mean |effect| = {np.abs(eff.data).mean():.4f}")
