"""Check tape gradients of a small GAT against central differences.

Builds a 2-layer GAT on a random 8-node graph, adds a layer-0 causal
supervision term, and compares every parameter gradient with a
finite-difference estimate.

    python3 demos/01_gradient_check.py
"""

import numpy as np

from csagat import tensor as T
from csagat.csa import CounterfactualScheme, LayerProbe, csa_loss, layer_effect, make_counterfactual
from csagat.graph import Graph
from csagat.models import GAT, model_forward, parameters

rng = np.random.default_rng(0)
n = 8
pairs = [(i, (i + 1) % n) for i in range(n)] + [(0, 4), (2, 6)]
g = Graph.from_edges(rng.normal(size=(n, 5)), rng.integers(0, 3, n), pairs, class_count=3)
model = GAT(5, 3, hidden=3, heads=2, rng=rng)
probe = LayerProbe.create(model.layers[0].out_dim, 3, 0, rng)
train_idx = np.arange(6)

with T.no_grad():
    _, traces = model_forward(model, g)
cf = make_counterfactual(CounterfactualScheme.identity(), g, 0, traces[0].attention)


def loss():
    logits, tr = model_forward(model, g, train_mode=True, rng=np.random.default_rng(1))
    eff, _, _ = layer_effect(tr[0].input_features, model.layers[0], g, cf, probe)
    return T.add(T.cross_entropy(logits, g.labels, train_idx), csa_loss([(0, eff)], g.labels, train_idx, 0.4))


params = parameters(model) + [probe.W_probe]
with T.new_tape():
    T.backward(loss())

eps = 1e-5
for p in params:
    num = np.zeros_like(p.data)
    for idx in np.ndindex(p.data.shape):
        old = p.data[idx]
        with T.no_grad():
            p.data[idx] = old + eps
            up = loss().item()
            p.data[idx] = old - eps
            down = loss().item()
        p.data[idx] = old
        num[idx] = (up - down) / (2 * eps)
    err = np.linalg.norm(p.grad - num) / max(np.linalg.norm(num), 1e-12)
    print(f"{str(p.shape):>10}  relative error {err:.2e}")
