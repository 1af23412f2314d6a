"""Full-graph training with optional causal attention supervision."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .csa import (
    CounterfactualScheme,
    HistoricalBuffer,
    LayerProbe,
    ablation_last,
    csa_loss,
    layer_effect,
    make_counterfactual,
    pure_overrides,
)
from .graph import Graph, Split, random_split
from .models import build_model, model_forward, parameters
from .tensor import Tensor

# variant name -> (mode, counterfactual kind)
VARIANTS = {
    "none": ("vanilla", None),
    "dummy": ("csa", "dummy"),
    "csa1": ("csa", "uniform"),
    "csa2": ("csa", "identity"),
    "csa3": ("csa", "historical"),
    "last": ("last", None),
    "pure": ("pure", None),
}

# independent RNG streams derived from a run seed; the split uses stream 0
STREAM_INIT, STREAM_DROPOUT, STREAM_COUNTERFACTUAL, STREAM_PROBE = 10, 11, 12, 13


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, components: dict):
        self.epoch = epoch
        self.components = components
        parts = ", ".join(f"{k}={v}" for k, v in components.items())
        super().__init__(f"non-finite values at epoch {epoch}: {parts}")


@dataclass
class TrainConfig:
    variant: str = "none"
    lam: float = 0.4
    layer_lambdas: Optional[dict] = None
    supervised_layers: tuple = (0,)
    uniform_bounds: tuple = (0.0, 1.0)
    last_scheme: str = "csa2"
    lr: float = 0.005
    weight_decay: float = 5e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    patience: int = 100
    max_epochs: int = 1000
    track_mad: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if VARIANTS[self.last_scheme][0] != "csa":
            raise ValueError("last_scheme must name a counterfactual variant (dummy/csa1/csa2/csa3)")
        self.supervised_layers = tuple(int(x) for x in self.supervised_layers)

    @property
    def mode(self) -> str:
        return VARIANTS[self.variant][0]

    def scheme(self) -> Optional[CounterfactualScheme]:
        name = self.last_scheme if self.mode == "last" else self.variant
        kind = VARIANTS[name][1]
        if kind is None:
            return None
        if kind == "uniform":
            return CounterfactualScheme.uniform(*self.uniform_bounds)
        return CounterfactualScheme(kind)

    def lambdas(self) -> dict[int, float]:
        if self.layer_lambdas:
            return {int(k): float(v) for k, v in self.layer_lambdas.items()}
        return {layer: self.lam for layer in self.supervised_layers}


class Adam:
    """Adam with decoupled weight decay (``p -= lr * wd * p`` before the moment update)."""

    def __init__(self, params: Sequence[Tensor], lr=0.005, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                p.data = p.data - self.lr * self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class RunHistory:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    seed: int = 0
    variant: str = "none"

    @property
    def best(self) -> dict:
        return self.epochs[self.best_epoch]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.epochs)

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "variant": self.variant,
            "best_epoch": self.best_epoch,
            "epochs_run": len(self.epochs),
            "train_acc": self.best["train_acc"],
            "val_acc": self.best["val_acc"],
            "test_acc": self.best["test_acc"],
        }


def accuracy(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    rows = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask, dtype=np.int64)
    if rows.size == 0:
        raise ValueError("accuracy over an empty mask")
    return float(np.mean(np.argmax(logits[rows], axis=1) == labels[rows]))


def evaluate(model, g: Graph, mask, overrides=None) -> float:
    """Eval-mode accuracy on ``mask``."""
    with T.no_grad():
        logits, _ = model_forward(model, g, train_mode=False, overrides=overrides)
    return accuracy(logits.data, g.labels, mask)


def mad(features, labels: Optional[np.ndarray] = None, pairs: str = "all") -> float:
    """Mean cosine distance ``1 - cos(h_i, h_j)`` over distinct node pairs.

    ``pairs="interclass"`` keeps only pairs with different ``labels``.
    Zero rows are dropped.
    """
    h = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(h, axis=1)
    keep = norms > 0
    if keep.sum() < 2:
        raise ValueError("MAD needs at least two nonzero rows")
    hn = h[keep] / norms[keep, None]
    dist = 1.0 - hn @ hn.T
    select = ~np.eye(hn.shape[0], dtype=bool)
    if pairs == "interclass":
        if labels is None:
            raise ValueError("interclass MAD needs labels")
        lab = np.asarray(labels)[keep]
        select &= lab[:, None] != lab[None, :]
    elif pairs != "all":
        raise ValueError(f"unknown pair set {pairs!r}")
    if not select.any():
        raise ValueError("no node pairs selected")
    return float(dist[select].mean())


def _probe_dims(model, layers) -> list[int]:
    return [model.layers[l].out_dim for l in layers]


def train(model, g: Graph, split: Split, config: TrainConfig, seed: int = 0) -> RunHistory:
    """Train ``model`` in place and leave it at the best-validation parameters."""
    mode = config.mode
    if mode != "vanilla" and not hasattr(model, "layers"):
        raise ValueError(f"variant {config.variant!r} needs an attention model")
    bad = [l for l in config.supervised_layers if not 0 <= l < len(getattr(model, "layers", []))]
    if mode in ("csa", "last") and bad:
        raise ValueError(f"supervised layer(s) {bad} do not exist")

    drop_rng = np.random.default_rng([seed, STREAM_DROPOUT])
    cf_rng = np.random.default_rng([seed, STREAM_COUNTERFACTUAL])
    scheme = config.scheme()
    lambdas = config.lambdas()
    probes: list[LayerProbe] = []
    if mode == "csa":
        probe_rng = np.random.default_rng([seed, STREAM_PROBE])
        probes = [
            LayerProbe.create(d, g.class_count, l, probe_rng)
            for l, d in zip(config.supervised_layers, _probe_dims(model, config.supervised_layers))
        ]
    hist = HistoricalBuffer()
    fixed = pure_overrides(model, g) if mode == "pure" else None

    # model parameters first so their update order never depends on the variant
    params = parameters(model) + [p.W_probe for p in probes]
    opt = Adam(params, config.lr, config.betas, config.eps, config.weight_decay)
    labels = g.labels
    train_idx, val_idx, test_idx = split.train, split.val, split.test

    history = RunHistory(seed=seed, variant=config.variant)
    best_key = None
    best_state = None
    for epoch in range(config.max_epochs):
        bad_params = [name for name, p in model.named_parameters() if not np.isfinite(p.data).all()]
        if bad_params:
            raise TrainingDiverged(epoch, {"non_finite_parameters": ",".join(bad_params)})
        with T.new_tape():
            logits, traces = model_forward(model, g, train_mode=True, overrides=fixed, rng=drop_rng)
            ce = T.cross_entropy(logits, labels, train_idx)
            total, csa_term = ce, None
            if mode == "csa":
                effects = []
                for probe in probes:
                    l = probe.layer_index
                    cf = make_counterfactual(scheme, g, l, traces[l].attention, hist, cf_rng)
                    eff, _, _ = layer_effect(traces[l].input_features, model.layers[l], g, cf, probe)
                    effects.append((l, eff))
                csa_term = csa_loss(effects, labels, train_idx, lambdas)
            elif mode == "last":
                eff, _ = ablation_last(model, g, scheme, config.supervised_layers, hist, cf_rng)
                csa_term = T.scale(T.cross_entropy(eff, labels, train_idx), config.lam)
            if csa_term is not None:
                total = T.add(ce, csa_term)

            loss_value = total.item()
            csa_value = csa_term.item() if csa_term is not None else 0.0
            if not math.isfinite(loss_value):
                raise TrainingDiverged(epoch, {"total": loss_value, "ce": ce.item(), "csa": csa_value})

            with T.no_grad():
                eval_logits, eval_traces = model_forward(model, g, train_mode=False, overrides=fixed)
            z = eval_logits.data
            record = {
                "epoch": epoch,
                "loss": loss_value,
                "ce_loss": ce.item(),
                "csa_loss": csa_value,
                "train_acc": accuracy(z, labels, train_idx),
                "val_acc": accuracy(z, labels, val_idx),
                "test_acc": accuracy(z, labels, test_idx),
                "val_loss": float(-T.log_softmax_rows(z[val_idx])[np.arange(len(val_idx)), labels[val_idx]].mean()),
            }
            if config.track_mad:
                record["mad_all"] = mad(z)
                record["mad_interclass"] = mad(z, labels, "interclass")
            history.epochs.append(record)

            key = (record["val_acc"], -record["val_loss"])
            if best_key is None or key > best_key:
                best_key = key
                history.best_epoch = epoch
                best_state = [p.data.copy() for p in parameters(model)]
            elif epoch - history.best_epoch >= config.patience:
                break

            opt.zero_grad()
            T.backward(total)
            opt.step()
            for l in range(len(traces)):
                if traces[l].attention is not None and (fixed is None):
                    hist.update(l, traces[l].attention)

    for p, data in zip(parameters(model), best_state):
        p.data = data
    return history


def split_for(g: Graph, seed: int, ratios=(0.48, 0.32, 0.20)) -> Split:
    return random_split(g, ratios, seed)


def run_seed(g: Graph, config: TrainConfig, seed: int, model_kind: str = "gat", arch: Optional[dict] = None,
             ratios=(0.48, 0.32, 0.20)):
    """One trial: split, initialize and train from ``seed``.  Returns ``(model, history)``."""
    split = random_split(g, ratios, seed)
    model = build_model(model_kind, g.feature_dim, g.class_count, rng=np.random.default_rng([seed, STREAM_INIT]),
                        **(arch or {}))
    history = train(model, g, split, config, seed)
    return model, history


def aggregate(values: Sequence[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std())}


def multi_seed_run(g: Graph, config: TrainConfig, seeds: Sequence[int], model_kind: str = "gat",
                   arch: Optional[dict] = None, ratios=(0.48, 0.32, 0.20)) -> dict:
    """Train once per seed (fresh split and init each) and aggregate best-validation metrics."""
    if len(seeds) < 1:
        raise ValueError("need at least one seed")
    histories = [run_seed(g, config, s, model_kind, arch, ratios)[1] for s in seeds]
    return {
        "test_acc": aggregate([h.best["test_acc"] for h in histories]),
        "val_acc": aggregate([h.best["val_acc"] for h in histories]),
        "per_seed": [h.summary() for h in histories],
        "histories": histories,
    }


def config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["supervised_layers"] = list(config.supervised_layers)
    d["uniform_bounds"] = list(config.uniform_bounds)
    d["betas"] = list(config.betas)
    return d
