"""Declarative experiments: configs, commands and their result files.

Each ``cmd_*`` function reads an :class:`ExperimentConfig`, trains the
requested variants over the configured seeds, and writes JSON, CSV and
JSONL outputs into the output directory.  Rerunning a command with the
same config rewrites byte-identical files.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from .csa import dummy_attention
from .graph import Graph, load_manifest, perturb_edges, perturb_features, synthetic_planted
from .models import model_forward
from .training import VARIANTS, TrainConfig, config_dict, run_seed

log = logging.getLogger("csagat")

SUMMARY_SCHEMA = "csa-summary"
SUMMARY_VERSION = 1
PERTURBATIONS = {"feature": perturb_features, "edge": perturb_edges}
TRAINING_KEYS = {"lr", "weight_decay", "betas", "eps", "patience", "max_epochs"}


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class ExperimentConfig:
    dataset: dict
    model: str = "gat"
    arch: dict = field(default_factory=dict)
    variants: list = field(default_factory=lambda: ["none", "csa2"])
    lam: Optional[float] = None
    layer_lambdas: Optional[dict] = None
    supervised_layers: list = field(default_factory=lambda: [0])
    uniform_bounds: list = field(default_factory=lambda: [0.0, 1.0])
    last_scheme: str = "csa2"
    seeds: list = field(default_factory=lambda: list(range(10)))
    split: list = field(default_factory=lambda: [0.48, 0.32, 0.20])
    perturbation: dict = field(default_factory=lambda: {"kinds": ["feature", "edge"], "fractions": [0.0, 0.1, 0.2, 0.3, 0.4]})
    lambdas: list = field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0])
    training: dict = field(default_factory=dict)
    output_dir: str = "results"
    base_dir: Path = field(default=Path("."), repr=False)

    DEFAULT_LAMBDA = 0.4

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path | str = ".") -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        raw = dict(raw)
        version = raw.pop("version", 1)
        if version != 1:
            raise ConfigError(f"unsupported config version {version}")
        if "scheme" in raw:
            if "variants" in raw:
                raise ConfigError("give either 'scheme' or 'variants', not both")
            raw["variants"] = [raw.pop("scheme")]
        if "lambda" in raw:
            raw["lam"] = raw.pop("lambda")
        known = {f.name for f in fields(cls)} - {"base_dir"}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        if "dataset" not in raw:
            raise ConfigError("config needs a 'dataset' entry")
        cfg = cls(**raw, base_dir=Path(base_dir))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
        return cls.from_dict(raw, path.parent)

    def validate(self) -> None:
        ds = self.dataset
        if not isinstance(ds, dict) or len(set(ds) & {"manifest", "synthetic"}) != 1:
            raise ConfigError("dataset needs exactly one of 'manifest' or 'synthetic'")
        if self.model not in ("gat", "gcn", "mlp"):
            raise ConfigError(f"unknown model {self.model!r}")
        if not self.variants:
            raise ConfigError("no variants given")
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError(f"unknown scheme {v!r}; choose from {sorted(VARIANTS)}")
            if v != "none" and self.model != "gat":
                raise ConfigError(f"scheme {v!r} needs model 'gat'")
        if self.lam is not None:
            if not isinstance(self.lam, (int, float)) or self.lam < 0:
                raise ConfigError("lambda must be a number >= 0")
            ignored = [v for v in self.variants if VARIANTS[v][0] in ("vanilla", "pure")]
            if ignored:
                log.warning("lambda is ignored for scheme(s) %s", ", ".join(ignored))
        if not self.seeds or not all(isinstance(s, int) and s >= 0 for s in self.seeds):
            raise ConfigError("seeds must be a non-empty list of non-negative integers")
        if len(self.split) != 3 or any(r < 0 for r in self.split) or abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError("split must be three non-negative ratios summing to 1")
        kinds = self.perturbation.get("kinds", [])
        fracs = self.perturbation.get("fractions", [])
        if any(k not in PERTURBATIONS for k in kinds):
            raise ConfigError(f"perturbation kinds must be among {sorted(PERTURBATIONS)}")
        if any(not 0.0 <= f <= 1.0 for f in fracs):
            raise ConfigError("perturbation fractions must lie in [0, 1]")
        if any(l < 0 for l in self.lambdas):
            raise ConfigError("swept lambdas must be >= 0")
        bad = sorted(set(self.training) - TRAINING_KEYS)
        if bad:
            raise ConfigError(f"unknown training key(s): {', '.join(bad)}")
        try:
            self.train_config(self.variants[0])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def lam_value(self) -> float:
        return self.DEFAULT_LAMBDA if self.lam is None else float(self.lam)

    def train_config(self, variant: str, lam: Optional[float] = None, **extra) -> TrainConfig:
        opts = dict(self.training)
        for key in ("betas",):
            if key in opts:
                opts[key] = tuple(opts[key])
        opts.update(extra)
        return TrainConfig(
            variant=variant,
            lam=self.lam_value if lam is None else float(lam),
            layer_lambdas=self.layer_lambdas,
            supervised_layers=tuple(self.supervised_layers),
            uniform_bounds=tuple(self.uniform_bounds),
            last_scheme=self.last_scheme,
            **opts,
        )

    def load_graph(self) -> tuple[Graph, Optional[set]]:
        """The configured graph and, for planted graphs, its informative edge set."""
        if "manifest" in self.dataset:
            path = Path(self.dataset["manifest"])
            if not path.is_absolute():
                path = self.base_dir / path
            if not path.exists():
                raise ConfigError(f"dataset manifest not found: {path}")
            return load_manifest(path), None
        try:
            return synthetic_planted(**self.dataset["synthetic"])
        except TypeError as exc:
            raise ConfigError(f"bad synthetic dataset parameters: {exc}") from None

    def output_path(self, override: Optional[str] = None) -> Path:
        """``override`` (e.g. ``--out``) beats ``CSA_OUT`` beats the config.

        Only the config's own ``output_dir`` resolves against the config's
        directory; the others are taken relative to the working directory.
        """
        external = override or os.environ.get("CSA_OUT")
        if external:
            return Path(external)
        out = Path(self.output_dir)
        return out if out.is_absolute() else self.base_dir / out

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "base_dir"}
        d["lam"] = self.lam_value
        return d


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------


def dumps_fixed(obj: Any, indent: int = 2, _level: int = 0) -> str:
    """JSON with every float written to 6 decimal places."""
    pad, inner = " " * (indent * _level), " " * (indent * (_level + 1))
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (float, np.floating)):
        if not math.isfinite(obj):
            raise ValueError(f"cannot serialize non-finite float {obj}")
        return f"{float(obj):.6f}"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (str, Path)):
        return json.dumps(str(obj))
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{inner}{json.dumps(str(k))}: {dumps_fixed(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if any(isinstance(v, (dict, list, tuple)) for v in obj):
            items = [inner + dumps_fixed(v, indent, _level + 1) for v in obj]
            return "[\n" + ",\n".join(items) + "\n" + pad + "]"
        return "[" + ", ".join(dumps_fixed(v, indent, _level + 1) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([f"{x:.6f}" if isinstance(x, float) else x for x in row])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue(), encoding="utf-8")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


# --------------------------------------------------------------------------
# runs
# --------------------------------------------------------------------------


def _pct_stats(values: Sequence[float]) -> tuple[float, float]:
    arr = 100.0 * np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def run_variant(cfg: ExperimentConfig, g: Graph, variant: str, lam: Optional[float] = None,
                seeds: Optional[Sequence[int]] = None, graph_for_seed=None, **extra):
    """Train ``variant`` once per seed; returns ``[(seed, model, history), ...]``."""
    tc = cfg.train_config(variant, lam, **extra)
    out = []
    for seed in seeds if seeds is not None else cfg.seeds:
        graph = graph_for_seed(seed) if graph_for_seed is not None else g
        model, hist = run_seed(graph, tc, seed, cfg.model, cfg.arch, tuple(cfg.split))
        log.info("%s seed %d: test %.4f (best epoch %d)", variant, seed, hist.best["test_acc"], hist.best_epoch)
        out.append((seed, model, hist))
    return out


def summarize(runs) -> dict:
    tests = [h.best["test_acc"] for _, _, h in runs]
    vals = [h.best["val_acc"] for _, _, h in runs]
    mean, std = _pct_stats(tests)
    vmean, vstd = _pct_stats(vals)
    return {
        "mean": mean,
        "std": std,
        "val_mean": vmean,
        "val_std": vstd,
        "per_seed": [
            {
                "seed": s,
                "test_acc": 100.0 * h.best["test_acc"],
                "val_acc": 100.0 * h.best["val_acc"],
                "best_epoch": h.best_epoch,
                "epochs_run": len(h.epochs),
            }
            for s, _, h in runs
        ],
    }


def cmd_run(cfg: ExperimentConfig, out_dir: Optional[str] = None) -> dict:
    """Train every configured variant; writes ``summary.json`` and per-seed histories."""
    out = cfg.output_path(out_dir)
    g, _ = cfg.load_graph()
    variants = {}
    for variant in cfg.variants:
        runs = run_variant(cfg, g, variant)
        for seed, _, hist in runs:
            _write(out / "histories" / variant / f"seed{seed}.jsonl", hist.to_jsonl())
        variants[variant] = summarize(runs)
    summary = {
        "schema": SUMMARY_SCHEMA,
        "version": SUMMARY_VERSION,
        "dataset": g.name,
        "model": cfg.model,
        "seeds": list(cfg.seeds),
        "metric": "test accuracy (%) at the best-validation epoch",
        "variants": variants,
        "config": _config_record(cfg),
    }
    _write(out / "summary.json", dumps_fixed(summary) + "\n")
    return summary


def _config_record(cfg: ExperimentConfig) -> dict:
    d = cfg.to_dict()
    d["training"] = {k: v for k, v in config_dict(cfg.train_config(cfg.variants[0])).items() if k in TRAINING_KEYS}
    return d


def _sweep_variant(cfg: ExperimentConfig) -> str:
    supervised = [v for v in cfg.variants if VARIANTS[v][0] in ("csa", "last")]
    return supervised[0] if supervised else "csa2"


def cmd_sweep_lambda(cfg: ExperimentConfig, values: Optional[Sequence[float]] = None, out_dir: Optional[str] = None) -> dict:
    """Mean/std accuracy per lambda for the first supervised variant; writes ``lambda_sweep.csv``."""
    values = list(cfg.lambdas if values is None else values)
    if not values or any(v < 0 for v in values):
        raise ConfigError("lambda values must be a non-empty list of numbers >= 0")
    out = cfg.output_path(out_dir)
    g, _ = cfg.load_graph()
    variant = _sweep_variant(cfg)
    rows = []
    for lam in values:
        mean, std = _pct_stats([h.best["test_acc"] for _, _, h in run_variant(cfg, g, variant, lam=lam)])
        rows.append((float(lam), mean, std))
    write_csv(out / "lambda_sweep.csv", ("lambda", "mean_acc", "std_acc"), rows)
    best = max(rows, key=lambda r: r[1])
    report = {"variant": variant, "argmax_lambda": best[0], "best_mean_acc": best[1],
              "rows": [{"lambda": l, "mean_acc": m, "std_acc": s} for l, m, s in rows]}
    _write(out / "lambda_sweep.json", dumps_fixed(report) + "\n")
    return report


def cmd_robustness(cfg: ExperimentConfig, out_dir: Optional[str] = None) -> list[dict]:
    """Accuracy under feature/edge perturbation; writes ``robustness.csv``.

    Each seed perturbs the clean graph once with that seed and then splits
    and trains on the perturbed graph.
    """
    out = cfg.output_path(out_dir)
    g, _ = cfg.load_graph()
    kinds = cfg.perturbation.get("kinds", ["feature", "edge"])
    fractions = cfg.perturbation.get("fractions", [0.0, 0.1, 0.2, 0.3, 0.4])
    clean_cache: dict[str, tuple[float, float]] = {}
    rows = []
    for kind in kinds:
        perturb = PERTURBATIONS[kind]
        for fraction in fractions:
            for variant in cfg.variants:
                if fraction == 0 and variant in clean_cache:
                    mean, std = clean_cache[variant]
                else:
                    runs = run_variant(cfg, g, variant, graph_for_seed=lambda s: perturb(g, fraction, s))
                    mean, std = _pct_stats([h.best["test_acc"] for _, _, h in runs])
                    if fraction == 0:
                        clean_cache[variant] = (mean, std)
                rows.append({"kind": kind, "fraction": float(fraction), "variant": variant, "mean": mean, "std": std})
    write_csv(out / "robustness.csv", ("kind", "fraction", "variant", "mean", "std"),
              [(r["kind"], r["fraction"], r["variant"], r["mean"], r["std"]) for r in rows])
    return rows


def cmd_mad(cfg: ExperimentConfig, out_dir: Optional[str] = None) -> dict:
    """Per-epoch MAD of the output layer, averaged over seeds; writes ``mad.csv``.

    Early stopping is disabled so every seed contributes to every epoch.
    """
    out = cfg.output_path(out_dir)
    g, _ = cfg.load_graph()
    max_epochs = cfg.train_config(cfg.variants[0]).max_epochs
    per_variant = {}
    rows = []
    for variant in cfg.variants:
        runs = run_variant(cfg, g, variant, track_mad=True, patience=max_epochs)
        epochs = len(runs[0][2].epochs)
        all_ = np.array([[r["mad_all"] for r in h.epochs] for _, _, h in runs])
        inter = np.array([[r["mad_interclass"] for r in h.epochs] for _, _, h in runs])
        for e in range(epochs):
            rows.append((e, variant, float(all_[:, e].mean()), float(inter[:, e].mean())))
        per_variant[variant] = {
            "final_mad_all": float(all_[:, -1].mean()),
            "final_mad_interclass": float(inter[:, -1].mean()),
            "per_seed_final_mad_interclass": [float(x) for x in inter[:, -1]],
        }
    write_csv(out / "mad.csv", ("epoch", "variant", "mad_all", "mad_interclass"), rows)
    report = {"seeds": list(cfg.seeds), "epochs": max_epochs, "variants": per_variant}
    _write(out / "mad_final.json", dumps_fixed(report) + "\n")
    return report


# --------------------------------------------------------------------------
# attention quality
# --------------------------------------------------------------------------


def attention_mass(g: Graph, values: np.ndarray, informative: set) -> float:
    """Mean share of a node's non-self attention that lands on informative edges.

    ``values`` is a per-edge attention vector (heads averaged).  Nodes
    without non-self neighbors are skipped.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (g.num_edges,):
        raise ValueError(f"expected {g.num_edges} edge weights, got {values.shape}")
    other = g.src != g.dst
    good = np.array([(int(s), int(d)) in informative for s, d in zip(g.src, g.dst)], dtype=bool)
    total = np.bincount(g.dst[other], weights=values[other], minlength=g.n)
    hit = np.bincount(g.dst[other & good], weights=values[other & good], minlength=g.n)
    has = np.bincount(g.dst[other], minlength=g.n) > 0
    if not has.any():
        raise ValueError("graph has no non-self edges")
    return float(np.mean(hit[has] / np.where(total[has] > 0, total[has], 1.0)))


def model_attention_mass(model, g: Graph, informative: set) -> list[float]:
    """Informative attention mass per layer in eval mode."""
    _, traces = model_forward(model, g)
    return [attention_mass(g, t.attention.head_mean(), informative) for t in traces]


def cmd_attn_quality(cfg: ExperimentConfig, out_dir: Optional[str] = None) -> dict:
    """Attention mass on informative edges of a planted graph; writes ``attention_quality.json``."""
    if "synthetic" not in cfg.dataset:
        raise ConfigError("attn-quality needs a 'synthetic' planted dataset")
    if cfg.model != "gat":
        raise ConfigError("attn-quality needs model 'gat'")
    out = cfg.output_path(out_dir)
    g, informative = cfg.load_graph()
    baseline = attention_mass(g, dummy_attention(g).values[0], informative)
    variants = {}
    for variant in cfg.variants:
        if VARIANTS[variant][0] == "pure":
            continue
        runs = run_variant(cfg, g, variant)
        masses = np.array([model_attention_mass(m, g, informative) for _, m, _ in runs])
        variants[variant] = {
            "mass_per_layer": [float(x) for x in masses.mean(axis=0)],
            "mass_per_seed": [[float(x) for x in row] for row in masses],
            "test_mean": _pct_stats([h.best["test_acc"] for _, _, h in runs])[0],
        }
    report = {
        "graph": {"nodes": g.n, "edges": g.num_edges, "informative_edges": len(informative)},
        "uniform_baseline": baseline,
        "seeds": list(cfg.seeds),
        "variants": variants,
    }
    _write(out / "attention_quality.json", dumps_fixed(report) + "\n")
    return report


COMMANDS = {
    "run": cmd_run,
    "sweep-lambda": cmd_sweep_lambda,
    "robustness": cmd_robustness,
    "mad": cmd_mad,
    "attn-quality": cmd_attn_quality,
}
