"""Metrics, ablations, and hyperparameter sweeps.

Vulnerable is the positive class throughout. Zero-denominator cases
define precision, recall, and F1 as 0 so sweeps stay total.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .features import FeatureBundle
from .moe import (
    Batch,
    MoeConfig,
    N_CLASSES,
    N_EXPERTS,
    fit,
    make_batches,
    predict,
    target_index,
)
from .nn import Param


class LengthMismatch(ValueError):
    pass


class EmptyInput(ValueError):
    pass


@dataclass
class EvalReport:
    """Confusion counts and derived metrics for one evaluation run."""

    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    vuln_type: str | None = None
    mode: str = "weighted"
    config: dict | None = None
    seed: int | None = None

    @classmethod
    def from_counts(
        cls,
        tp: int,
        fp: int,
        fn: int,
        tn: int,
        **meta,
    ) -> "EvalReport":
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = (
            2.0 * precision * recall / (precision + recall)
            if precision + recall > 0
            else 0.0
        )
        return cls(tp=tp, fp=fp, fn=fn, tn=tn, precision=precision, recall=recall, f1=f1, **meta)

    def to_dict(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "vuln_type": self.vuln_type,
            "mode": self.mode,
            "config": self.config,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def to_text(self) -> str:
        rows = [
            ("vuln_type", str(self.vuln_type)),
            ("mode", self.mode),
            ("tp", str(self.tp)),
            ("fp", str(self.fp)),
            ("fn", str(self.fn)),
            ("tn", str(self.tn)),
            ("precision", f"{self.precision:.4f}"),
            ("recall", f"{self.recall:.4f}"),
            ("f1", f"{self.f1:.4f}"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows) + "\n"


def compute_metrics(
    predictions: Sequence[int], labels: Sequence[int], **meta
) -> EvalReport:
    """Confusion counts plus precision/recall/F1 over parallel binary lists."""
    if len(predictions) != len(labels):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(labels)} labels")
    if len(predictions) == 0:
        raise EmptyInput("cannot evaluate zero predictions")
    tp = fp = fn = tn = 0
    for p, y in zip(predictions, labels):
        if p not in (0, 1) or y not in (0, 1):
            raise ValueError(f"predictions and labels must be binary, got ({p!r}, {y!r})")
        if p == 1 and y == 1:
            tp += 1
        elif p == 1 and y == 0:
            fp += 1
        elif p == 0 and y == 1:
            fn += 1
        else:
            tn += 1
    return EvalReport.from_counts(tp, fp, fn, tn, **meta)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    bundles: list[FeatureBundle]
    labels: list[int]

    def __post_init__(self):
        if len(self.bundles) != len(self.labels):
            raise LengthMismatch(
                f"{len(self.bundles)} bundles vs {len(self.labels)} labels"
            )

    def __len__(self) -> int:
        return len(self.bundles)

    def batches(self, batch_size: int) -> list[Batch]:
        return make_batches(self.bundles, self.labels, batch_size)

    def feature_matrix(self, which: str) -> np.ndarray:
        return np.stack([getattr(b, which) for b in self.bundles])


def _evaluate_model(model, test: Dataset, mode: str = "weighted") -> EvalReport:
    preds = [predict(b, model, mode=mode).label for b in test.bundles]
    return compute_metrics(preds, test.labels, mode=mode)


# ---------------------------------------------------------------------------
# Reduced trainers for ablation variants
# ---------------------------------------------------------------------------
# Both variants reuse the nn kernels: a single two-layer head trained on one
# feature, and three heads whose outputs are averaged with fixed equal
# weights (no attention, no gate).


@dataclass
class _Head:
    w1: Param
    b1: Param
    w2: Param
    b2: Param

    def params(self) -> list[Param]:
        return [self.w1, self.b1, self.w2, self.b2]


def _init_head(d: int, d_hidden: int, rng: np.random.Generator) -> _Head:
    def uniform(shape, fan_in):
        s = 1.0 / np.sqrt(fan_in)
        return Param(rng.uniform(-s, s, size=shape))

    return _Head(
        w1=uniform((d_hidden, d), d),
        b1=uniform((d_hidden,), d),
        w2=uniform((N_CLASSES, d_hidden), d_hidden),
        b2=uniform((N_CLASSES,), d_hidden),
    )


def _head_forward(x: np.ndarray, head: _Head):
    z1 = nn.linear(x, head.w1, head.b1)
    a1 = nn.relu(z1)
    probs = nn.softmax(nn.linear(a1, head.w2, head.b2))
    return probs, (x, z1, a1, probs)


def _head_backward(d_probs: np.ndarray, cache, head: _Head) -> None:
    x, z1, a1, probs = cache
    d_logits = nn.softmax_backward(probs, d_probs)
    d_a1 = nn.linear_backward(d_logits, a1, head.w2, head.b2)
    d_z1 = nn.relu_backward(d_a1, z1)
    nn.linear_backward(d_z1, x, head.w1, head.b1)


def _train_single_expert(features: np.ndarray, labels: Sequence[int], config: MoeConfig) -> _Head:
    rng = np.random.default_rng(config.seed)
    head = _init_head(features.shape[1], config.d_gate, rng)
    n = len(labels)
    for _ in range(config.epochs):
        for start in range(0, n, config.batch_size):
            xs = features[start : start + config.batch_size]
            ys = labels[start : start + config.batch_size]
            m = len(ys)
            for p in head.params():
                p.zero_grad()
            for x, y in zip(xs, ys):
                probs, cache = _head_forward(x, head)
                d_probs = nn.cross_entropy_backward(probs, target_index(y), upstream=1.0 / m)
                _head_backward(d_probs, cache, head)
            for p in head.params():
                p.step(config.eta)
    return head


def _head_predictions(features: np.ndarray, head: _Head) -> list[int]:
    preds = []
    for x in features:
        probs, _ = _head_forward(x, head)
        preds.append(1 if probs[0] >= probs[1] else 0)
    return preds


def _train_mean_fusion(train: Dataset, config: MoeConfig) -> list[_Head]:
    rng = np.random.default_rng(config.seed)
    d = train.bundles[0].d
    heads = [_init_head(d, config.d_gate, rng) for _ in range(N_EXPERTS)]
    features = [train.feature_matrix(w) for w in ("raw", "expl", "pred")]
    n = len(train)
    for _ in range(config.epochs):
        for start in range(0, n, config.batch_size):
            stop = min(start + config.batch_size, n)
            m = stop - start
            for head in heads:
                for p in head.params():
                    p.zero_grad()
            for row in range(start, stop):
                t = target_index(train.labels[row])
                probs_caches = [
                    _head_forward(features[i][row], heads[i]) for i in range(N_EXPERTS)
                ]
                fused = np.mean([pc[0] for pc in probs_caches], axis=0)
                d_fused = nn.cross_entropy_backward(fused, t, upstream=1.0 / m)
                for i in range(N_EXPERTS):
                    _head_backward(d_fused / N_EXPERTS, probs_caches[i][1], heads[i])
            for head in heads:
                for p in head.params():
                    p.step(config.eta)
    return heads


def _mean_fusion_predictions(test: Dataset, heads: list[_Head]) -> list[int]:
    features = [test.feature_matrix(w) for w in ("raw", "expl", "pred")]
    preds = []
    for row in range(len(test)):
        fused = np.mean(
            [_head_forward(features[i][row], heads[i])[0] for i in range(N_EXPERTS)], axis=0
        )
        preds.append(1 if fused[0] >= fused[1] else 0)
    return preds


# ---------------------------------------------------------------------------
# Ablation and sweep
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = (
    "R",
    "E",
    "P",
    "REP",
    "Base",
    "w/o MHSA+gate",
    "w/o LLM",
)


def run_ablation(
    train: Dataset, valid: Dataset, test: Dataset, config: MoeConfig
) -> list[dict]:
    """Train and score every ablation variant under one seed.

    Feature rows R/E/P are single two-layer heads on one feature each; REP
    and Base are the full fusion model; "w/o MHSA+gate" averages three
    heads with fixed equal weights; "w/o LLM" is the raw-code head alone.
    Returns one dict per variant with precision/recall/f1.
    """
    results: dict[str, EvalReport] = {}

    single_reports: dict[str, EvalReport] = {}
    for name, which in (("R", "raw"), ("E", "expl"), ("P", "pred")):
        head = _train_single_expert(train.feature_matrix(which), train.labels, config)
        preds = _head_predictions(test.feature_matrix(which), head)
        single_reports[name] = compute_metrics(preds, test.labels, mode=f"single:{which}")
        results[name] = single_reports[name]

    model, _ = fit(train.batches(config.batch_size), valid.batches(config.batch_size), config)
    full_report = _evaluate_model(model, test)
    results["REP"] = full_report
    results["Base"] = full_report

    heads = _train_mean_fusion(train, config)
    mean_preds = _mean_fusion_predictions(test, heads)
    results["w/o MHSA+gate"] = compute_metrics(mean_preds, test.labels, mode="mean")

    results["w/o LLM"] = single_reports["R"]

    return [
        {
            "variant": name,
            "precision": results[name].precision,
            "recall": results[name].recall,
            "f1": results[name].f1,
        }
        for name in ABLATION_VARIANTS
    ]


def ablation_table_text(rows: Sequence[dict]) -> str:
    width = max(len(r["variant"]) for r in rows)
    lines = [f"{'variant':<{width}}  precision  recall  f1"]
    for r in rows:
        lines.append(
            f"{r['variant']:<{width}}  {r['precision']:>9.4f}  {r['recall']:>6.4f}  {r['f1']:.4f}"
        )
    return "\n".join(lines) + "\n"


def sweep(
    train: Dataset,
    valid: Dataset,
    test: Dataset,
    base_config: MoeConfig,
    alphas: Sequence[float],
    gammas: Sequence[float],
) -> list[dict]:
    """One fit and evaluation per (alpha, gamma) grid point, shared seed."""
    if not alphas or not gammas:
        raise EmptyInput("alpha and gamma grids must be non-empty")
    cells = []
    for alpha, gamma in itertools.product(alphas, gammas):
        config = replace(base_config, alpha=alpha, gamma=gamma)
        model, _ = fit(
            train.batches(config.batch_size), valid.batches(config.batch_size), config
        )
        report = _evaluate_model(model, test)
        cells.append({"alpha": alpha, "gamma": gamma, "f1": report.f1})
    return cells


def sweep_to_csv(cells: Sequence[dict]) -> str:
    lines = ["alpha,gamma,f1"]
    for cell in cells:
        lines.append(f"{cell['alpha']},{cell['gamma']},{cell['f1']:.6f}")
    return "\n".join(lines) + "\n"


def compare_gate_drift(
    train: Dataset,
    valid: Dataset,
    config: MoeConfig,
    gammas: Sequence[float] = (0.0, 1.0),
) -> dict[float, float]:
    """Mean per-step gate drift of otherwise identical runs, one per gamma.

    The regularizer penalizes exactly this drift, so larger gamma should
    produce smaller mean drift on the same data and seed.
    """
    out: dict[float, float] = {}
    for gamma in gammas:
        cfg = replace(config, gamma=gamma)
        _, history = fit(
            train.batches(cfg.batch_size), valid.batches(cfg.batch_size), cfg
        )
        out[gamma] = float(np.mean(history.gate_drift)) if history.gate_drift else 0.0
    return out
