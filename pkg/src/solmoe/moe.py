"""Adaptive mixture-of-experts fusion over the three feature embeddings.

The three embeddings of a bundle are treated as a 3-token sequence and
enhanced by multi-head self-attention with a residual connection. A
gating network maps the concatenated enhanced features to three expert
weights through top-k masking and softmax; three independent two-layer
heads score their respective features; the fused prediction is the
gate-weighted sum of the expert outputs.

Training minimizes

    total = alpha * (feature_loss + reg_loss) + (1 - alpha) * fused_loss

where feature_loss is the gate-weighted sum of per-expert cross-entropies,
fused_loss is the cross-entropy of the fused output, and reg_loss is
gamma times the squared distance between the batch-mean gate vector and a
detached snapshot of the previous step's batch-mean gate vector, damping
per-step gate movement. All parameters, gate included, follow plain
gradient descent; the gate weights adapt because they are a differentiable
function of the gate parameters.

Class-probability convention everywhere: index 0 is Vulnerable, index 1
is Secure; a binary label of 1 (vulnerable) targets index 0.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .features import FeatureBundle
from . import nn
from .nn import Param, ShapeMismatch

N_EXPERTS = 3
N_CLASSES = 2
VULNERABLE_INDEX = 0
SECURE_INDEX = 1

CHECKPOINT_VERSION = 1


class EmptyBatch(ValueError):
    pass


class NonFiniteLoss(ArithmeticError):
    pass


class CheckpointError(ValueError):
    pass


def target_index(label: int) -> int:
    """Class-probability index for a binary label (1 = vulnerable = index 0)."""
    return VULNERABLE_INDEX if label == 1 else SECURE_INDEX


@dataclass(frozen=True)
class MoeConfig:
    d: int = 32
    n_heads: int = 4
    d_gate: int = 64
    k: int = 3
    alpha: float = 0.5
    gamma: float = 0.1
    eta: float = 1e-3
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.d < 1 or self.n_heads < 1 or self.d % self.n_heads != 0:
            raise ValueError(f"d={self.d} must be a positive multiple of n_heads={self.n_heads}")
        if self.d_gate < 1:
            raise ValueError(f"d_gate must be positive, got {self.d_gate}")
        if not 1 <= self.k <= N_EXPERTS:
            raise ValueError(f"k must be in [1, {N_EXPERTS}], got {self.k}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.gamma < 0.0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.eta < 0.0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "MoeConfig":
        return cls(**obj)


@dataclass
class Batch:
    bundles: list[FeatureBundle]
    labels: list[int]

    def __post_init__(self):
        if len(self.bundles) != len(self.labels):
            raise ValueError(
                f"{len(self.bundles)} bundles vs {len(self.labels)} labels"
            )
        for y in self.labels:
            if y not in (0, 1):
                raise ValueError(f"labels must be binary, got {y!r}")

    def __len__(self) -> int:
        return len(self.bundles)


def make_batches(
    bundles: Sequence[FeatureBundle], labels: Sequence[int], batch_size: int
) -> list[Batch]:
    return [
        Batch(list(bundles[i : i + batch_size]), list(labels[i : i + batch_size]))
        for i in range(0, len(bundles), batch_size)
    ]


@dataclass
class MoeModel:
    """Attention, gate, and expert parameters plus the gate snapshot."""

    config: MoeConfig
    params: dict[str, Param]
    prev_gate_outputs: np.ndarray

    def named_params(self) -> dict[str, Param]:
        return self.params

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def clone(self) -> "MoeModel":
        return MoeModel(
            config=self.config,
            params={k: p.copy() for k, p in self.params.items()},
            prev_gate_outputs=self.prev_gate_outputs.copy(),
        )


def init_model(config: MoeConfig) -> MoeModel:
    """Seeded initialization: every tensor uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
    rng = np.random.default_rng(config.seed)

    def uniform(shape: tuple[int, ...], fan_in: int) -> Param:
        s = 1.0 / np.sqrt(fan_in)
        return Param(rng.uniform(-s, s, size=shape))

    d, dg = config.d, config.d_gate
    params: dict[str, Param] = {}
    for name in ("wq", "wk", "wv", "wo"):
        params[name] = uniform((d, d), d)
        params["b" + name[1]] = uniform((d,), d)
    params["gate_w1"] = uniform((dg, N_EXPERTS * d), N_EXPERTS * d)
    params["gate_b1"] = uniform((dg,), N_EXPERTS * d)
    params["gate_w2"] = uniform((N_EXPERTS, dg), dg)
    params["gate_b2"] = uniform((N_EXPERTS,), dg)
    for i in range(N_EXPERTS):
        params[f"expert{i}_w1"] = uniform((dg, d), d)
        params[f"expert{i}_b1"] = uniform((dg,), d)
        params[f"expert{i}_w2"] = uniform((N_CLASSES, dg), dg)
        params[f"expert{i}_b2"] = uniform((N_CLASSES,), dg)
    return MoeModel(
        config=config,
        params=params,
        prev_gate_outputs=np.full(N_EXPERTS, 1.0 / N_EXPERTS),
    )


# ---------------------------------------------------------------------------
# Forward / backward pieces
# ---------------------------------------------------------------------------


def _as_tokens(bundle: FeatureBundle | np.ndarray) -> np.ndarray:
    if isinstance(bundle, FeatureBundle):
        return bundle.tokens()
    tokens = np.asarray(bundle, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] != N_EXPERTS:
        raise ShapeMismatch(f"expected a ({N_EXPERTS}, d) token matrix, got {tokens.shape}")
    return tokens


@dataclass
class _MhsaCache:
    tokens: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    weights: list[np.ndarray]
    concat: np.ndarray


def _mhsa_forward(tokens: np.ndarray, model: MoeModel) -> tuple[np.ndarray, _MhsaCache]:
    p = model.params
    n_heads = model.config.n_heads
    d = model.config.d
    if tokens.shape != (N_EXPERTS, d):
        raise ShapeMismatch(f"expected tokens of shape ({N_EXPERTS}, {d}), got {tokens.shape}")
    dh = d // n_heads
    q = tokens @ p["wq"].value.T + p["bq"].value
    k = tokens @ p["wk"].value.T + p["bk"].value
    v = tokens @ p["wv"].value.T + p["bv"].value
    concat = np.empty_like(tokens)
    weights: list[np.ndarray] = []
    for h in range(n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        out_h, w_h = nn.attention_forward(q[:, sl], k[:, sl], v[:, sl])
        concat[:, sl] = out_h
        weights.append(w_h)
    proj = concat @ p["wo"].value.T + p["bo"].value
    enhanced = tokens + proj
    return enhanced, _MhsaCache(tokens, q, k, v, weights, concat)


def _mhsa_backward(d_enhanced: np.ndarray, cache: _MhsaCache, model: MoeModel) -> np.ndarray:
    p = model.params
    n_heads = model.config.n_heads
    dh = model.config.d // n_heads
    d_tokens = d_enhanced.copy()  # residual path
    d_proj = d_enhanced
    p["wo"].grad += d_proj.T @ cache.concat
    p["bo"].grad += d_proj.sum(axis=0)
    d_concat = d_proj @ p["wo"].value
    dq = np.zeros_like(cache.q)
    dk = np.zeros_like(cache.k)
    dv = np.zeros_like(cache.v)
    for h in range(n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        dq_h, dk_h, dv_h = nn.attention_backward(
            d_concat[:, sl], cache.q[:, sl], cache.k[:, sl], cache.v[:, sl], cache.weights[h]
        )
        dq[:, sl] = dq_h
        dk[:, sl] = dk_h
        dv[:, sl] = dv_h
    for name, dmat in (("wq", dq), ("wk", dk), ("wv", dv)):
        p[name].grad += dmat.T @ cache.tokens
        p["b" + name[1]].grad += dmat.sum(axis=0)
        d_tokens += dmat @ p[name].value
    return d_tokens


def mhsa_enhance(bundle: FeatureBundle | np.ndarray, model: MoeModel) -> np.ndarray:
    """Self-attention enhancement of the 3-token feature sequence.

    Per head: project to queries/keys/values of width d/n_heads, attend,
    concatenate the heads, project back to width d, and add the input
    token back (residual). Returns the (3, d) enhanced matrix.
    """
    enhanced, _ = _mhsa_forward(_as_tokens(bundle), model)
    return enhanced


@dataclass
class _GateCache:
    x: np.ndarray
    z1: np.ndarray
    a1: np.ndarray


def _gate_forward(enhanced: np.ndarray, model: MoeModel) -> tuple[np.ndarray, _GateCache]:
    p = model.params
    x = enhanced.reshape(-1)  # concatenation [raw, expl, pred]
    z1 = nn.linear(x, p["gate_w1"], p["gate_b1"])
    a1 = nn.relu(z1)
    logits = nn.linear(a1, p["gate_w2"], p["gate_b2"])
    gate = nn.softmax(nn.topk_mask(logits, model.config.k))
    return gate, _GateCache(x, z1, a1)


def _gate_backward(
    d_gate: np.ndarray, gate: np.ndarray, cache: _GateCache, model: MoeModel
) -> np.ndarray:
    p = model.params
    # Masked logits produce exact zeros in the gate, so softmax_backward
    # already sends them zero gradient; kept logits pass straight through
    # the mask.
    d_logits = nn.softmax_backward(gate, d_gate)
    d_a1 = nn.linear_backward(d_logits, cache.a1, p["gate_w2"], p["gate_b2"])
    d_z1 = nn.relu_backward(d_a1, cache.z1)
    d_x = nn.linear_backward(d_z1, cache.x, p["gate_w1"], p["gate_b1"])
    return d_x.reshape(N_EXPERTS, model.config.d)


def gate_forward(bundle: FeatureBundle | np.ndarray, model: MoeModel) -> np.ndarray:
    """Expert weights for one (already enhanced) feature triple.

    The three vectors are concatenated, passed through the two-layer gate
    network, masked to the top k logits, and softmax-normalized. The
    result lies on the 3-simplex with at most k nonzero entries.
    """
    tokens = _as_tokens(bundle)
    if tokens.shape[1] != model.config.d:
        raise ShapeMismatch(f"expected dimension {model.config.d}, got {tokens.shape[1]}")
    gate, _ = _gate_forward(tokens, model)
    return gate


@dataclass
class _ExpertCache:
    x: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    probs: np.ndarray


def _expert_forward(x: np.ndarray, index: int, model: MoeModel) -> tuple[np.ndarray, _ExpertCache]:
    p = model.params
    z1 = nn.linear(x, p[f"expert{index}_w1"], p[f"expert{index}_b1"])
    a1 = nn.relu(z1)
    logits = nn.linear(a1, p[f"expert{index}_w2"], p[f"expert{index}_b2"])
    probs = nn.softmax(logits)
    return probs, _ExpertCache(x, z1, a1, probs)


def _expert_backward(
    d_probs: np.ndarray, cache: _ExpertCache, index: int, model: MoeModel
) -> np.ndarray:
    p = model.params
    d_logits = nn.softmax_backward(cache.probs, d_probs)
    d_a1 = nn.linear_backward(d_logits, cache.a1, p[f"expert{index}_w2"], p[f"expert{index}_b2"])
    d_z1 = nn.relu_backward(d_a1, cache.z1)
    return nn.linear_backward(d_z1, cache.x, p[f"expert{index}_w1"], p[f"expert{index}_b1"])


def expert_forward(embedding: np.ndarray, index: int, model: MoeModel) -> np.ndarray:
    """Confidence of one expert head over (vulnerable, secure)."""
    if not 0 <= index < N_EXPERTS:
        raise IndexError(f"expert index must be in [0, {N_EXPERTS}), got {index}")
    embedding = np.asarray(embedding, dtype=np.float64)
    if embedding.shape != (model.config.d,):
        raise ShapeMismatch(
            f"expected embedding of shape ({model.config.d},), got {embedding.shape}"
        )
    probs, _ = _expert_forward(embedding, index, model)
    return probs


def assemble_matrix(*expert_outputs: np.ndarray) -> np.ndarray:
    """Stack expert confidences into a (3, 2) matrix, one row per expert."""
    if len(expert_outputs) != N_EXPERTS:
        raise ShapeMismatch(f"expected {N_EXPERTS} expert outputs, got {len(expert_outputs)}")
    rows = []
    for out in expert_outputs:
        out = np.asarray(out, dtype=np.float64)
        if out.shape != (N_CLASSES,):
            raise ShapeMismatch(f"expert output must have shape ({N_CLASSES},), got {out.shape}")
        if abs(out.sum() - 1.0) > nn.SIMPLEX_TOL or out.min() < -nn.SIMPLEX_TOL:
            raise nn.NotASimplex(f"expert output is not a probability vector: {out!r}")
        rows.append(out)
    return np.vstack(rows)


def fuse(gate: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Gate-weighted fusion of the expert matrix: a convex combination of rows."""
    gate = np.asarray(gate, dtype=np.float64)
    matrix = np.asarray(matrix, dtype=np.float64)
    if gate.shape != (N_EXPERTS,) or matrix.shape != (N_EXPERTS, N_CLASSES):
        raise ShapeMismatch(
            f"expected gate ({N_EXPERTS},) and matrix ({N_EXPERTS}, {N_CLASSES}), "
            f"got {gate.shape} and {matrix.shape}"
        )
    if abs(gate.sum() - 1.0) > nn.SIMPLEX_TOL or gate.min() < -nn.SIMPLEX_TOL:
        raise nn.NotASimplex(f"gate vector is not a probability vector: {gate!r}")
    return gate @ matrix


# ---------------------------------------------------------------------------
# Loss and training
# ---------------------------------------------------------------------------


@dataclass
class _ExampleState:
    mhsa: _MhsaCache
    gate: np.ndarray
    gate_cache: _GateCache
    experts: list[_ExpertCache]
    matrix: np.ndarray
    fused: np.ndarray
    expert_ce: np.ndarray
    fused_ce: float
    target: int


def _forward_example(bundle: FeatureBundle, label: int, model: MoeModel) -> _ExampleState:
    enhanced, mhsa_cache = _mhsa_forward(_as_tokens(bundle), model)
    gate, gate_cache = _gate_forward(enhanced, model)
    expert_caches = []
    rows = []
    for i in range(N_EXPERTS):
        probs, cache = _expert_forward(enhanced[i], i, model)
        expert_caches.append(cache)
        rows.append(probs)
    matrix = np.vstack(rows)
    fused = gate @ matrix
    t = target_index(label)
    expert_ce = np.array([nn.cross_entropy(matrix[i], t) for i in range(N_EXPERTS)])
    fused_ce = nn.cross_entropy(fused, t)
    return _ExampleState(
        mhsa=mhsa_cache,
        gate=gate,
        gate_cache=gate_cache,
        experts=expert_caches,
        matrix=matrix,
        fused=fused,
        expert_ce=expert_ce,
        fused_ce=fused_ce,
        target=t,
    )


def _loss_components(
    states: list[_ExampleState], model: MoeModel
) -> tuple[float, dict[str, float], np.ndarray]:
    cfg = model.config
    n = len(states)
    feature_loss = sum(float(s.gate @ s.expert_ce) for s in states) / n
    fused_loss = sum(s.fused_ce for s in states) / n
    gate_mean = np.mean([s.gate for s in states], axis=0)
    reg_loss = cfg.gamma * float(np.sum((gate_mean - model.prev_gate_outputs) ** 2))
    total = cfg.alpha * (feature_loss + reg_loss) + (1.0 - cfg.alpha) * fused_loss
    components = {
        "total": total,
        "feature": feature_loss,
        "pred": fused_loss,
        "reg": reg_loss,
    }
    return total, components, gate_mean


def loss_total(batch: Batch, model: MoeModel) -> tuple[float, dict[str, float]]:
    """Composite loss over one batch (forward only).

    Returns the total and a components dict with keys "total", "feature",
    "pred", and "reg".
    """
    if len(batch) == 0:
        raise EmptyBatch("loss_total requires a non-empty batch")
    states = [_forward_example(b, y, model) for b, y in zip(batch.bundles, batch.labels)]
    total, components, _ = _loss_components(states, model)
    return total, components


def _backward_batch(states: list[_ExampleState], gate_mean: np.ndarray, model: MoeModel) -> None:
    cfg = model.config
    n = len(states)
    # d total / d gate_mean from the regularizer, shared by every example
    d_gate_reg = cfg.alpha * cfg.gamma * 2.0 * (gate_mean - model.prev_gate_outputs) / n
    for s in states:
        d_fused = nn.cross_entropy_backward(s.fused, s.target, upstream=(1.0 - cfg.alpha) / n)
        d_gate = s.matrix @ d_fused
        d_matrix = np.outer(s.gate, d_fused)
        d_gate += (cfg.alpha / n) * s.expert_ce
        for i in range(N_EXPERTS):
            d_matrix[i] += nn.cross_entropy_backward(
                s.matrix[i], s.target, upstream=(cfg.alpha / n) * s.gate[i]
            )
        d_gate += d_gate_reg
        d_enhanced = np.zeros((N_EXPERTS, cfg.d))
        for i in range(N_EXPERTS):
            d_enhanced[i] += _expert_backward(d_matrix[i], s.experts[i], i, model)
        d_enhanced += _gate_backward(d_gate, s.gate, s.gate_cache, model)
        _mhsa_backward(d_enhanced, s.mhsa, model)


def loss_and_grads(batch: Batch, model: MoeModel) -> tuple[float, dict[str, float]]:
    """Composite loss plus a full backward pass into the grad buffers.

    Zeroes all grads first and does not touch parameter values or the gate
    snapshot; this is the exact gradient computation train_step descends on,
    exposed for gradient checking.
    """
    if len(batch) == 0:
        raise EmptyBatch("loss_and_grads requires a non-empty batch")
    model.zero_grads()
    states = [_forward_example(b, y, model) for b, y in zip(batch.bundles, batch.labels)]
    total, components, gate_mean = _loss_components(states, model)
    _backward_batch(states, gate_mean, model)
    return total, components


def train_step(batch: Batch, model: MoeModel) -> dict[str, float]:
    """One gradient-descent step on the composite loss.

    Updates every parameter in place by value -= eta * grad, then refreshes
    the gate snapshot with the current batch-mean gate vector (detached).
    A non-finite loss aborts before any mutation. The returned components
    include "gate_drift", the distance between the new batch-mean gate
    vector and the previous snapshot.
    """
    if len(batch) == 0:
        raise EmptyBatch("train_step requires a non-empty batch")
    cfg = model.config
    model.zero_grads()
    states = [_forward_example(b, y, model) for b, y in zip(batch.bundles, batch.labels)]
    total, components, gate_mean = _loss_components(states, model)
    if not np.isfinite(total):
        raise NonFiniteLoss(f"loss is not finite: {components}")
    _backward_batch(states, gate_mean, model)
    for p in model.params.values():
        p.step(cfg.eta)
    drift = float(np.linalg.norm(gate_mean - model.prev_gate_outputs))
    model.prev_gate_outputs = gate_mean.copy()
    components["gate_drift"] = drift
    return components


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    valid_loss: float | None
    valid_f1: float | None


@dataclass
class TrainHistory:
    epochs: list[EpochMetrics] = field(default_factory=list)
    gate_drift: list[float] = field(default_factory=list)
    best_epoch: int | None = None


def _binary_f1(predictions: Sequence[int], labels: Sequence[int]) -> float:
    tp = sum(1 for p, y in zip(predictions, labels) if p == 1 and y == 1)
    fp = sum(1 for p, y in zip(predictions, labels) if p == 1 and y == 0)
    fn = sum(1 for p, y in zip(predictions, labels) if p == 0 and y == 1)
    if 2 * tp + fp + fn == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


def fit(
    train: Sequence[Batch], valid: Sequence[Batch], config: MoeConfig
) -> tuple[MoeModel, TrainHistory]:
    """Train from a seeded initialization; keep the best-validation-F1 model.

    Ties in validation F1 keep the earlier epoch. With no validation data
    the final model is returned. epochs=0 returns the untouched
    initialization.
    """
    if not train or all(len(b) == 0 for b in train):
        raise EmptyBatch("fit requires non-empty training data")
    model = init_model(config)
    history = TrainHistory()
    has_valid = any(len(b) > 0 for b in valid)
    best_f1 = -1.0
    best_model: MoeModel | None = None

    for epoch in range(config.epochs):
        epoch_loss = 0.0
        n_examples = 0
        for batch_index, batch in enumerate(train):
            if len(batch) == 0:
                continue
            try:
                components = train_step(batch, model)
            except NonFiniteLoss as exc:
                raise NonFiniteLoss(f"epoch {epoch}, batch {batch_index}: {exc}") from exc
            history.gate_drift.append(components["gate_drift"])
            epoch_loss += components["total"] * len(batch)
            n_examples += len(batch)
        valid_loss = None
        valid_f1 = None
        if has_valid:
            losses = [loss_total(b, model)[0] * len(b) for b in valid if len(b) > 0]
            n_valid = sum(len(b) for b in valid)
            valid_loss = sum(losses) / n_valid
            preds, labels = [], []
            for b in valid:
                for bundle, y in zip(b.bundles, b.labels):
                    preds.append(predict(bundle, model).label)
                    labels.append(y)
            valid_f1 = _binary_f1(preds, labels)
            if valid_f1 > best_f1:
                best_f1 = valid_f1
                best_model = model.clone()
                history.best_epoch = epoch
        history.epochs.append(
            EpochMetrics(
                epoch=epoch,
                train_loss=epoch_loss / n_examples,
                valid_loss=valid_loss,
                valid_f1=valid_f1,
            )
        )
    if has_valid and best_model is not None:
        return best_model, history
    return model, history


@dataclass
class Prediction:
    label: int
    fused: np.ndarray
    gate: np.ndarray
    expert_outputs: np.ndarray
    mode: str


def predict(
    bundle: FeatureBundle, model: MoeModel, mode: str = "weighted"
) -> Prediction:
    """Classify one bundle.

    "weighted" takes the argmax of the gate-weighted fusion; "selection"
    takes the argmax of the single expert the gate weights highest. A
    50/50 fused output resolves to vulnerable.
    """
    if mode not in ("weighted", "selection"):
        raise ValueError(f"mode must be 'weighted' or 'selection', got {mode!r}")
    enhanced, _ = _mhsa_forward(_as_tokens(bundle), model)
    gate, _ = _gate_forward(enhanced, model)
    rows = [
        _expert_forward(enhanced[i], i, model)[0] for i in range(N_EXPERTS)
    ]
    matrix = np.vstack(rows)
    fused = gate @ matrix
    if mode == "weighted":
        decided = fused
    else:
        decided = matrix[int(np.argmax(gate))]
    label = 1 if decided[VULNERABLE_INDEX] >= decided[SECURE_INDEX] else 0
    return Prediction(label=label, fused=fused, gate=gate, expert_outputs=matrix, mode=mode)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_model(model: MoeModel, path: str | Path) -> None:
    """Write a versioned JSON checkpoint (config, tensors, gate snapshot)."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "prev_gate_outputs": model.prev_gate_outputs.tolist(),
        "params": {
            name: {"shape": list(p.value.shape), "data": p.value.reshape(-1).tolist()}
            for name, p in model.params.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_model(path: str | Path) -> MoeModel:
    """Load a checkpoint, rejecting version or shape mismatches."""
    with open(path, encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"checkpoint is not valid JSON: {exc}") from exc
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {payload.get('version')!r}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    try:
        config = MoeConfig.from_dict(payload["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"bad checkpoint config: {exc}") from exc
    reference = init_model(config)
    stored = payload.get("params", {})
    if set(stored) != set(reference.params):
        missing = set(reference.params) - set(stored)
        extra = set(stored) - set(reference.params)
        raise CheckpointError(f"parameter set mismatch: missing {missing}, extra {extra}")
    params: dict[str, Param] = {}
    for name, ref in reference.params.items():
        entry = stored[name]
        shape = tuple(entry["shape"])
        if shape != ref.value.shape:
            raise CheckpointError(
                f"parameter {name!r} has shape {shape}, expected {ref.value.shape}"
            )
        values = np.asarray(entry["data"], dtype=np.float64)
        if values.size != ref.value.size:
            raise CheckpointError(f"parameter {name!r} has {values.size} values")
        params[name] = Param(values.reshape(shape))
    prev = np.asarray(payload.get("prev_gate_outputs"), dtype=np.float64)
    if prev.shape != (N_EXPERTS,):
        raise CheckpointError(f"gate snapshot has shape {prev.shape}")
    return MoeModel(config=config, params=params, prev_gate_outputs=prev)
