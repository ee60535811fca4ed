"""Minimal feed-forward network with exact manual backpropagation.

Architecture: rectifier MLP backbone feeding a linear prediction head.
The head weight is stored rows-as-classes (c x m), so logits = W @ z + b and
the per-sample head gradient flattens class-major: block i of the weight part
is (p_i - y_i) * z, followed by the bias part (p - y). That flattened vector
of length w_head = c*m + c is the unit all trajectory buffers store.

Forward/backward operate on batches (n, dim) internally; single samples are
n = 1. Log and division clamps use EPS = 1e-12 throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .errors import ValidationError

EPS = 1e-12

LossKind = Literal["ce", "dice"]

CHECKPOINT_TAG = "trajdist-checkpoint v1"


@dataclass
class ModelParams:
    """Backbone layers [(W (out,in), b (out,)), ...] plus linear head (c x m, c)."""

    backbone: list[tuple[np.ndarray, np.ndarray]]
    head_w: np.ndarray
    head_b: np.ndarray

    @property
    def input_dim(self) -> int:
        if self.backbone:
            return self.backbone[0][0].shape[1]
        return self.head_w.shape[1]

    @property
    def hidden_dims(self) -> tuple[int, ...]:
        return tuple(w.shape[0] for w, _ in self.backbone)

    @property
    def feature_dim(self) -> int:
        return self.head_w.shape[1]

    @property
    def n_classes(self) -> int:
        return self.head_w.shape[0]

    @property
    def head_dim(self) -> int:
        return self.head_w.size + self.head_b.size

    def head_flat(self) -> np.ndarray:
        return np.concatenate([self.head_w.ravel(), self.head_b])

    def set_head_flat(self, vec: np.ndarray) -> None:
        c, m = self.head_w.shape
        if vec.shape != (c * m + c,):
            raise ValidationError(f"head vector must have length {c * m + c}")
        self.head_w = vec[: c * m].reshape(c, m).copy()
        self.head_b = vec[c * m :].copy()

    def flatten(self) -> np.ndarray:
        parts = []
        for w, b in self.backbone:
            parts.append(w.ravel())
            parts.append(b)
        parts.append(self.head_w.ravel())
        parts.append(self.head_b)
        return np.concatenate(parts)

    def unflatten(self, vec: np.ndarray) -> "ModelParams":
        """New ModelParams with this one's shapes and `vec`'s values."""
        out_backbone = []
        i = 0
        for w, b in self.backbone:
            out_backbone.append(
                (
                    vec[i : i + w.size].reshape(w.shape).copy(),
                    vec[i + w.size : i + w.size + b.size].copy(),
                )
            )
            i += w.size + b.size
        c, m = self.head_w.shape
        hw = vec[i : i + c * m].reshape(c, m).copy()
        hb = vec[i + c * m : i + c * m + c].copy()
        if i + c * m + c != vec.size:
            raise ValidationError("parameter vector length mismatch")
        return ModelParams(backbone=out_backbone, head_w=hw, head_b=hb)

    def clone(self) -> "ModelParams":
        return ModelParams(
            backbone=[(w.copy(), b.copy()) for w, b in self.backbone],
            head_w=self.head_w.copy(),
            head_b=self.head_b.copy(),
        )


def init_params(
    input_dim: int,
    hidden_dims: Sequence[int],
    n_classes: int,
    rng: np.random.Generator,
) -> ModelParams:
    """He-style normal initialization; biases start at zero."""
    backbone = []
    fan_in = input_dim
    for h in hidden_dims:
        w = rng.normal(scale=np.sqrt(2.0 / fan_in), size=(h, fan_in))
        backbone.append((w, np.zeros(h)))
        fan_in = h
    head_w = rng.normal(scale=np.sqrt(1.0 / fan_in), size=(n_classes, fan_in))
    return ModelParams(backbone=backbone, head_w=head_w, head_b=np.zeros(n_classes))


@dataclass
class ForwardTrace:
    """Batched intermediates: pre-activations, activations, head input z,
    logits and softmax probabilities. All arrays are (n, dim)."""

    inputs: np.ndarray
    pre: list[np.ndarray] = field(default_factory=list)
    act: list[np.ndarray] = field(default_factory=list)
    z: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    logits: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    probs: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    @property
    def n(self) -> int:
        return self.inputs.shape[0]


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def forward(params: ModelParams, x) -> ForwardTrace:
    """Run the network; accepts one sample (d,) or a batch (n, d)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ValidationError(
            f"input width {x.shape} incompatible with model input {params.input_dim}"
        )
    if x.shape[0] == 0:
        raise ValidationError("empty batch")
    if not np.all(np.isfinite(x)):
        raise ValidationError("non-finite input")
    trace = ForwardTrace(inputs=x)
    a = x
    for w, b in params.backbone:
        pre = a @ w.T + b
        a = np.maximum(pre, 0.0)
        trace.pre.append(pre)
        trace.act.append(a)
    trace.z = a
    trace.logits = trace.z @ params.head_w.T + params.head_b
    trace.probs = softmax(trace.logits)
    return trace


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _check_dist(p: np.ndarray, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < -1e-12) or abs(float(np.sum(p)) - 1.0) > 1e-6:
        raise ValidationError(f"{name} is not a probability vector")
    return p


def ce_loss(p, y) -> float:
    """Cross-entropy -sum(y * log p), with log arguments clamped at EPS."""
    p = _check_dist(p, "p")
    y = _check_dist(y, "y")
    return float(-np.sum(y * np.log(np.maximum(p, EPS))))


def dice_loss(p, y) -> float:
    """Per-class overlap loss sum_i (1 - 2*y_i*p_i / (y_i + p_i)), denominators
    clamped below at EPS. Each term lies in [0, 1]."""
    p = _check_dist(p, "p")
    y = _check_dist(y, "y")
    denom = np.maximum(y + p, EPS)
    return float(np.sum(1.0 - 2.0 * y * p / denom))


def _dice_dp(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Elementwise derivative of the dice terms w.r.t. p, honoring the clamp."""
    s = y + p
    clamped = s < EPS
    grad = np.where(clamped, -2.0 * y / EPS, -2.0 * y * y / np.maximum(s, EPS) ** 2)
    return grad


def _softmax_vjp(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    """Pull a cotangent on probabilities back to logits: J^T dp with
    J = diag(p) - p p^T (symmetric)."""
    inner = np.sum(p * dp, axis=-1, keepdims=True)
    return p * (dp - inner)


def _dlogits(probs: np.ndarray, y: np.ndarray, loss_kind: LossKind) -> np.ndarray:
    """Per-sample gradient of the loss w.r.t. logits, no batch scaling."""
    if loss_kind == "ce":
        return probs - y
    if loss_kind == "dice":
        return _softmax_vjp(probs, _dice_dp(probs, y))
    raise ValidationError(f"unknown loss kind {loss_kind!r}")


def batch_loss(
    trace: ForwardTrace,
    y: np.ndarray,
    loss_kind: LossKind,
    sample_weight: np.ndarray | None = None,
) -> float:
    """Weighted mean per-sample loss over the batch (uniform by default)."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[None, :]
    p = trace.probs
    if loss_kind == "ce":
        per = -np.sum(y * np.log(np.maximum(p, EPS)), axis=1)
    elif loss_kind == "dice":
        per = np.sum(1.0 - 2.0 * y * p / np.maximum(y + p, EPS), axis=1)
    else:
        raise ValidationError(f"unknown loss kind {loss_kind!r}")
    if sample_weight is None:
        return float(np.mean(per))
    return float(np.sum(per * sample_weight) / np.sum(sample_weight))


@dataclass
class Gradients:
    """Gradient blocks mirroring ModelParams' layout."""

    backbone: list[tuple[np.ndarray, np.ndarray]]
    head_w: np.ndarray
    head_b: np.ndarray

    def head_flat(self) -> np.ndarray:
        return np.concatenate([self.head_w.ravel(), self.head_b])

    def flatten(self) -> np.ndarray:
        parts = []
        for w, b in self.backbone:
            parts.append(w.ravel())
            parts.append(b)
        parts.append(self.head_w.ravel())
        parts.append(self.head_b)
        return np.concatenate(parts)

    def add_scaled(self, other: "Gradients", scale: float) -> None:
        for (w, b), (ow, ob) in zip(self.backbone, other.backbone):
            w += scale * ow
            b += scale * ob
        self.head_w += scale * other.head_w
        self.head_b += scale * other.head_b

    @staticmethod
    def zeros_like(params: ModelParams) -> "Gradients":
        return Gradients(
            backbone=[(np.zeros_like(w), np.zeros_like(b)) for w, b in params.backbone],
            head_w=np.zeros_like(params.head_w),
            head_b=np.zeros_like(params.head_b),
        )


def backbone_backward(
    params: ModelParams, trace: ForwardTrace, dz: np.ndarray
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Backpropagate a cotangent on z (n, m) through the backbone, returning
    per-layer (dW, db) summed over the batch."""
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(params.backbone)
    d = dz
    for l in range(len(params.backbone) - 1, -1, -1):
        w, _ = params.backbone[l]
        d = d * (trace.pre[l] > 0.0)
        below = trace.act[l - 1] if l > 0 else trace.inputs
        grads[l] = (d.T @ below, d.sum(axis=0))
        d = d @ w
    return grads


def backward(
    params: ModelParams,
    trace: ForwardTrace,
    y: np.ndarray,
    loss_kind: LossKind = "ce",
    sample_weight: np.ndarray | None = None,
) -> Gradients:
    """Exact gradient of the (weighted) batch-mean loss w.r.t. all parameters."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[None, :]
    if y.shape != trace.probs.shape:
        raise ValidationError(f"label shape {y.shape} mismatches trace {trace.probs.shape}")
    if sample_weight is None:
        du = _dlogits(trace.probs, y, loss_kind) / trace.n
    else:
        scale = sample_weight[:, None] / np.sum(sample_weight)
        du = _dlogits(trace.probs, y, loss_kind) * scale
    head_w_grad = du.T @ trace.z
    head_b_grad = du.sum(axis=0)
    dz = du @ params.head_w
    return Gradients(
        backbone=backbone_backward(params, trace, dz),
        head_w=head_w_grad,
        head_b=head_b_grad,
    )


@dataclass(frozen=True)
class PerSampleHeadGradient:
    """Flattened head gradient of one sample plus its provenance tags."""

    vector: np.ndarray
    sample_id: int
    domain: str = ""
    class_id: int = -1


def head_gradient_matrix(
    trace: ForwardTrace, y: np.ndarray, loss_kind: LossKind = "ce"
) -> np.ndarray:
    """Per-sample flattened head gradients, rows-as-samples (n, w_head).

    Closed form: for CE, row i is vec(outer(p_i - y_i, z_i)) ++ (p_i - y_i).
    """
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[None, :]
    du = _dlogits(trace.probs, y, loss_kind)
    wpart = np.einsum("nc,nm->ncm", du, trace.z).reshape(trace.n, -1)
    return np.concatenate([wpart, du], axis=1)


def per_sample_head_gradients(
    params: ModelParams,
    batch,
    labels: np.ndarray,
    loss_kind: LossKind = "ce",
) -> list[PerSampleHeadGradient]:
    """One flattened head gradient per sample; their mean equals the batch
    head gradient from `backward` on the mean loss."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 1:
        batch = batch[None, :]
    if batch.shape[0] == 0:
        raise ValidationError("empty batch")
    trace = forward(params, batch)
    mat = head_gradient_matrix(trace, labels, loss_kind)
    return [PerSampleHeadGradient(vector=mat[i], sample_id=i) for i in range(len(mat))]


def ce_factorization_check(params: ModelParams, x) -> tuple[float, float]:
    """Dual-path evaluation of the head-gradient magnitude identity for a
    single sample with the uniform label.

    lhs sums actual backprop head-weight row norms; rhs evaluates the closed
    form (1/c) * sum_i |1 - c*p_i| * ||z||. Exact identity for one sample.
    """
    trace = forward(params, x)
    if trace.n != 1:
        raise ValidationError("single sample required")
    c = params.n_classes
    y = np.full((1, c), 1.0 / c)
    grads = backward(params, trace, y, "ce")
    lhs = float(np.sum(np.linalg.norm(grads.head_w, axis=1)))
    p = trace.probs[0]
    z_norm = float(np.linalg.norm(trace.z[0]))
    rhs = float(np.sum(np.abs(1.0 - c * p)) / c * z_norm)
    return lhs, rhs


def save_checkpoint(params: ModelParams, path) -> None:
    """Write the versioned text checkpoint; floats use repr for bit-exact
    round-trips."""
    lines = [CHECKPOINT_TAG]
    lines.append(f"input_dim {params.input_dim}")
    lines.append("hidden " + " ".join(str(h) for h in params.hidden_dims))
    lines.append(f"classes {params.n_classes}")
    for i, (w, b) in enumerate(params.backbone):
        lines.append(f"backbone_weight {i} {w.shape[0]} {w.shape[1]}")
        for row in w:
            lines.append(" ".join(repr(float(v)) for v in row))
        lines.append(f"backbone_bias {i} {b.shape[0]}")
        lines.append(" ".join(repr(float(v)) for v in b))
    lines.append(f"head_weight {params.head_w.shape[0]} {params.head_w.shape[1]}")
    for row in params.head_w:
        lines.append(" ".join(repr(float(v)) for v in row))
    lines.append(f"head_bias {params.head_b.shape[0]}")
    lines.append(" ".join(repr(float(v)) for v in params.head_b))
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> ModelParams:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CHECKPOINT_TAG:
        raise ValidationError(f"not a recognized checkpoint: {path}")
    idx = 1

    def take() -> str:
        nonlocal idx
        line = lines[idx]
        idx += 1
        return line

    input_dim = int(take().split()[1])
    hidden = [int(t) for t in take().split()[1:]]
    n_classes = int(take().split()[1])
    backbone = []
    for i, _h in enumerate(hidden):
        tag, li, rows, cols = take().split()
        assert tag == "backbone_weight" and int(li) == i
        w = np.array(
            [[float(v) for v in take().split()] for _ in range(int(rows))]
        ).reshape(int(rows), int(cols))
        tag, li, blen = take().split()
        assert tag == "backbone_bias" and int(li) == i
        b = np.array([float(v) for v in take().split()])
        assert b.shape[0] == int(blen)
        backbone.append((w, b))
    tag, rows, cols = take().split()
    assert tag == "head_weight"
    head_w = np.array(
        [[float(v) for v in take().split()] for _ in range(int(rows))]
    ).reshape(int(rows), int(cols))
    tag, blen = take().split()
    assert tag == "head_bias"
    head_b = np.array([float(v) for v in take().split()])
    params = ModelParams(backbone=backbone, head_w=head_w, head_b=head_b)
    if params.input_dim != input_dim or params.n_classes != n_classes:
        raise ValidationError("checkpoint header inconsistent with tensors")
    return params
