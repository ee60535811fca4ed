"""Gradient buffers, gradient statistics, subspace projection, and the
statistics-matching penalty with its exact gradient.

Buffered gradients are flattened head gradients (length w_head). A full
buffer is stacked columns-as-gradients into a w_head x n matrix, decomposed,
and the dominant left singular vectors retained by Frobenius energy become an
orthonormal projector basis.

The penalty compares per-coordinate mean/variance of projected gradients
between a frozen teacher group and a live student group. Because per-sample
head gradients have a closed form in (p, z), the penalty is an explicit
first-order function of network outputs; its gradient w.r.t. all parameters
is computed by one extra reverse pass per group with the teacher statistics
and projector held constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from . import linalg, net
from .errors import DegenerateInputError, NotReadyError, ValidationError

TRAJECTORY_LOG_SCHEMA = "trajdist-log/1"


class BufferGroup(str, Enum):
    SOURCE_DOMAIN = "source_domain"
    ANCHOR_AVERAGE = "anchor_average"
    HISTORICAL = "historical"


@dataclass
class GradientBuffer:
    """Fixed-capacity FIFO of equal-length gradient vectors for one group."""

    group: BufferGroup
    capacity: int
    entries: list[np.ndarray] = field(default_factory=list)

    @property
    def fill(self) -> int:
        return len(self.entries)

    @property
    def full(self) -> bool:
        return self.fill >= self.capacity

    def push(self, g: np.ndarray) -> None:
        g = linalg.as_vector(g, "gradient")
        if self.entries and g.shape != self.entries[0].shape:
            raise ValidationError(
                f"gradient length {g.shape[0]} mismatches buffer {self.entries[0].shape[0]}"
            )
        self.entries.append(g.copy())
        if len(self.entries) > self.capacity:
            self.entries.pop(0)

    def clear(self) -> None:
        self.entries.clear()

    def stacked(self) -> np.ndarray:
        """Columns-as-gradients matrix (w_head x fill)."""
        if not self.entries:
            raise DegenerateInputError("empty buffer")
        return np.column_stack(self.entries)


@dataclass(frozen=True)
class GradientStats:
    """Per-coordinate mean and unbiased variance of a gradient collection."""

    mean: np.ndarray
    variance: np.ndarray
    n: int


def stats(gradients: Sequence[np.ndarray] | np.ndarray) -> GradientStats:
    """Mean and unbiased (n-1 divisor) per-coordinate variance.

    Accepts a sequence of vectors or a rows-as-samples matrix. With a single
    sample the variance is zero by convention.
    """
    if isinstance(gradients, np.ndarray) and gradients.ndim == 2:
        mat = gradients
    else:
        if len(gradients) == 0:
            raise ValidationError("stats requires at least one gradient")
        mat = np.vstack([linalg.as_vector(g) for g in gradients])
    if mat.shape[0] == 0:
        raise ValidationError("stats requires at least one gradient")
    n = mat.shape[0]
    mean = mat.mean(axis=0)
    if n == 1:
        variance = np.zeros_like(mean)
    else:
        centered = mat - mean
        variance = np.sum(centered * centered, axis=0) / (n - 1)
    return GradientStats(mean=mean, variance=variance, n=n)


@dataclass(frozen=True)
class Projector:
    """Orthonormal basis of a dominant gradient subspace plus build metadata."""

    basis: np.ndarray  # w_head x r, orthonormal columns
    rank: int
    group: BufferGroup
    build_iteration: int
    energy_ratio: float

    def apply(self, g: np.ndarray) -> np.ndarray:
        """Project one vector (w,) or a rows-as-samples matrix (n, w)."""
        if g.ndim == 1:
            return self.basis @ (self.basis.T @ g)
        return (g @ self.basis) @ self.basis.T


def build_projector(
    buffer: GradientBuffer, tau: float, build_iteration: int = 0
) -> Projector:
    """SVD the full buffer and retain the top-r left singular vectors by the
    tau energy criterion. Caller clears the buffer afterwards."""
    if not buffer.full:
        raise NotReadyError(
            f"buffer {buffer.group.value} has {buffer.fill}/{buffer.capacity} entries"
        )
    g = buffer.stacked()
    if not np.any(g):
        raise DegenerateInputError("all-zero gradient buffer")
    res = linalg.svd(g)
    r = linalg.select_rank(res.sigma, tau)
    energy = float(np.sum(res.sigma[:r] ** 2) / np.sum(res.sigma**2))
    return Projector(
        basis=res.u[:, :r].copy(),
        rank=r,
        group=buffer.group,
        build_iteration=build_iteration,
        energy_ratio=energy,
    )


def project(projector: Projector, g: np.ndarray) -> np.ndarray:
    g = linalg.as_vector(g, "gradient")
    if g.shape[0] != projector.basis.shape[0]:
        raise ValidationError(
            f"gradient length {g.shape[0]} mismatches projector {projector.basis.shape[0]}"
        )
    return projector.apply(g)


def _pair_penalty(teacher: GradientStats, student: GradientStats) -> float:
    dm = teacher.mean - student.mean
    dv = teacher.variance - student.variance
    return float(dm @ dm + dv @ dv)


def distillation_loss(
    src: GradientStats,
    tgt: GradientStats,
    anchor: GradientStats | None,
    new: Sequence[GradientStats],
    lam: float,
) -> float:
    """Weighted statistics-matching penalty.

    lam * { ||m_s - m_t||^2 + ||v_s - v_t||^2
            + (1/n_new) * sum_i (||m_A - m_Ni||^2 + ||v_A - v_Ni||^2) }

    With an empty new-class list the class term is omitted.
    """
    total = _pair_penalty(src, tgt)
    if new:
        if anchor is None:
            raise ValidationError("anchor stats required when new-class stats present")
        total += sum(_pair_penalty(anchor, s) for s in new) / len(new)
    return lam * total


@dataclass
class PenaltyResult:
    """Penalty value, its exact parameter gradient, and term breakdown."""

    value: float
    domain_term: float
    class_term: float
    grad: net.Gradients
    warmup: bool = False


def _stat_cotangents(
    teacher: GradientStats, projected: np.ndarray, weight: float
) -> tuple[np.ndarray, float]:
    """Cotangent d(penalty)/d(projected gradient) per sample, plus the term value.

    For mean m and unbiased variance v of rows g_i:
      d/dg_i = (2/n)(m - m_t) + (4/(n-1)) (v - v_t) * (g_i - m)
    (the variance path vanishes for n = 1 where v is identically zero).
    """
    n = projected.shape[0]
    st = stats(projected)
    dm = st.mean - teacher.mean
    dv = st.variance - teacher.variance
    value = weight * float(dm @ dm + dv @ dv)
    cot = np.tile((2.0 / n) * dm, (n, 1))
    if n > 1:
        cot += (4.0 / (n - 1)) * dv * (projected - st.mean)
    return weight * cot, value


def _accumulate_group_grad(
    params: net.ModelParams,
    trace: net.ForwardTrace,
    y: np.ndarray,
    raw: np.ndarray,
    cot: np.ndarray,
    total: net.Gradients,
) -> None:
    """Push per-sample cotangents on head-gradient vectors back to parameters.

    Writing phi = sum_i s_i . g_i(theta) with s_i fixed, each s_i splits into a
    class-by-feature block S_i and a bias part s_b; then
      dphi/dp = S_i z + s_b            (through g's explicit p dependence)
      dphi/du = softmax-vjp of dphi/dp
      dphi/dz = S_i^T (p - y) + W_head^T dphi/du
    and dphi/dz backpropagates through the backbone.
    """
    n, c, m = trace.n, params.n_classes, params.feature_dim
    smat = cot[:, : c * m].reshape(n, c, m)
    sbias = cot[:, c * m :]
    du_g = raw[:, c * m :]  # rows are (p - y) for ce-style head gradients
    w = np.einsum("ncm,nm->nc", smat, trace.z) + sbias
    du = net._softmax_vjp(trace.probs, w)
    total.head_w += du.T @ trace.z
    total.head_b += du.sum(axis=0)
    dz = np.einsum("ncm,nc->nm", smat, du_g) + du @ params.head_w
    for (gw, gb), (aw, ab) in zip(
        total.backbone, net.backbone_backward(params, trace, dz)
    ):
        gw += aw
        gb += ab


def distillation_grad(
    params: net.ModelParams,
    source_stats: GradientStats | None,
    anchor_stats: GradientStats | None,
    target_batch: tuple[np.ndarray, np.ndarray] | None,
    new_class_batches: Sequence[tuple[np.ndarray, np.ndarray]],
    domain_projector: Projector | None,
    class_projector: Projector | None,
    lam: float,
    class_collection: str = "class_mean",
) -> PenaltyResult:
    """Exact gradient of the statistics-matching penalty w.r.t. all parameters.

    Teacher statistics and projectors are constants. Batches are (features,
    one-hot labels) pairs; new_class_batches holds the per-new-class subsets.
    Passing None for a projector matches statistics of unprojected gradients.
    Returns a zero gradient flagged warmup when teachers are absent or lam==0.

    The domain term compares per-sample statistics of the target batch. For
    the class term, `class_collection` picks the student collection: the
    batch's class-mean gradient ("class_mean", one object whose variance is
    zero by the n=1 convention) or the raw per-sample set ("per_sample").
    """
    grad = net.Gradients.zeros_like(params)
    domain_ready = source_stats is not None and target_batch is not None
    class_ready = anchor_stats is not None and len(new_class_batches) > 0
    if lam == 0.0 or not (domain_ready or class_ready):
        return PenaltyResult(0.0, 0.0, 0.0, grad, warmup=True)
    if class_collection not in ("class_mean", "per_sample"):
        raise ValidationError(f"unknown class_collection {class_collection!r}")

    domain_term = 0.0
    class_term = 0.0

    def process(batch, teacher, projector, weight, reduce_mean):
        x, y = batch
        trace = net.forward(params, x)
        raw = net.head_gradient_matrix(trace, y, "ce")
        projected = projector.apply(raw) if projector is not None else raw
        if reduce_mean:
            n = projected.shape[0]
            collection = projected.mean(axis=0, keepdims=True)
            cot_mean, value = _stat_cotangents(teacher, collection, weight)
            cot = np.tile(cot_mean / n, (n, 1))
        else:
            cot, value = _stat_cotangents(teacher, projected, weight)
        cot = projector.apply(cot) if projector is not None else cot
        _accumulate_group_grad(params, trace, y, raw, lam * cot, grad)
        return value

    if domain_ready:
        domain_term = process(target_batch, source_stats, domain_projector, 1.0, False)
    if class_ready:
        w = 1.0 / len(new_class_batches)
        mean_mode = class_collection == "class_mean"
        for batch in new_class_batches:
            if batch[0].shape[0] == 0:
                continue
            class_term += process(batch, anchor_stats, class_projector, w, mean_mode)

    return PenaltyResult(
        value=lam * (domain_term + class_term),
        domain_term=lam * domain_term,
        class_term=lam * class_term,
        grad=grad,
        warmup=False,
    )


def penalty_value(
    params: net.ModelParams,
    source_stats: GradientStats | None,
    anchor_stats: GradientStats | None,
    target_batch: tuple[np.ndarray, np.ndarray] | None,
    new_class_batches: Sequence[tuple[np.ndarray, np.ndarray]],
    domain_projector: Projector | None,
    class_projector: Projector | None,
    lam: float,
    class_collection: str = "class_mean",
) -> float:
    """Penalty evaluated from scratch (used by tests as the finite-difference
    target; shares no gradient code with distillation_grad)."""
    total = 0.0
    if source_stats is not None and target_batch is not None:
        x, y = target_batch
        raw = net.head_gradient_matrix(net.forward(params, x), y, "ce")
        proj = domain_projector.apply(raw) if domain_projector is not None else raw
        total += _pair_penalty(source_stats, stats(proj))
    if anchor_stats is not None and new_class_batches:
        w = 1.0 / len(new_class_batches)
        for x, y in new_class_batches:
            if x.shape[0] == 0:
                continue
            raw = net.head_gradient_matrix(net.forward(params, x), y, "ce")
            proj = class_projector.apply(raw) if class_projector is not None else raw
            if class_collection == "class_mean":
                proj = proj.mean(axis=0, keepdims=True)
            total += w * _pair_penalty(anchor_stats, stats(proj))
    return lam * total


def first_order_descent_check(
    params: net.ModelParams,
    anchor_batches: Sequence[tuple[np.ndarray, np.ndarray]],
    new_batch: tuple[np.ndarray, np.ndarray],
    mu: float = 1e-4,
    loss_kind: net.LossKind = "ce",
) -> tuple[float, float]:
    """First-order prediction vs. actual change of the new-class loss under a
    combined anchor+new descent step.

    The step direction is sum_i grad L_anchor_i + grad L_new; the predicted
    change is -mu * (||grad L_new||^2 + sum_i <grad L_new, grad L_anchor_i>).
    Returns (predicted_drop, actual_drop).
    """
    xq, yq = new_batch
    trace_q = net.forward(params, xq)
    grad_q = net.backward(params, trace_q, yq, loss_kind).flatten()
    step = grad_q.copy()
    inner = float(grad_q @ grad_q)
    for xa, ya in anchor_batches:
        ga = net.backward(params, net.forward(params, xa), ya, loss_kind).flatten()
        step += ga
        inner += float(grad_q @ ga)
    predicted = -mu * inner
    moved = params.unflatten(params.flatten() - mu * step)
    actual = net.batch_loss(net.forward(moved, xq), yq, loss_kind) - net.batch_loss(
        trace_q, yq, loss_kind
    )
    return predicted, actual


@dataclass
class TrajectoryRecord:
    """One training iteration's log line (JSON-serializable dict via to_dict)."""

    iteration: int
    erm_loss: float
    penalty: float
    penalty_domain: float
    penalty_class: float
    rank_source: int | None
    rank_anchor: int | None
    rank_historical: int | None
    fill_source: int
    fill_anchor: int
    fill_historical: int
    grad_norm_head: float
    grad_norm_backbone: float

    def to_dict(self) -> dict:
        return {"schema": TRAJECTORY_LOG_SCHEMA, **self.__dict__}
