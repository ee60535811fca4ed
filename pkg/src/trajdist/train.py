"""End-to-end training loop with dual-stream gradient-statistics distillation.

Each iteration: sample one source batch and one target batch (support plus
pseudo-labeled unlabeled samples), push the source-domain and anchor-average
head gradients into their buffers, rebuild projectors and freeze teacher
statistics whenever both buffers fill (clearing them afterwards), add the
statistics-matching penalty gradient to the supervised gradient, renew the
historical subspace at its own cadence, and take a projected optimizer step
on the head with plain SGD on the backbone.

Variants toggle individual terms:
  sup_only         supervised loss on the target support set alone
  multi_task       joint supervised loss on both domains, nothing else
  no_cross_domain  drops the domain statistics term
  no_cross_class   drops the class statistics term
  no_historical    plain SGD steps (no historical projection)
  no_projection    matches statistics of unprojected gradients
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics, net, optimizer, taxdata, trajectory
from .config import ExperimentConfig
from .errors import DegenerateInputError, ValidationError
from .metrics import MetricsReport
from .trajectory import BufferGroup, GradientBuffer, TrajectoryRecord

logger = logging.getLogger(__name__)

DISTILL_VARIANTS = (
    "full",
    "no_cross_domain",
    "no_cross_class",
    "no_historical",
    "no_projection",
)


@dataclass
class TrainResult:
    params: net.ModelParams
    records: list[TrajectoryRecord]
    report: MetricsReport
    dataset: taxdata.Dataset


def _anchor_average_entry(
    grad_rows: np.ndarray, labels: np.ndarray, anchors: tuple[int, ...]
) -> np.ndarray | None:
    """Mean over anchor classes of the class-mean head gradients in a batch;
    classes absent from the batch are skipped."""
    class_means = []
    for c in anchors:
        mask = labels == c
        if np.any(mask):
            class_means.append(grad_rows[mask].mean(axis=0))
    if not class_means:
        return None
    return np.mean(class_means, axis=0)


def train(config: ExperimentConfig, dataset: taxdata.Dataset | None = None) -> TrainResult:
    """Run one experiment; deterministic in (config, seed)."""
    t_start = time.perf_counter()
    if dataset is None:
        dataset = taxdata.generate(config.resolved_benchmark())
    tax = dataset.taxonomy
    n_classes = len(tax.target_classes)
    if tuple(tax.target_classes) != tuple(range(n_classes)):
        raise ValidationError("target class ids must be contiguous from 0")

    rng = np.random.default_rng(config.seed)
    params = net.init_params(
        dataset.config.feature_dim, config.hidden_dims, n_classes, rng
    )

    src_x, src_y = dataset.select(domain="source", split="train")
    sup_x, sup_y = dataset.select(domain="target", split="support")
    unl_x, _ = dataset.select(domain="target", split="unlabeled")

    variant = config.variant
    distill = variant in DISTILL_VARIANTS
    use_domain_term = distill and variant != "no_cross_domain"
    use_class_term = distill and variant != "no_cross_class"
    use_projection = distill and variant != "no_projection"
    # Projected head steps run for every distillation variant except the
    # ablation that removes them.
    historical = distill and variant != "no_historical"

    buf_src = GradientBuffer(BufferGroup.SOURCE_DOMAIN, capacity=config.buffer_k)
    buf_anchor = GradientBuffer(BufferGroup.ANCHOR_AVERAGE, capacity=config.buffer_k)
    opt = optimizer.make_state(config.eta, config.kappa, config.tau, config.buffer_t)
    dom_proj: trajectory.Projector | None = None
    cls_proj: trajectory.Projector | None = None
    src_stats: trajectory.GradientStats | None = None
    anchor_stats: trajectory.GradientStats | None = None

    eta = config.eta
    decay_iteration = (
        int(round(config.lr_decay_at * config.iterations))
        if config.lr_decay_factor != 1.0
        else 0
    )
    n_sup = int(round(config.batch_size * config.support_fraction))
    n_unl = config.batch_size - n_sup
    anchor_ids = tax.anchors if config.pseudo_anchor_only else None

    records: list[TrajectoryRecord] = []
    final_erm = 0.0
    final_penalty = 0.0

    for it in range(1, config.iterations + 1):
        # --- sample batches ---
        stat_x = np.zeros((0, dataset.features.shape[1]))
        stat_y = np.zeros(0, dtype=np.int64)
        n_pseudo = 0
        if variant == "sup_only":
            idx = rng.integers(0, len(sup_x), size=config.batch_size)
            union_x = sup_x[idx]
            union_y_int = sup_y[idx]
            n_source = 0
        else:
            si = rng.integers(0, len(src_x), size=config.batch_size)
            ti_sup = rng.integers(0, len(sup_x), size=n_sup)
            pseudo_live = len(unl_x) > 0 and it > config.pseudo_warmup
            if pseudo_live:
                # one labeling pass over the unlabeled pool per iteration
                if config.pseudo_balance:
                    unl_labels = taxdata.pseudo_label_balanced(
                        params, unl_x, config.pseudo_threshold,
                        sinkhorn_steps=config.pseudo_sinkhorn,
                    )
                else:
                    unl_labels = taxdata.pseudo_label(
                        params, unl_x, config.pseudo_threshold, anchor_ids
                    )
            if pseudo_live and n_unl > 0:
                ti_unl = rng.integers(0, len(unl_x), size=n_unl)
                pseudo = unl_labels[ti_unl]
                keep = pseudo != taxdata.ABSTAIN
                unl_bx, unl_by = unl_x[ti_unl][keep], pseudo[keep]
            else:
                unl_bx = np.zeros((0, dataset.features.shape[1]))
                unl_by = np.zeros(0, dtype=np.int64)
            # ERM sees the support-heavy target mix (pseudo rows weighted by
            # pseudo_erm_weight); the gradient-statistics stream gets its own
            # uniform draw from the whole target train pool so the domain
            # statistics represent the target distribution rather than the
            # oversampled support points.
            erm_tx = np.vstack([sup_x[ti_sup], unl_bx])
            erm_ty = np.concatenate([sup_y[ti_sup], unl_by])
            union_x = np.vstack([src_x[si], erm_tx])
            union_y_int = np.concatenate([src_y[si], erm_ty])
            n_source = config.batch_size
            n_pseudo = len(unl_by)
            if distill:
                # The statistics stream reuses the merged ERM target mix at
                # full weight (support plus pseudo-labeled rows).
                stat_x = erm_tx
                stat_y = erm_ty

        if it == decay_iteration:
            eta *= config.lr_decay_factor
            opt.eta = eta

        union_y = net.one_hot(union_y_int, n_classes)
        weights = np.ones(len(union_y_int))
        if config.new_class_weight != 1.0:
            weights *= np.where(
                np.isin(union_y_int, tax.new_classes), config.new_class_weight, 1.0
            )
        if variant != "sup_only" and n_pseudo > 0:
            weights[len(weights) - n_pseudo :] = config.pseudo_erm_weight
        trace = net.forward(params, union_x)
        erm_loss = net.batch_loss(trace, union_y, "ce", weights)
        if not np.isfinite(erm_loss):
            raise ValidationError(f"non-finite loss at iteration {it}")
        grads = net.backward(params, trace, union_y, "ce", weights)

        penalty = trajectory.PenaltyResult(
            0.0, 0.0, 0.0, net.Gradients.zeros_like(params), warmup=True
        )
        if distill:
            head_rows = net.head_gradient_matrix(trace, union_y, "ce")
            src_rows = head_rows[:n_source]
            # Individual source gradients keep the teacher's second moment on
            # the same per-sample scale the student batches are measured at;
            # batch-mean entries would shrink the teacher variance by the
            # batch size and make the variance gap unmatchable.
            for row in src_rows:
                buf_src.push(row)
            anchor_entry = _anchor_average_entry(
                src_rows, union_y_int[:n_source], tax.anchors
            )
            if anchor_entry is not None:
                buf_anchor.push(anchor_entry)

            if buf_src.full and buf_anchor.full:
                try:
                    if use_projection:
                        dom_proj = trajectory.build_projector(buf_src, config.tau, it)
                        cls_proj = trajectory.build_projector(buf_anchor, config.tau, it)
                        src_stats = trajectory.stats(dom_proj.apply(buf_src.stacked().T))
                        anchor_stats = trajectory.stats(
                            cls_proj.apply(buf_anchor.stacked().T)
                        )
                    else:
                        src_stats = trajectory.stats(buf_src.stacked().T)
                        anchor_stats = trajectory.stats(buf_anchor.stacked().T)
                except DegenerateInputError:
                    logger.warning("degenerate buffer at iteration %d; keeping teachers", it)
                buf_src.clear()
                buf_anchor.clear()

            tgt_y = net.one_hot(stat_y, n_classes)
            new_batches = [
                (stat_x[stat_y == c], tgt_y[stat_y == c]) for c in tax.new_classes
            ]
            penalty = trajectory.distillation_grad(
                params,
                src_stats if use_domain_term else None,
                anchor_stats if use_class_term else None,
                (stat_x, tgt_y) if use_domain_term else None,
                new_batches if use_class_term else [],
                dom_proj,
                cls_proj,
                config.lam,
            )
            # Stability clamp: the penalty is cubic in the per-sample gradient
            # magnitudes, so feedback through the parameter update can run
            # away; capping its contribution at a multiple of the supervised
            # gradient bounds the loop without touching the exact gradient.
            scale = 1.0
            if config.penalty_clip_ratio > 0.0:
                pen_norm = float(np.linalg.norm(penalty.grad.flatten()))
                erm_norm = float(np.linalg.norm(grads.flatten()))
                cap = config.penalty_clip_ratio * erm_norm
                if pen_norm > cap and pen_norm > 0.0:
                    scale = cap / pen_norm
            grads.add_scaled(penalty.grad, scale)

        # --- optimizer phase ---
        if historical:
            optimizer.maybe_renew(opt)
            new_head = optimizer.step(opt, params.head_flat(), grads.head_flat())
            params.set_head_flat(new_head)
            for (w, b), (gw, gb) in zip(params.backbone, grads.backbone):
                w -= eta * gw
                b -= eta * gb
        else:
            for (w, b), (gw, gb) in zip(params.backbone, grads.backbone):
                w -= eta * gw
                b -= eta * gb
            params.head_w -= eta * grads.head_w
            params.head_b -= eta * grads.head_b

        final_erm = erm_loss
        final_penalty = penalty.value
        backbone_norm = float(
            np.sqrt(
                sum(float(np.sum(gw * gw)) + float(np.sum(gb * gb))
                    for gw, gb in grads.backbone)
            )
        )
        records.append(
            TrajectoryRecord(
                iteration=it,
                erm_loss=float(erm_loss),
                penalty=float(penalty.value),
                penalty_domain=float(penalty.domain_term),
                penalty_class=float(penalty.class_term),
                rank_source=dom_proj.rank if dom_proj else None,
                rank_anchor=cls_proj.rank if cls_proj else None,
                rank_historical=opt.projector.rank if opt.projector else None,
                fill_source=buf_src.fill,
                fill_anchor=buf_anchor.fill,
                fill_historical=opt.buffer.fill,
                grad_norm_head=float(np.linalg.norm(grads.head_flat())),
                grad_norm_backbone=backbone_norm,
            )
        )

    report = metrics.evaluate(params, dataset, variant=variant, seed=config.seed)
    report.final_erm_loss = float(final_erm)
    report.final_penalty = float(final_penalty)
    report.wall_clock_s = time.perf_counter() - t_start
    return TrainResult(params=params, records=records, report=report, dataset=dataset)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_run_outputs(result: TrainResult, out_dir: Path) -> dict[str, Path]:
    """Write the three per-run artifacts (metrics CSV+JSON, trajectory JSONL,
    checkpoint) atomically; returns their paths."""
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "metrics_csv": out_dir / "metrics.csv",
        "metrics_json": out_dir / "metrics.json",
        "log_jsonl": out_dir / "trajectory.jsonl",
        "checkpoint": out_dir / "model.ckpt",
    }
    header = ",".join(metrics.CSV_COLUMNS)
    row = ",".join(result.report.csv_row())
    _atomic_write(paths["metrics_csv"], header + "\n" + row + "\n")
    _atomic_write(
        paths["metrics_json"], json.dumps(result.report.to_dict(), indent=2) + "\n"
    )
    _atomic_write(
        paths["log_jsonl"],
        "\n".join(json.dumps(r.to_dict()) for r in result.records) + "\n",
    )
    tmp_ckpt = paths["checkpoint"].with_suffix(".ckpt.tmp")
    net.save_checkpoint(result.params, tmp_ckpt)
    os.replace(tmp_ckpt, paths["checkpoint"])
    return paths
