"""Monte-Carlo flatness probe.

For perturbation rate rho, draw directions uniformly on the unit sphere in
full parameter space and move to theta* = theta + delta * d where delta is
the positive root of ||theta + delta d||^2 = (1+rho)^2 ||theta||^2, i.e. the
norm constraint holds exactly per draw. The probe value at rho is the mean
test-accuracy change Acc(theta*) - Acc(theta).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import metrics, net
from .errors import ValidationError
from .taxdata import Dataset


@dataclass
class FlatnessProbeResult:
    rho_values: list[float]
    f_rho: list[float]  # mean accuracy gap per rho (percentage points)
    stderr: list[float]
    n_samples: int
    base_acc: float
    per_sample_gaps: list[list[float]]
    max_norm_violation: float

    def to_dict(self) -> dict:
        return {
            "schema": "trajdist-probe/1",
            "rho_values": self.rho_values,
            "f_rho": self.f_rho,
            "stderr": self.stderr,
            "n_samples": self.n_samples,
            "base_acc": self.base_acc,
            "per_sample_gaps": self.per_sample_gaps,
            "max_norm_violation": self.max_norm_violation,
        }


def perturbation_scale(theta: np.ndarray, direction: np.ndarray, rho: float) -> float:
    """Positive root of ||theta + delta d||^2 = (1+rho)^2 ||theta||^2.

    For rho > 0 the quadratic has exactly one positive root; rho = 0 returns
    delta = 0 (the unperturbed point)."""
    if rho < 0:
        raise ValidationError("rho must be >= 0")
    if rho == 0.0:
        return 0.0
    dot = float(theta @ direction)
    norm_sq = float(theta @ theta)
    c = ((1.0 + rho) ** 2 - 1.0) * norm_sq
    disc = dot * dot + c
    assert disc > 0.0, "positive root must exist for rho > 0"
    return -dot + float(np.sqrt(disc))


def flatness_probe(
    params: net.ModelParams,
    dataset: Dataset,
    rho_list: list[float],
    n_samples: int = 50,
    seed: int = 0,
    accuracy: str = "overall",
) -> FlatnessProbeResult:
    """`accuracy` picks the probed score: "overall" target-test accuracy
    (default) or "mean_class" per-class mean."""
    if n_samples < 1:
        raise ValidationError("n_samples must be >= 1")
    if accuracy == "overall":
        acc_fn = lambda p: metrics.overall_accuracy(p, dataset)  # noqa: E731
    elif accuracy == "mean_class":
        acc_fn = lambda p: metrics.evaluate(p, dataset).m_acc  # noqa: E731
    else:
        raise ValidationError(f"unknown accuracy kind {accuracy!r}")
    theta = params.flatten()
    base_norm = float(np.linalg.norm(theta))
    base_acc = acc_fn(params)
    rng = np.random.default_rng(seed)

    f_rho: list[float] = []
    stderr: list[float] = []
    gaps_all: list[list[float]] = []
    worst_violation = 0.0
    for rho in rho_list:
        gaps = []
        for _ in range(n_samples):
            d = rng.normal(size=theta.size)
            d /= np.linalg.norm(d)
            delta = perturbation_scale(theta, d, rho)
            theta_star = theta + delta * d
            target = (1.0 + rho) * base_norm
            violation = abs(float(np.linalg.norm(theta_star)) - target) / target
            worst_violation = max(worst_violation, violation)
            acc = acc_fn(params.unflatten(theta_star))
            gaps.append(acc - base_acc)
        arr = np.array(gaps)
        f_rho.append(float(arr.mean()))
        stderr.append(
            float(arr.std(ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else 0.0
        )
        gaps_all.append([float(g) for g in gaps])

    return FlatnessProbeResult(
        rho_values=[float(r) for r in rho_list],
        f_rho=f_rho,
        stderr=stderr,
        n_samples=n_samples,
        base_acc=base_acc,
        per_sample_gaps=gaps_all,
        max_norm_violation=worst_violation,
    )
