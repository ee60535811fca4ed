"""Confusion-matrix metrics on the target test split.

mAcc / mF1 macro-average per-class recall and F1 over the full target label
set; the starred variants restrict to the target-private new classes. All
scores are percentages. Classes absent from the test split are excluded from
macro means with a warning.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import net
from .errors import ValidationError
from .taxdata import Dataset

logger = logging.getLogger(__name__)

CSV_COLUMNS = (
    "variant",
    "seed",
    "shots",
    "mAcc",
    "mAcc_star",
    "mF1",
    "mF1_star",
    "final_erm_loss",
    "final_penalty",
    "wall_clock_s",
)


@dataclass
class MetricsReport:
    variant: str
    seed: int
    shots: int
    m_acc: float
    m_acc_star: float
    m_f1: float
    m_f1_star: float
    overall_acc: float
    per_class: dict[int, dict[str, float]] = field(default_factory=dict)
    final_erm_loss: float = 0.0
    final_penalty: float = 0.0
    wall_clock_s: float = 0.0

    def csv_row(self) -> list[str]:
        return [
            self.variant,
            str(self.seed),
            str(self.shots),
            repr(self.m_acc),
            repr(self.m_acc_star),
            repr(self.m_f1),
            repr(self.m_f1_star),
            repr(self.final_erm_loss),
            repr(self.final_penalty),
            f"{self.wall_clock_s:.3f}",
        ]

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "seed": self.seed,
            "shots": self.shots,
            "mAcc": self.m_acc,
            "mAcc_star": self.m_acc_star,
            "mF1": self.m_f1,
            "mF1_star": self.m_f1_star,
            "overall_acc": self.overall_acc,
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "final_erm_loss": self.final_erm_loss,
            "final_penalty": self.final_penalty,
            "wall_clock_s": self.wall_clock_s,
        }


def predict(params: net.ModelParams, x: np.ndarray) -> np.ndarray:
    """Argmax class predictions; ties break to the lowest class id."""
    return np.argmax(net.forward(params, x).probs, axis=1)


def confusion_matrix(
    y_true: np.ndarray, y_pred: np.ndarray, classes: tuple[int, ...]
) -> np.ndarray:
    index = {c: i for i, c in enumerate(classes)}
    cm = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        cm[index[int(t)], index[int(p)]] += 1
    return cm


def overall_accuracy(params: net.ModelParams, dataset: Dataset) -> float:
    """Plain accuracy on the target test split, in percent."""
    x, y = dataset.select(domain="target", split="test")
    if len(y) == 0:
        raise ValidationError("empty target test split")
    return float(np.mean(predict(params, x) == y) * 100.0)


def evaluate(
    params: net.ModelParams,
    dataset: Dataset,
    variant: str = "",
    seed: int = 0,
) -> MetricsReport:
    """Confusion-matrix metrics of a model on the target test split."""
    tax = dataset.taxonomy
    classes = tax.target_classes
    x, y = dataset.select(domain="target", split="test")
    if len(y) == 0:
        raise ValidationError("empty target test split")
    y_pred = predict(params, x)
    cm = confusion_matrix(y, y_pred, classes)

    per_class: dict[int, dict[str, float]] = {}
    accs, f1s, star_accs, star_f1s = [], [], [], []
    for i, c in enumerate(classes):
        support = int(cm[i].sum())
        if support == 0:
            logger.warning("class %d absent from test split; excluded from means", c)
            continue
        tp = float(cm[i, i])
        fn = float(cm[i].sum() - tp)
        fp = float(cm[:, i].sum() - tp)
        acc = 100.0 * tp / support
        f1 = 100.0 * (2 * tp / (2 * tp + fp + fn)) if (2 * tp + fp + fn) > 0 else 0.0
        per_class[c] = {"acc": acc, "f1": f1, "support": float(support)}
        accs.append(acc)
        f1s.append(f1)
        if c in tax.new_classes:
            star_accs.append(acc)
            star_f1s.append(f1)

    overall = float(np.mean(y_pred == y) * 100.0)
    return MetricsReport(
        variant=variant,
        seed=seed,
        shots=dataset.config.shots,
        m_acc=float(np.mean(accs)),
        m_acc_star=float(np.mean(star_accs)) if star_accs else 0.0,
        m_f1=float(np.mean(f1s)),
        m_f1_star=float(np.mean(star_f1s)) if star_f1s else 0.0,
        overall_acc=overall,
        per_class=per_class,
    )


def write_csv(path, reports: list[MetricsReport]) -> None:
    lines = [",".join(CSV_COLUMNS)]
    for r in reports:
        lines.append(",".join(r.csv_row()))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
