"""Synthetic benchmark with domain shift and mismatched label sets.

Source and target share anchor classes; the target additionally carries new
classes absent from the source label set. Features are class-conditional
Gaussians; target features are the same class-conditional law pushed through
a fixed invertible transform (rotation in the first two coordinates plus a
translation), so the domain shift is controlled and can be switched off.

Target training data is unlabeled except for a small support set: `shots`
labeled samples per new class (and optionally per anchor class). Generation
is a pure function of the config; identical configs give identical bytes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import net
from .errors import ValidationError

DATASET_TAG = "trajdist-dataset v1"

SPLITS = ("train", "test", "support", "unlabeled")
DOMAINS = ("source", "target")


@dataclass(frozen=True)
class TaxonomySpec:
    """Source/target label sets with derived anchor and new classes."""

    source_classes: tuple[int, ...]
    target_classes: tuple[int, ...]

    def __post_init__(self):
        if len(set(self.source_classes)) != len(self.source_classes):
            raise ValidationError("duplicate source class ids")
        if len(set(self.target_classes)) != len(self.target_classes):
            raise ValidationError("duplicate target class ids")
        if not self.anchors:
            raise ValidationError("label sets share no anchor classes")
        if not self.new_classes:
            raise ValidationError("target has no private classes")

    @property
    def anchors(self) -> tuple[int, ...]:
        src = set(self.source_classes)
        return tuple(c for c in self.target_classes if c in src)

    @property
    def new_classes(self) -> tuple[int, ...]:
        src = set(self.source_classes)
        return tuple(c for c in self.target_classes if c not in src)

    @property
    def n_new(self) -> int:
        return len(self.new_classes)


@dataclass(frozen=True)
class BenchmarkConfig:
    feature_dim: int = 16
    latent_dim: int = 8
    n_anchor_classes: int = 2
    n_new_classes: int = 2
    class_mean_scale: float = 1.6
    new_class_separation: float = 1.0
    modes_per_class: int = 3
    mode_spread: float = 1.25
    class_cov_scale: float = 0.25
    new_class_cov_scale: float = 0.25
    entangle: bool = True
    entangle_gain: float = 2.5
    rotation_deg: float = 30.0
    translation: float = 0.1
    train_per_class: int = 200
    test_per_class: int = 50
    shots: int = 5
    shots_anchor: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.shots < 1:
            raise ValidationError("shots must be >= 1")
        if self.shots > self.train_per_class or self.shots_anchor > self.train_per_class:
            raise ValidationError("shots exceed per-class training pool")
        if self.feature_dim < 2:
            raise ValidationError("feature_dim must be >= 2 (shift rotates two coords)")
        if self.modes_per_class < 1:
            raise ValidationError("modes_per_class must be >= 1")

    def taxonomy(self) -> TaxonomySpec:
        anchors = tuple(range(self.n_anchor_classes))
        new = tuple(
            range(self.n_anchor_classes, self.n_anchor_classes + self.n_new_classes)
        )
        return TaxonomySpec(source_classes=anchors, target_classes=anchors + new)

    def canonical(self) -> str:
        parts = [f"{f.name}={getattr(self, f.name)!r}" for f in fields(self)]
        return "BenchmarkConfig(" + ", ".join(parts) + ")"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


@dataclass
class Dataset:
    """Columnar sample store: features (N, d), class ids, domain/split codes."""

    config: BenchmarkConfig
    features: np.ndarray
    class_ids: np.ndarray  # int
    domains: np.ndarray  # index into DOMAINS
    splits: np.ndarray  # index into SPLITS

    @property
    def taxonomy(self) -> TaxonomySpec:
        return self.config.taxonomy()

    def select(self, domain: str | None = None, split: str | None = None):
        """(features, class_ids) for a domain/split slice."""
        mask = np.ones(len(self.class_ids), dtype=bool)
        if domain is not None:
            mask &= self.domains == DOMAINS.index(domain)
        if split is not None:
            mask &= self.splits == SPLITS.index(split)
        return self.features[mask], self.class_ids[mask]

    def counts(self) -> dict[tuple[str, str], int]:
        out = {}
        for di, d in enumerate(DOMAINS):
            for si, s in enumerate(SPLITS):
                n = int(np.sum((self.domains == di) & (self.splits == si)))
                if n:
                    out[(d, s)] = n
        return out


def _orthonormal_directions(
    rng: np.random.Generator, count: int, dim: int
) -> list[np.ndarray]:
    """Gram-Schmidt on seeded Gaussian draws."""
    basis: list[np.ndarray] = []
    while len(basis) < count:
        v = rng.normal(size=dim)
        for b in basis:
            v -= (b @ v) * b
        nrm = np.linalg.norm(v)
        if nrm > 1e-8:
            basis.append(v / nrm)
    return basis


def _class_means(rng: np.random.Generator, tax: TaxonomySpec, config: BenchmarkConfig):
    """Controlled class geometry along seeded orthonormal directions.

    Anchor means sit at class_mean_scale along mutually orthogonal
    directions (pairwise distance scale * sqrt(2)). New-class means share a
    further orthogonal direction at the same radius and are spread around it
    with pairwise distance new_class_separation, so coarse anchor/new
    discrimination and fine new-vs-new discrimination have independent
    difficulty knobs."""
    n_anchor = len(tax.anchors)
    n_new = len(tax.new_classes)
    needed = n_anchor + 1 + n_new
    dim = config.latent_dim
    if needed > dim:
        raise ValidationError(
            f"latent_dim {dim} too small for {needed} directions"
        )
    dirs = _orthonormal_directions(rng, needed, dim)
    means: dict[int, np.ndarray] = {}
    for i, c in enumerate(tax.anchors):
        means[c] = config.class_mean_scale * dirs[i]
    center = config.class_mean_scale * dirs[n_anchor]
    # offsets at sep/sqrt(2) along per-class orthogonal directions give every
    # new-class pair distance new_class_separation
    spread = config.new_class_separation / np.sqrt(2.0)
    for j, c in enumerate(tax.new_classes):
        means[c] = center + spread * dirs[n_anchor + 1 + j]
    return means


def _mode_centers(
    rng: np.random.Generator,
    means: dict[int, np.ndarray],
    tax: TaxonomySpec,
    config: BenchmarkConfig,
) -> dict[int, np.ndarray]:
    """Each class is a uniform mixture of modes_per_class Gaussian components
    at the class mean plus a set of mode offsets SHARED by all classes (the
    same intra-class variation pattern repeats across the taxonomy).

    With mode_spread larger than the class separation the modes interleave:
    a mode never seen among a class's few labeled shots cannot be resolved by
    proximity to the observed shots alone, only by the offset structure that
    the richly annotated classes expose. That is what separates few-shot
    training from methods that exploit the anchors and the unlabeled pool."""
    dirs = rng.normal(size=(config.modes_per_class, config.latent_dim))
    if config.modes_per_class == 1:
        return {c: means[c][None, :] for c in tax.target_classes}
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    offsets = config.mode_spread * dirs
    return {c: means[c] + offsets for c in tax.target_classes}


def _observation_map(rng: np.random.Generator, config: BenchmarkConfig):
    """Fixed nonlinear map from latent class structure to observed features.

    Class geometry lives in a low-dimensional latent space; observations are
    tanh(latent @ M1) @ M2 for seeded mixing matrices. Recovering class
    structure from observations then requires representation learning, which
    a handful of labeled shots cannot support but the pooled labeled and
    unlabeled data can. With entangle = False the map is the identity
    embedding (zero padding into feature_dim)."""
    lat, d = config.latent_dim, config.feature_dim
    if not config.entangle:
        def identity(z: np.ndarray) -> np.ndarray:
            out = np.zeros((z.shape[0], d))
            out[:, :lat] = z
            return out

        return identity
    hidden = max(d, 2 * lat)
    m1 = rng.normal(scale=config.entangle_gain / np.sqrt(lat), size=(lat, hidden))
    m2 = rng.normal(scale=np.sqrt(3.0 / hidden), size=(hidden, d))

    def observe(z: np.ndarray) -> np.ndarray:
        return np.tanh(z @ m1) @ m2

    return observe


def _shift_transform(config: BenchmarkConfig) -> tuple[np.ndarray, np.ndarray]:
    """Rotation in coordinates (0, 1) by rotation_deg plus constant translation."""
    d = config.feature_dim
    rot = np.eye(d)
    a = np.deg2rad(config.rotation_deg)
    rot[0, 0] = np.cos(a)
    rot[0, 1] = -np.sin(a)
    rot[1, 0] = np.sin(a)
    rot[1, 1] = np.cos(a)
    return rot, np.full(d, config.translation)


def generate(config: BenchmarkConfig) -> Dataset:
    """Deterministic benchmark draw.

    Per class: train_per_class + test_per_class samples per domain where the
    class exists (anchors in both, new classes target-only), the trailing
    test_per_class of each block forming the stratified 80/20 test split.
    Target train-pool samples are unlabeled except the leading `shots` per
    new class (and `shots_anchor` per anchor) which form the support set.
    """
    tax = config.taxonomy()
    rng = np.random.default_rng(config.seed)
    d = config.latent_dim
    means = _class_means(rng, tax, config)
    mode_centers = _mode_centers(rng, means, tax, config)
    observe = _observation_map(rng, config)
    rot, trans = _shift_transform(config)
    per_class = config.train_per_class + config.test_per_class

    feats, classes, domains, splits = [], [], [], []

    def add(x, c, domain, split):
        feats.append(x)
        classes.append(c)
        domains.append(DOMAINS.index(domain))
        splits.append(SPLITS.index(split))

    def draw_class(c: int) -> np.ndarray:
        cov = (
            config.new_class_cov_scale
            if c in tax.new_classes
            else config.class_cov_scale
        )
        modes = mode_centers[c]
        picks = rng.integers(0, len(modes), size=per_class)
        return modes[picks] + cov * rng.normal(size=(per_class, d))

    for c in tax.source_classes:
        draws = observe(draw_class(c))
        for i in range(per_class):
            split = "train" if i < config.train_per_class else "test"
            add(draws[i], c, "source", split)

    for c in tax.target_classes:
        draws = observe(draw_class(c)) @ rot.T + trans
        labeled = config.shots if c in tax.new_classes else config.shots_anchor
        for i in range(per_class):
            if i >= config.train_per_class:
                split = "test"
            elif i < labeled:
                split = "support"
            else:
                split = "unlabeled"
            add(draws[i], c, "target", split)

    return Dataset(
        config=config,
        features=np.vstack(feats),
        class_ids=np.array(classes, dtype=np.int64),
        domains=np.array(domains, dtype=np.int64),
        splits=np.array(splits, dtype=np.int64),
    )


ABSTAIN = -1


def pseudo_label(
    params: net.ModelParams,
    batch: np.ndarray,
    confidence_threshold: float = 0.0,
    anchor_only: tuple[int, ...] | None = None,
) -> np.ndarray:
    """Argmax model labels for a batch, ABSTAIN (-1) where the top probability
    falls below the threshold. Ties break to the lowest class id. Passing
    anchor class ids restricts the argmax to those columns."""
    trace = net.forward(params, batch)
    probs = trace.probs
    if anchor_only is not None:
        cols = np.asarray(anchor_only, dtype=np.int64)
        sub = probs[:, cols]
        picks = cols[np.argmax(sub, axis=1)]
        conf = np.max(sub, axis=1)
    else:
        picks = np.argmax(probs, axis=1)
        conf = np.max(probs, axis=1)
    return np.where(conf >= confidence_threshold, picks, ABSTAIN)


def pseudo_label_balanced(
    params: net.ModelParams,
    pool: np.ndarray,
    confidence_threshold: float = 0.0,
    sinkhorn_steps: int = 5,
) -> np.ndarray:
    """Distribution-aligned pseudo-labels for a whole unlabeled pool.

    Probabilities are rescaled by alternating row/column normalization
    (Sinkhorn iterations toward a uniform class marginal) before the argmax,
    counteracting the bias toward richly supervised classes when the pool is
    class-balanced; a single step reduces to dividing by the pool-wide class
    means. Thresholding still applies to the raw top probability."""
    trace = net.forward(params, pool)
    probs = trace.probs
    q = probs.copy()
    for _ in range(max(1, sinkhorn_steps)):
        q /= np.maximum(q.mean(axis=0, keepdims=True), 1e-12)
        q /= np.maximum(q.sum(axis=1, keepdims=True), 1e-12)
    picks = np.argmax(q, axis=1)
    conf = np.max(probs, axis=1)
    return np.where(conf >= confidence_threshold, picks, ABSTAIN)


def save_dataset(dataset: Dataset, path) -> None:
    """Delimited text export: header with config hash, then one sample per
    line (split domain class features...). Floats use repr for exact
    round-trips."""
    lines = [
        f"# {DATASET_TAG}",
        f"# config_hash {dataset.config.config_hash()}",
        f"# config {dataset.config.canonical()}",
        f"# feature_dim {dataset.config.feature_dim}",
        "# columns split domain class features...",
    ]
    for i in range(len(dataset.class_ids)):
        row = [
            SPLITS[dataset.splits[i]],
            DOMAINS[dataset.domains[i]],
            str(int(dataset.class_ids[i])),
        ]
        row.extend(repr(float(v)) for v in dataset.features[i])
        lines.append(" ".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path, config: BenchmarkConfig | None = None) -> Dataset:
    """Parse a dataset export. When `config` is given its hash must match the
    header; otherwise the config is reconstructed from the embedded repr."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != f"# {DATASET_TAG}":
        raise ValidationError(f"not a recognized dataset file: {path}")
    file_hash = lines[1].split()[-1]
    embedded = lines[2][len("# config ") :]
    if config is None:
        config = eval(embedded, {"BenchmarkConfig": BenchmarkConfig})  # noqa: S307
    if config.config_hash() != file_hash:
        raise ValidationError("config hash mismatch")
    feats, classes, domains, splits = [], [], [], []
    for line in lines:
        if line.startswith("#"):
            continue
        parts = line.split()
        splits.append(SPLITS.index(parts[0]))
        domains.append(DOMAINS.index(parts[1]))
        classes.append(int(parts[2]))
        feats.append([float(v) for v in parts[3:]])
    return Dataset(
        config=config,
        features=np.array(feats),
        class_ids=np.array(classes, dtype=np.int64),
        domains=np.array(domains, dtype=np.int64),
        splits=np.array(splits, dtype=np.int64),
    )
