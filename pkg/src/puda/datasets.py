"""PU-DA scenario construction.

A scenario consists of a fully labeled source pool, a small positive-labeled
target pool, and the unlabeled target pool. The labeled target positives stay
inside the unlabeled pool (risk estimation sees all initially-unlabeled data);
evaluation excludes the revealed ids. True labels ride along on every example
for oracle evaluation only; training code must never read them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ScenarioError(ValueError):
    """Raised when scenario construction inputs are invalid."""


@dataclass
class Example:
    """One observation: features, hidden true label, and the labeled flag s.

    s = 1 marks a revealed label; in the target domain only positives are
    ever revealed (SCAR over positives).
    """

    id: int
    features: np.ndarray
    true_label: int
    s: int = 0


@dataclass
class ScenarioBundle:
    """The three training pools plus the quantities needed downstream."""

    name: str
    source: list
    target_positive: list
    target_unlabeled: list
    class_prior: float
    label_frequency: float
    seed: int

    def __post_init__(self):
        ids = [ex.id for ex in self.source] + [ex.id for ex in self.target_unlabeled]
        if len(set(ids)) != len(ids):
            raise ScenarioError("example ids must be unique across source and target")
        unl_ids = {ex.id for ex in self.target_unlabeled}
        if not all(ex.id in unl_ids for ex in self.target_positive):
            raise ScenarioError("labeled target positives must stay inside the unlabeled pool")
        if not 0.0 < self.class_prior < 1.0:
            raise ScenarioError(f"class prior must lie strictly in (0, 1), got {self.class_prior}")
        if not 0.0 < self.label_frequency <= 1.0:
            raise ScenarioError(f"label frequency must lie in (0, 1], got {self.label_frequency}")
        if any(ex.s != 1 or ex.true_label != 1 for ex in self.target_positive):
            raise ScenarioError("target_positive must contain labeled positives only")

    @property
    def labeled_ids(self) -> set:
        return {ex.id for ex in self.target_positive}

    def evaluation_pool(self) -> list:
        """Unlabeled target examples minus the revealed positives."""
        labeled = self.labeled_ids
        return [ex for ex in self.target_unlabeled if ex.id not in labeled]

    def source_negatives(self) -> list:
        return [ex for ex in self.source if ex.true_label == 0]


@dataclass
class SyntheticShiftSpec:
    """Two-class Gaussian domains; index 0 is the negative class, 1 the positive."""

    n_per_class: int
    source_means: np.ndarray
    source_covs: np.ndarray
    target_means: np.ndarray
    target_covs: np.ndarray
    noise_scale: float = 0.0

    def __post_init__(self):
        self.source_means = np.asarray(self.source_means, dtype=float)
        self.target_means = np.asarray(self.target_means, dtype=float)
        self.source_covs = np.asarray(self.source_covs, dtype=float)
        self.target_covs = np.asarray(self.target_covs, dtype=float)
        if self.n_per_class < 1:
            raise ScenarioError("n_per_class must be >= 1")
        if self.noise_scale < 0:
            raise ScenarioError("noise_scale must be >= 0")
        for covs in (self.source_covs, self.target_covs):
            for cov in covs:
                try:
                    np.linalg.cholesky(cov)
                except np.linalg.LinAlgError:
                    raise ScenarioError("covariance matrices must be symmetric positive definite")

    def to_dict(self) -> dict:
        return {
            "n_per_class": self.n_per_class,
            "source_means": self.source_means.tolist(),
            "source_covs": self.source_covs.tolist(),
            "target_means": self.target_means.tolist(),
            "target_covs": self.target_covs.tolist(),
            "noise_scale": self.noise_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticShiftSpec":
        return cls(**d)


def binarize(examples: list, positive_class: int, negative_class: int) -> list:
    """Keep only the two chosen classes, relabeled 1/0, order preserved."""
    present = {ex.true_label for ex in examples}
    for cls in (positive_class, negative_class):
        if cls not in present:
            raise ScenarioError(f"class {cls!r} not present in dataset")
    out = []
    for ex in examples:
        if ex.true_label == positive_class:
            out.append(Example(ex.id, ex.features, 1, ex.s))
        elif ex.true_label == negative_class:
            out.append(Example(ex.id, ex.features, 0, ex.s))
    return out


def apply_label_frequency(target: list, c: float, seed: int) -> tuple:
    """Reveal max(1, round(c * n_pos)) positive labels, chosen uniformly.

    Returns (target_positive, target_unlabeled). The revealed positives keep a
    copy inside the unlabeled pool (same ids, s = 0); rounding is half-up.
    """
    if not 0.0 < c <= 1.0:
        raise ScenarioError(f"label frequency must lie in (0, 1], got {c}")
    positives = [ex for ex in target if ex.true_label == 1]
    if not positives:
        raise ScenarioError("target has no positives to label")
    n_label = max(1, int(np.floor(c * len(positives) + 0.5)))
    rng = np.random.default_rng(seed)
    order = sorted(positives, key=lambda ex: ex.id)
    chosen = rng.choice(len(order), size=n_label, replace=False)
    target_positive = [Example(order[i].id, order[i].features, 1, 1) for i in sorted(chosen)]
    target_unlabeled = [Example(ex.id, ex.features, ex.true_label, 0) for ex in target]
    return target_positive, target_unlabeled


def empirical_prior(examples: list) -> float:
    """Positive fraction of the hidden labels (builder-side oracle access)."""
    return float(np.mean([ex.true_label for ex in examples]))


def make_synthetic_shift(spec: SyntheticShiftSpec, c: float, seed: int,
                         label_seed: int | None = None,
                         name: str = "synthetic-shift") -> ScenarioBundle:
    """Sample the two domains from the spec and build a scenario.

    The class prior is the realized positive fraction of the target pool.
    label_seed (defaults to seed) controls only which positives get revealed,
    so benchmark sweeps can redraw the labeled subset over fixed data.
    """
    rng = np.random.default_rng(seed)
    source, target = [], []
    next_id = 0
    for label in (0, 1):
        x = rng.multivariate_normal(spec.source_means[label],
                                    spec.source_covs[label], size=spec.n_per_class)
        if spec.noise_scale > 0:
            x = x + rng.normal(0.0, spec.noise_scale, size=x.shape)
        for row in x:
            source.append(Example(next_id, row.astype(np.float32), label, 1))
            next_id += 1
    for label in (0, 1):
        x = rng.multivariate_normal(spec.target_means[label],
                                    spec.target_covs[label], size=spec.n_per_class)
        if spec.noise_scale > 0:
            x = x + rng.normal(0.0, spec.noise_scale, size=x.shape)
        for row in x:
            target.append(Example(next_id, row.astype(np.float32), label, 0))
            next_id += 1
    pi = empirical_prior(target)
    target_positive, target_unlabeled = apply_label_frequency(
        target, c, seed if label_seed is None else label_seed)
    return ScenarioBundle(name=name, source=source, target_positive=target_positive,
                          target_unlabeled=target_unlabeled, class_prior=pi,
                          label_frequency=c, seed=seed)


def assemble_scenario(source: list, target: list, c: float, seed: int,
                      name: str = "scenario") -> ScenarioBundle:
    """Build a scenario from already-binarized source and target pools."""
    source = [Example(ex.id, ex.features, ex.true_label, 1) for ex in source]
    target_positive, target_unlabeled = apply_label_frequency(target, c, seed)
    return ScenarioBundle(name=name, source=source, target_positive=target_positive,
                          target_unlabeled=target_unlabeled,
                          class_prior=empirical_prior(target),
                          label_frequency=c, seed=seed)


def load_image_folder(root, class_map: dict | None = None,
                      image_size: tuple | None = None, mode: str = "L",
                      id_offset: int = 0) -> list:
    """Load a directory-per-class image folder into multiclass examples.

    Ids follow sorted file paths, features are CHW float32 scaled to [0, 1].
    class_map maps directory name to integer label; default is sorted names.
    """
    from PIL import Image, UnidentifiedImageError

    root = Path(root)
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ScenarioError(f"no class directories under {root}")
    if class_map is None:
        class_map = {p.name: i for i, p in enumerate(class_dirs)}
    examples = []
    paths = []
    for cdir in class_dirs:
        if cdir.name not in class_map:
            continue
        files = sorted(p for p in cdir.iterdir() if p.is_file())
        if not files:
            raise ScenarioError(f"class directory {cdir} contains no files")
        paths.extend((p, class_map[cdir.name]) for p in files)
    paths.sort(key=lambda item: str(item[0]))
    for i, (path, label) in enumerate(paths):
        try:
            with Image.open(path) as img:
                img = img.convert(mode)
                if image_size is not None:
                    img = img.resize(image_size)
                arr = np.asarray(img, dtype=np.float32) / 255.0
        except (UnidentifiedImageError, OSError) as exc:
            raise ScenarioError(f"cannot decode image {path}: {exc}") from exc
        if arr.ndim == 2:
            arr = arr[None, :, :]
        else:
            arr = np.transpose(arr, (2, 0, 1))
        examples.append(Example(id_offset + i, arr, label, 1))
    return examples


# ---------------------------------------------------------------------------
# Scenario manifests: JSON files that record how to rebuild a scenario.

def synthetic_manifest(spec: SyntheticShiftSpec, c: float, seed: int,
                       name: str = "synthetic-shift") -> dict:
    return {"name": name, "kind": "synthetic", "synthetic": spec.to_dict(),
            "c": c, "seed": seed}


def folder_manifest(source_root: str, target_root: str, positive_class: str,
                    negative_class: str, c: float, seed: int,
                    image_size: tuple | None = None, mode: str = "L",
                    name: str = "folder-scenario") -> dict:
    return {"name": name, "kind": "folders",
            "folders": {"source_root": str(source_root), "target_root": str(target_root),
                        "positive_class": positive_class, "negative_class": negative_class,
                        "image_size": list(image_size) if image_size else None,
                        "mode": mode},
            "c": c, "seed": seed}


def save_manifest(path, manifest: dict):
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_manifest(path) -> dict:
    return json.loads(Path(path).read_text())


def scenario_from_manifest(manifest: dict, label_seed: int | None = None) -> ScenarioBundle:
    """Rebuild the scenario a manifest describes.

    label_seed redraws only the revealed positive subset; the underlying data
    is fixed by the manifest's own seed (or by the files on disk).
    """
    c = manifest["c"]
    seed = manifest["seed"]
    if manifest["kind"] == "synthetic":
        spec = SyntheticShiftSpec.from_dict(manifest["synthetic"])
        return make_synthetic_shift(spec, c, seed, label_seed=label_seed,
                                    name=manifest["name"])
    if manifest["kind"] == "folders":
        f = manifest["folders"]
        size = tuple(f["image_size"]) if f["image_size"] else None
        names = sorted(p.name for p in Path(f["source_root"]).iterdir() if p.is_dir())
        class_ids = {name: i for i, name in enumerate(names)}
        source_raw = load_image_folder(f["source_root"], class_map=class_ids,
                                       image_size=size, mode=f["mode"])
        target_raw = load_image_folder(f["target_root"], class_map=class_ids,
                                       image_size=size, mode=f["mode"],
                                       id_offset=len(source_raw))
        pos, neg = class_ids[f["positive_class"]], class_ids[f["negative_class"]]
        source = binarize(source_raw, pos, neg)
        target = binarize(target_raw, pos, neg)
        return assemble_scenario(source, target, c,
                                 seed if label_seed is None else label_seed,
                                 name=manifest["name"])
    raise ScenarioError(f"unknown manifest kind {manifest['kind']!r}")
