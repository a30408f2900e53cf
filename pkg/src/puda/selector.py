"""Per-epoch label-candidate harvesting and final pseudo-label extraction.

Candidates accumulate in an append-only multiset: the same example id can be
recorded in many epochs with different confidences, and the unlabeled pool is
never shrunk. After step 1 ends, extraction keeps the ids that were harvested
often enough and always on the same side of the confidence thresholds.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass

import numpy as np


class SelectorError(ValueError):
    """Raised on invalid selector inputs."""


@dataclass(frozen=True)
class Thresholds:
    t_pos: float
    t_neg: float
    epoch: int


@dataclass(frozen=True)
class CandidateRecord:
    example_id: int
    probability: float
    epoch: int


@dataclass
class ExtractionConfig:
    """Extraction rules: minimum occurrences m, positive floor t_p, negative cap t_n."""

    t_p: float = 0.95
    t_n: float = 0.05
    m: int = 20

    def __post_init__(self):
        if not 0.0 <= self.t_n < self.t_p <= 1.0:
            raise SelectorError(f"need 0 <= t_n < t_p <= 1, got t_n={self.t_n}, t_p={self.t_p}")
        if self.m < 1:
            raise SelectorError(f"m must be >= 1, got {self.m}")


@dataclass(frozen=True)
class PseudoLabeledEntry:
    example_id: int
    pseudo_label: float  # mean of the harvested confidences
    polarity: str  # "P" or "N"


class CandidateSet:
    """Append-only multiset of candidate records (single writer)."""

    def __init__(self, records=()):
        self._records = list(records)

    def add(self, records):
        self._records.extend(records)

    def __len__(self):
        return len(self._records)

    def __iter__(self):
        return iter(self._records)

    def records_for(self, example_id: int) -> list:
        return [r for r in self._records if r.example_id == example_id]

    def export_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["example_id", "probability", "epoch"])
            for r in self._records:
                writer.writerow([r.example_id, f"{r.probability:.17g}", r.epoch])

    @classmethod
    def import_csv(cls, path) -> "CandidateSet":
        records = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                records.append(CandidateRecord(int(row["example_id"]),
                                               float(row["probability"]),
                                               int(row["epoch"])))
        return cls(records)


class PseudoLabeledSet:
    """Disjoint union of positive and negative pseudo-labeled examples."""

    def __init__(self, entries=()):
        self.entries = list(entries)
        pos = {e.example_id for e in self.entries if e.polarity == "P"}
        neg = {e.example_id for e in self.entries if e.polarity == "N"}
        if pos & neg:
            raise SelectorError(f"ids with both polarities: {sorted(pos & neg)}")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def positives(self) -> list:
        return [e for e in self.entries if e.polarity == "P"]

    @property
    def negatives(self) -> list:
        return [e for e in self.entries if e.polarity == "N"]

    def export_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["example_id", "pseudo_label", "polarity"])
            for e in self.entries:
                writer.writerow([e.example_id, f"{e.pseudo_label:.17g}", e.polarity])

    @classmethod
    def import_csv(cls, path) -> "PseudoLabeledSet":
        entries = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                entries.append(PseudoLabeledEntry(int(row["example_id"]),
                                                  float(row["pseudo_label"]),
                                                  row["polarity"]))
        return cls(entries)


def compute_thresholds(predict_fn, target_positive, source_negatives,
                       epoch: int = 0) -> Thresholds:
    """Epoch thresholds: mean confidence over the labeled target positives and
    over the source negatives, both on the full sets in evaluation mode."""
    if not target_positive:
        raise SelectorError("compute_thresholds: no labeled target positives")
    if not source_negatives:
        raise SelectorError("compute_thresholds: scenario has no source negatives")
    t_pos = float(np.mean(np.asarray(predict_fn(target_positive), dtype=np.float64)))
    t_neg = float(np.mean(np.asarray(predict_fn(source_negatives), dtype=np.float64)))
    return Thresholds(t_pos=t_pos, t_neg=t_neg, epoch=epoch)


def harvest_epoch(predict_fn, target_unlabeled, thresholds: Thresholds,
                  epoch: int) -> list:
    """Records for exactly those x with p(x) > t_pos or p(x) < t_neg (strict).

    The unlabeled pool itself is never modified.
    """
    probs = np.asarray(predict_fn(target_unlabeled), dtype=np.float64)
    records = []
    for ex, p in zip(target_unlabeled, probs):
        if p > thresholds.t_pos or p < thresholds.t_neg:
            records.append(CandidateRecord(ex.id, float(p), epoch))
    return records


def count(example_id: int, candidates: CandidateSet) -> int:
    """Number of records in the candidate set bearing this id."""
    return sum(1 for r in candidates if r.example_id == example_id)


def extract_pseudo_labels(candidates: CandidateSet,
                          config: ExtractionConfig) -> PseudoLabeledSet:
    """Final extraction over the accumulated candidate multiset.

    An id with at least m records becomes positive when every record exceeds
    t_p, negative when every record stays below t_n; anything else is dropped.
    The pseudo-label is the mean of the id's own records.
    """
    by_id = defaultdict(list)
    for r in candidates:
        by_id[r.example_id].append(r.probability)
    entries = []
    for example_id in sorted(by_id):
        probs = by_id[example_id]
        if len(probs) < config.m:
            continue
        if min(probs) > config.t_p:
            entries.append(PseudoLabeledEntry(example_id, float(np.mean(probs)), "P"))
        elif max(probs) < config.t_n:
            entries.append(PseudoLabeledEntry(example_id, float(np.mean(probs)), "N"))
    return PseudoLabeledSet(entries)
