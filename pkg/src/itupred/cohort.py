"""Modeling datasets from annotated corpora.

Covers the 30-day pre-operation note window, per-patient concept count
vectors and per-note sequences, the train/test split protocol (unplanned
admissions never train), and the descriptive chi-squared frequency report.
"""

from __future__ import annotations

import datetime
import math
import random
from dataclasses import dataclass

import numpy as np

from .corpus import Corpus, Demographics, Patient


class SplitError(ValueError):
    """Requested split sizes cannot be satisfied by the cohort."""


@dataclass(frozen=True)
class FeatureVocabulary:
    concept_ids: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.concept_ids)) != len(self.concept_ids):
            raise ValueError("duplicate concept ids in vocabulary")

    @property
    def index(self) -> dict[str, int]:
        return {c: j for j, c in enumerate(self.concept_ids)}

    def __len__(self) -> int:
        return len(self.concept_ids)


@dataclass(frozen=True)
class PatientFeatures:
    patient_id: str
    counts: np.ndarray  # non-negative ints over the vocabulary
    label: int  # binary target: 1 = any ITU/HDU admission
    class_label: str  # Ward / PlannedITU / UnplannedITU
    demographics: Demographics


@dataclass(frozen=True)
class PatientSequence:
    patient_id: str
    vectors: np.ndarray  # (n_notes, vocab) in ascending timestamp order
    label: int
    class_label: str


@dataclass(frozen=True)
class SplitAssignment:
    train: frozenset[str]
    test: frozenset[str]

    def counts(self, patients) -> dict[str, dict[str, int]]:
        out = {"train": {}, "test": {}}
        for patient in patients:
            side = "train" if patient.patient_id in self.train else "test"
            out[side][patient.label] = out[side].get(patient.label, 0) + 1
        return out


@dataclass(frozen=True)
class ConceptRatioRow:
    concept_id: str
    count_ward: int
    count_itu: int
    f_ward: float
    f_itu: float
    ratio: float | None  # None encodes NA: the concept is absent from ITU
    chi2: float
    p: float


def window_notes(corpus: Corpus, window_days: int = 30) -> tuple[Corpus, list[str]]:
    """Keep notes dated within [operation - window_days, operation - 1].

    Patients left without any note are dropped; their ids come back as the
    report. Gold mentions for removed notes are removed too.
    """
    if window_days < 1:
        raise ValueError("window_days must be >= 1")
    kept_patients = []
    dropped = []
    kept_note_ids: set[str] = set()
    for patient in corpus.patients:
        lo = patient.operation_date - datetime.timedelta(days=window_days)
        hi = patient.operation_date - datetime.timedelta(days=1)
        notes = tuple(n for n in patient.notes if lo <= n.timestamp <= hi)
        if not notes:
            dropped.append(patient.patient_id)
            continue
        kept_note_ids.update(n.note_id for n in notes)
        kept_patients.append(
            Patient(
                patient.patient_id,
                patient.demographics,
                patient.operation_date,
                patient.label,
                notes,
            )
        )
    gold = tuple(g for g in corpus.gold if g.note_id in kept_note_ids)
    return Corpus(tuple(kept_patients), gold), dropped


def _counts_by_note(annotations_by_note, note_id, index, size) -> np.ndarray:
    row = np.zeros(size, dtype=np.int64)
    for ann in annotations_by_note.get(note_id, ()):
        j = index.get(ann.concept_id)
        if j is not None:
            row[j] += 1
    return row


def build_features(
    corpus: Corpus, annotations_by_note: dict, min_count: int = 2
) -> tuple[FeatureVocabulary, list[PatientFeatures]]:
    """Per-patient concept count vectors.

    `annotations_by_note` maps note_id to already-filtered annotations. The
    vocabulary keeps concepts occurring at least `min_count` times corpus
    wide, in sorted concept_id order. Patients come back sorted by id so the
    matrix layout is independent of input order.
    """
    if not corpus.patients:
        raise ValueError("empty corpus")
    note_ids = {n.note_id for n in corpus.notes()}
    totals: dict[str, int] = {}
    for note_id, annotations in annotations_by_note.items():
        if note_id not in note_ids:
            continue
        for ann in annotations:
            totals[ann.concept_id] = totals.get(ann.concept_id, 0) + 1
    vocabulary = FeatureVocabulary(
        tuple(sorted(c for c, n in totals.items() if n >= min_count))
    )
    index = vocabulary.index

    features = []
    for patient in sorted(corpus.patients, key=lambda p: p.patient_id):
        counts = np.zeros(len(vocabulary), dtype=np.int64)
        for note in patient.notes:
            counts += _counts_by_note(annotations_by_note, note.note_id, index, len(vocabulary))
        features.append(
            PatientFeatures(
                patient.patient_id,
                counts,
                int(patient.is_itu),
                patient.label,
                patient.demographics,
            )
        )
    return vocabulary, features


def build_sequences(
    corpus: Corpus, annotations_by_note: dict, vocabulary: FeatureVocabulary
) -> list[PatientSequence]:
    """One count vector per note, ordered by timestamp then note_id."""
    index = vocabulary.index
    sequences = []
    for patient in sorted(corpus.patients, key=lambda p: p.patient_id):
        ordered = sorted(patient.notes, key=lambda n: (n.timestamp, n.note_id))
        if not ordered:
            continue
        vectors = np.stack(
            [
                _counts_by_note(annotations_by_note, n.note_id, index, len(vocabulary))
                for n in ordered
            ]
        )
        sequences.append(
            PatientSequence(patient.patient_id, vectors, int(patient.is_itu), patient.label)
        )
    return sequences


def make_splits(
    patients,
    seed: int,
    planned_test: int = 135,
    ward_test: int | None = None,
) -> SplitAssignment:
    """Split protocol: every unplanned admission goes to test, `planned_test`
    planned admissions are sampled into test, and the ward test count matches
    the ITU test count exactly (override with `ward_test` to reproduce an
    unbalanced published layout). Sampling runs over id-sorted lists, so the
    result depends only on the cohort and the seed.
    """
    by_class: dict[str, list[str]] = {"Ward": [], "PlannedITU": [], "UnplannedITU": []}
    for patient in patients:
        by_class[patient.label].append(patient.patient_id)
    for label, ids in by_class.items():
        if not ids:
            raise SplitError(f"no patients with label {label}")
        ids.sort()

    if planned_test > len(by_class["PlannedITU"]):
        raise SplitError(
            f"planned_test={planned_test} exceeds the {len(by_class['PlannedITU'])} "
            "planned admissions available"
        )
    itu_test = planned_test + len(by_class["UnplannedITU"])
    n_ward_test = itu_test if ward_test is None else ward_test
    if n_ward_test > len(by_class["Ward"]):
        raise SplitError(
            f"cannot sample {n_ward_test} ward test patients from "
            f"{len(by_class['Ward'])} available"
        )

    rng = random.Random(seed)
    test = set(by_class["UnplannedITU"])
    test.update(rng.sample(by_class["PlannedITU"], planned_test))
    test.update(rng.sample(by_class["Ward"], n_ward_test))
    train = {p for ids in by_class.values() for p in ids} - test
    return SplitAssignment(frozenset(train), frozenset(test))


def chi2_2x2(table) -> tuple[float, float]:
    """Pearson chi-squared on a 2x2 count table, df=1, no continuity
    correction. The p-value is the df=1 survival function erfc(sqrt(x/2))."""
    (a, b), (c, d) = table
    cells = np.array([[a, b], [c, d]], dtype=float)
    if (cells < 0).any():
        raise ValueError("negative cell count")
    rows = cells.sum(axis=1)
    cols = cells.sum(axis=0)
    if (rows == 0).any() or (cols == 0).any():
        raise ValueError("zero row or column margin")
    expected = np.outer(rows, cols) / cells.sum()
    statistic = float(((cells - expected) ** 2 / expected).sum())
    p = math.erfc(math.sqrt(statistic / 2.0))
    return statistic, p


def concept_ratio_report(
    vocabulary: FeatureVocabulary,
    features,
    top_n: int = 50,
    alpha: float = 0.05,
) -> tuple[list[ConceptRatioRow], list[ConceptRatioRow]]:
    """Normalized frequency comparison between ward and ITU patients.

    Frequencies are concept counts over the group's total annotation tokens.
    Rows with p >= alpha are dropped. The first list ranks ward-enriched
    concepts by descending ward/ITU ratio (NA, meaning absent from ITU,
    sorts above every finite ratio); the second ranks ITU-enriched concepts
    by ascending ratio.
    """
    ward = [f for f in features if f.label == 0]
    itu = [f for f in features if f.label == 1]
    if not ward or not itu:
        raise ValueError("both ward and ITU groups must be non-empty")

    count_ward = np.sum([f.counts for f in ward], axis=0)
    count_itu = np.sum([f.counts for f in itu], axis=0)
    total_ward = int(count_ward.sum())
    total_itu = int(count_itu.sum())

    rows = []
    for j, concept_id in enumerate(vocabulary.concept_ids):
        cw, ci = int(count_ward[j]), int(count_itu[j])
        if cw + ci == 0:
            continue
        statistic, p = chi2_2x2([[cw, total_ward - cw], [ci, total_itu - ci]])
        if p >= alpha:
            continue
        f_ward = cw / total_ward
        f_itu = ci / total_itu
        ratio = None if ci == 0 else f_ward / f_itu
        rows.append(ConceptRatioRow(concept_id, cw, ci, f_ward, f_itu, ratio, statistic, p))

    def ward_key(row: ConceptRatioRow):
        # NA first, then finite ratios descending.
        if row.ratio is None:
            return (0, -row.f_ward, row.concept_id)
        return (1, -row.ratio, row.concept_id)

    def itu_key(row: ConceptRatioRow):
        # Ascending ratio; NA (infinite) last.
        if row.ratio is None:
            return (1, 0.0, row.concept_id)
        return (0, row.ratio, row.concept_id)

    ward_enriched = sorted(rows, key=ward_key)[:top_n]
    itu_enriched = sorted(rows, key=itu_key)[:top_n]
    return ward_enriched, itu_enriched


def feature_matrix(features) -> tuple[np.ndarray, np.ndarray]:
    """Stack PatientFeatures into (X, y) arrays."""
    X = np.stack([f.counts for f in features])
    y = np.array([f.label for f in features], dtype=np.int64)
    return X, y


def write_feature_matrix(path, vocabulary, features, header: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        if header:
            handle.write(f"# {header}\n")
        columns = ["patient_id", "label", "class", "age", "sex", "ethnicity"]
        columns += list(vocabulary.concept_ids)
        handle.write("\t".join(columns) + "\n")
        for f in features:
            row = [
                f.patient_id,
                str(f.label),
                f.class_label,
                str(f.demographics.age),
                f.demographics.sex,
                f.demographics.ethnicity,
            ]
            row += [str(int(c)) for c in f.counts]
            handle.write("\t".join(row) + "\n")


def write_ratio_report(path, rows, header: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        if header:
            handle.write(f"# {header}\n")
        handle.write("concept\tf_ward\tf_itu\tratio\tchi2\tp\n")
        for row in rows:
            ratio = "NA" if row.ratio is None else f"{row.ratio:.5g}"
            handle.write(
                f"{row.concept_id}\t{row.f_ward:.6g}\t{row.f_itu:.6g}\t{ratio}"
                f"\t{row.chi2:.6g}\t{row.p:.6g}\n"
            )
