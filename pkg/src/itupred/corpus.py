"""Patient/note data model and a deterministic synthetic EHR generator.

The generator plants class-conditional concept mention rates into templated
note text, so downstream frequency statistics and classifiers have a known
signal to recover. Real clinical data never enters this package.
"""

from __future__ import annotations

import datetime
import json
import random
from dataclasses import dataclass, field

SEX_VALUES = ("Male", "Female")
ETHNICITY_VALUES = ("White", "NonWhite")
LABEL_VALUES = ("Ward", "PlannedITU", "UnplannedITU")

AGE_MIN = 16
AGE_MAX = 95


class ConfigurationError(ValueError):
    """Invalid generator configuration (negative sizes, bad rates, ...)."""


class CorpusFormatError(ValueError):
    """Malformed corpus or gold file; message names the line and field."""


@dataclass(frozen=True)
class Demographics:
    age: int
    sex: str
    ethnicity: str


@dataclass(frozen=True)
class Note:
    note_id: str
    patient_id: str
    timestamp: datetime.date
    text: str


@dataclass(frozen=True)
class Patient:
    patient_id: str
    demographics: Demographics
    operation_date: datetime.date
    label: str
    notes: tuple[Note, ...]

    @property
    def is_itu(self) -> bool:
        """Binary target: any critical-care admission versus ward stay."""
        return self.label != "Ward"


@dataclass(frozen=True)
class GoldMention:
    """A planted concept mention with its exact character span."""

    note_id: str
    concept_id: str
    start: int
    end: int
    negation: str = "No"
    experiencer: str = "Patient"
    certainty: str = "Confirmed"


@dataclass(frozen=True)
class Corpus:
    patients: tuple[Patient, ...]
    gold: tuple[GoldMention, ...] = ()

    def notes(self):
        for patient in self.patients:
            yield from patient.notes

    def gold_by_note(self) -> dict[str, list[GoldMention]]:
        grouped: dict[str, list[GoldMention]] = {}
        for mention in self.gold:
            grouped.setdefault(mention.note_id, []).append(mention)
        return grouped


@dataclass(frozen=True)
class ConceptProfile:
    """Class-conditional planting rate for one concept.

    Rates are expected mentions per note; values above 1 plant the integer
    part deterministically plus a Bernoulli draw for the fraction.
    """

    concept_id: str
    surface: str
    ward_rate: float
    itu_rate: float


@dataclass
class GeneratorConfig:
    seed: int = 7
    cohort_sizes: dict[str, int] = field(
        default_factory=lambda: {"Ward": 1832, "PlannedITU": 349, "UnplannedITU": 87}
    )
    concept_profiles: list[ConceptProfile] = field(
        default_factory=lambda: list(DEFAULT_PROFILES)
    )
    notes_per_patient: tuple[int, int] = (2, 6)
    window_days: int = 30
    # Per-note probabilities of adding one distractor sentence of each kind.
    negated_rate: float = 0.30
    family_rate: float = 0.15
    suspected_rate: float = 0.15
    # Distractors phrased with a trigger the shipped rules do NOT cover;
    # default zero so post-filter annotations match gold exactly.
    unruled_rate: float = 0.0
    # Fraction of patients whose notes all fall outside the pre-op window.
    out_of_window_patient_rate: float = 0.015
    # Chance for any in-window patient to gain one extra post-op straggler note.
    straggler_note_rate: float = 0.05
    male_fraction: float = 0.49
    white_fraction: float = 0.60

    def validate(self) -> None:
        for label, size in self.cohort_sizes.items():
            if label not in LABEL_VALUES:
                raise ConfigurationError(f"unknown cohort label {label!r}")
            if size < 0:
                raise ConfigurationError(f"negative cohort size for {label}")
        if self.cohort_sizes.get("Ward", 0) <= 0 or self.cohort_sizes.get("PlannedITU", 0) <= 0:
            raise ConfigurationError("cohort_sizes must be positive for Ward and PlannedITU")
        for profile in self.concept_profiles:
            if profile.ward_rate < 0 or profile.itu_rate < 0:
                raise ConfigurationError(f"negative rate for concept {profile.concept_id}")
        for name in ("negated_rate", "family_rate", "suspected_rate", "unruled_rate"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"negative {name}")
        lo, hi = self.notes_per_patient
        if lo < 1 or hi < lo:
            raise ConfigurationError("notes_per_patient must be a range with 1 <= lo <= hi")
        if self.window_days < 1:
            raise ConfigurationError("window_days must be >= 1")


# Default planted lexicon. Ward-only concepts never occur in ITU notes
# (frequency ratio NA), strongly ward-enriched ones occur >=100x more often,
# ITU markers carry the prediction signal, and common concepts are neutral
# filler shared by both groups. Surfaces are chosen so no surface shares
# tokens with the sentence templates below.
DEFAULT_PROFILES: tuple[ConceptProfile, ...] = (
    # Ward-only: absent from ITU notes entirely.
    ConceptProfile("C001", "moyamoya disease", 0.020, 0.0),
    ConceptProfile("C002", "aortic valve disorder", 0.020, 0.0),
    ConceptProfile("C003", "central hypothyroidism", 0.020, 0.0),
    ConceptProfile("C004", "carcinoma of esophagus", 0.020, 0.0),
    ConceptProfile("C005", "trigeminal nerve disorder", 0.020, 0.0),
    ConceptProfile("C006", "steroid induced hyperglycemia", 0.020, 0.0),
    ConceptProfile("C007", "embolic stroke", 0.020, 0.0),
    ConceptProfile("C008", "hemangioma of vertebral column", 0.020, 0.0),
    # Ward-enriched, rate ratio >= 100.
    ConceptProfile("C101", "aneurysm of posterior cerebral artery", 0.030, 0.0002),
    ConceptProfile("C102", "feeding problem", 0.030, 0.0002),
    ConceptProfile("C103", "cerebellopontine angle tumor", 0.030, 0.0002),
    ConceptProfile("C104", "myasthenia gravis", 0.030, 0.0002),
    ConceptProfile("C105", "positional vertigo", 0.030, 0.0002),
    ConceptProfile("C106", "hypertrophic cardiomyopathy", 0.030, 0.0002),
    ConceptProfile("C107", "chronic kidney disease", 0.030, 0.0002),
    ConceptProfile("C108", "superficial thrombophlebitis", 0.030, 0.0002),
    # Mildly ward-leaning colour.
    ConceptProfile("C201", "carpal tunnel syndrome", 0.040, 0.010),
    ConceptProfile("C202", "lumbar radiculopathy", 0.040, 0.010),
    # ITU markers: the prediction signal.
    ConceptProfile("C301", "intracranial meningioma", 0.004, 0.40),
    ConceptProfile("C302", "congenital arteriovenous malformation", 0.004, 0.40),
    ConceptProfile("C303", "external ventricular drain", 0.004, 0.40),
    ConceptProfile("C304", "fungal infection of central nervous system", 0.004, 0.40),
    ConceptProfile("C305", "intracranial aneurysm", 0.004, 0.40),
    ConceptProfile("C306", "blister of skin", 0.004, 0.40),
    # ITU-enriched with paper-like frequency ratios (~0.05-0.35).
    ConceptProfile("C401", "osteoporosis", 0.006, 0.12),
    ConceptProfile("C402", "musculoskeletal finding", 0.004, 0.09),
    ConceptProfile("C403", "infectious disease", 0.004, 0.09),
    ConceptProfile("C404", "wound", 0.012, 0.06),
    ConceptProfile("C405", "inguinal pain", 0.012, 0.05),
    ConceptProfile("C406", "dry skin", 0.014, 0.05),
    # Common filler with no class signal.
    ConceptProfile("C501", "headache", 0.30, 0.30),
    ConceptProfile("C502", "nausea", 0.25, 0.25),
    ConceptProfile("C503", "hypertension", 0.25, 0.25),
    ConceptProfile("C504", "diabetes mellitus", 0.20, 0.20),
    ConceptProfile("C505", "backache", 0.20, 0.20),
    ConceptProfile("C506", "dizziness", 0.20, 0.20),
    ConceptProfile("C507", "fatigue", 0.20, 0.20),
    ConceptProfile("C508", "insomnia", 0.15, 0.15),
)

# Sentence templates; "{}" receives the concept surface. Scaffold words must
# never appear in any lexicon surface, otherwise spurious matches would break
# gold fidelity.
_MENTION_TEMPLATES = (
    "Ongoing {} documented at assessment.",
    "Current impression includes {}.",
    "Longstanding {} remains under observation.",
    "Examination confirmed {} this admission.",
)
_NEGATED_TEMPLATES = (
    "No evidence of {} on imaging.",
    "Negative for {} at this visit.",
)
_FAMILY_TEMPLATES = (
    "Family history of {} was discussed.",
    "Mother treated for {} previously.",
)
_SUSPECTED_TEMPLATES = (
    "Suspected {} awaiting confirmation.",
    "Possible {} to be investigated further.",
)
# Phrased so the shipped trigger rules do not catch it: these survive the
# meta-annotation filter and count against precision.
_UNRULED_TEMPLATES = (
    "Earlier screening elsewhere had excluded {} already.",
)
_OPENING_SENTENCES = (
    "Routine preoperative review completed.",
    "Seen in clinic ahead of admission.",
    "Progress reviewed by the surgical team.",
    "Nursing observations recorded overnight.",
)

_BASE_OPERATION_DATE = datetime.date(2019, 4, 1)
_OPERATION_DATE_SPAN = 900  # days, spanning roughly the study period


def _draw_count(rng: random.Random, rate: float) -> int:
    whole = int(rate)
    return whole + (1 if rng.random() < rate - whole else 0)


def _render_note(
    rng: random.Random,
    note_id: str,
    config: GeneratorConfig,
    is_itu: bool,
) -> tuple[str, list[GoldMention]]:
    parts = [rng.choice(_OPENING_SENTENCES)]
    gold: list[GoldMention] = []
    offset = len(parts[0])

    def append(sentence: str) -> int:
        nonlocal offset
        parts.append(sentence)
        start = offset + 1  # joining space
        offset = start + len(sentence)
        return start

    for profile in config.concept_profiles:
        rate = profile.itu_rate if is_itu else profile.ward_rate
        for _ in range(_draw_count(rng, rate)):
            template = rng.choice(_MENTION_TEMPLATES)
            prefix, suffix = template.split("{}")
            sentence_start = append(prefix + profile.surface + suffix)
            start = sentence_start + len(prefix)
            gold.append(
                GoldMention(note_id, profile.concept_id, start, start + len(profile.surface))
            )

    for rate, templates in (
        (config.negated_rate, _NEGATED_TEMPLATES),
        (config.family_rate, _FAMILY_TEMPLATES),
        (config.suspected_rate, _SUSPECTED_TEMPLATES),
        (config.unruled_rate, _UNRULED_TEMPLATES),
    ):
        for _ in range(_draw_count(rng, rate)):
            surface = rng.choice(config.concept_profiles).surface
            template = rng.choice(templates)
            append(template.format(surface))

    return " ".join(parts), gold


def generate_corpus(config: GeneratorConfig) -> Corpus:
    """Build a synthetic corpus; a pure function of the config (same seed,
    byte-identical output)."""
    config.validate()
    rng = random.Random(config.seed)
    patients: list[Patient] = []
    gold: list[GoldMention] = []
    counter = 0

    for label in LABEL_VALUES:
        for _ in range(config.cohort_sizes.get(label, 0)):
            counter += 1
            patient_id = f"P{counter:05d}"
            demographics = Demographics(
                age=int(rng.triangular(AGE_MIN, AGE_MAX, 56)),
                sex="Male" if rng.random() < config.male_fraction else "Female",
                ethnicity="White" if rng.random() < config.white_fraction else "NonWhite",
            )
            operation_date = _BASE_OPERATION_DATE + datetime.timedelta(
                days=rng.randrange(_OPERATION_DATE_SPAN)
            )
            n_notes = rng.randint(*config.notes_per_patient)
            all_out = rng.random() < config.out_of_window_patient_rate
            straggler = (not all_out) and rng.random() < config.straggler_note_rate

            notes = []
            for k in range(n_notes):
                if all_out:
                    # Post-op only: the 30-day filter drops this patient.
                    delta = rng.randint(0, config.window_days)
                else:
                    delta = -rng.randint(1, config.window_days)
                note_id = f"{patient_id}-N{k + 1:02d}"
                text, mentions = _render_note(rng, note_id, config, label != "Ward")
                notes.append(
                    Note(
                        note_id,
                        patient_id,
                        operation_date + datetime.timedelta(days=delta),
                        text,
                    )
                )
                gold.extend(mentions)
            if straggler:
                note_id = f"{patient_id}-N{n_notes + 1:02d}"
                text, mentions = _render_note(rng, note_id, config, label != "Ward")
                notes.append(
                    Note(
                        note_id,
                        patient_id,
                        operation_date + datetime.timedelta(days=rng.randint(1, config.window_days)),
                        text,
                    )
                )
                gold.extend(mentions)

            patients.append(
                Patient(patient_id, demographics, operation_date, label, tuple(notes))
            )

    return Corpus(tuple(patients), tuple(gold))


def validate_corpus(corpus: Corpus) -> list[str]:
    """Collect invariant violations; an empty list means the corpus is valid."""
    violations = []
    seen_patients: set[str] = set()
    seen_notes: set[str] = set()
    for patient in corpus.patients:
        if patient.patient_id in seen_patients:
            violations.append(f"duplicate patient_id {patient.patient_id}")
        seen_patients.add(patient.patient_id)
        if patient.label not in LABEL_VALUES:
            violations.append(f"{patient.patient_id}: unknown label {patient.label!r}")
        if not (AGE_MIN <= patient.demographics.age <= AGE_MAX):
            violations.append(
                f"{patient.patient_id}: age {patient.demographics.age} outside "
                f"[{AGE_MIN}, {AGE_MAX}]"
            )
        if patient.demographics.sex not in SEX_VALUES:
            violations.append(f"{patient.patient_id}: unknown sex {patient.demographics.sex!r}")
        if patient.demographics.ethnicity not in ETHNICITY_VALUES:
            violations.append(
                f"{patient.patient_id}: unknown ethnicity {patient.demographics.ethnicity!r}"
            )
        if patient.operation_date is None:
            violations.append(f"{patient.patient_id}: missing operation_date")
        for note in patient.notes:
            if note.note_id in seen_notes:
                violations.append(f"duplicate note_id {note.note_id}")
            seen_notes.add(note.note_id)
            if note.timestamp is None:
                violations.append(f"{note.note_id}: missing timestamp")
    note_ids = {note.note_id for note in corpus.notes()}
    for mention in corpus.gold:
        if mention.note_id not in note_ids:
            violations.append(f"gold mention references unknown note {mention.note_id}")
    return violations


def _patient_to_record(patient: Patient) -> dict:
    return {
        "patient_id": patient.patient_id,
        "demographics": {
            "age": patient.demographics.age,
            "sex": patient.demographics.sex,
            "ethnicity": patient.demographics.ethnicity,
        },
        "operation_date": patient.operation_date.isoformat(),
        "label": patient.label,
        "notes": [
            {
                "note_id": note.note_id,
                "timestamp": note.timestamp.isoformat(),
                "text": note.text,
            }
            for note in patient.notes
        ],
    }


def _require(record: dict, key: str, line_no: int):
    if key not in record:
        raise CorpusFormatError(f"line {line_no}: missing field {key!r}")
    return record[key]


def _parse_date(raw: str, line_no: int, field_name: str) -> datetime.date:
    try:
        return datetime.date.fromisoformat(raw)
    except (TypeError, ValueError):
        raise CorpusFormatError(f"line {line_no}: bad {field_name} {raw!r}") from None


def save_corpus(corpus: Corpus, path, gold_path=None, header: str | None = None) -> None:
    """Write one JSON record per patient; gold mentions go to a sibling file
    (``<path>.gold`` unless given). Lines starting with '#' are comments."""
    if gold_path is None:
        gold_path = str(path) + ".gold"
    with open(path, "w", encoding="utf-8") as handle:
        if header:
            handle.write(f"# {header}\n")
        for patient in corpus.patients:
            handle.write(json.dumps(_patient_to_record(patient), sort_keys=True) + "\n")
    grouped = corpus.gold_by_note()
    with open(gold_path, "w", encoding="utf-8") as handle:
        if header:
            handle.write(f"# {header}\n")
        for note_id in sorted(grouped):
            record = {
                "note_id": note_id,
                "annotations": [
                    {
                        "start": m.start,
                        "end": m.end,
                        "concept_id": m.concept_id,
                        "negation": m.negation,
                        "experiencer": m.experiencer,
                        "certainty": m.certainty,
                    }
                    for m in grouped[note_id]
                ],
            }
            handle.write(json.dumps(record, sort_keys=True) + "\n")


def load_corpus(path, gold_path=None) -> Corpus:
    """Inverse of save_corpus; an empty file yields an empty corpus."""
    patients = []
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"line {line_no}: not valid JSON ({exc.msg})") from None
            demo = _require(record, "demographics", line_no)
            for key in ("age", "sex", "ethnicity"):
                _require(demo, key, line_no)
            notes = []
            for raw in _require(record, "notes", line_no):
                notes.append(
                    Note(
                        _require(raw, "note_id", line_no),
                        record.get("patient_id", "?"),
                        _parse_date(_require(raw, "timestamp", line_no), line_no, "timestamp"),
                        _require(raw, "text", line_no),
                    )
                )
            patients.append(
                Patient(
                    _require(record, "patient_id", line_no),
                    Demographics(demo["age"], demo["sex"], demo["ethnicity"]),
                    _parse_date(
                        _require(record, "operation_date", line_no), line_no, "operation_date"
                    ),
                    _require(record, "label", line_no),
                    tuple(notes),
                )
            )

    gold: list[GoldMention] = []
    if gold_path is None:
        candidate = str(path) + ".gold"
        import os

        gold_path = candidate if os.path.exists(candidate) else None
    if gold_path is not None:
        with open(gold_path, encoding="utf-8") as handle:
            for line_no, line in enumerate(handle, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise CorpusFormatError(
                        f"line {line_no}: not valid JSON ({exc.msg})"
                    ) from None
                note_id = _require(record, "note_id", line_no)
                for raw in _require(record, "annotations", line_no):
                    gold.append(
                        GoldMention(
                            note_id,
                            _require(raw, "concept_id", line_no),
                            _require(raw, "start", line_no),
                            _require(raw, "end", line_no),
                            raw.get("negation", "No"),
                            raw.get("experiencer", "Patient"),
                            raw.get("certainty", "Confirmed"),
                        )
                    )
    return Corpus(tuple(patients), tuple(gold))
