"""Dictionary concept recognition with contextual meta-annotation.

Matches lexicon surface forms over a token stream (longest match wins),
classifies each match for negation / experiencer / certainty from nearby
trigger phrases, and drops mentions whose context makes them clinically
irrelevant to the patient.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources

from .corpus import GoldMention, Note

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)

# Characters that end a trigger's reach; a trigger never applies across one.
_SENTENCE_TERMINATORS = frozenset(".,;:?")


class LexiconError(ValueError):
    """Bad lexicon input: duplicate ids, empty synonyms, parse failures."""


@dataclass(frozen=True)
class Token:
    start: int
    end: int
    lower: str


@dataclass(frozen=True)
class MetaFlags:
    negation: str = "No"
    experiencer: str = "Patient"
    certainty: str = "Confirmed"

    @property
    def is_relevant(self) -> bool:
        return (
            self.negation == "No"
            and self.experiencer == "Patient"
            and self.certainty == "Confirmed"
        )


@dataclass(frozen=True)
class Annotation:
    note_id: str
    concept_id: str
    start: int
    end: int
    surface: str
    meta: MetaFlags = MetaFlags()


@dataclass(frozen=True)
class LexiconEntry:
    concept_id: str
    canonical_name: str
    synonyms: tuple[str, ...] = ()


@dataclass(frozen=True)
class ConceptLexicon:
    entries: tuple[LexiconEntry, ...]
    # Token trie: token -> child dict; the "" key marks a complete surface
    # and stores (surface token count, concept_id).
    trie: dict

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class ContextRuleSet:
    negation_triggers: tuple[str, ...]
    experiencer_triggers: tuple[str, ...]
    certainty_triggers: tuple[str, ...]
    scope_window: int = 5

    def __post_init__(self):
        if self.scope_window < 1:
            raise ValueError("scope_window must be >= 1")


def tokenize(text: str) -> list[Token]:
    """Split on anything that is not a Unicode letter or digit."""
    return [Token(m.start(), m.end(), m.group().lower()) for m in _TOKEN_RE.finditer(text)]


def compile_lexicon(entries) -> ConceptLexicon:
    normalized = []
    seen_ids: set[str] = set()
    trie: dict = {}
    for entry in entries:
        if not isinstance(entry, LexiconEntry):
            concept_id, canonical, synonyms = entry
            entry = LexiconEntry(concept_id, canonical, tuple(synonyms))
        if entry.concept_id in seen_ids:
            raise LexiconError(f"duplicate concept_id {entry.concept_id}")
        seen_ids.add(entry.concept_id)
        normalized.append(entry)
        for surface in (entry.canonical_name, *entry.synonyms):
            if not surface or not surface.strip():
                raise LexiconError(f"empty surface form for {entry.concept_id}")
            tokens = [t.lower for t in tokenize(surface)]
            if not tokens:
                raise LexiconError(f"surface {surface!r} has no tokens")
            node = trie
            for token in tokens:
                node = node.setdefault(token, {})
            existing = node.get("")
            if existing is None or entry.concept_id < existing[1]:
                # Shared surfaces resolve to the smallest concept_id.
                node[""] = (len(tokens), entry.concept_id)
    if not normalized:
        raise LexiconError("lexicon is empty")
    return ConceptLexicon(tuple(normalized), trie)


def _match_token_trigger(tokens, trigger_tokens, match_start_idx, window, text) -> bool:
    """True when the trigger's last token sits within `window` tokens before
    the match and no sentence terminator intervenes."""
    n = len(trigger_tokens)
    lo = max(0, match_start_idx - window)
    for last in range(match_start_idx - 1, lo - 1, -1):
        first = last - n + 1
        if first < 0:
            continue
        if all(tokens[first + k].lower == trigger_tokens[k] for k in range(n)):
            between = text[tokens[last].end : tokens[match_start_idx].start]
            if not (_SENTENCE_TERMINATORS & set(between)):
                return True
    return False


def _question_mark_before(tokens, match_start_idx, window, text) -> bool:
    window_start = tokens[max(0, match_start_idx - window)].start
    region_end = tokens[match_start_idx].start
    for pos in range(region_end - 1, window_start - 1, -1):
        char = text[pos]
        if char == "?":
            return True
        if char in _SENTENCE_TERMINATORS:
            return False
    return False


def classify_context(text, tokens, match_span, rules: ContextRuleSet) -> MetaFlags:
    """Assign meta flags to the match at token indices [start, end).

    Word triggers fire from within `scope_window` tokens before the match;
    the enclitic "<concept>-negative" fires from immediately after. A
    sentence terminator between trigger and match blocks the trigger.
    """
    start_idx, end_idx = match_span
    negation = "No"
    experiencer = "Patient"
    certainty = "Confirmed"

    for trigger in rules.negation_triggers:
        trig_tokens = [t.lower for t in tokenize(trigger)]
        if trig_tokens and _match_token_trigger(
            tokens, trig_tokens, start_idx, rules.scope_window, text
        ):
            negation = "Yes"
            break
    if negation == "No" and end_idx < len(tokens):
        match_end = tokens[end_idx - 1].end
        nxt = tokens[end_idx]
        if (
            text[match_end : match_end + 1] == "-"
            and nxt.start == match_end + 1
            and nxt.lower == "negative"
        ):
            negation = "Yes"

    for trigger in rules.experiencer_triggers:
        trig_tokens = [t.lower for t in tokenize(trigger)]
        if trig_tokens and _match_token_trigger(
            tokens, trig_tokens, start_idx, rules.scope_window, text
        ):
            experiencer = "Other"
            break

    for trigger in rules.certainty_triggers:
        if trigger == "?":
            if _question_mark_before(tokens, start_idx, rules.scope_window, text):
                certainty = "Suspected"
                break
            continue
        trig_tokens = [t.lower for t in tokenize(trigger)]
        if trig_tokens and _match_token_trigger(
            tokens, trig_tokens, start_idx, rules.scope_window, text
        ):
            certainty = "Suspected"
            break

    return MetaFlags(negation, experiencer, certainty)


def annotate(note, lexicon: ConceptLexicon, rules: ContextRuleSet) -> list[Annotation]:
    """Find all lexicon matches in a note; overlaps resolve longest-first,
    ties to the leftmost start. Accepts a Note or a bare string."""
    if isinstance(note, Note):
        text, note_id = note.text, note.note_id
    else:
        text, note_id = note, ""
    tokens = tokenize(text)
    if not tokens:
        return []

    candidates = []  # (token_start, token_end, concept_id)
    for i in range(len(tokens)):
        node = lexicon.trie
        j = i
        while j < len(tokens):
            node = node.get(tokens[j].lower)
            if node is None:
                break
            j += 1
            terminal = node.get("")
            if terminal is not None:
                candidates.append((i, j, terminal[1]))

    candidates.sort(key=lambda c: (-(c[1] - c[0]), c[0], c[2]))
    occupied = [False] * len(tokens)
    accepted = []
    for i, j, concept_id in candidates:
        if any(occupied[i:j]):
            continue
        for k in range(i, j):
            occupied[k] = True
        accepted.append((i, j, concept_id))
    accepted.sort()

    annotations = []
    for i, j, concept_id in accepted:
        start, end = tokens[i].start, tokens[j - 1].end
        annotations.append(
            Annotation(
                note_id,
                concept_id,
                start,
                end,
                text[start:end],
                classify_context(text, tokens, (i, j), rules),
            )
        )
    return annotations


def filter_annotations(annotations) -> list[Annotation]:
    """Keep only mentions directly relevant to the patient: not negated,
    about the patient, and confirmed."""
    return [a for a in annotations if a.meta.is_relevant]


@dataclass
class GoldEvaluation:
    precision: float
    recall: float
    f1: float
    macro_f1: float
    per_concept: dict[str, dict]
    precision_undefined: bool = False

    def as_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "macro_f1": self.macro_f1,
            "precision_undefined": self.precision_undefined,
            "per_concept": self.per_concept,
        }


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float, bool]:
    undefined = tp + fp == 0
    precision = tp / (tp + fp) if not undefined else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1, undefined


def evaluate_against_gold(predicted, gold) -> GoldEvaluation:
    """Exact span + concept matching. Headline numbers are micro-averaged;
    macro_f1 is the unweighted mean of per-concept F1."""
    pred_keys = {(a.note_id, a.concept_id, a.start, a.end) for a in predicted}
    gold_keys = {(g.note_id, g.concept_id, g.start, g.end) for g in gold}

    concepts = sorted({k[1] for k in pred_keys | gold_keys})
    per_concept = {}
    for concept in concepts:
        pred_c = {k for k in pred_keys if k[1] == concept}
        gold_c = {k for k in gold_keys if k[1] == concept}
        tp = len(pred_c & gold_c)
        precision, recall, f1, undefined = _prf(tp, len(pred_c - gold_c), len(gold_c - pred_c))
        per_concept[concept] = {
            "precision": precision,
            "recall": recall,
            "f1": f1,
            "precision_undefined": undefined,
        }

    tp = len(pred_keys & gold_keys)
    precision, recall, f1, undefined = _prf(
        tp, len(pred_keys - gold_keys), len(gold_keys - pred_keys)
    )
    macro = (
        sum(row["f1"] for row in per_concept.values()) / len(per_concept) if per_concept else 0.0
    )
    return GoldEvaluation(precision, recall, f1, macro, per_concept, undefined)


def gold_to_annotations(corpus_gold) -> list[Annotation]:
    """View gold mentions through the Annotation type for evaluation."""
    return [
        Annotation(
            g.note_id,
            g.concept_id,
            g.start,
            g.end,
            "",
            MetaFlags(g.negation, g.experiencer, g.certainty),
        )
        for g in corpus_gold
    ]


def load_lexicon(path) -> ConceptLexicon:
    """Parse the delimited lexicon format: concept_id <TAB> canonical_name
    <TAB> pipe-separated synonyms (last column optional)."""
    entries = []
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            columns = line.split("\t")
            if len(columns) < 2:
                raise LexiconError(f"line {line_no}: expected at least 2 tab-separated columns")
            synonyms = tuple(s for s in columns[2].split("|") if s) if len(columns) > 2 else ()
            entries.append(LexiconEntry(columns[0], columns[1], synonyms))
    return compile_lexicon(entries)


def load_trigger_rules(path, scope_window: int = 5) -> ContextRuleSet:
    """Parse the trigger file: '[negation]' / '[experiencer]' / '[certainty]'
    section headers, one phrase per line."""
    sections: dict[str, list[str]] = {"negation": [], "experiencer": [], "certainty": []}
    current: list[str] | None = None
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                name = line[1:-1]
                if name not in sections:
                    raise ValueError(f"line {line_no}: unknown trigger section {name!r}")
                current = sections[name]
                continue
            if current is None:
                raise ValueError(f"line {line_no}: phrase outside any section")
            current.append(line)
    return ContextRuleSet(
        tuple(sections["negation"]),
        tuple(sections["experiencer"]),
        tuple(sections["certainty"]),
        scope_window,
    )


def _data_path(name: str):
    return resources.files("itupred").joinpath("data", name)


def default_lexicon() -> ConceptLexicon:
    with resources.as_file(_data_path("lexicon.tsv")) as path:
        return load_lexicon(path)


def default_rules(scope_window: int = 5) -> ContextRuleSet:
    with resources.as_file(_data_path("triggers.txt")) as path:
        return load_trigger_rules(path, scope_window)
