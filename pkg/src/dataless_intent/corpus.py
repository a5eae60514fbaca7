"""Intent schemas, labelled datasets, label tokenization and description checks."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .exceptions import (
    DuplicateIdError,
    InvalidInputError,
    MalformedRecordError,
    UnknownLabelError,
)

__all__ = [
    "IntentClass",
    "IntentSchema",
    "LabeledUtterance",
    "DescriptionValidation",
    "DescriptionStats",
    "tokenize_label",
    "validate_description",
    "description_stats",
    "load_schema",
    "save_schema",
    "load_dataset",
    "save_dataset",
    "DESCRIPTION_PREFIXES",
]

DESCRIPTION_PREFIXES = ("user is asking", "user is saying", "user wants")

_SEPARATORS = re.compile(r"[_\-.:\s]+")
_CAMEL_BOUNDARY = re.compile(r"(?<=[a-z])(?=[A-Z])")
_WORD = re.compile(r"[^\W_]+")


def tokenize_label(label: str) -> str:
    """Turn a raw intent label into a space separated, title-cased string.

    >>> tokenize_label("AddToPlaylist")
    'Add To Playlist'
    >>> tokenize_label("oil_change_how")
    'Oil Change How'
    """
    if not isinstance(label, str) or not label.strip():
        raise InvalidInputError("intent label must be a non-empty string")
    tokens = []
    for chunk in _SEPARATORS.split(label):
        if chunk:
            tokens.extend(t for t in _CAMEL_BOUNDARY.split(chunk) if t)
    if not tokens:
        raise InvalidInputError(f"label {label!r} contains no tokens")
    # only the first character is raised; "NLU" keeps its case
    return " ".join(t[0].upper() + t[1:] for t in tokens)


def _words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


@dataclass(frozen=True)
class IntentClass:
    label: str
    description: str = ""
    entities: frozenset[str] = frozenset()

    def __post_init__(self):
        if not isinstance(self.label, str) or not self.label.strip():
            raise InvalidInputError("intent label must be a non-empty string")
        ents = frozenset(e.strip().lower() for e in self.entities)
        if "" in ents:
            raise InvalidInputError(f"class {self.label!r} has an empty entity")
        object.__setattr__(self, "entities", ents)

    @property
    def tokenized(self) -> str:
        return tokenize_label(self.label)


class IntentSchema(Sequence[IntentClass]):
    """Ordered, immutable collection of intent classes.

    Position in the schema is the class index used by every prototype
    matrix and similarity vector downstream.
    """

    def __init__(self, classes: Iterable[IntentClass]):
        self._classes = tuple(classes)
        if len(self._classes) < 2:
            raise InvalidInputError("a schema needs at least two intent classes")
        self._index: dict[str, int] = {}
        for pos, cls in enumerate(self._classes):
            if cls.label in self._index:
                raise InvalidInputError(f"duplicate intent label {cls.label!r}")
            self._index[cls.label] = pos

    def __getitem__(self, pos):
        return self._classes[pos]

    def __len__(self):
        return len(self._classes)

    def __contains__(self, label):
        return label in self._index

    def __eq__(self, other):
        return isinstance(other, IntentSchema) and self._classes == other._classes

    def __hash__(self):
        return hash(self._classes)

    def __repr__(self):
        return f"IntentSchema({list(self.labels)!r})"

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(c.label for c in self._classes)

    @property
    def index(self) -> dict[str, int]:
        return dict(self._index)

    def position(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise UnknownLabelError(label) from None


@dataclass(frozen=True)
class LabeledUtterance:
    id: str
    text: str
    gold_label: str

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise InvalidInputError(f"utterance {self.id!r} has empty text")


@dataclass
class DescriptionValidation:
    prefix_ok: bool
    exact_label_tokens_found: int
    label_token_total: int
    warnings: list[str] = field(default_factory=list)


def validate_description(intent: IntentClass) -> DescriptionValidation:
    """Check a description against the prefix and label-preservation rules.

    Missing label tokens only produce a warning, since synonyms are allowed.
    """
    desc = intent.description
    if not desc or not desc.strip():
        raise InvalidInputError(f"class {intent.label!r} has an empty description")
    lowered = " ".join(desc.lower().split())
    prefix_ok = lowered.startswith(DESCRIPTION_PREFIXES)
    desc_words = set(_words(desc))
    label_tokens = [t.lower() for t in intent.tokenized.split()]
    found = sum(1 for t in label_tokens if t in desc_words)

    warnings = []
    if not prefix_ok:
        warnings.append(
            f"{intent.label}: description does not start with one of "
            + ", ".join(repr(p) for p in DESCRIPTION_PREFIXES)
        )
    if found == 0:
        warnings.append(f"{intent.label}: description contains no label token")
    return DescriptionValidation(prefix_ok, found, len(label_tokens), warnings)


@dataclass(frozen=True)
class DescriptionStats:
    n_classes: int
    mean_label_tokens: float
    mean_description_tokens: float
    mean_added_tokens: float
    pct_with_label_token: float
    pct_label_tokens_preserved: float


def description_stats(schema: IntentSchema) -> DescriptionStats:
    label_lens, desc_lens = [], []
    with_token = found_total = token_total = 0
    for cls in schema:
        check = validate_description(cls)
        label_lens.append(len(cls.tokenized.split()))
        desc_lens.append(len(cls.description.split()))
        with_token += check.exact_label_tokens_found > 0
        found_total += check.exact_label_tokens_found
        token_total += check.label_token_total
    n = len(schema)
    mean_label = sum(label_lens) / n
    mean_desc = sum(desc_lens) / n
    return DescriptionStats(
        n_classes=n,
        mean_label_tokens=mean_label,
        mean_description_tokens=mean_desc,
        mean_added_tokens=sum(d - l for d, l in zip(desc_lens, label_lens)) / n,
        pct_with_label_token=100.0 * with_token / n,
        pct_label_tokens_preserved=100.0 * found_total / token_total,
    )


def _iter_json_lines(path):
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecordError(f"invalid JSON ({exc.msg})", path, lineno) from None
            if not isinstance(record, dict):
                raise MalformedRecordError("record is not a JSON object", path, lineno)
            yield lineno, record


def _require_str(record, key, path, lineno):
    value = record.get(key)
    if not isinstance(value, str) or not value.strip():
        raise MalformedRecordError(f"field {key!r} must be a non-empty string", path, lineno)
    return value


def load_schema(path) -> IntentSchema:
    """Read a schema JSONL file; line order defines the class index."""
    classes = []
    seen = set()
    for lineno, rec in _iter_json_lines(path):
        label = _require_str(rec, "label", path, lineno)
        description = rec.get("description", "")
        if not isinstance(description, str):
            raise MalformedRecordError("field 'description' must be a string", path, lineno)
        entities = rec.get("entities", [])
        if not isinstance(entities, list) or not all(isinstance(e, str) for e in entities):
            raise MalformedRecordError("field 'entities' must be a list of strings", path, lineno)
        if label in seen:
            raise MalformedRecordError(f"duplicate intent label {label!r}", path, lineno)
        seen.add(label)
        try:
            classes.append(IntentClass(label, description, frozenset(entities)))
        except InvalidInputError as exc:
            raise MalformedRecordError(str(exc), path, lineno) from None
    try:
        return IntentSchema(classes)
    except InvalidInputError as exc:
        raise MalformedRecordError(str(exc), path) from None


def save_schema(schema: IntentSchema, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for cls in schema:
            rec = {
                "label": cls.label,
                "description": cls.description,
                "entities": sorted(cls.entities),
            }
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def load_dataset(path, schema: IntentSchema | None = None, format: str = "jsonl"):
    """Read labelled utterances from a JSONL file.

    When ``schema`` is given every gold label must resolve in it.
    """
    if format != "jsonl":
        raise InvalidInputError(f"unsupported dataset format {format!r}")
    out = []
    seen = set()
    for lineno, rec in _iter_json_lines(path):
        uid = rec.get("id")
        if isinstance(uid, int) and not isinstance(uid, bool):
            uid = str(uid)
        if not isinstance(uid, str) or not uid:
            raise MalformedRecordError("field 'id' must be a non-empty string", path, lineno)
        text = _require_str(rec, "text", path, lineno)
        label = _require_str(rec, "label", path, lineno)
        if uid in seen:
            raise DuplicateIdError(uid, path, lineno)
        if schema is not None and label not in schema:
            raise UnknownLabelError(label, path, lineno)
        seen.add(uid)
        out.append(LabeledUtterance(uid, text, label))
    return out


def save_dataset(utterances: Iterable[LabeledUtterance], path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for u in utterances:
            rec = {"id": u.id, "text": u.text, "label": u.gold_label}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
