"""Input coercion helpers shared by the estimator and the command line."""

from __future__ import annotations

from pathlib import Path

from .augment import AugmentedUtterance
from .corpus import IntentClass, IntentSchema, LabeledUtterance, load_schema
from .exceptions import InvalidInputError, UnknownLabelError

COMPONENTS = "EPMO"


def check_schema(X) -> IntentSchema:
    """Accept a schema, a path to a schema file, or an iterable of classes."""
    if isinstance(X, IntentSchema):
        return X
    if isinstance(X, (str, Path)):
        return load_schema(X)
    try:
        classes = list(X)
    except TypeError:
        raise InvalidInputError(f"cannot interpret {type(X).__name__} as an intent schema") from None
    if not all(isinstance(c, IntentClass) for c in classes):
        raise InvalidInputError("schema iterables must contain IntentClass objects")
    return IntentSchema(classes)


def check_utterances(X) -> list[AugmentedUtterance]:
    if isinstance(X, (str, AugmentedUtterance, LabeledUtterance)):
        raise InvalidInputError("expected a sequence of utterances, got a single item")
    out = []
    for i, item in enumerate(X):
        if isinstance(item, AugmentedUtterance):
            out.append(item)
        elif isinstance(item, LabeledUtterance):
            out.append(AugmentedUtterance(item.text, id=item.id, parsed=False))
        elif isinstance(item, str):
            if not item.strip():
                raise InvalidInputError(f"utterance {i} is empty")
            out.append(AugmentedUtterance(item, id=str(i), parsed=False))
        else:
            raise InvalidInputError(f"unsupported utterance type {type(item).__name__}")
    if not out:
        raise InvalidInputError("no utterances given")
    return out


def gold_labels(X, y, schema: IntentSchema):
    """Resolve gold labels from ``y`` or from labelled inputs; ``None`` if absent."""
    if y is None:
        if all(isinstance(u, LabeledUtterance) for u in X):
            y = [u.gold_label for u in X]
        else:
            return None
    y = list(y)
    if len(y) != len(X):
        raise InvalidInputError(f"got {len(X)} utterances but {len(y)} labels")
    for label in y:
        if label not in schema:
            raise UnknownLabelError(label)
    return y


def parse_components(spec: str) -> dict[str, bool]:
    """``"EPMO"``-subset string to ``use_*`` flags (``"E+M"`` also accepted)."""
    letters = spec.replace("+", "").replace(",", "").replace(" ", "").upper()
    bad = set(letters) - set(COMPONENTS)
    if not letters or bad:
        raise InvalidInputError(f"components must be a non-empty subset of {COMPONENTS!r}, got {spec!r}")
    return {f"use_{c}": c in letters for c in COMPONENTS}
