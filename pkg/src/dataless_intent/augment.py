"""Utterance augmentation: dependency-tree object masking and paraphrases."""

from __future__ import annotations

import io
import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

from .exceptions import ConlluError, MalformedRecordError, DuplicateIdError

__all__ = [
    "MASK_TOKEN",
    "DEFAULT_MASK_RELATIONS",
    "DEFAULT_PROMPT_TEMPLATE",
    "DepToken",
    "DepTree",
    "AugmentedUtterance",
    "MaskResult",
    "parse_conllu",
    "read_conllu",
    "mask_tree",
    "augment_utterances",
    "masking_coverage",
    "ParaphraseCache",
    "CompletionParaphraser",
    "paraphrase",
    "first_line",
]

logger = logging.getLogger(__name__)

MASK_TOKEN = "[MASK]"
DEFAULT_MASK_RELATIONS = frozenset({"dobj", "pobj", "ccomp", "obj"})

DEFAULT_PROMPT_TEMPLATE = """Given an utterance, describe what the user is asking.

sentence: "set an alarm for every weekday at 7 am"
description: user is asking to set an alarm for every weekday at 7am

sentence: "can you show me the step-by-step instructions to bake chocolate chip cookies"
description: user is asking for recipe for chocolate chip cookies

sentence: "could you please tell me what time it is now"
description: user is asking for the current time

sentence: "{utterance}"
description:"""


@dataclass(frozen=True)
class DepToken:
    index: int
    form: str
    head: int
    deprel: str


class DepTree:
    """A validated dependency tree (single root, acyclic, heads in range)."""

    def __init__(self, tokens: Sequence[DepToken], sent_id: str | None = None):
        self.tokens = tuple(tokens)
        self.sent_id = sent_id
        _check_tree(self.tokens, sent_id)
        self._children: dict[int, list[int]] = {t.index: [] for t in self.tokens}
        self._children[0] = []
        for t in self.tokens:
            self._children[t.head].append(t.index)
        self.root = self._children[0][0]

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, DepTree) and self.tokens == other.tokens

    def __repr__(self):
        return f"DepTree({self.sent_id!r}, {self.text!r})"

    def token(self, index: int) -> DepToken:
        return self.tokens[index - 1]

    def children(self, index: int) -> list[int]:
        return list(self._children[index])

    def subtree(self, index: int) -> set[int]:
        out, stack = set(), [index]
        while stack:
            n = stack.pop()
            out.add(n)
            stack.extend(self._children[n])
        return out

    @property
    def text(self) -> str:
        return " ".join(t.form for t in self.tokens)

    @classmethod
    def from_rows(cls, rows, sent_id=None):
        """Build from ``(form, head, deprel)`` triples listed in token order."""
        return cls([DepToken(i, f, h, r) for i, (f, h, r) in enumerate(rows, start=1)], sent_id)


def _check_tree(tokens, sent_id, path=None, line=None):
    n = len(tokens)
    if n == 0:
        raise ConlluError("sentence has no tokens", path, line, sent_id)
    for pos, t in enumerate(tokens, start=1):
        if t.index != pos:
            raise ConlluError(f"token ids are not consecutive at {t.index}", path, line, sent_id)
        if not 0 <= t.head <= n:
            raise ConlluError(f"token {t.index} has out-of-range head {t.head}", path, line, sent_id)
        if t.head == t.index:
            raise ConlluError(f"token {t.index} is its own head (cycle)", path, line, sent_id)
    roots = [t.index for t in tokens if t.head == 0]
    if len(roots) != 1:
        raise ConlluError(f"expected exactly one root, found {len(roots)}", path, line, sent_id)
    heads = {t.index: t.head for t in tokens}
    for start in heads:
        seen = set()
        node = start
        while node != 0:
            if node in seen:
                raise ConlluError(f"cycle through token {start}", path, line, sent_id)
            seen.add(node)
            node = heads[node]


def read_conllu(source, path=None):
    """Yield ``(sent_id, tokens, first_line)`` per sentence block.

    Multiword-token ranges (``3-4``) and empty nodes (``5.1``) are skipped.
    """
    sent_id, tokens, start = None, [], None
    for lineno, raw in enumerate(source, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            if tokens or sent_id is not None:
                yield sent_id, tokens, start
            sent_id, tokens, start = None, [], None
            continue
        if start is None:
            start = lineno
        if line.startswith("#"):
            key, sep, value = line[1:].partition("=")
            if sep and key.strip() == "sent_id":
                sent_id = value.strip()
            continue
        cols = line.split("\t")
        if len(cols) != 10:
            raise ConlluError(f"expected 10 columns, got {len(cols)}", path, lineno, sent_id)
        if "-" in cols[0] or "." in cols[0]:
            continue
        try:
            idx, head = int(cols[0]), int(cols[6])
        except ValueError:
            raise ConlluError(f"non-integer ID/HEAD {cols[0]!r}/{cols[6]!r}", path, lineno, sent_id) from None
        tokens.append(DepToken(idx, cols[1], head, cols[7]))
    if tokens or sent_id is not None:
        yield sent_id, tokens, start


def parse_conllu(stream, path=None) -> dict[str, DepTree]:
    """Parse CoNLL-U text (stream, string or path) into ``sent_id -> DepTree``."""
    is_path = isinstance(stream, os.PathLike) or (
        isinstance(stream, str) and "\n" not in stream and Path(stream).is_file()
    )
    if is_path:
        path = Path(stream)
        with path.open(encoding="utf-8") as fh:
            return parse_conllu(fh, path)
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    trees: dict[str, DepTree] = {}
    for sent_id, tokens, line in read_conllu(stream, path):
        if not sent_id:
            raise ConlluError("missing '# sent_id =' comment", path, line)
        if sent_id in trees:
            raise DuplicateIdError(sent_id, path, line)
        _check_tree(tokens, sent_id, path, line)
        trees[sent_id] = DepTree(tokens, sent_id)
    return trees


class MaskResult(NamedTuple):
    masked: str | None
    was_masked: bool


def _base_relation(deprel: str) -> str:
    return deprel.split(":", 1)[0].lower()


def mask_tree(tree: DepTree, relations: Iterable[str] = DEFAULT_MASK_RELATIONS) -> MaskResult:
    """Replace object subtrees by a single mask token.

    Walks the tree from the root; a node whose relation is in ``relations``
    is masked together with its whole subtree and its descendants are not
    visited.  Adjacent masked spans merge into one mask token.
    """
    rels = {r.lower() for r in relations}
    masked: set[int] = set()
    stack = [tree.root]
    while stack:
        node = stack.pop()
        if _base_relation(tree.token(node).deprel) in rels:
            masked |= tree.subtree(node)
        else:
            stack.extend(tree.children(node))
    if not masked or len(masked) == len(tree):
        # an all-mask string carries nothing; treat as unmasked
        return MaskResult(None, False)
    out: list[str] = []
    for t in tree.tokens:
        if t.index in masked:
            if not out or out[-1] != MASK_TOKEN:
                out.append(MASK_TOKEN)
        else:
            out.append(t.form)
    return MaskResult(" ".join(out), True)


@dataclass(frozen=True)
class AugmentedUtterance:
    """An utterance with its optional paraphrase and masked variant.

    ``parsed`` records whether a dependency parse was available at all, so
    "no object to mask" and "no parse" can be told apart in run reports.
    """

    text: str
    paraphrase: str | None = None
    masked: str | None = None
    was_masked: bool = False
    id: str | None = None
    parsed: bool = True

    def __post_init__(self):
        if self.was_masked and (not self.masked or MASK_TOKEN not in self.masked):
            raise ValueError("was_masked requires a masked text containing the mask token")
        if not self.was_masked and self.masked is not None:
            object.__setattr__(self, "masked", None)


def augment_utterances(utterances, trees: Mapping[str, DepTree] | None = None,
                       paraphrases: Mapping[str, str] | None = None,
                       relations: Iterable[str] = DEFAULT_MASK_RELATIONS) -> list[AugmentedUtterance]:
    """Attach masks and paraphrases (looked up by utterance id)."""
    trees = trees or {}
    paraphrases = paraphrases or {}
    out = []
    for u in utterances:
        tree = trees.get(u.id)
        mask = mask_tree(tree, relations) if tree is not None else MaskResult(None, False)
        out.append(
            AugmentedUtterance(
                text=u.text,
                paraphrase=paraphrases.get(u.id),
                masked=mask.masked,
                was_masked=mask.was_masked,
                id=u.id,
                parsed=tree is not None,
            )
        )
    return out


def masking_coverage(dataset, trees: Mapping[str, DepTree],
                     relations: Iterable[str] = DEFAULT_MASK_RELATIONS) -> float:
    """Fraction of utterances for which masking produced something.

    Utterances without a parse count as unmasked.
    """
    dataset = list(dataset)
    if not dataset:
        return 0.0
    hits = sum(1 for u in dataset if u.id in trees and mask_tree(trees[u.id], relations).was_masked)
    return hits / len(dataset)


def first_line(text: str) -> str | None:
    for line in text.splitlines():
        if line.strip():
            return line.strip()
    return None


class ParaphraseCache:
    """``utterance id -> paraphrase`` store backed by an optional JSONL file."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self._items: dict[str, str] = {}
        if self.path is not None and self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, start=1):
                    if not line.strip():
                        continue
                    try:
                        rec = json.loads(line)
                        uid, text = str(rec["id"]), rec["paraphrase"]
                    except (json.JSONDecodeError, KeyError, TypeError) as exc:
                        raise MalformedRecordError(f"bad paraphrase record ({exc})", self.path, lineno) from None
                    if not isinstance(text, str):
                        raise MalformedRecordError("paraphrase must be a string", self.path, lineno)
                    self._items[uid] = text

    def get(self, uid):
        return self._items.get(uid)

    def __contains__(self, uid):
        return uid in self._items

    def __len__(self):
        return len(self._items)

    def as_dict(self) -> dict[str, str]:
        return dict(self._items)

    def put(self, uid: str, text: str) -> None:
        if uid in self._items:
            return
        self._items[uid] = text
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps({"id": uid, "paraphrase": text}, ensure_ascii=False) + "\n")


class CompletionParaphraser:
    """Fetch one paraphrase per utterance from a text-completion endpoint.

    Request body: ``{"model", "prompt", "max_tokens", "temperature"}``;
    the first ``choices[0].text`` line is used.
    """

    def __init__(self, url: str, model: str, *, template: str = DEFAULT_PROMPT_TEMPLATE,
                 max_tokens: int = 48, temperature: float = 0.0, api_key_env: str | None = None,
                 timeout: float = 30.0, max_retries: int = 3, backoff: float = 0.5, transport=None):
        import httpx

        self.url = url
        self.model = model
        self.template = template
        self.max_tokens = max_tokens
        self.temperature = temperature
        self.max_retries = max_retries
        self.backoff = backoff
        headers = {}
        if api_key_env and os.environ.get(api_key_env):
            headers["Authorization"] = f"Bearer {os.environ[api_key_env]}"
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)
        self._httpx = httpx

    def prompt(self, utterance: str) -> str:
        return self.template.replace("{utterance}", utterance)

    def complete(self, utterance: str) -> str | None:
        payload = {
            "model": self.model,
            "prompt": self.prompt(utterance),
            "max_tokens": self.max_tokens,
            "temperature": self.temperature,
        }
        last = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self._client.post(self.url, json=payload)
                if resp.status_code == 429 or resp.status_code >= 500:
                    last = f"HTTP {resp.status_code}"
                    continue
                resp.raise_for_status()
                return first_line(resp.json()["choices"][0]["text"])
            except self._httpx.TransportError as exc:
                last = exc
            except (self._httpx.HTTPStatusError, KeyError, IndexError, TypeError, ValueError) as exc:
                last = exc
                break
        logger.warning("paraphrase request failed for %r: %s", utterance, last)
        return None


def paraphrase(utterance, cache: ParaphraseCache | None = None,
               provider: CompletionParaphraser | None = None) -> str | None:
    """Return the paraphrase for a :class:`LabeledUtterance`-like object.

    Cache first, then the live provider (whose answer is cached); ``None``
    when neither can supply one.
    """
    uid = utterance.id
    if cache is not None:
        hit = cache.get(uid)
        if hit is not None:
            return hit
    if provider is None:
        return None
    text = provider.complete(utterance.text)
    if text and cache is not None:
        cache.put(uid, text)
    return text
