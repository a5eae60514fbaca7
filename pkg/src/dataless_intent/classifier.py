"""Nearest-neighbour intent prediction over combined utterance embeddings.

An utterance representation is the sum of up to three embeddings: the raw
utterance (E), its paraphrase (P) and its object-masked variant (M).  The
masked part can be gated (O) so it only contributes when two of the top-k
candidate classes share an entity.  Classes are represented by prototypes
(tokenized label, description, or a sample of synthetic examples) and the
prediction is the class with the highest cosine score.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_schema, check_utterances, gold_labels, parse_components
from .augment import AugmentedUtterance
from .corpus import IntentSchema
from .embedding import EmbeddingCache, cosine_matrix, l2_norm, lookup_table
from .exceptions import DegradedInputError, InvalidInputError, MalformedRecordError, UnknownLabelError
from .overlap import OverlapMatrix, build_overlap_matrix, overlaps, top_k_classes

__all__ = [
    "RunConfig",
    "PrototypeSet",
    "Prediction",
    "Representation",
    "load_synthetic_pool",
    "sample_synthetic",
    "build_prototypes",
    "assemble_representation",
    "combined_representation",
    "predict",
    "DatalessIntentClassifier",
]

PROTOTYPE_MODES = ("tokenized", "description", "synthetic")


@dataclass(frozen=True)
class RunConfig:
    use_E: bool = True
    use_P: bool = False
    use_M: bool = False
    use_O: bool = False
    k_overlap: int = 3
    normalize_components: bool = False
    # which vector ranks the gate's candidates: sum of active E/P or h(u) only
    gate_on: str = "active"
    synthetic_k: int | None = None
    rng_seed: int = 0

    def __post_init__(self):
        if not (self.use_E or self.use_P or self.use_M):
            raise InvalidInputError("at least one of E, P, M must be enabled")
        if self.use_O and not self.use_M:
            raise InvalidInputError("the overlap gate (O) requires masking (M)")
        if self.k_overlap < 1:
            raise InvalidInputError("k_overlap must be >= 1")
        if self.gate_on not in ("active", "utterance"):
            raise InvalidInputError("gate_on must be 'active' or 'utterance'")
        if self.synthetic_k is not None and self.synthetic_k < 1:
            raise InvalidInputError("synthetic_k must be >= 1")

    @classmethod
    def from_components(cls, spec: str, **kwargs) -> "RunConfig":
        return cls(**parse_components(spec), **kwargs)

    @property
    def components(self) -> str:
        return "".join(c for c in "EPMO" if getattr(self, f"use_{c}"))

    @property
    def setup(self) -> str:
        return "+".join(self.components)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class PrototypeSet:
    """Class prototype embeddings in schema order.

    ``vectors`` is ``(n_classes, dim)`` for the tokenized and description
    modes and ``(n_classes, k, dim)`` for synthetic examples.
    """

    mode: str
    labels: tuple[str, ...]
    texts: tuple
    vectors: np.ndarray
    model_id: str

    @property
    def dim(self) -> int:
        return self.vectors.shape[-1]

    def similarities(self, H) -> np.ndarray:
        """Cosine scores of each row of ``H`` against every class.

        For synthetic prototypes a class score is the mean cosine over
        its sampled examples.
        """
        H = np.atleast_2d(H)
        if self.vectors.ndim == 2:
            return cosine_matrix(H, self.vectors)
        C, k, d = self.vectors.shape
        return cosine_matrix(H, self.vectors.reshape(C * k, d)).reshape(len(H), C, k).mean(axis=2)

    def __eq__(self, other):
        return (isinstance(other, PrototypeSet) and self.mode == other.mode
                and self.labels == other.labels and self.texts == other.texts
                and self.model_id == other.model_id
                and np.array_equal(self.vectors, other.vectors))


def load_synthetic_pool(path, schema: IntentSchema | None = None) -> dict[str, list[str]]:
    pool: dict[str, list[str]] = {}
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                label, examples = rec["label"], rec["examples"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise MalformedRecordError(f"bad synthetic pool record ({exc})", path, lineno) from None
            if (not isinstance(examples, list) or not examples
                    or not all(isinstance(e, str) and e.strip() for e in examples)):
                raise MalformedRecordError("'examples' must be a non-empty list of strings", path, lineno)
            if schema is not None and label not in schema:
                raise UnknownLabelError(label, path, lineno)
            pool.setdefault(label, []).extend(examples)
    return pool


def sample_synthetic(pool: Mapping[str, Sequence[str]], schema: IntentSchema, k: int | None,
                     seed: int = 0, repetition: int = 0) -> list[list[str]]:
    """Draw k examples per class, uniformly without replacement.

    One generator seeded by ``(seed, repetition)`` serves all classes in
    schema order.  Sampled indices are sorted, so ``k == pool size`` gives
    the same prototypes for every seed.
    """
    missing = [c.label for c in schema if not pool.get(c.label)]
    if missing:
        raise InvalidInputError(f"synthetic pool has no examples for {missing}")
    if k is None:
        sizes = {len(pool[c.label]) for c in schema}
        if len(sizes) != 1:
            raise InvalidInputError("synthetic pools differ in size; set synthetic_k")
        return [list(pool[c.label]) for c in schema]
    rng = np.random.default_rng([seed, repetition])
    out = []
    for cls in schema:
        examples = pool[cls.label]
        if k > len(examples):
            raise InvalidInputError(
                f"class {cls.label!r} has {len(examples)} synthetic examples, {k} requested"
            )
        idx = np.sort(rng.choice(len(examples), size=k, replace=False))
        out.append([examples[i] for i in idx])
    return out


def build_prototypes(schema: IntentSchema, mode: str, provider, *, cache: EmbeddingCache | None = None,
                     synthetic_pool: Mapping[str, Sequence[str]] | None = None,
                     synthetic_k: int | None = None, rng_seed: int = 0, repetition: int = 0,
                     batch_size: int = 64) -> PrototypeSet:
    if mode not in PROTOTYPE_MODES:
        raise InvalidInputError(f"prototype mode must be one of {PROTOTYPE_MODES}, got {mode!r}")
    if mode == "synthetic":
        if synthetic_pool is None:
            raise InvalidInputError("synthetic prototypes need an example pool")
        groups = sample_synthetic(synthetic_pool, schema, synthetic_k, rng_seed, repetition)
        table = lookup_table(provider, [t for g in groups for t in g], cache, batch_size)
        vectors = np.stack([np.vstack([table[t] for t in g]) for g in groups])
        texts = tuple(tuple(g) for g in groups)
    else:
        if mode == "tokenized":
            texts = tuple(c.tokenized for c in schema)
        else:
            for c in schema:
                if not c.description.strip():
                    raise InvalidInputError(f"class {c.label!r} has no description")
            # verbatim: encoders are case-sensitive
            texts = tuple(c.description for c in schema)
        table = lookup_table(provider, texts, cache, batch_size)
        vectors = np.vstack([table[t] for t in texts])
    vectors.setflags(write=False)
    return PrototypeSet(mode, schema.labels, texts, vectors, provider.model_id)


@dataclass(frozen=True, eq=False)
class Representation:
    vector: np.ndarray
    mask_used: bool
    overlap_gate: bool | None
    degraded: bool


def _component(table, text, normalize):
    v = np.asarray(table[text], dtype=np.float64)
    if normalize:
        n = l2_norm(v)
        return v / n if n > 0 else np.zeros_like(v)
    return v


def assemble_representation(u: AugmentedUtterance, prototypes: PrototypeSet, config: RunConfig,
                            table: Mapping[str, np.ndarray], overlap_matrix: OverlapMatrix | None = None,
                            on_degenerate: str = "raise") -> Representation:
    """Combine the E/P/M components of one utterance.

    ``table`` maps every needed text (utterance, paraphrase, masked text) to
    its embedding.  With ``on_degenerate="utterance"`` an all-zero sum falls
    back to the raw utterance embedding and is flagged as degraded.
    """
    norm = config.normalize_components
    zero = np.zeros(prototypes.dim)
    degraded = False

    e = _component(table, u.text, norm) if config.use_E else zero
    if config.use_P and u.paraphrase:
        p = _component(table, u.paraphrase, norm)
    else:
        p = zero
        degraded |= config.use_P
    if config.use_M and not u.parsed:
        degraded = True

    gate = None
    mask_used = False
    if config.use_M and config.use_O:
        if config.gate_on == "utterance":
            ranking = _component(table, u.text, norm)
        else:
            ranking = e + p
            if not np.any(ranking):
                ranking = _component(table, u.text, norm)
        sims = prototypes.similarities(ranking)[0]
        gate = overlaps(sims, config.k_overlap, overlap_matrix)
        mask_used = gate and u.was_masked
    elif config.use_M:
        mask_used = u.was_masked
    m = _component(table, u.masked, norm) if mask_used else zero

    h = e + p + m
    if not np.any(h):
        if on_degenerate == "raise":
            raise DegradedInputError(u.id)
        h = _component(table, u.text, norm)
        degraded = True
    return Representation(h, mask_used, gate, degraded)


def _needed_texts(utterances, config):
    for u in utterances:
        yield u.text
        if config.use_P and u.paraphrase:
            yield u.paraphrase
        if config.use_M and u.was_masked:
            yield u.masked


def combined_representation(u: AugmentedUtterance, prototypes: PrototypeSet, config: RunConfig,
                            provider, overlap_matrix: OverlapMatrix | None = None,
                            cache: EmbeddingCache | None = None) -> np.ndarray:
    table = lookup_table(provider, _needed_texts([u], config), cache)
    return assemble_representation(u, prototypes, config, table, overlap_matrix).vector


@dataclass
class Prediction:
    id: str | None
    predicted: str
    similarities: np.ndarray = field(repr=False)
    gold: str | None = None
    rank_of_gold: int | None = None
    gated_mask: bool = False
    overlap_gate: bool | None = None
    degraded: bool = False

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "gold": self.gold,
            "predicted": self.predicted,
            "rank_of_gold": self.rank_of_gold,
            "gated_mask": self.gated_mask,
        }


def _predict_one(rep: Representation, sims: np.ndarray, prototypes: PrototypeSet,
                 uid, gold) -> Prediction:
    order = top_k_classes(sims, len(sims))
    rank = None
    if gold is not None:
        rank = order.index(prototypes.labels.index(gold)) + 1
    return Prediction(
        id=uid,
        predicted=prototypes.labels[order[0]],
        similarities=sims,
        gold=gold,
        rank_of_gold=rank,
        gated_mask=rep.mask_used,
        overlap_gate=rep.overlap_gate,
        degraded=rep.degraded,
    )


def predict(u: AugmentedUtterance, prototypes: PrototypeSet, config: RunConfig, provider,
            overlap_matrix: OverlapMatrix | None = None, gold: str | None = None,
            cache: EmbeddingCache | None = None) -> Prediction:
    table = lookup_table(provider, _needed_texts([u], config), cache)
    rep = assemble_representation(u, prototypes, config, table, overlap_matrix)
    sims = prototypes.similarities(rep.vector)[0]
    return _predict_one(rep, sims, prototypes, u.id, gold)


class DatalessIntentClassifier(ClassifierMixin, BaseEstimator):
    """Dataless nearest-neighbour intent classifier.

    ``fit`` takes an intent schema (no training utterances) and embeds the
    class prototypes; ``predict`` accepts plain strings, labelled
    utterances or :class:`AugmentedUtterance` objects carrying paraphrases
    and masks.

    Parameters
    ----------
    provider : embedding provider
        Anything with ``model_id``, ``dim`` and ``embed(texts)``.
    prototype : {"tokenized", "description", "synthetic"}
    components : str
        Subset of ``"EPMO"``.
    k_overlap : int
        Candidate count for the entity-overlap gate.
    normalize_components : bool
        L2-normalize each component before summing.
    gate_on : {"active", "utterance"}
        Vector used to rank gate candidates.
    synthetic_pool : mapping or path, optional
        ``label -> examples`` for synthetic prototypes.
    synthetic_k, repetition, random_state
        Synthetic sampling size, repetition index and seed.
    on_degenerate : {"raise", "utterance"}
        What to do when every component is absent.
    cache : EmbeddingCache, optional
    batch_size : int
    n_jobs : int
        Worker threads used for scoring; results do not depend on it.
    """

    def __init__(self, provider=None, prototype="description", components="E", k_overlap=3,
                 normalize_components=False, gate_on="active", synthetic_pool=None,
                 synthetic_k=None, repetition=0, random_state=0, on_degenerate="raise",
                 cache=None, batch_size=64, n_jobs=1):
        self.provider = provider
        self.prototype = prototype
        self.components = components
        self.k_overlap = k_overlap
        self.normalize_components = normalize_components
        self.gate_on = gate_on
        self.synthetic_pool = synthetic_pool
        self.synthetic_k = synthetic_k
        self.repetition = repetition
        self.random_state = random_state
        self.on_degenerate = on_degenerate
        self.cache = cache
        self.batch_size = batch_size
        self.n_jobs = n_jobs

    def fit(self, X, y=None):
        """Build prototypes and the overlap matrix for schema ``X``; ``y`` is ignored."""
        if self.provider is None:
            raise InvalidInputError("an embedding provider is required")
        if self.on_degenerate not in ("raise", "utterance"):
            raise InvalidInputError("on_degenerate must be 'raise' or 'utterance'")
        schema = check_schema(X)
        self.run_config_ = RunConfig.from_components(
            self.components,
            k_overlap=int(self.k_overlap),
            normalize_components=bool(self.normalize_components),
            gate_on=self.gate_on,
            synthetic_k=self.synthetic_k,
            rng_seed=int(self.random_state),
        )
        pool = self.synthetic_pool
        if isinstance(pool, (str, Path)):
            pool = load_synthetic_pool(pool, schema)
        self.cache_ = self.cache if self.cache is not None else EmbeddingCache()
        self.schema_ = schema
        self.classes_ = np.array(schema.labels, dtype=object)
        self.prototypes_ = build_prototypes(
            schema, self.prototype, self.provider, cache=self.cache_, synthetic_pool=pool,
            synthetic_k=self.synthetic_k, rng_seed=int(self.random_state),
            repetition=int(self.repetition), batch_size=self.batch_size,
        )
        self.overlap_matrix_ = build_overlap_matrix(schema)
        return self

    def _representations(self, utterances):
        config = self.run_config_
        table = lookup_table(self.provider, _needed_texts(utterances, config), self.cache_, self.batch_size)
        build = lambda u: assemble_representation(  # noqa: E731
            u, self.prototypes_, config, table, self.overlap_matrix_, self.on_degenerate)
        if self.n_jobs and self.n_jobs > 1:
            with ThreadPoolExecutor(max_workers=self.n_jobs) as pool:
                return list(pool.map(build, utterances))
        return [build(u) for u in utterances]

    def transform(self, X) -> np.ndarray:
        """Combined representation of each utterance, shape ``(n, dim)``."""
        check_is_fitted(self, "prototypes_")
        reps = self._representations(check_utterances(X))
        return np.vstack([r.vector for r in reps])

    def decision_function(self, X) -> np.ndarray:
        """Per-class similarity scores, shape ``(n, n_classes)``."""
        return self.prototypes_.similarities(self.transform(X))

    def predict_details(self, X, y=None) -> list[Prediction]:
        check_is_fitted(self, "prototypes_")
        utterances = check_utterances(X)
        gold = gold_labels(list(X), y, self.schema_)
        reps = self._representations(utterances)
        sims = self.prototypes_.similarities(np.vstack([r.vector for r in reps]))
        return [
            _predict_one(rep, s, self.prototypes_, u.id, None if gold is None else gold[i])
            for i, (u, rep, s) in enumerate(zip(utterances, reps, sims))
        ]

    def predict(self, X) -> np.ndarray:
        return np.array([p.predicted for p in self.predict_details(X)], dtype=object)
