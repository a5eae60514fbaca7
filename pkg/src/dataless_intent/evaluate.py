"""Scoring, candidate-rank analysis, embedding similarity statistics and ablations."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .augment import AugmentedUtterance
from .classifier import DatalessIntentClassifier, Prediction, RunConfig, _needed_texts
from .corpus import IntentSchema, LabeledUtterance
from .embedding import EmbeddingCache, lookup_table
from .exceptions import DatalessIntentError, InvalidInputError, MalformedRecordError, UnknownLabelError

__all__ = [
    "EvaluationReport",
    "SimilarityStats",
    "DatasetBundle",
    "AblationRow",
    "DEFAULT_ABLATION",
    "TOPK_DEFAULT",
    "CSV_COLUMNS",
    "score",
    "topk_recall",
    "class_similarity_stats",
    "run_ablation",
    "emit_report",
    "write_predictions",
    "read_predictions",
    "topk_markdown",
]

logger = logging.getLogger(__name__)

TOPK_DEFAULT = (1, 3, 5, 10)
DEFAULT_ABLATION = ("E", "P", "M", "EP", "EM", "PM", "EPM", "EMO", "PMO", "EPMO")
CSV_COLUMNS = ("setup", "E", "P", "M", "O", "dataset", "accuracy", "macro_f1", "mean")


def _get(p, name, default=None):
    if isinstance(p, Mapping):
        return p.get(name, default)
    return getattr(p, name, default)


@dataclass
class EvaluationReport:
    accuracy: float
    macro_f1: float
    mean_acc_f1: float
    per_class_f1: dict[str, float]
    topk_recall: dict[int, float] | None
    n_utterances: int
    n_degraded: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.topk_recall is not None:
            d["topk_recall"] = {str(k): v for k, v in self.topk_recall.items()}
        return d


def score(predictions, schema: IntentSchema | None = None, ks: Sequence[int] = TOPK_DEFAULT) -> EvaluationReport:
    """Accuracy, macro-F1 and their mean.

    Macro-F1 averages one-vs-rest F1 over the classes that occur in the
    gold labels; a class with no true positives scores 0.  Top-k recall is
    included when every prediction carries ``rank_of_gold``.
    """
    predictions = list(predictions)
    if not predictions:
        raise InvalidInputError("cannot score an empty prediction set")
    gold = [_get(p, "gold") for p in predictions]
    pred = [_get(p, "predicted") for p in predictions]
    if any(g is None for g in gold):
        raise InvalidInputError("every prediction needs a gold label to be scored")
    if schema is not None:
        for label in (*gold, *pred):
            if label not in schema:
                raise UnknownLabelError(label)

    tp: dict[str, int] = {}
    n_gold: dict[str, int] = {}
    n_pred: dict[str, int] = {}
    for g, p in zip(gold, pred):
        n_gold[g] = n_gold.get(g, 0) + 1
        n_pred[p] = n_pred.get(p, 0) + 1
        if g == p:
            tp[g] = tp.get(g, 0) + 1
    order = schema.labels if schema is not None else sorted(n_gold)
    per_class = {}
    for label in order:
        if label not in n_gold:
            continue
        t = tp.get(label, 0)
        # F1 = 2TP / (2TP + FP + FN)
        per_class[label] = 2 * t / (n_gold[label] + n_pred.get(label, 0)) if t else 0.0
    accuracy = sum(tp.values()) / len(predictions)
    macro = sum(per_class.values()) / len(per_class)

    ranks_known = all(_get(p, "rank_of_gold") is not None for p in predictions)
    degraded = sum(bool(_get(p, "degraded", False)) for p in predictions)
    return EvaluationReport(
        accuracy=accuracy,
        macro_f1=macro,
        mean_acc_f1=(accuracy + macro) / 2,
        per_class_f1=per_class,
        topk_recall=topk_recall(predictions, ks) if ranks_known else None,
        n_utterances=len(predictions),
        n_degraded=degraded,
    )


def topk_recall(predictions, ks: Iterable[int] = TOPK_DEFAULT) -> dict[int, float]:
    """Fraction of predictions whose gold class ranks within the top k."""
    predictions = list(predictions)
    if not predictions:
        raise InvalidInputError("cannot compute top-k recall on an empty prediction set")
    ranks = []
    for p in predictions:
        r = _get(p, "rank_of_gold")
        if r is None:
            raise InvalidInputError(f"prediction {_get(p, 'id')!r} has no rank_of_gold")
        ranks.append(int(r))
    ranks = np.asarray(ranks)
    return {int(k): float(np.count_nonzero(ranks <= k) / len(ranks)) for k in sorted(ks)}


@dataclass
class SimilarityStats:
    s_in: float
    s_out: float
    delta: float
    pct_delta: float
    per_class: dict[str, tuple[float, float]] = field(default_factory=dict)
    excluded: list[str] = field(default_factory=list)
    approximate: bool = False


def class_similarity_stats(dataset: Sequence[LabeledUtterance], embeddings, *,
                           max_per_class: int | None = None, seed: int = 0) -> SimilarityStats:
    """Mean in-class and out-of-class cosine similarity of utterance embeddings.

    For each class c the in-class score averages cosine over ordered pairs of
    distinct class-c utterances; the out-class score averages cosine between
    class-c utterances and every utterance of another class.  Both are then
    averaged over classes.  Classes with fewer than two utterances are
    excluded.  ``max_per_class`` subsamples each class (seeded) and marks the
    result approximate.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    labels = [u.gold_label for u in dataset]
    if X.ndim != 2 or X.shape[0] != len(labels):
        raise InvalidInputError("need one embedding row per utterance")
    norms = np.sqrt(np.sum(X * X, axis=1))
    if np.any(norms == 0):
        raise InvalidInputError("zero-norm utterance embedding")
    Xn = X / norms[:, None]

    groups: dict[str, list[int]] = {}
    for i, label in enumerate(labels):
        groups.setdefault(label, []).append(i)
    approximate = False
    if max_per_class is not None:
        rng = np.random.default_rng(seed)
        for label in sorted(groups):
            idx = groups[label]
            if len(idx) > max_per_class:
                groups[label] = sorted(rng.choice(idx, size=max_per_class, replace=False).tolist())
                approximate = True
    if len(groups) < 2:
        raise InvalidInputError("similarity statistics need at least two classes")

    excluded = sorted(label for label, idx in groups.items() if len(idx) < 2)
    if excluded:
        logger.warning("excluding classes with fewer than 2 utterances: %s", ", ".join(excluded))
    per_class = {}
    for label in sorted(groups):
        if label in excluded:
            continue
        idx = groups[label]
        other = [i for lab, ix in groups.items() if lab != label for i in ix]
        block = Xn[idx] @ Xn[idx].T
        n = len(idx)
        s_in = (block.sum() - np.trace(block)) / (n * (n - 1))
        s_out = float((Xn[idx] @ Xn[other].T).mean())
        per_class[label] = (float(s_in), s_out)
    if not per_class:
        raise InvalidInputError("no class has at least two utterances")
    s_in = float(np.mean([v[0] for v in per_class.values()]))
    s_out = float(np.mean([v[1] for v in per_class.values()]))
    delta = s_in - s_out
    pct = 100.0 * delta / s_out if s_out != 0 else math.nan
    return SimilarityStats(s_in, s_out, delta, pct, per_class, excluded, approximate)


@dataclass
class DatasetBundle:
    """One evaluation dataset with its schema and augmented utterances."""

    name: str
    schema: IntentSchema
    utterances: list[LabeledUtterance]
    augmented: list[AugmentedUtterance]

    def __post_init__(self):
        if len(self.utterances) != len(self.augmented):
            raise InvalidInputError(f"{self.name}: utterances and augmentations differ in length")


@dataclass
class AblationRow:
    config: RunConfig
    reports: dict[str, EvaluationReport | None]
    predictions: dict[str, list[Prediction]] = field(default_factory=dict, repr=False)
    errors: dict[str, str] = field(default_factory=dict)

    @property
    def overall(self) -> float | None:
        """Unweighted mean over datasets of the accuracy/F1 mean."""
        vals = [r.mean_acc_f1 for r in self.reports.values() if r is not None]
        if not vals or len(vals) != len(self.reports):
            return None
        return sum(vals) / len(vals)


def _prefetch(bundles, configs, provider, cache, batch_size, pool=None):
    texts = [t for examples in (pool or {}).values() for t in examples]
    for b in bundles:
        for cls in b.schema:
            texts.append(cls.tokenized)
            if cls.description:
                texts.append(cls.description)
        for cfg in configs:
            texts.extend(_needed_texts(b.augmented, cfg))
    lookup_table(provider, texts, cache, batch_size)


def run_ablation(bundles: Sequence[DatasetBundle], provider, configs=DEFAULT_ABLATION, *,
                 prototype: str = "description", workers: int = 1, cache: EmbeddingCache | None = None,
                 on_degenerate: str = "utterance", batch_size: int = 64, **estimator_params) -> list[AblationRow]:
    """Evaluate every component configuration on every dataset.

    Embeddings are fetched once up front so that worker threads only read
    the cache; rows come back in ``configs`` order whatever ``workers`` is.
    A failing (config, dataset) cell is recorded in ``AblationRow.errors``.
    """
    configs = [c if isinstance(c, RunConfig) else RunConfig.from_components(c) for c in configs]
    cache = cache if cache is not None else EmbeddingCache()
    pool = estimator_params.get("synthetic_pool")
    _prefetch(bundles, configs, provider, cache, batch_size, pool if isinstance(pool, Mapping) else None)

    def run(task):
        cfg, bundle = task
        clf = DatalessIntentClassifier(
            provider=provider, prototype=prototype, components=cfg.components,
            k_overlap=cfg.k_overlap, normalize_components=cfg.normalize_components,
            gate_on=cfg.gate_on, synthetic_k=cfg.synthetic_k, random_state=cfg.rng_seed,
            on_degenerate=on_degenerate, cache=cache, batch_size=batch_size, **estimator_params,
        )
        try:
            clf.fit(bundle.schema)
            preds = clf.predict_details(bundle.augmented, [u.gold_label for u in bundle.utterances])
            return preds, score(preds, bundle.schema), None
        except DatalessIntentError as exc:
            logger.warning("ablation %s on %s failed: %s", cfg.setup, bundle.name, exc)
            return [], None, str(exc)

    tasks = [(cfg, b) for cfg in configs for b in bundles]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(t) for t in tasks]

    rows = []
    it = iter(results)
    for cfg in configs:
        row = AblationRow(cfg, {})
        for b in bundles:
            preds, report, err = next(it)
            row.reports[b.name] = report
            row.predictions[b.name] = preds
            if err is not None:
                row.errors[b.name] = err
        rows.append(row)
    return rows


def _fmt(x):
    return "" if x is None else repr(float(x))


def _pct(x):
    return "-" if x is None else f"{100 * x:.2f}"


def _ablation_csv_rows(rows):
    for row in rows:
        cfg = row.config
        flags = [int(getattr(cfg, f"use_{c}")) for c in "EPMO"]
        ok = [r for r in row.reports.values() if r is not None]
        for name, rep in row.reports.items():
            if rep is None:
                yield [cfg.setup, *flags, name, "", "", ""]
            else:
                yield [cfg.setup, *flags, name, _fmt(rep.accuracy), _fmt(rep.macro_f1), _fmt(rep.mean_acc_f1)]
        if ok and len(ok) == len(row.reports):
            acc = sum(r.accuracy for r in ok) / len(ok)
            f1 = sum(r.macro_f1 for r in ok) / len(ok)
            yield [cfg.setup, *flags, "overall", _fmt(acc), _fmt(f1), _fmt(row.overall)]


def emit_report(rows: Sequence[AblationRow], out_dir, formats: Iterable[str] = ("csv", "md"),
                stem: str = "ablation") -> list[Path]:
    """Write the ablation grid as CSV and/or a Markdown table.

    CSV columns are fixed (``CSV_COLUMNS``); per-dataset rows are followed
    by an ``overall`` row per setup holding the unweighted mean across
    datasets.  Markdown shows percentages with two decimals.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    formats = list(formats)
    for fmt in formats:
        if fmt not in ("csv", "md"):
            raise InvalidInputError(f"unknown report format {fmt!r}")
    if "csv" in formats:
        path = out_dir / f"{stem}.csv"
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            w.writerows(_ablation_csv_rows(rows))
        written.append(path)
    if "md" in formats:
        path = out_dir / f"{stem}.md"
        path.write_text(ablation_markdown(rows), encoding="utf-8")
        written.append(path)
    return written


def ablation_markdown(rows: Sequence[AblationRow]) -> str:
    names = list(rows[0].reports) if rows else []
    head = ["E", "P", "M", "O", *names, "Ovr."]
    lines = ["| " + " | ".join(head) + " |", "|" + "|".join([":-:"] * len(head)) + "|"]
    for row in rows:
        marks = ["x" if getattr(row.config, f"use_{c}") else "" for c in "EPMO"]
        cells = [_pct(None if row.reports[n] is None else row.reports[n].mean_acc_f1) for n in names]
        lines.append("| " + " | ".join(marks + cells + [_pct(row.overall)]) + " |")
    return "\n".join(lines) + "\n"


def topk_markdown(table: Mapping[str, Mapping[int, float]]) -> str:
    ks = sorted({k for v in table.values() for k in v})
    lines = ["| Dataset | " + " | ".join(f"Top-{k}" for k in ks) + " |",
             "|---|" + "|".join(["--:"] * len(ks)) + "|"]
    for name, rec in table.items():
        lines.append(f"| {name} | " + " | ".join(_pct(rec.get(k)) for k in ks) + " |")
    return "\n".join(lines) + "\n"


def write_predictions(predictions: Iterable[Prediction], path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for p in predictions:
            fh.write(json.dumps(p.to_record(), ensure_ascii=False) + "\n")


def read_predictions(path) -> list[dict]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecordError(f"invalid JSON ({exc.msg})", path, lineno) from None
            if not isinstance(rec, dict) or "predicted" not in rec or "gold" not in rec:
                raise MalformedRecordError("prediction record needs 'gold' and 'predicted'", path, lineno)
            out.append(rec)
    return out
