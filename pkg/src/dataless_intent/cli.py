"""Command line interface.

Exit codes: 0 success, 1 input error, 2 provider/transport error,
3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .augment import (
    DEFAULT_MASK_RELATIONS,
    CompletionParaphraser,
    ParaphraseCache,
    augment_utterances,
    mask_tree,
    masking_coverage,
    paraphrase,
    parse_conllu,
)
from .classifier import DatalessIntentClassifier, RunConfig, load_synthetic_pool
from .corpus import description_stats, load_dataset, load_schema, validate_description
from .embedding import CacheOnlyProvider, EmbeddingCache, HashingEmbedder, HTTPEmbedder, embed_all, lookup_table
from .evaluate import (
    DEFAULT_ABLATION,
    DatasetBundle,
    class_similarity_stats,
    emit_report,
    read_predictions,
    run_ablation,
    score,
    topk_markdown,
    topk_recall,
    write_predictions,
)
from .exceptions import CacheCorruptionError, InvalidInputError, ProviderError

logger = logging.getLogger("dataless_intent")

EXIT_OK, EXIT_INPUT, EXIT_PROVIDER, EXIT_INTERNAL = 0, 1, 2, 3


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_config(path):
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{path}: invalid JSON config ({exc.msg})") from None
    if not isinstance(cfg, dict):
        raise InvalidInputError(f"{path}: config must be a JSON object")
    return cfg


def make_provider(args, config):
    kind = args.provider
    if kind == "test":
        return HashingEmbedder(dim=args.dim, seed=args.embed_seed)
    if kind == "http":
        if not args.endpoint or not args.model:
            raise InvalidInputError("--provider http needs --endpoint and --model")
        return HTTPEmbedder(
            args.endpoint, args.model,
            api_key_env=config.get("api_key_env"),
            timeout=float(config.get("timeout", 30.0)),
            batch_size=int(config.get("batch_size", args.batch_size)),
            max_retries=int(config.get("max_retries", 3)),
        )
    if not args.model:
        raise InvalidInputError("--provider file needs --model (the cached model id)")
    return CacheOnlyProvider(args.model)


def make_paraphraser(args, config):
    url = args.paraphrase_endpoint or config.get("completion_url")
    if not url:
        return None
    model = args.paraphrase_model or config.get("completion_model")
    if not model:
        raise InvalidInputError("a paraphrase endpoint needs --paraphrase-model")
    kwargs = {k: config[k] for k in ("max_tokens", "temperature", "timeout", "max_retries") if k in config}
    if "prompt_template" in config:
        kwargs["template"] = config["prompt_template"]
    return CompletionParaphraser(url, model, api_key_env=config.get("api_key_env"), **kwargs)


def _relations(args):
    if args.mask_relations:
        return frozenset(r.strip() for r in args.mask_relations.split(",") if r.strip())
    return DEFAULT_MASK_RELATIONS


def load_bundle(name, schema_path, dataset_path, conllu_path=None, paraphrase_path=None,
                relations=DEFAULT_MASK_RELATIONS, paraphraser=None):
    schema = load_schema(schema_path)
    data = load_dataset(dataset_path, schema)
    trees = parse_conllu(Path(conllu_path)) if conllu_path else {}
    cache = ParaphraseCache(paraphrase_path) if paraphrase_path else None
    paras = {}
    if cache is not None or paraphraser is not None:
        for u in data:
            p = paraphrase(u, cache, paraphraser)
            if p:
                paras[u.id] = p
    return DatasetBundle(name, schema, data, augment_utterances(data, trees, paras, relations))


def _bundle_from_dir(path, relations, paraphraser):
    d = Path(path)
    opt = lambda n: d / n if (d / n).exists() else None  # noqa: E731
    return load_bundle(d.name, d / "schema.jsonl", d / "dataset.jsonl", opt("parses.conllu"),
                       opt("paraphrases.jsonl"), relations, paraphraser)


def _bundles(args, config):
    relations = _relations(args)
    paraphraser = make_paraphraser(args, config)
    bundles = [_bundle_from_dir(p, relations, paraphraser) for p in (args.bundle or [])]
    if args.dataset:
        if not args.schema:
            raise InvalidInputError("--dataset needs --schema")
        bundles.append(load_bundle(Path(args.dataset).stem, args.schema, args.dataset, args.conllu,
                                   args.paraphrases, relations, paraphraser))
    if not bundles:
        raise InvalidInputError("no dataset given (use --dataset/--schema or --bundle)")
    names = [b.name for b in bundles]
    if len(set(names)) != len(names):
        raise InvalidInputError(f"dataset names must be unique, got {names}")
    return bundles


def _input_files(args):
    files = {}
    for key in ("schema", "dataset", "conllu", "paraphrases", "synthetic_pool", "predictions", "config"):
        val = getattr(args, key, None)
        if val:
            files[key] = val
    for i, b in enumerate(getattr(args, "bundle", None) or []):
        for p in sorted(Path(b).glob("*")):
            if p.is_file():
                files[f"bundle{i}/{p.name}"] = str(p)
    return {k: {"path": str(v), "sha256": sha256_file(v)} for k, v in files.items()}


def write_manifest(args, out_dir, model_id=None, config=None):
    manifest = {
        "tool": "dataless-intent",
        "version": __version__,
        "command": args.command,
        "config": config or {},
        "inputs": _input_files(args),
        "model_id": model_id,
        "rng_seed": args.seed,
    }
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _out_dir(args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _classifier(args, provider, cache, config=None):
    pool = load_synthetic_pool(args.synthetic_pool) if args.synthetic_pool else None
    return DatalessIntentClassifier(
        provider=provider,
        prototype=args.prototype,
        components=args.components,
        k_overlap=args.k_overlap,
        normalize_components=args.normalize_components,
        gate_on=args.gate_on,
        synthetic_pool=pool,
        synthetic_k=args.synthetic_k,
        repetition=args.repetition,
        random_state=args.seed,
        on_degenerate=args.on_degenerate,
        cache=cache,
        batch_size=int((config or {}).get("batch_size", args.batch_size)),
        n_jobs=args.workers,
    )


def _run_config_snapshot(args):
    cfg = RunConfig.from_components(
        args.components, k_overlap=args.k_overlap, normalize_components=args.normalize_components,
        gate_on=args.gate_on, synthetic_k=args.synthetic_k, rng_seed=args.seed,
    ).to_dict()
    cfg.update(prototype=args.prototype, repetition=args.repetition, on_degenerate=args.on_degenerate,
               mask_relations=sorted(_relations(args)))
    return cfg


# -- subcommands ------------------------------------------------------------


def cmd_validate(args):
    schema = load_schema(args.schema)
    checks = {}
    for cls in schema:
        v = validate_description(cls)
        checks[cls.label] = {
            "tokenized": cls.tokenized,
            "prefix_ok": v.prefix_ok,
            "exact_label_tokens_found": v.exact_label_tokens_found,
            "label_token_total": v.label_token_total,
            "warnings": v.warnings,
        }
        for w in v.warnings:
            logger.warning(w)
    result = {"classes": checks, "stats": vars(description_stats(schema))}
    if args.dataset:
        data = load_dataset(args.dataset, schema)
        result["n_utterances"] = len(data)
    text = json.dumps(result, indent=2)
    if args.out_dir:
        (_out_dir(args) / "validation.json").write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_embed(args):
    if not args.embed_cache:
        raise InvalidInputError("embed needs --embed-cache")
    config = _load_config(args.config)
    provider = make_provider(args, config)
    cache = EmbeddingCache(args.embed_cache)
    bundles = _bundles(args, config)
    texts = []
    for b in bundles:
        for cls in b.schema:
            texts.append(cls.tokenized)
            if cls.description:
                texts.append(cls.description)
        for u in b.augmented:
            texts.append(u.text)
            if u.paraphrase:
                texts.append(u.paraphrase)
            if u.was_masked:
                texts.append(u.masked)
    if args.synthetic_pool:
        for examples in load_synthetic_pool(args.synthetic_pool).values():
            texts.extend(examples)
    unique = list(dict.fromkeys(texts))
    before = len(cache)
    embed_all(provider, unique, cache, int(config.get("batch_size", args.batch_size)))
    print(json.dumps({"texts": len(unique), "new_vectors": len(cache) - before,
                      "model": provider.model_id, "cache": str(args.embed_cache)}))
    return EXIT_OK


def cmd_mask(args):
    if not args.conllu:
        raise InvalidInputError("mask needs --conllu")
    trees = parse_conllu(Path(args.conllu))
    relations = _relations(args)
    out = _out_dir(args)
    if args.dataset:
        schema = load_schema(args.schema) if args.schema else None
        items = [(u.id, u.text) for u in load_dataset(args.dataset, schema)]
    else:
        items = [(sid, t.text) for sid, t in trees.items()]
    n_masked = 0
    with (out / "masked.jsonl").open("w", encoding="utf-8") as fh:
        for uid, text in items:
            tree = trees.get(uid)
            res = mask_tree(tree, relations) if tree is not None else None
            masked = res.masked if res else None
            n_masked += bool(res and res.was_masked)
            rec = {"id": uid, "text": text, "masked": masked, "was_masked": bool(res and res.was_masked),
                   "parsed": tree is not None}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    coverage = n_masked / len(items) if items else 0.0
    summary = {"n_utterances": len(items), "n_masked": n_masked, "coverage": coverage}
    (out / "coverage.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(summary))
    return EXIT_OK


def cmd_classify(args):
    config = _load_config(args.config)
    provider = make_provider(args, config)
    cache = EmbeddingCache(args.embed_cache) if args.embed_cache else EmbeddingCache()
    bundle = _bundles(args, config)[0]
    clf = _classifier(args, provider, cache, config).fit(bundle.schema)
    preds = clf.predict_details(bundle.augmented, [u.gold_label for u in bundle.utterances])
    out = _out_dir(args)
    write_predictions(preds, out / "predictions.jsonl")
    if clf.run_config_.use_O:
        with (out / "gates.jsonl").open("w", encoding="utf-8") as fh:
            for u, p in zip(bundle.augmented, preds):
                fh.write(json.dumps({"id": p.id, "overlap_gate": p.overlap_gate,
                                     "was_masked": u.was_masked}) + "\n")
    write_manifest(args, out, provider.model_id, _run_config_snapshot(args))
    n_deg = sum(p.degraded for p in preds)
    print(json.dumps({"n_predictions": len(preds), "n_degraded": n_deg,
                      "predictions": str(out / "predictions.jsonl")}))
    return EXIT_OK


def cmd_evaluate(args):
    if not args.predictions:
        raise InvalidInputError("evaluate needs --predictions")
    schema = load_schema(args.schema) if args.schema else None
    preds = [r for path in args.predictions for r in read_predictions(path)]
    report = score(preds, schema)
    text = json.dumps(report.to_dict(), indent=2)
    if args.out_dir:
        (_out_dir(args) / "report.json").write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_ablate(args):
    config = _load_config(args.config)
    provider = make_provider(args, config)
    cache = EmbeddingCache(args.embed_cache) if args.embed_cache else EmbeddingCache()
    bundles = _bundles(args, config)
    setups = args.setups.split(",") if args.setups else list(DEFAULT_ABLATION)
    configs = [
        RunConfig.from_components(s, k_overlap=args.k_overlap, normalize_components=args.normalize_components,
                                  gate_on=args.gate_on, synthetic_k=args.synthetic_k, rng_seed=args.seed)
        for s in setups
    ]
    pool = load_synthetic_pool(args.synthetic_pool) if args.synthetic_pool else None
    extra = {"synthetic_pool": pool, "repetition": args.repetition} if pool else {}
    rows = run_ablation(bundles, provider, configs, prototype=args.prototype, workers=args.workers,
                        cache=cache, on_degenerate=args.on_degenerate,
                        batch_size=int(config.get("batch_size", args.batch_size)), **extra)
    out = _out_dir(args)
    emit_report(rows, out)
    pred_dir = out / "predictions"
    pred_dir.mkdir(exist_ok=True)
    for row in rows:
        for name, preds in row.predictions.items():
            write_predictions(preds, pred_dir / f"{row.config.components}__{name}.jsonl")
    snapshot = {"setups": [c.components for c in configs], "prototype": args.prototype,
                "k_overlap": args.k_overlap, "normalize_components": args.normalize_components,
                "gate_on": args.gate_on, "on_degenerate": args.on_degenerate,
                "mask_relations": sorted(_relations(args))}
    write_manifest(args, out, provider.model_id, snapshot)
    failed = {r.config.setup: r.errors for r in rows if r.errors}
    print((out / "ablation.md").read_text(encoding="utf-8"), end="")
    if failed:
        logger.warning("failed cells: %s", failed)
    return EXIT_OK


def cmd_stats(args):
    result = {}
    out = _out_dir(args) if args.out_dir else None
    if args.dataset:
        config = _load_config(args.config)
        provider = make_provider(args, config)
        cache = EmbeddingCache(args.embed_cache) if args.embed_cache else EmbeddingCache()
        schema = load_schema(args.schema) if args.schema else None
        data = load_dataset(args.dataset, schema)
        table = lookup_table(provider, [u.text for u in data], cache)
        emb = [table[u.text] for u in data]
        st = class_similarity_stats(data, emb, max_per_class=args.max_per_class, seed=args.seed)
        result["similarity"] = {
            "s_in": st.s_in, "s_out": st.s_out, "delta": st.delta, "pct_delta": st.pct_delta,
            "excluded": st.excluded, "approximate": st.approximate,
        }
    if args.predictions:
        topk = {}
        for path in args.predictions:
            topk[Path(path).stem] = topk_recall(read_predictions(path))
        result["topk_recall"] = {name: {str(k): v for k, v in rec.items()} for name, rec in topk.items()}
        if out is not None:
            (out / "topk.md").write_text(topk_markdown(topk), encoding="utf-8")
    if not result:
        raise InvalidInputError("stats needs --dataset and/or --predictions")
    text = json.dumps(result, indent=2)
    if out is not None:
        (out / "stats.json").write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "embed": cmd_embed,
    "mask": cmd_mask,
    "classify": cmd_classify,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "stats": cmd_stats,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("inputs")
    g.add_argument("--schema")
    g.add_argument("--dataset")
    g.add_argument("--conllu")
    g.add_argument("--paraphrases")
    g.add_argument("--bundle", action="append", metavar="DIR",
                   help="directory with schema.jsonl, dataset.jsonl and optional parses.conllu, paraphrases.jsonl")
    g.add_argument("--predictions", action="append")
    g.add_argument("--synthetic-pool")
    g.add_argument("--config", help="JSON file with provider settings (api_key_env, timeout, ...)")
    p = common.add_argument_group("provider")
    p.add_argument("--provider", choices=("file", "http", "test"), default="file")
    p.add_argument("--endpoint")
    p.add_argument("--model")
    p.add_argument("--embed-cache")
    p.add_argument("--dim", type=int, default=256, help="test provider dimension")
    p.add_argument("--embed-seed", type=int, default=0, help="test provider hashing seed")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--paraphrase-endpoint")
    p.add_argument("--paraphrase-model")
    r = common.add_argument_group("run")
    r.add_argument("--components", default="E")
    r.add_argument("--setups", help="comma separated component sets for ablate")
    r.add_argument("--prototype", choices=("tokenized", "description", "synthetic"), default="description")
    r.add_argument("--k-overlap", type=int, default=3)
    r.add_argument("--normalize-components", action="store_true")
    r.add_argument("--gate-on", choices=("active", "utterance"), default="active")
    r.add_argument("--mask-relations", help="comma separated relation labels")
    r.add_argument("--synthetic-k", type=int)
    r.add_argument("--repetition", type=int, default=0)
    r.add_argument("--on-degenerate", choices=("raise", "utterance"), default=None)
    r.add_argument("--max-per-class", type=int)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--out-dir")
    r.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dataless-intent", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "validate": "check descriptions and print description statistics",
        "embed": "populate the embedding cache",
        "mask": "mask object spans from CoNLL-U parses",
        "classify": "predict intents for one run configuration",
        "evaluate": "score a predictions file",
        "ablate": "run the component ablation grid",
        "stats": "in/out-class similarity and top-k recall",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.on_degenerate is None:
        args.on_degenerate = "utterance" if args.command == "ablate" else "raise"
    needs_out = {"mask", "classify", "ablate"}
    if args.command in needs_out and not args.out_dir:
        parser.error(f"{args.command} needs --out-dir")
    try:
        return COMMANDS[args.command](args)
    except (InvalidInputError, CacheCorruptionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ProviderError as exc:
        print(f"provider error: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except Exception as exc:  # noqa: BLE001
        logger.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
