"""Command-line entry point: one subcommand per pipeline stage.

A shared TOML config supplies defaults; explicit flags always win. Logs go
to stderr, data to files or stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .corpus import (
    FilterPolicy,
    IngestError,
    apply_filters,
    index_conversations,
    ingest_jsonl,
    load_corpus,
    load_schema_map,
    to_canonical_dict,
)
from .evaluation import (
    binary_feedback_labels,
    category_agreement,
    cohen_kappa,
    confusion_to_csv,
    dataset_stats,
    evaluate,
    gold_to_records,
    load_gold,
    mutual_category_pairs,
)
from .extractor import load_records, run_pipeline
from .judge import (
    EXCLUDE,
    HALF_CREDIT,
    blind_pairs,
    judge_pairs,
    load_pairs,
    load_verdicts,
    resolve_judge_template,
    save_verdicts,
    win_rate,
)
from .llm_client import EndpointConfig, GenerationParams, LLMClient
from .prompting import category_from_value, resolve_template
from .service import ServiceState, create_app
from .trainset import (
    SplitSpec,
    build_kto,
    build_rephrase_pairs,
    build_sft,
    pair_to_dict,
    preference_to_dict,
    save_jsonl,
    sft_to_dict,
    split_train_val,
)

DEFAULT_SEEDS = {"bootstrap": 0, "split": 0, "blinding": 0, "downsample": 0}


class CliError(Exception):
    pass


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    config_path = Path(path)
    if not config_path.exists():
        raise CliError(f"config file not found: {path}")
    with open(config_path, "rb") as fh:
        return tomllib.load(fh)


def _cfg(config: dict, *keys, default=None):
    node = config
    for key in keys:
        if not isinstance(node, dict) or key not in node:
            return default
        node = node[key]
    return node


def _pick(flag_value, config_value, default=None):
    if flag_value is not None:
        return flag_value
    if config_value is not None:
        return config_value
    return default


def _seed(config: dict, flag_value, name: str) -> int:
    return int(_pick(flag_value, _cfg(config, "seeds", name), DEFAULT_SEEDS[name]))


def _print_json(data: dict) -> None:
    print(json.dumps(data, indent=2))


def _require_path(value: str | None, what: str) -> Path:
    if value is None:
        raise CliError(f"{what} is required (flag or config)")
    path = Path(value)
    if not path.exists():
        raise CliError(f"{what} not found: {path}")
    return path


def _policy(config: dict, args) -> FilterPolicy:
    languages = None
    flag_langs = getattr(args, "language", None)
    if flag_langs:
        languages = frozenset(flag_langs)
    else:
        cfg_langs = _cfg(config, "filters", "allowed_languages")
        if cfg_langs:
            languages = frozenset(cfg_langs)
    return FilterPolicy(
        min_turns=int(_pick(getattr(args, "min_turns", None), _cfg(config, "filters", "min_turns"), 2)),
        allowed_languages=languages,
        drop_moderation_flagged=bool(
            _pick(
                getattr(args, "drop_moderation", None) or None,
                _cfg(config, "filters", "drop_moderation_flagged"),
                False,
            )
        ),
        drop_redacted=bool(
            _pick(
                getattr(args, "drop_redacted", None) or None,
                _cfg(config, "filters", "drop_redacted"),
                False,
            )
        ),
    )


def _params(config: dict) -> GenerationParams:
    kwargs = {}
    for key in ("temperature", "top_p", "max_new_tokens", "repetition_penalty"):
        value = _cfg(config, "params", key)
        if value is not None:
            kwargs[key] = value
    return GenerationParams(**kwargs)


def _endpoint(config: dict, args) -> EndpointConfig:
    base_url = _pick(getattr(args, "base_url", None), _cfg(config, "endpoint", "base_url"))
    model_name = _pick(getattr(args, "model_name", None), _cfg(config, "endpoint", "model_name"))
    if base_url is None or model_name is None:
        raise CliError("endpoint base_url and model_name are required (flags or [endpoint] config)")
    return EndpointConfig(
        base_url=base_url,
        model_name=model_name,
        auth_env=_cfg(config, "endpoint", "auth_env"),
        timeout=float(_cfg(config, "endpoint", "timeout", default=60.0)),
        max_retries=int(_cfg(config, "endpoint", "max_retries", default=3)),
        max_concurrency=int(
            _pick(getattr(args, "max_concurrency", None), _cfg(config, "endpoint", "max_concurrency"), 4)
        ),
        backoff_base=float(_cfg(config, "endpoint", "backoff_base", default=0.5)),
    )


def _corpus_index(path: str, schema_name: str, policy: FilterPolicy | None = None) -> dict:
    accepted, _, _ = load_corpus(_require_path(path, "corpus"), load_schema_map(schema_name))
    index = index_conversations(accepted)
    if policy is not None:
        index = {cid: c for cid, c in index.items() if apply_filters(c, policy) is None}
    return index


def cmd_ingest(args) -> int:
    config = _load_config(args.config)
    corpus_path = _require_path(_pick(args.corpus, _cfg(config, "corpus", "path")), "corpus")
    schema = load_schema_map(_pick(args.schema, _cfg(config, "corpus", "schema"), "canonical"))
    policy = _policy(config, args)
    summary = {"accepted": 0, "ingest_errors": 0, "rejected": {}}
    out_fh = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for item in ingest_jsonl(corpus_path, schema):
            if isinstance(item, IngestError):
                summary["ingest_errors"] += 1
                print(f"line {item.line_number}: {item.reason}: {item.detail}", file=sys.stderr)
                continue
            reason = apply_filters(item, policy)
            if reason is not None:
                summary["rejected"][reason.value] = summary["rejected"].get(reason.value, 0) + 1
                continue
            summary["accepted"] += 1
            out_fh.write(json.dumps(to_canonical_dict(item), ensure_ascii=False) + "\n")
    finally:
        if args.out:
            out_fh.close()
    if args.out:
        _print_json(summary)
    else:
        print(json.dumps(summary), file=sys.stderr)
    return 0


def cmd_extract(args) -> int:
    config = _load_config(args.config)
    corpus_path = _require_path(_pick(args.corpus, _cfg(config, "corpus", "path")), "corpus")
    schema = load_schema_map(_pick(args.schema, _cfg(config, "corpus", "schema"), "canonical"))
    template = resolve_template(_pick(args.template, _cfg(config, "extraction", "template"), "extract_main"))
    out_dir = _pick(args.out_dir, _cfg(config, "output", "dir"))
    if out_dir is None:
        raise CliError("output directory is required (--out-dir or [output].dir)")
    cache = _pick(args.cache, _cfg(config, "output", "cache"))
    min_confidence = _pick(args.min_confidence, _cfg(config, "extraction", "min_confidence"))
    report = run_pipeline(
        corpus_path=corpus_path,
        schema=schema,
        policy=_policy(config, args),
        template=template,
        params=_params(config),
        endpoint=_endpoint(config, args),
        output_dir=out_dir,
        cache_path=cache,
        replay=args.replay,
        resume=not args.no_resume,
        run_id=_pick(args.run_id, _cfg(config, "extraction", "run_id")),
        min_confidence=int(min_confidence) if min_confidence is not None else None,
    )
    _print_json(report.to_dict())
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args.config)
    corpus = None
    if args.corpus:
        corpus = _corpus_index(args.corpus, _pick(args.schema, _cfg(config, "corpus", "schema"), "canonical"))
    preds = load_records(_require_path(args.pred, "prediction file"), corpus)
    gold = load_gold(_require_path(args.gold, "gold file"))
    report = evaluate(
        preds,
        gold,
        bootstrap_reps=args.bootstrap,
        seed=_seed(config, args.seed, "bootstrap"),
    )
    if args.confusion_csv:
        Path(args.confusion_csv).write_text(confusion_to_csv(report.confusion), encoding="utf-8")
    _print_json(report.to_dict())
    return 0


def cmd_agreement(args) -> int:
    gold_a = load_gold(_require_path(args.gold_a, "gold file A"))
    gold_b = load_gold(_require_path(args.gold_b, "gold file B"))
    labels_a, labels_b = binary_feedback_labels(gold_a, gold_b)
    result: dict = {"n_conversations": len(labels_a)}
    try:
        result["kappa"] = cohen_kappa(labels_a, labels_b)
    except ValueError as exc:
        result["kappa"] = None
        result["kappa_error"] = str(exc)
    pairs = mutual_category_pairs(gold_a, gold_b)
    result["n_mutual"] = len(pairs)
    result["category_agreement"] = category_agreement(pairs)
    _print_json(result)
    return 0


def cmd_stats(args) -> int:
    config = _load_config(args.config)
    if bool(args.records) == bool(args.gold):
        raise CliError("exactly one of --records or --gold is required")
    corpus = None
    if args.corpus:
        corpus = _corpus_index(args.corpus, _pick(args.schema, _cfg(config, "corpus", "schema"), "canonical"))
    if args.records:
        records = load_records(_require_path(args.records, "record file"), corpus)
    else:
        records = gold_to_records(load_gold(_require_path(args.gold, "gold file")))
    _print_json(dataset_stats(records, corpus).to_dict())
    return 0


def _load_build_inputs(args, config):
    schema_name = _pick(args.schema, _cfg(config, "corpus", "schema"), "canonical")
    corpus = _corpus_index(_pick(args.corpus, _cfg(config, "corpus", "path")), schema_name)
    records = load_records(_require_path(args.records, "record file"))
    return records, corpus


def cmd_build_sft(args) -> int:
    config = _load_config(args.config)
    records, corpus = _load_build_inputs(args, config)
    diagnostics: dict = {}
    examples = build_sft(records, corpus, diagnostics)
    save_jsonl((sft_to_dict(e) for e in examples), args.out)
    _print_json({"examples": len(examples), "diagnostics": diagnostics})
    return 0


def cmd_build_kto(args) -> int:
    config = _load_config(args.config)
    records, corpus = _load_build_inputs(args, config)
    negatives = frozenset(category_from_value(v.strip()) for v in args.negatives.split(","))
    diagnostics: dict = {}
    examples = build_kto(
        records,
        corpus,
        negative_categories=negatives,
        downsample_ratio=args.ratio,
        seed=_seed(config, args.seed, "downsample"),
        diagnostics=diagnostics,
    )
    save_jsonl((preference_to_dict(e) for e in examples), args.out)
    labels = {}
    for example in examples:
        labels[example.label] = labels.get(example.label, 0) + 1
    _print_json({"examples": len(examples), "by_label": labels, "diagnostics": diagnostics})
    return 0


def cmd_build_pairs(args) -> int:
    config = _load_config(args.config)
    records, corpus = _load_build_inputs(args, config)
    diagnostics: dict = {}
    examples = build_rephrase_pairs(records, corpus, diagnostics)
    save_jsonl((pair_to_dict(e) for e in examples), args.out)
    _print_json({"examples": len(examples), "diagnostics": diagnostics})
    return 0


def cmd_split(args) -> int:
    config = _load_config(args.config)
    path = _require_path(args.input, "input file")
    with open(path, encoding="utf-8") as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    spec = SplitSpec(train_fraction=args.fraction, seed=_seed(config, args.seed, "split"))
    train, val = split_train_val(rows, spec)
    save_jsonl(train, args.train_out)
    save_jsonl(val, args.val_out)
    _print_json({"train": len(train), "val": len(val), "fraction": spec.train_fraction, "seed": spec.seed})
    return 0


def cmd_judge(args) -> int:
    config = _load_config(args.config)
    pairs = load_pairs(_require_path(args.pairs, "pairs file"))
    if not args.no_blind:
        pairs = blind_pairs(pairs, _seed(config, args.blind_seed, "blinding"))
    template = resolve_judge_template(_pick(args.template, _cfg(config, "judge", "template"), "judge_pairwise"))
    client = LLMClient(_endpoint(config, args), cache_path=_pick(args.cache, _cfg(config, "output", "cache")), replay=args.replay)
    try:
        verdicts = judge_pairs(pairs, client, template, params=_params(config))
    finally:
        client.close()
    save_verdicts(verdicts, args.out)
    errors = sum(1 for v in verdicts if v.choice is None)
    _print_json({"verdicts": len(verdicts), "errors": errors})
    return 0


def cmd_winrate(args) -> int:
    verdicts = load_verdicts(_require_path(args.verdicts, "verdict file"))
    report = win_rate(verdicts, tie_policy=args.tie_policy, system=args.system)
    _print_json(report.to_dict())
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    config = _load_config(args.config)
    conversations = []
    corpus_path = _pick(args.corpus, _cfg(config, "corpus", "path"))
    if corpus_path:
        schema = load_schema_map(_pick(args.schema, _cfg(config, "corpus", "schema"), "canonical"))
        accepted, _, _ = load_corpus(_require_path(corpus_path, "corpus"), schema)
        conversations = accepted
    pairs = []
    pairs_path = _pick(args.pairs, _cfg(config, "serve", "pairs"))
    if pairs_path:
        pairs = blind_pairs(
            load_pairs(_require_path(pairs_path, "pairs file")),
            _seed(config, args.blind_seed, "blinding"),
        )
    data_dir = _pick(args.data_dir, _cfg(config, "serve", "data_dir"), "annotation_data")
    static_dir = _pick(args.static_dir, _cfg(config, "serve", "static_dir"))
    state = ServiceState(data_dir, conversations=conversations, pairs=pairs)
    app = create_app(state, static_dir=static_dir)
    host = _pick(args.host, _cfg(config, "serve", "host"), "127.0.0.1")
    port = int(_pick(args.port, _cfg(config, "serve", "port"), 8765))
    print(f"serving {len(conversations)} conversations, {len(pairs)} pairs on {host}:{port}", file=sys.stderr)
    uvicorn.run(app, host=host, port=port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="natfeed", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="TOML config file")
        p.set_defaults(func=func)
        return p

    p = add("ingest", cmd_ingest, "normalize and filter a raw conversation dump")
    p.add_argument("--corpus")
    p.add_argument("--schema")
    p.add_argument("--out", help="canonical JSONL output (default: stdout)")
    p.add_argument("--min-turns", type=int, dest="min_turns")
    p.add_argument("--language", action="append", help="allowed language (repeatable)")
    p.add_argument("--drop-moderation", action="store_true", dest="drop_moderation")
    p.add_argument("--drop-redacted", action="store_true", dest="drop_redacted")

    p = add("extract", cmd_extract, "run feedback extraction over a corpus")
    p.add_argument("--corpus")
    p.add_argument("--schema")
    p.add_argument("--template")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--cache")
    p.add_argument("--replay", action="store_true", help="serve completions only from the cache")
    p.add_argument("--no-resume", action="store_true", help="discard previous progress in the output dir")
    p.add_argument("--run-id", dest="run_id")
    p.add_argument("--min-confidence", type=int, dest="min_confidence")
    p.add_argument("--min-turns", type=int, dest="min_turns")
    p.add_argument("--language", action="append")
    p.add_argument("--drop-moderation", action="store_true", dest="drop_moderation")
    p.add_argument("--drop-redacted", action="store_true", dest="drop_redacted")
    p.add_argument("--base-url", dest="base_url")
    p.add_argument("--model-name", dest="model_name")
    p.add_argument("--max-concurrency", type=int, dest="max_concurrency")

    p = add("eval", cmd_eval, "score predictions against gold annotations")
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--bootstrap", type=int, default=0, help="bootstrap replicates (0 = off)")
    p.add_argument("--seed", type=int)
    p.add_argument("--corpus", help="verify record offsets against this corpus")
    p.add_argument("--schema")
    p.add_argument("--confusion-csv", dest="confusion_csv")

    p = add("agreement", cmd_agreement, "inter-annotator agreement between two gold files")
    p.add_argument("--gold-a", required=True, dest="gold_a")
    p.add_argument("--gold-b", required=True, dest="gold_b")

    p = add("stats", cmd_stats, "dataset statistics over records or a gold file")
    p.add_argument("--records")
    p.add_argument("--gold")
    p.add_argument("--corpus")
    p.add_argument("--schema")

    for name, func, help_text in (
        ("build-sft", cmd_build_sft, "SFT examples from positive records"),
        ("build-kto", cmd_build_kto, "desirable/undesirable preference examples"),
        ("build-pairs", cmd_build_pairs, "experimental chosen/rejected rephrase pairs"),
    ):
        p = add(name, func, help_text)
        p.add_argument("--records", required=True)
        p.add_argument("--corpus")
        p.add_argument("--schema")
        p.add_argument("--out", required=True)
        if name == "build-kto":
            p.add_argument("--ratio", type=float, default=1.0, help="negatives per positive")
            p.add_argument("--seed", type=int)
            p.add_argument("--negatives", default="aware_correct,aware_no_correct")

    p = add("split", cmd_split, "seeded train/val split of a JSONL dataset")
    p.add_argument("--input", required=True)
    p.add_argument("--train-out", required=True, dest="train_out")
    p.add_argument("--val-out", required=True, dest="val_out")
    p.add_argument("--fraction", type=float, default=0.8)
    p.add_argument("--seed", type=int)

    p = add("judge", cmd_judge, "LLM pairwise judging over blinded response pairs")
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--template")
    p.add_argument("--blind-seed", type=int, dest="blind_seed")
    p.add_argument("--no-blind", action="store_true", help="keep presentation order from the pairs file")
    p.add_argument("--cache")
    p.add_argument("--replay", action="store_true")
    p.add_argument("--base-url", dest="base_url")
    p.add_argument("--model-name", dest="model_name")
    p.add_argument("--max-concurrency", type=int, dest="max_concurrency")

    p = add("winrate", cmd_winrate, "win-rate report from a verdict file")
    p.add_argument("--verdicts", required=True)
    p.add_argument("--tie-policy", choices=[EXCLUDE, HALF_CREDIT], default=HALF_CREDIT, dest="tie_policy")
    p.add_argument("--system")

    p = add("serve", cmd_serve, "run the annotation service")
    p.add_argument("--corpus")
    p.add_argument("--schema")
    p.add_argument("--pairs")
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--static-dir", dest="static_dir")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--blind-seed", type=int, dest="blind_seed")

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.WARNING, format="%(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return 1
    except Exception as exc:  # operational failures must exit nonzero, not crash
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
