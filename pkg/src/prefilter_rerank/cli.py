"""Command-line entry point: ``prefilter-rerank <command>``.

Commands ``score``, ``calibrate``, ``filter``, ``rerank`` run one stage each
and read the previous stage's artifact from ``--output-dir`` (or an explicit
path). ``run`` executes them all. ``eval`` compares run files against qrels.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from prefilter_rerank import pipeline
from prefilter_rerank.config import PRESETS, ConfigError, load_config
from prefilter_rerank.metrics import comparison_rows, format_table

logger = logging.getLogger("prefilter_rerank")

# flag dest -> dotted config key
_FLAG_KEYS = {
    "corpus": "paths.corpus",
    "queries": "paths.queries",
    "run": "paths.run",
    "qrels": "paths.qrels",
    "output_dir": "paths.output_dir",
    "backend": "backend.kind",
    "model": "backend.model_name",
    "endpoint": "backend.endpoint_url",
    "cache_dir": "backend.cache_dir",
    "timeout": "backend.timeout_s",
    "max_retries": "backend.max_retries",
    "noise": "backend.noise",
    "oracle_seed": "backend.seed",
    "script": "backend.script_path",
    "fraction": "threshold.fraction",
    "seed": "threshold.seed",
    "search": "threshold.search",
    "min_relevant_level": "min_relevant_level",
    "discard_mode": "discard_mode",
    "top_n": "top_n",
    "workers": "workers",
    "chunk_size": "scoring.chunk_size",
    "fallback": "scoring.fallback",
    "window_size": "window.window_size",
    "step_size": "window.step_size",
    "passes": "window.passes",
    "tag": "run_tag",
}


def _add_config_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration")
    g.add_argument("--config", help="YAML config file")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. threshold.value=0.6 (repeatable)")
    g.add_argument("--preset", choices=sorted(PRESETS),
                   help="policy and threshold used for a dataset family")

    d = p.add_argument_group("inputs")
    d.add_argument("--corpus", help="JSONL corpus (id, text[, title])")
    d.add_argument("--queries", help="JSONL queries (id, text)")
    d.add_argument("--run", help="first-stage TREC run")
    d.add_argument("--qrels", help="TREC qrels")
    d.add_argument("--output-dir", help="directory for artifacts")
    d.add_argument("--top-n", type=int, help="candidates per query to consider (default 100)")

    b = p.add_argument_group("backend")
    b.add_argument("--backend", choices=["http_chat", "mock_oracle", "mock_scripted"])
    b.add_argument("--model")
    b.add_argument("--endpoint", help="chat-completions URL")
    b.add_argument("--cache-dir")
    b.add_argument("--timeout", type=float)
    b.add_argument("--max-retries", type=int)
    b.add_argument("--noise", type=float, help="mock_oracle score jitter")
    b.add_argument("--oracle-seed", type=int)
    b.add_argument("--script", help="mock_scripted JSON list of responses")
    b.add_argument("--workers", type=int)

    m = p.add_argument_group("method")
    m.add_argument("--threshold", type=float, help="fixed filtering threshold")
    m.add_argument("--calibrate", action="store_true",
                   help="select the threshold by F1 on sampled qrels")
    m.add_argument("--fraction", type=float, help="qrels sample fraction (default 0.08)")
    m.add_argument("--seed", type=int, help="sampling seed")
    m.add_argument("--search", choices=["grid", "hill_climb"])
    m.add_argument("--min-relevant-level", type=int, choices=[1, 2])
    m.add_argument("--fallback", choices=["retain", "strict"])
    m.add_argument("--discard-mode", choices=["append", "drop"])
    m.add_argument("--chunk-size", type=int)
    m.add_argument("--window-size", type=int)
    m.add_argument("--step-size", type=int)
    m.add_argument("--passes", type=int)
    m.add_argument("--tag", help="run tag written in the sixth column")


def _config_from_args(args):
    dotted = {key: getattr(args, dest, None) for dest, key in _FLAG_KEYS.items()}
    if args.threshold is not None:
        dotted["threshold.mode"] = "fixed"
        dotted["threshold.value"] = args.threshold
    if args.calibrate:
        dotted["threshold.mode"] = "calibrate"
    return load_config(args.config, args.set, args.preset, dotted)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prefilter-rerank",
        description="LLM pre-filtering of retrieved passages before listwise re-ranking.",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="score, (calibrate,) filter, rerank and evaluate")
    _add_config_args(p)
    p.add_argument("--baseline-rerank", action="store_true",
                   help="also re-rank the unfiltered lists for comparison")

    p = sub.add_parser("score", help="LLM relevance scores for every run entry")
    _add_config_args(p)
    p.add_argument("--out", help="scores JSONL (default <output-dir>/scores.jsonl)")

    p = sub.add_parser("calibrate", help="pick the F1-maximizing threshold on sampled qrels")
    _add_config_args(p)
    p.add_argument("--scores", help="scores JSONL (default <output-dir>/scores.jsonl)")

    p = sub.add_parser("filter", help="drop passages scored below the threshold")
    _add_config_args(p)
    p.add_argument("--scores")
    p.add_argument("--calibration", help="calibration.json, used with --calibrate")
    p.add_argument("--out", help="filtered run (default <output-dir>/filtered.run)")

    p = sub.add_parser("rerank", help="sliding-window listwise re-ranking of the filtered run")
    _add_config_args(p)
    p.add_argument("--filtered", help="filtered run (default <output-dir>/filtered.run)")
    p.add_argument("--out", help="final run (default <output-dir>/reranked.run)")

    p = sub.add_parser("eval", help="nDCG@k of one or more runs, side by side")
    p.add_argument("--qrels", required=True)
    p.add_argument("runs", nargs="+", metavar="[NAME=]RUN",
                   help="run files; NAME defaults to the file stem")
    p.add_argument("-k", type=int, default=10)
    p.add_argument("--min-relevant-level", type=int, choices=[1, 2],
                   help="also report nDCG with grades below this level zeroed")
    p.add_argument("--report-dir", help="write metrics.json/.txt/.tsv/.png here")
    p.add_argument("--json", action="store_true", help="print JSON instead of a table")
    return parser


def _named_runs(items):
    named = {}
    for item in items:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).stem, item
        if name in named:
            raise ValueError(f"run name {name!r} given twice; use NAME=PATH")
        named[name] = path
    return named


def _cmd_eval(args) -> int:
    try:
        reports, policy_reports, _ = pipeline.run_eval(
            _named_runs(args.runs), args.qrels, args.k, args.report_dir,
            args.min_relevant_level)
    except (OSError, ValueError) as exc:
        print(f"error: eval: {exc}", file=sys.stderr)
        return pipeline.EXIT_CODES["eval"]
    if args.json:
        doc = {"graded": {n: r.to_dict() for n, r in reports.items()}}
        if policy_reports:
            doc["policy"] = {n: r.to_dict() for n, r in policy_reports.items()}
        print(json.dumps(doc, indent=2, sort_keys=True))
    else:
        print(format_table(*comparison_rows(reports)), end="")
        if policy_reports:
            print(f"\ngrades below {args.min_relevant_level} zeroed:")
            print(format_table(*comparison_rows(policy_reports)), end="")
    return 0


def _stage(name, fn):
    try:
        return fn()
    except pipeline.PipelineError:
        raise
    except Exception as exc:
        raise pipeline.PipelineError(name, exc) from exc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command == "eval":
        return _cmd_eval(args)

    try:
        cfg = _config_from_args(args)
    except (ConfigError, OSError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return pipeline.EXIT_CODES["config"]
    out_dir = Path(cfg.paths.output_dir)

    try:
        if args.command == "run":
            if args.baseline_rerank:
                cfg.baseline_rerank = True
            summary = pipeline.run_pipeline(cfg)
            _print_summary(summary)
            return 0
        if args.command == "score":
            gw = _stage("config", lambda: pipeline.build_gateway(cfg))
            art = _stage("score", lambda: pipeline.run_score(cfg, gw, args.out))
            logger.info("gateway: %s", gw.stats.snapshot())
            print(f"{art.path}\t{art.sha256}")
        elif args.command == "calibrate":
            art = _stage("calibrate", lambda: pipeline.run_calibrate(cfg, args.scores, out_dir))
            with open(art.path, encoding="utf-8") as f:
                doc = json.load(f)
            print(f"selected threshold {doc['selected_threshold']:g} "
                  f"(F1 {doc['selected_f1']:.4f}, {doc['sample_size']} sampled pairs)")
            print(f"{art.path}\t{art.sha256}")
        elif args.command == "filter":
            art, outcomes = _stage("filter", lambda: pipeline.run_filter(
                cfg, args.scores, args.calibration, args.out))
            n = sum(o.n_in for o in outcomes.values())
            kept = sum(o.n_retained for o in outcomes.values())
            print(f"retained {kept} of {n} passages over {len(outcomes)} queries")
            print(f"{art.path}\t{art.sha256}")
        elif args.command == "rerank":
            gw = _stage("config", lambda: pipeline.build_gateway(cfg))
            art = _stage("rerank", lambda: pipeline.run_rerank(cfg, gw, args.filtered, args.out))
            print(f"{art.path}\t{art.sha256}")
    except pipeline.PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


def _print_summary(summary: dict) -> None:
    t = summary["totals"]
    print(f"threshold {summary['threshold']:g} ({summary['threshold_source']}), "
          f"policy: grade >= {summary['policy_min_relevant_level']} relevant")
    print(f"passages: N={t['n']} N'={t['n_retained']}")
    for stage, calls in t["calls"].items():
        print(f"llm calls [{stage}]: {calls}")
    for metric, values in summary["metrics"].items():
        cells = ", ".join(f"{n}={'-' if v is None else f'{v:.4f}'}" for n, v in values.items())
        print(f"{metric}: {cells}")
    for a in summary.get("artifacts", []):
        print(f"{a['stage']}\t{a['path']}\t{a['sha256']}")


if __name__ == "__main__":
    sys.exit(main())
