"""Staged execution: score -> calibrate -> filter -> rerank -> eval.

Each stage has a function usable on in-memory data and a ``run_*`` wrapper
that reads its inputs from disk and writes exactly one primary artifact
(plus human-facing side reports). ``run_pipeline`` chains the wrappers.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional

from prefilter_rerank import plotting, trec_io
from prefilter_rerank.calibration import (
    CalibrationReport,
    Threshold,
    calibrate,
    grid_thresholds,
)
from prefilter_rerank.config import PipelineConfig
from prefilter_rerank.core import (
    JudgmentSet,
    Passage,
    Query,
    RankedList,
    RelevancePolicy,
    RelevanceScore,
)
from prefilter_rerank.llm import Gateway
from prefilter_rerank.metrics import (
    MetricReport,
    comparison_rows,
    format_table,
    format_tsv,
    mean_ndcg,
    policy_judgments,
)
from prefilter_rerank.prefilter import (
    FilterOutcome,
    apply_filter,
    assemble_output,
    filtered_or_passthrough,
    retention_curve,
)
from prefilter_rerank.rerank import WindowConfig, sliding_window_rerank
from prefilter_rerank.scoring import ScoringPromptTemplate, score_ranked_list

logger = logging.getLogger(__name__)

STAGES = ("score", "calibrate", "filter", "rerank", "eval")
EXIT_CODES = {"config": 2, "score": 3, "calibrate": 4, "filter": 5, "rerank": 6, "eval": 7}

SCORES_FILE = "scores.jsonl"
CALIBRATION_FILE = "calibration.json"
FILTERED_FILE = "filtered.run"
RERANKED_FILE = "reranked.run"
METRICS_FILE = "metrics.json"
SUMMARY_FILE = "summary.json"
MANIFEST_FILE = "manifest.json"


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")

    @property
    def exit_code(self) -> int:
        return EXIT_CODES.get(self.stage, 1)


@dataclass(frozen=True)
class StageArtifact:
    stage: str
    path: str
    sha256: str


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _artifact(stage: str, path) -> StageArtifact:
    return StageArtifact(stage, os.fspath(path), file_sha256(path))


def _per_query(fn: Callable[[str], object], qids: Iterable[str], workers: int) -> dict:
    qids = list(qids)
    if workers > 1 and len(qids) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return dict(zip(qids, pool.map(fn, qids)))
    return {q: fn(q) for q in qids}


def truncate_runs(runs: Mapping[str, RankedList], top_n: int) -> dict[str, RankedList]:
    return {q: r.head(top_n) for q, r in runs.items()}


def _query(queries: Mapping[str, Query], qid: str) -> Query:
    try:
        return queries[qid]
    except KeyError:
        raise LookupError(f"query {qid!r} has no text in the queries file") from None


# ---------------------------------------------------------------------------
# in-memory stages


def score_runs(
    queries: Mapping[str, Query],
    runs: Mapping[str, RankedList],
    corpus: Mapping[str, Passage],
    template: ScoringPromptTemplate,
    gateway: Gateway,
    retry_budget: int = 1,
    workers: int = 1,
) -> list[RelevanceScore]:
    """Scores for every run entry, ordered by query id then rank."""
    def one(qid):
        return score_ranked_list(_query(queries, qid), runs[qid], corpus, template,
                                 gateway, retry_budget=retry_budget)

    per = _per_query(one, sorted(runs), workers)
    return [per[q][pid] for q in sorted(runs) for pid in runs[q].passage_ids]


def filter_runs(
    runs: Mapping[str, RankedList],
    scores: Mapping[tuple[str, str], RelevanceScore],
    threshold: Threshold,
    retain_fallback: bool = True,
) -> tuple[dict[str, RankedList], dict[str, FilterOutcome]]:
    """Retained list per query (input passed through when nothing survives)."""
    filtered, outcomes = {}, {}
    for qid in sorted(runs):
        per = {}
        for pid in runs[qid].passage_ids:
            if (qid, pid) not in scores:
                raise LookupError(f"no relevance score for ({qid}, {pid})")
            per[pid] = scores[(qid, pid)]
        out = apply_filter(runs[qid], per, threshold, retain_fallback)
        outcomes[qid] = out
        filtered[qid] = filtered_or_passthrough(runs[qid], out)
    return filtered, outcomes


def rerank_runs(
    queries: Mapping[str, Query],
    filtered: Mapping[str, RankedList],
    original: Mapping[str, RankedList],
    corpus: Mapping[str, Passage],
    window: WindowConfig,
    gateway: Gateway,
    discard_mode: str = "append",
    workers: int = 1,
) -> dict[str, RankedList]:
    def one(qid):
        lst = filtered[qid]
        reranked = (sliding_window_rerank(_query(queries, qid), lst, corpus, window, gateway)
                    if len(lst) else lst)
        return assemble_output(reranked, original.get(qid, lst), discard_mode)

    return _per_query(one, sorted(filtered), workers)


def evaluate_runs(
    named_runs: Mapping[str, Mapping[str, RankedList]],
    judgments: JudgmentSet,
    k: int = 10,
) -> dict[str, MetricReport]:
    return {name: mean_ndcg(runs, judgments, k) for name, runs in named_runs.items()}


# ---------------------------------------------------------------------------
# report writers


def write_metric_reports(
    reports: Mapping[str, MetricReport],
    out_dir,
    stem: str = "metrics",
    policy_reports: Optional[Mapping[str, MetricReport]] = None,
    min_relevant_level: Optional[int] = None,
) -> Path:
    """Write ``<stem>.json`` (primary), an aligned ``.txt`` table, a ``.tsv`` and a figure."""
    out_dir = Path(out_dir)
    doc = {"graded": {n: r.to_dict() for n, r in reports.items()}}
    if policy_reports is not None:
        doc["policy"] = {n: r.to_dict() for n, r in policy_reports.items()}
        doc["policy_min_relevant_level"] = min_relevant_level
    path = out_dir / f"{stem}.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    header, rows = comparison_rows(reports)
    (out_dir / f"{stem}.txt").write_text(format_table(header, rows), encoding="utf-8")
    (out_dir / f"{stem}.tsv").write_text(format_tsv(header, rows), encoding="utf-8")
    if reports:
        plotting.plot_ndcg_comparison(reports, out_dir / f"{stem}.png")
    return path


def write_calibration_reports(report: CalibrationReport, out_dir) -> Path:
    out_dir = Path(out_dir)
    path = out_dir / CALIBRATION_FILE
    path.write_text(report.to_json(), encoding="utf-8")
    header = ["threshold", "tp", "fp", "tn", "fn", "precision", "recall", "f1"]
    rows = [[f"{r.threshold:g}", r.counts.tp, r.counts.fp, r.counts.tn, r.counts.fn,
             f"{r.precision:.4f}", f"{r.recall:.4f}", f"{r.f1:.4f}"] for r in report.rows]
    (out_dir / "calibration.tsv").write_text(format_tsv(header, rows), encoding="utf-8")
    plotting.plot_calibration(report, out_dir / "calibration.png")
    return path


def write_filter_reports(
    runs, scores, outcomes: Mapping[str, FilterOutcome], threshold: Threshold,
    out_dir, retain_fallback=True,
) -> None:
    out_dir = Path(out_dir)
    header = ["query_id", "n", "n_retained", "n_discarded", "passthrough"]
    rows = [[q, o.n_in, o.n_retained, len(o.discarded), int(o.n_retained == 0 and o.n_in > 0)]
            for q, o in sorted(outcomes.items())]
    (out_dir / "filter.tsv").write_text(format_tsv(header, rows), encoding="utf-8")
    ts = grid_thresholds(0.05)
    kept = retention_curve(runs, scores, ts, retain_fallback)
    total = sum(len(r) for r in runs.values())
    plotting.plot_retention(ts, kept, total, out_dir / "retention.png", threshold.value)


# ---------------------------------------------------------------------------
# file-level stages shared by the CLI and run_pipeline


def build_gateway(cfg: PipelineConfig, judgments: Optional[JudgmentSet] = None,
                  script=None, http_client=None) -> Gateway:
    b = cfg.backend
    if b.kind == "mock_oracle" and judgments is None:
        if not cfg.paths.qrels:
            raise ValueError("mock_oracle backend needs qrels (paths.qrels)")
        judgments = trec_io.read_qrels(trec_io.ensure_exists(cfg.paths.qrels, "qrels"))
    if b.kind == "mock_scripted" and script is None:
        if not b.script_path:
            raise ValueError("mock_scripted backend needs backend.script_path")
        with open(b.script_path, encoding="utf-8") as f:
            script = json.load(f)
    return Gateway(b, judgments=judgments, script=script, http_client=http_client)


def _load_run(cfg: PipelineConfig) -> dict[str, RankedList]:
    path = trec_io.ensure_exists(cfg.paths.run, "first-stage run (paths.run)")
    return truncate_runs(trec_io.read_run(path), cfg.top_n)


def run_score(cfg: PipelineConfig, gateway: Gateway, out_path=None) -> StageArtifact:
    queries = trec_io.read_queries(trec_io.ensure_exists(cfg.paths.queries, "queries"))
    corpus = trec_io.read_corpus(trec_io.ensure_exists(cfg.paths.corpus, "corpus"))
    runs = _load_run(cfg)
    scores = score_runs(queries, runs, corpus, cfg.scoring.template(), gateway,
                        cfg.scoring.retry_budget, cfg.workers)
    out_path = Path(out_path or Path(cfg.paths.output_dir) / SCORES_FILE)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    trec_io.write_scores(scores, out_path)
    return _artifact("score", out_path)


def run_calibrate(cfg: PipelineConfig, scores_path=None, out_dir=None) -> StageArtifact:
    out_dir = Path(out_dir or cfg.paths.output_dir)
    scores_path = scores_path or out_dir / SCORES_FILE
    scores = trec_io.read_scores(trec_io.ensure_exists(scores_path, "scores artifact"))
    judgments = trec_io.read_qrels(trec_io.ensure_exists(cfg.paths.qrels, "qrels"))
    t = cfg.threshold
    report = calibrate(scores, judgments, cfg.policy, t.fraction, t.seed, t.search_strategy())
    out_dir.mkdir(parents=True, exist_ok=True)
    return _artifact("calibrate", write_calibration_reports(report, out_dir))


def resolve_threshold(cfg: PipelineConfig, calibration_path=None) -> Threshold:
    if cfg.threshold.mode == "fixed":
        return Threshold(cfg.threshold.value)
    path = calibration_path or Path(cfg.paths.output_dir) / CALIBRATION_FILE
    with open(trec_io.ensure_exists(path, "calibration artifact"), encoding="utf-8") as f:
        return CalibrationReport.from_dict(json.load(f)).selected


def run_filter(cfg: PipelineConfig, scores_path=None, calibration_path=None,
               out_path=None) -> tuple[StageArtifact, dict[str, FilterOutcome]]:
    out_dir = Path(cfg.paths.output_dir)
    scores_path = scores_path or out_dir / SCORES_FILE
    scores = trec_io.read_scores(trec_io.ensure_exists(scores_path, "scores artifact"))
    threshold = resolve_threshold(cfg, calibration_path)
    runs = _load_run(cfg)
    retain = cfg.scoring.fallback == "retain"
    filtered, outcomes = filter_runs(runs, scores, threshold, retain)
    out_path = Path(out_path or out_dir / FILTERED_FILE)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    trec_io.write_run(filtered, cfg.run_tag, out_path)
    write_filter_reports(runs, scores, outcomes, threshold, out_path.parent, retain)
    return _artifact("filter", out_path), outcomes


def run_rerank(cfg: PipelineConfig, gateway: Gateway, filtered_path=None,
               out_path=None) -> StageArtifact:
    out_dir = Path(cfg.paths.output_dir)
    filtered_path = filtered_path or out_dir / FILTERED_FILE
    filtered = trec_io.read_run(trec_io.ensure_exists(filtered_path, "filtered run"))
    queries = trec_io.read_queries(trec_io.ensure_exists(cfg.paths.queries, "queries"))
    corpus = trec_io.read_corpus(trec_io.ensure_exists(cfg.paths.corpus, "corpus"))
    original = _load_run(cfg)
    final = rerank_runs(queries, filtered, original, corpus, cfg.window, gateway,
                        cfg.discard_mode, cfg.workers)
    out_path = Path(out_path or out_dir / RERANKED_FILE)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    trec_io.write_run(final, cfg.run_tag, out_path)
    return _artifact("rerank", out_path)


def run_eval(named_run_paths: Mapping[str, str], qrels_path, k: int = 10, out_dir=None,
             min_relevant_level: Optional[int] = None, stem: str = "metrics"):
    """nDCG@k for each named run file; optionally writes reports into ``out_dir``."""
    judgments = trec_io.read_qrels(trec_io.ensure_exists(qrels_path, "qrels"))
    named_runs = {n: trec_io.read_run(trec_io.ensure_exists(p, f"run '{n}'"))
                  for n, p in named_run_paths.items()}
    reports = evaluate_runs(named_runs, judgments, k)
    policy_reports = None
    if min_relevant_level is not None:
        pj = policy_judgments(judgments, RelevancePolicy(min_relevant_level))
        policy_reports = evaluate_runs(named_runs, pj, k)
    artifact = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        path = write_metric_reports(reports, out_dir, stem, policy_reports, min_relevant_level)
        artifact = _artifact("eval", path)
    return reports, policy_reports, artifact


# ---------------------------------------------------------------------------


def _calls_since(gateway: Gateway, before: Counter) -> Counter:
    now = Counter(gateway.stats.by_task_query)
    now.subtract(before)
    return +now


def run_pipeline(cfg: PipelineConfig, script=None, http_client=None,
                 judgments: Optional[JudgmentSet] = None) -> dict:
    """Run all stages into ``cfg.paths.output_dir`` and return the summary.

    Artifacts of stages that completed are kept when a later stage fails;
    the failure surfaces as ``PipelineError`` naming the stage.
    """
    out_dir = Path(cfg.paths.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(
        json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    artifacts: list[StageArtifact] = []
    stage_calls: dict[str, Counter] = {}
    try:
        gateway = build_gateway(cfg, judgments, script, http_client)
    except Exception as exc:
        raise PipelineError("config", exc) from exc

    def stage(name, fn):
        before = Counter(gateway.stats.by_task_query)
        try:
            result = fn()
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(name, exc) from exc
        stage_calls[name] = _calls_since(gateway, before)
        return result

    artifacts.append(stage("score", lambda: run_score(cfg, gateway)))
    if cfg.threshold.mode == "calibrate":
        artifacts.append(stage("calibrate", lambda: run_calibrate(cfg)))
    filt_artifact, outcomes = stage("filter", lambda: run_filter(cfg))
    artifacts.append(filt_artifact)
    artifacts.append(stage("rerank", lambda: run_rerank(cfg, gateway)))

    named = {"input": cfg.paths.run, "prefilter": out_dir / RERANKED_FILE}
    if cfg.baseline_rerank:
        def baseline():
            # Same re-ranker on the unfiltered top-N lists.
            unf = out_dir / "unfiltered_input.run"
            trec_io.write_run(_load_run(cfg), cfg.run_tag, unf)
            return run_rerank(cfg, gateway, unf, out_dir / "unfiltered_reranked.run")
        stage("baseline_rerank", baseline)
        named["unfiltered"] = out_dir / "unfiltered_reranked.run"

    def evaluate():
        # The input run is cut to top_n so every system sees the same candidates.
        trec_io.write_run(_load_run(cfg), "input", out_dir / "input_top_n.run")
        paths = dict(named, input=out_dir / "input_top_n.run")
        return run_eval(paths, cfg.paths.qrels, cfg.k, out_dir, cfg.min_relevant_level)

    reports, policy_reports, eval_artifact = stage("eval", evaluate)
    artifacts.append(eval_artifact)

    summary = build_summary(cfg, outcomes, stage_calls, reports, policy_reports)
    (out_dir / SUMMARY_FILE).write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    header = ["query_id", "n", "n_retained", "score_calls", "rerank_calls"]
    rows = [[q, d["n"], d["n_retained"], d["calls"].get("score", 0), d["calls"].get("rerank", 0)]
            for q, d in sorted(summary["queries"].items())]
    (out_dir / "summary.tsv").write_text(format_tsv(header, rows), encoding="utf-8")

    manifest = [a.__dict__ | {"path": os.path.relpath(a.path, out_dir)} for a in artifacts]
    (out_dir / MANIFEST_FILE).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info("gateway: %s", gateway.stats.snapshot())
    summary["artifacts"] = manifest
    return summary


def build_summary(cfg, outcomes, stage_calls, reports, policy_reports) -> dict:
    per_query = {}
    for qid, o in sorted(outcomes.items()):
        calls = {}
        for st in ("score", "rerank"):
            n = sum(c for (_, q), c in stage_calls.get(st, Counter()).items() if q == qid)
            calls[st] = n
        per_query[qid] = {
            "n": o.n_in,
            "n_retained": o.n_retained,
            "passthrough": o.n_retained == 0 and o.n_in > 0,
            "calls": calls,
        }
    totals = {
        "n": sum(o.n_in for o in outcomes.values()),
        "n_retained": sum(o.n_retained for o in outcomes.values()),
        "calls": {st: sum(c.values()) for st, c in sorted(stage_calls.items())},
    }
    k = cfg.k
    metrics = {f"ndcg@{k}": {n: r.mean for n, r in reports.items()}}
    if policy_reports is not None:
        metrics[f"ndcg@{k}_policy_level>={cfg.min_relevant_level}"] = {
            n: r.mean for n, r in policy_reports.items()
        }
    return {
        "threshold": resolve_threshold(cfg).value,
        "threshold_source": "calibrated" if cfg.threshold.mode == "calibrate" else "fixed",
        "policy_min_relevant_level": cfg.min_relevant_level,
        "discard_mode": cfg.discard_mode,
        "queries": per_query,
        "totals": totals,
        "metrics": metrics,
    }
