"""nDCG@k with linear graded gains, trec_eval style."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

from prefilter_rerank.core import Judgment, JudgmentSet, RankedList, RelevancePolicy

logger = logging.getLogger(__name__)


def _dcg(gains: Sequence[float]) -> float:
    return sum(g / math.log2(i + 1) for i, g in enumerate(gains, start=1))


def ndcg_at_k(ranked: RankedList, judgments: JudgmentSet, k: int = 10) -> float:
    """nDCG@k with gain equal to the judged level; unjudged passages gain 0.

    The ideal ranking uses every judged passage of the query, so relevant
    passages missing from ``ranked`` still lower the score. Returns 0 when
    the query has no passage with positive level.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    graded = judgments.for_query(ranked.query_id)
    gains = [graded.get(pid, 0) for pid in ranked.passage_ids[:k]]
    ideal = sorted(graded.values(), reverse=True)[:k]
    idcg = _dcg(ideal)
    if idcg == 0:
        return 0.0
    return _dcg(gains) / idcg


def has_relevant(judgments: JudgmentSet, query_id: str) -> bool:
    return any(level > 0 for level in judgments.for_query(query_id).values())


@dataclass
class MetricReport:
    per_query: dict[str, float]
    k: int
    gain_mode: str = "linear"
    excluded: list[str] = field(default_factory=list)

    @property
    def mean(self) -> Optional[float]:
        if not self.per_query:
            return None
        return sum(self.per_query.values()) / len(self.per_query)

    def to_dict(self) -> dict:
        return {
            "metric": f"ndcg@{self.k}",
            "k": self.k,
            "gain_mode": self.gain_mode,
            "mean": self.mean,
            "num_queries": len(self.per_query),
            "excluded": sorted(self.excluded),
            "per_query": dict(sorted(self.per_query.items())),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def mean_ndcg(
    runs: Mapping[str, RankedList], judgments: JudgmentSet, k: int = 10
) -> MetricReport:
    """Per-query nDCG@k and their mean over queries with a relevant judgment.

    Queries lacking qrels entirely, or lacking any positive grade, are
    listed in ``excluded`` and left out of the mean.
    """
    report = MetricReport({}, k)
    for qid in sorted(runs):
        if not judgments.for_query(qid):
            logger.warning("query %s has no judgments; excluded from the mean", qid)
            report.excluded.append(qid)
            continue
        if not has_relevant(judgments, qid):
            report.excluded.append(qid)
            continue
        report.per_query[qid] = ndcg_at_k(runs[qid], judgments, k)
    return report


def policy_judgments(judgments: JudgmentSet, policy: RelevancePolicy) -> JudgmentSet:
    """Zero out grades the policy treats as non-relevant.

    Lets nDCG be reported in the binarized regime next to the standard one
    where every positive grade earns gain.
    """
    return JudgmentSet(
        Judgment(j.query_id, j.passage_id,
                 j.level if j.level >= policy.min_relevant_level else 0)
        for j in judgments
    )


def comparison_rows(reports: Mapping[str, MetricReport]) -> tuple[list[str], list[list[str]]]:
    """Header and rows for a side-by-side per-query table, with a mean row last."""
    names = list(reports)
    header = ["query_id"] + names
    qids = sorted({q for r in reports.values() for q in r.per_query})
    rows = []
    for qid in qids:
        rows.append([qid] + [
            f"{reports[n].per_query[qid]:.4f}" if qid in reports[n].per_query else "-"
            for n in names
        ])
    rows.append(["mean"] + [
        "-" if reports[n].mean is None else f"{reports[n].mean:.4f}" for n in names
    ])
    return header, rows


def format_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    """Left-aligned first column, right-aligned numbers."""
    widths = [max(len(str(c)) for c in col) for col in zip(header, *rows)]
    lines = []
    for r in [header, *rows]:
        cells = [str(r[0]).ljust(widths[0])]
        cells += [str(c).rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines) + "\n"


def format_tsv(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    return "".join("\t".join(map(str, r)) + "\n" for r in [header, *rows])
