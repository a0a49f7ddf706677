"""Threshold filtering of a scored ranked list."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Union

from prefilter_rerank.calibration import Threshold, s_pre
from prefilter_rerank.core import RankedList, RelevanceScore

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FilterOutcome:
    retained: RankedList
    discarded: RankedList
    threshold_used: Threshold

    @property
    def n_in(self) -> int:
        return len(self.retained) + len(self.discarded)

    @property
    def n_retained(self) -> int:
        return len(self.retained)


def apply_filter(
    ranked: RankedList,
    scores: Mapping[str, Union[RelevanceScore, float]],
    t: Union[Threshold, float],
    retain_fallback: bool = True,
) -> FilterOutcome:
    """Split ``ranked`` into passages at/above the threshold and the rest.

    Both halves keep the input's relative order and are renumbered from 1.
    Scores flagged as fallbacks are kept when ``retain_fallback`` is set, as
    if they sat exactly at the threshold.
    """
    thr = t if isinstance(t, Threshold) else Threshold(float(t))
    keep, drop = [], []
    for e in ranked:
        s = scores.get(e.passage_id)
        if s is None:
            raise LookupError(
                f"no relevance score for passage {e.passage_id!r} (query {ranked.query_id})"
            )
        if isinstance(s, RelevanceScore):
            passed = (s.fallback and retain_fallback) or s_pre(s.value, thr) == 1
        else:
            passed = s_pre(float(s), thr) == 1
        (keep if passed else drop).append(e)
    qid = ranked.query_id
    return FilterOutcome(
        RankedList.from_ids(qid, [e.passage_id for e in keep], [e.score for e in keep]),
        RankedList.from_ids(qid, [e.passage_id for e in drop], [e.score for e in drop]),
        thr,
    )


def filtered_or_passthrough(ranked: RankedList, outcome: FilterOutcome) -> RankedList:
    """The retained list, or the untouched input when nothing survived."""
    if len(outcome.retained) == 0 and len(ranked) > 0:
        logger.warning(
            "query %s: no passage reached threshold %.3f; passing the input list through",
            ranked.query_id, outcome.threshold_used.value,
        )
        return ranked
    return outcome.retained


def assemble_output(
    reranked: RankedList, original: RankedList, mode: str = "append"
) -> RankedList:
    """Final list for one query.

    ``append`` puts passages absent from ``reranked`` after it, in their
    original order, so the run stays as deep as the input; ``drop`` keeps
    only ``reranked``. Scores are rewritten as ``N - rank + 1``.
    """
    if mode not in ("append", "drop"):
        raise ValueError(f"discard mode must be 'append' or 'drop', got {mode!r}")
    ids = reranked.passage_ids
    if mode == "append":
        present = set(ids)
        ids = ids + [pid for pid in original.passage_ids if pid not in present]
    return RankedList.from_ids(original.query_id, ids)


def retention_curve(
    runs: Mapping[str, RankedList],
    scores: Mapping[tuple[str, str], RelevanceScore],
    thresholds,
    retain_fallback: bool = True,
) -> list[int]:
    """Total retained passages over all queries at each threshold."""
    counts = []
    for t in thresholds:
        n = 0
        for qid, ranked in runs.items():
            per = {pid: scores[(qid, pid)] for pid in ranked.passage_ids}
            n += apply_filter(ranked, per, t, retain_fallback).n_retained
        counts.append(n)
    return counts
