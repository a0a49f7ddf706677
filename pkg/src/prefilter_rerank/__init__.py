"""LLM pre-filtering of first-stage candidates before listwise re-ranking.

Typical flow: score every retrieved passage with a prompted LLM, pick a
relevance threshold that maximizes F1 against a sample of judgments, drop
sub-threshold passages, re-rank the survivors with a sliding window, and
report nDCG@10.
"""

from prefilter_rerank.core import (
    Judgment,
    JudgmentSet,
    Passage,
    Query,
    RankedEntry,
    RankedList,
    RelevancePolicy,
    RelevanceScore,
    binarize_level,
)

__version__ = "0.1.0"

__all__ = [
    "Judgment",
    "JudgmentSet",
    "Passage",
    "Query",
    "RankedEntry",
    "RankedList",
    "RelevancePolicy",
    "RelevanceScore",
    "binarize_level",
]
