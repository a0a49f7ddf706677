"""Listwise sliding-window re-ranking by permutation generation."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

from prefilter_rerank.core import Passage, Query, RankedList
from prefilter_rerank.llm import Gateway, GenerationRequest
from prefilter_rerank.scoring import format_passages

logger = logging.getLogger(__name__)

RERANK_SYSTEM_PROMPT = (
    "You are RankLLM, an intelligent assistant that can rank passages based on "
    "their relevancy to the query."
)

_LABEL = re.compile(r"\[(\d+)\]")


@dataclass(frozen=True)
class WindowConfig:
    window_size: int = 10
    step_size: int = 5
    passes: int = 1
    word_budget: Optional[int] = 300
    max_tokens: int = 256
    temperature: float = 0.0

    def __post_init__(self):
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")
        if not 1 <= self.step_size <= self.window_size:
            raise ValueError("step_size must lie in [1, window_size]")
        if self.passes < 1:
            raise ValueError("passes must be >= 1")


@dataclass(frozen=True)
class Permutation:
    """1-based labels, most relevant first."""

    order: tuple[int, ...]

    def __post_init__(self):
        if sorted(self.order) != list(range(1, len(self.order) + 1)):
            raise ValueError(f"{self.order} is not a permutation of 1..{len(self.order)}")


def build_rerank_prompt(
    query: Query, window: Sequence[Passage], cfg: WindowConfig = WindowConfig()
) -> GenerationRequest:
    w = len(window)
    if not 1 <= w <= cfg.window_size:
        raise ValueError(f"window has {w} passages; expected 1..{cfg.window_size}")
    user = (
        f"I will provide you with {w} passages, each indicated by a numerical "
        f"identifier []. Rank the passages based on their relevance to the search "
        f"query: {query.text}\n\n"
        f"{format_passages(window, cfg.word_budget)}\n\n"
        f"Search Query: {query.text}\n\n"
        f"Rank the {w} passages above based on their relevance to the search query. "
        f"List all {w} identifiers in descending order of relevance, most relevant "
        f"first. The output format should be [] > [] > ... with exactly {w} "
        f"identifiers. Only respond with the ranking results, do not say any word "
        f"or explain."
    )
    return GenerationRequest(
        system_prompt=RERANK_SYSTEM_PROMPT,
        user_prompt=user,
        max_tokens=cfg.max_tokens,
        temperature=cfg.temperature,
        context={
            "task": "rank",
            "query_id": query.id,
            "passage_ids": tuple(p.id for p in window),
        },
    )


def parse_permutation(response_text: str, w: int) -> Permutation:
    """Read bracketed labels in order and repair them into a permutation.

    Labels outside ``1..w`` are dropped, repeats keep their first position,
    and labels never mentioned are appended in ascending order.
    """
    if w < 1:
        raise ValueError("window length must be >= 1")
    order: list[int] = []
    seen: set[int] = set()
    for m in _LABEL.finditer(response_text or ""):
        label = int(m.group(1))
        if 1 <= label <= w and label not in seen:
            order.append(label)
            seen.add(label)
    if not order:
        logger.warning("no usable ranking in response; keeping window order")
    order.extend(i for i in range(1, w + 1) if i not in seen)
    return Permutation(tuple(order))


def window_offsets(n: int, window_size: int, step_size: int) -> list[int]:
    """Start offsets for one bottom-up pass; the last window always starts at 0.

    A list of one passage needs no window at all.
    """
    if n <= 1:
        return []
    offsets = list(range(max(0, n - window_size), -1, -step_size))
    if offsets[-1] != 0:
        offsets.append(0)
    return offsets


def sliding_window_rerank(
    query: Query,
    ranked: RankedList,
    corpus: Mapping[str, Passage],
    cfg: WindowConfig,
    gateway: Gateway,
) -> RankedList:
    if len(ranked) == 0:
        raise ValueError(f"query {query.id}: cannot re-rank an empty list")
    order = ranked.passage_ids
    for pid in order:
        if pid not in corpus:
            raise LookupError(f"passage {pid!r} (query {query.id}) not found in corpus")

    for _ in range(cfg.passes):
        for start in window_offsets(len(order), cfg.window_size, cfg.step_size):
            end = min(start + cfg.window_size, len(order))
            window = order[start:end]
            if len(window) < 2:
                continue
            req = build_rerank_prompt(query, [corpus[pid] for pid in window], cfg)
            perm = parse_permutation(gateway.generate(req).text, len(window))
            order[start:end] = [window[i - 1] for i in perm.order]
    return RankedList.from_ids(ranked.query_id, order)
