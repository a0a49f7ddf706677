"""Chunked LLM relevance scoring of a ranked list."""

from __future__ import annotations

import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

from prefilter_rerank.core import Passage, Query, RankedList, RelevanceScore, truncate_words
from prefilter_rerank.llm import Gateway, GenerationRequest

logger = logging.getLogger(__name__)

DEFAULT_INSTRUCTION = (
    "Grasp and understand both the query and the passages before score generation. "
    "Then, based on your understanding and analysis quantify the relevance between "
    "the passage and the query. Give the rationale before answering."
)

DEFAULT_OUTPUT_CLAUSE = (
    "Score every passage with a relevance value between 0 and 1, where 0 means "
    "completely irrelevant and 1 means fully relevant. Write your rationale first. "
    "Then finish with exactly one line per passage in the form "
    "\"Passage [i]: <score>\", using the passage's number for i and a decimal "
    "number for <score>."
)

DEFAULT_SYSTEM_PROMPT = (
    "You are an expert search relevance assessor. You judge how relevant "
    "passages are to a search query."
)

TRUNCATION_MARK = "(truncated)"

# "Passage [3]: 0.7", "[3]: 0.7", "**Passage [3]:** 0.7", "Passage [3] score: .7"
_SCORE_LINE = re.compile(
    r"\[(\d+)\]\s*(?:[-:]\s*)?(?:relevance\s+)?(?:score\s*)?[:=]\s*\**\s*"
    r"([+-]?(?:\d+(?:\.\d*)?|\.\d+))",
    re.IGNORECASE,
)


@dataclass(frozen=True)
class ScoringPromptTemplate:
    instruction_text: str = DEFAULT_INSTRUCTION
    chunk_size: int = 5
    output_format_clause: str = DEFAULT_OUTPUT_CLAUSE
    system_prompt: str = DEFAULT_SYSTEM_PROMPT
    word_budget: Optional[int] = 300
    max_tokens: int = 1024
    temperature: float = 0.0

    def __post_init__(self):
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        if not self.instruction_text.strip():
            raise ValueError("instruction_text must be non-empty")
        if self.word_budget is not None and self.word_budget < 1:
            raise ValueError("word_budget must be positive or None")


@dataclass
class ScoreParseReport:
    parsed: list[RelevanceScore] = field(default_factory=list)
    unparsed_passage_ids: list[str] = field(default_factory=list)
    retries_used: int = 0


def format_passages(passages: Sequence[Passage], word_budget: Optional[int]) -> str:
    """Number passages ``[1]..[k]``, cutting each to the word budget."""
    blocks = []
    for i, p in enumerate(passages, start=1):
        text, cut = truncate_words(p.text, word_budget)
        if cut:
            text = f"{text} {TRUNCATION_MARK}"
        blocks.append(f"[{i}] {text}")
    return "\n\n".join(blocks)


def build_scoring_prompt(
    query: Query,
    chunk: Sequence[Passage],
    template: ScoringPromptTemplate = ScoringPromptTemplate(),
    attempt: int = 0,
) -> GenerationRequest:
    if not 1 <= len(chunk) <= template.chunk_size:
        raise ValueError(
            f"chunk has {len(chunk)} passages; expected 1..{template.chunk_size}"
        )
    k = len(chunk)
    noun = "passage" if k == 1 else "passages"
    note = ""
    if template.word_budget is not None:
        note = (
            f" Passages longer than {template.word_budget} words are cut and "
            f"marked {TRUNCATION_MARK}."
        )
    user = (
        f"Query: {query.text}\n\n"
        f"Below {'is' if k == 1 else 'are'} {k} {noun}, each marked with a numerical "
        f"identifier.{note}\n\n"
        f"{format_passages(chunk, template.word_budget)}\n\n"
        f"{template.instruction_text}\n\n"
        f"{template.output_format_clause}"
    )
    return GenerationRequest(
        system_prompt=template.system_prompt,
        user_prompt=user,
        max_tokens=template.max_tokens,
        temperature=template.temperature,
        attempt=attempt,
        context={
            "task": "score",
            "query_id": query.id,
            "passage_ids": tuple(p.id for p in chunk),
        },
    )


def parse_scores(
    response_text: str, chunk_passage_ids: Sequence[str], query_id: str = ""
) -> ScoreParseReport:
    """Pull ``Passage [i]: <score>`` values out of a free-text response.

    The last occurrence of a label wins, since rationales often mention
    labels before the final score lines. Out-of-range values are clamped.
    """
    found: dict[int, float] = {}
    k = len(chunk_passage_ids)
    for m in _SCORE_LINE.finditer(response_text or ""):
        label = int(m.group(1))
        if 1 <= label <= k:
            found[label] = float(m.group(2))

    report = ScoreParseReport()
    for i, pid in enumerate(chunk_passage_ids, start=1):
        if i not in found:
            report.unparsed_passage_ids.append(pid)
            continue
        value = found[i]
        if not 0.0 <= value <= 1.0:
            clamped = min(1.0, max(0.0, value))
            logger.warning("score %s for passage %s clamped to %s", value, pid, clamped)
            value = clamped
        report.parsed.append(RelevanceScore(query_id, pid, value, response_text))
    return report


def _chunks(items: Sequence, size: int) -> list:
    return [items[i:i + size] for i in range(0, len(items), size)]


def score_ranked_list(
    query: Query,
    ranked: RankedList,
    corpus: Mapping[str, Passage],
    template: ScoringPromptTemplate,
    gateway: Gateway,
    retry_budget: int = 1,
    fallback_score: float = 0.0,
    workers: int = 1,
) -> dict[str, RelevanceScore]:
    """Score every passage of ``ranked`` in consecutive chunks.

    Passages the model never scores are retried alone, up to
    ``retry_budget`` rounds; any still missing get ``fallback_score`` with
    ``fallback=True`` so the filter can decide what to do with them.
    """
    if retry_budget < 0:
        raise ValueError("retry_budget must be >= 0")
    passages = []
    for pid in ranked.passage_ids:
        if pid not in corpus:
            raise LookupError(f"passage {pid!r} (query {query.id}) not found in corpus")
        passages.append(corpus[pid])

    def run_chunk(chunk, attempt=0):
        req = build_scoring_prompt(query, chunk, template, attempt=attempt)
        text = gateway.generate(req).text
        return parse_scores(text, [p.id for p in chunk], query.id)

    chunks = _chunks(passages, template.chunk_size)
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(run_chunk, chunks))
    else:
        reports = [run_chunk(c) for c in chunks]

    scores: dict[str, RelevanceScore] = {}
    pending: list[str] = []
    for r in reports:
        for s in r.parsed:
            scores[s.passage_id] = s
        pending.extend(r.unparsed_passage_ids)

    for attempt in range(1, retry_budget + 1):
        if not pending:
            break
        logger.info("query %s: retrying %d unparsed passages (round %d)",
                    query.id, len(pending), attempt)
        still = []
        for pid in pending:
            r = run_chunk([corpus[pid]], attempt=attempt)
            if r.parsed:
                scores[pid] = r.parsed[0]
            else:
                still.append(pid)
        pending = still

    for pid in pending:
        logger.warning("query %s: passage %s unscored; fallback %.3f",
                       query.id, pid, fallback_score)
        scores[pid] = RelevanceScore(query.id, pid, fallback_score, None, fallback=True)
    return {pid: scores[pid] for pid in ranked.passage_ids}


def expected_scoring_calls(n: int, chunk_size: int) -> int:
    """Gateway calls for an ``n``-passage list when every chunk parses."""
    return math.ceil(n / chunk_size) if n else 0
