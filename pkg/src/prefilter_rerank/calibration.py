"""Threshold binarization, confusion counts against qrels, and F1-driven threshold selection."""

from __future__ import annotations

import json
import math
import random
from dataclasses import asdict, dataclass, field
from typing import Mapping, Union

from prefilter_rerank.core import JudgmentSet, RelevancePolicy, RelevanceScore, binarize_level

ScoreMap = Mapping[tuple[str, str], Union[RelevanceScore, float]]

DEFAULT_GRID_STEP = 0.05
DEFAULT_SAMPLE_FRACTION = 0.08
# Threshold arithmetic is rounded so that e.g. 6 * 0.05 compares equal to 0.3.
_DIGITS = 10


@dataclass(frozen=True, order=True)
class Threshold:
    value: float

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"threshold {self.value} outside [0, 1]")


def _tv(t: Union[Threshold, float]) -> float:
    return t.value if isinstance(t, Threshold) else float(t)


def s_pre(score: float, t: Union[Threshold, float]) -> int:
    """1 when the score is at or above the threshold, else 0."""
    return 1 if score >= _tv(t) else 0


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0
    # Sampled pairs with no usable LLM score; not part of the four cells.
    skipped: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def prf1(c: ConfusionCounts) -> tuple[float, float, float]:
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    # Same value as 2PR/(P+R), but equal ratios give bit-identical floats.
    f1 = 2 * c.tp / (2 * c.tp + c.fp + c.fn) if c.tp else 0.0
    return precision, recall, f1


def sample_judged_pairs(judgments: JudgmentSet, fraction: float, seed: int) -> JudgmentSet:
    """Uniform sample of ``round(fraction * |judgments|)`` judged pairs.

    Sampling is over qrels lines, not queries, and is reproducible for a
    given seed regardless of the order the judgments were loaded in.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    if len(judgments) == 0:
        raise ValueError("cannot sample from an empty judgment set")
    population = judgments.sorted_judgments()
    n = math.floor(fraction * len(population) + 0.5)
    picked = random.Random(seed).sample(population, n)
    return JudgmentSet(picked)


def _value(s) -> tuple[float, bool]:
    if isinstance(s, RelevanceScore):
        return s.value, s.fallback
    return float(s), False


def confusion(
    scores: ScoreMap,
    sample: JudgmentSet,
    policy: RelevancePolicy,
    t: Union[Threshold, float],
) -> ConfusionCounts:
    tp = tn = fp = fn = skipped = 0
    for j in sample:
        s = scores.get((j.query_id, j.passage_id))
        if s is None:
            skipped += 1
            continue
        value, is_fallback = _value(s)
        if is_fallback:
            skipped += 1
            continue
        predicted = s_pre(value, t)
        actual = binarize_level(j.level, policy)
        if predicted and actual:
            tp += 1
        elif predicted:
            fp += 1
        elif actual:
            fn += 1
        else:
            tn += 1
    return ConfusionCounts(tp, tn, fp, fn, skipped)


@dataclass(frozen=True)
class GridSearch:
    step: float = DEFAULT_GRID_STEP

    def __post_init__(self):
        if not 0.0 < self.step <= 1.0:
            raise ValueError("grid step must lie in (0, 1]")

    def describe(self) -> dict:
        return {"mode": "grid", "step": self.step}


@dataclass(frozen=True)
class HillClimb:
    start: float = 0.5
    step: float = DEFAULT_GRID_STEP

    def __post_init__(self):
        if not 0.0 <= self.start <= 1.0:
            raise ValueError("hill-climb start must lie in [0, 1]")
        if not 0.0 < self.step <= 1.0:
            raise ValueError("hill-climb step must lie in (0, 1]")

    def describe(self) -> dict:
        return {"mode": "hill_climb", "start": self.start, "step": self.step}


def grid_thresholds(step: float) -> list[float]:
    """``0, step, 2*step, ...`` up to 1, always ending with 1."""
    n = math.floor(1.0 / step + 1e-9)
    values = [round(i * step, _DIGITS) for i in range(n + 1)]
    if values[-1] < 1.0:
        values.append(1.0)
    return values


@dataclass(frozen=True)
class CalibrationRow:
    threshold: float
    counts: ConfusionCounts
    precision: float
    recall: float
    f1: float

    def to_dict(self) -> dict:
        d = {"threshold": self.threshold, "precision": self.precision,
             "recall": self.recall, "f1": self.f1}
        d.update(asdict(self.counts))
        return d


@dataclass
class CalibrationReport:
    rows: list[CalibrationRow]
    selected: Threshold
    search: dict
    policy_min_relevant_level: int
    sample_size: int
    sample_fraction: float | None = None
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    @property
    def selected_row(self) -> CalibrationRow:
        return next(r for r in self.rows if r.threshold == self.selected.value)

    def to_dict(self) -> dict:
        return {
            "selected_threshold": self.selected.value,
            "selected_f1": self.selected_row.f1,
            "search": self.search,
            "policy_min_relevant_level": self.policy_min_relevant_level,
            "sample_fraction": self.sample_fraction,
            "sample_size": self.sample_size,
            "seed": self.seed,
            "rows": [r.to_dict() for r in self.rows],
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> "CalibrationReport":
        rows = [
            CalibrationRow(
                r["threshold"],
                ConfusionCounts(r["tp"], r["tn"], r["fp"], r["fn"], r.get("skipped", 0)),
                r["precision"], r["recall"], r["f1"],
            )
            for r in d["rows"]
        ]
        return cls(
            rows=rows,
            selected=Threshold(d["selected_threshold"]),
            search=dict(d["search"]),
            policy_min_relevant_level=d["policy_min_relevant_level"],
            sample_size=d["sample_size"],
            sample_fraction=d.get("sample_fraction"),
            seed=d.get("seed"),
        )


def select_threshold(
    scores: ScoreMap,
    sample: JudgmentSet,
    policy: RelevancePolicy,
    search: Union[GridSearch, HillClimb] = GridSearch(),
) -> CalibrationReport:
    """Pick the threshold with the highest F1 on the judged sample.

    Grid mode scans every grid value and breaks F1 ties toward the smaller
    (more inclusive) threshold. Hill-climb mode starts at ``search.start``,
    compares one step down and one step up, and moves to the better
    neighbour until neither improves on the current value.
    """
    if len(sample) == 0:
        raise ValueError("cannot calibrate on an empty judgment sample")

    evaluated: dict[float, CalibrationRow] = {}

    def evaluate(t: float) -> CalibrationRow:
        if t not in evaluated:
            c = confusion(scores, sample, policy, t)
            evaluated[t] = CalibrationRow(t, c, *prf1(c))
        return evaluated[t]

    if isinstance(search, GridSearch):
        best = None
        for t in grid_thresholds(search.step):
            row = evaluate(t)
            if best is None or row.f1 > best.f1:
                best = row
        selected = best.threshold
    elif isinstance(search, HillClimb):
        cur = round(search.start, _DIGITS)
        while True:
            here = evaluate(cur)
            lo = round(max(0.0, cur - search.step), _DIGITS)
            hi = round(min(1.0, cur + search.step), _DIGITS)
            down, up = evaluate(lo), evaluate(hi)
            nxt = down if down.f1 >= up.f1 else up
            if nxt.f1 <= here.f1:
                break
            cur = nxt.threshold
        selected = cur
    else:
        raise TypeError(f"unknown search {search!r}")

    rows = [evaluated[t] for t in sorted(evaluated)]
    return CalibrationReport(
        rows=rows,
        selected=Threshold(selected),
        search=search.describe(),
        policy_min_relevant_level=policy.min_relevant_level,
        sample_size=len(sample),
    )


def calibrate(
    scores: ScoreMap,
    judgments: JudgmentSet,
    policy: RelevancePolicy,
    fraction: float = DEFAULT_SAMPLE_FRACTION,
    seed: int = 0,
    search: Union[GridSearch, HillClimb] = GridSearch(),
) -> CalibrationReport:
    """Sample the qrels, then select a threshold on that sample."""
    sample = sample_judged_pairs(judgments, fraction, seed)
    report = select_threshold(scores, sample, policy, search)
    report.sample_fraction = fraction
    report.seed = seed
    return report
