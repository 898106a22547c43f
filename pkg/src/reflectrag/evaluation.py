"""Knowledge-based VQA metrics.

Per-question scores are 0/1:

* STRING / TIME: normalized exact match against any gold answer.
* NUMERICAL: relaxed accuracy, relative tolerance (default 10%) around a point
  value or a ``[lo, hi]`` range.
* MULTI_ANSWER: set IoU >= 0.5 after normalization, with an optional
  equivalence hook standing in for a neural matcher.

Scores are averaged per split (x100) and the overall number is the geometric
mean of the split averages.
"""

from __future__ import annotations

import enum
import math
import re
import string
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

from .errors import DataError

# Normalization rule table, bumped whenever a rule changes so reports stay comparable.
NORMALIZATION_VERSION = "1"
NORMALIZATION_RULES = (
    "lowercase",
    "replace punctuation with spaces",
    "drop articles: a, an, the",
    "collapse whitespace",
)
DEFAULT_RELAXED_TOLERANCE = 0.10
MULTI_ANSWER_DELIMITER = "&&"
IOU_THRESHOLD = 0.5

_PUNCT_RE = re.compile("[" + re.escape(string.punctuation) + "‘’“”–—]")
_ARTICLES_RE = re.compile(r"\b(a|an|the)\b")
# strict number: optional sign, digits with optional thousands groups, optional fraction/exponent
_NUMBER_RE = re.compile(r"^[+-]?(?:\d{1,3}(?:,\d{3})+|\d+)?(?:\.\d+)?(?:[eE][+-]?\d+)?$")

_MONTHS = {
    m: i
    for i, names in enumerate(
        [("january", "jan"), ("february", "feb"), ("march", "mar"), ("april", "apr"),
         ("may",), ("june", "jun"), ("july", "jul"), ("august", "aug"),
         ("september", "sep", "sept"), ("october", "oct"), ("november", "nov"), ("december", "dec")],
        start=1,
    )
    for m in names
}


class Category(str, enum.Enum):
    STRING = "STRING"
    TIME = "TIME"
    NUMERICAL = "NUMERICAL"
    MULTI_ANSWER = "MULTI_ANSWER"


def normalize_answer(text: str) -> str:
    text = text.lower()
    text = _PUNCT_RE.sub(" ", text)
    text = _ARTICLES_RE.sub(" ", text)
    return " ".join(text.split())


def normalize_date(text: str) -> str:
    """Map common date spellings to ISO form; anything else is returned as-is.

    Handles ``1889-03-31``, ``31 March 1889``, ``March 31, 1889``,
    ``March 1889`` and bare years.
    """
    t = " ".join(text.lower().replace(",", " ").split())
    m = re.fullmatch(r"(\d{4})-(\d{1,2})-(\d{1,2})", t)
    if m:
        return f"{int(m[1]):04d}-{int(m[2]):02d}-{int(m[3]):02d}"
    m = re.fullmatch(r"(\d{1,2}) ([a-z]+)\.? (\d{4})", t)
    if m and m[2] in _MONTHS:
        return f"{int(m[3]):04d}-{_MONTHS[m[2]]:02d}-{int(m[1]):02d}"
    m = re.fullmatch(r"([a-z]+)\.? (\d{1,2}) (\d{4})", t)
    if m and m[1] in _MONTHS:
        return f"{int(m[3]):04d}-{_MONTHS[m[1]]:02d}-{int(m[2]):02d}"
    m = re.fullmatch(r"([a-z]+)\.? (\d{4})", t)
    if m and m[1] in _MONTHS:
        return f"{int(m[2]):04d}-{_MONTHS[m[1]]:02d}"
    return text


def score_string_time(predicted: str, gold: Sequence[str], normalize_dates: bool = False) -> int:
    if not gold:
        raise ValueError("gold answers must be non-empty")

    def norm(s: str) -> str:
        return normalize_answer(normalize_date(s) if normalize_dates else s)

    p = norm(predicted)
    return int(any(p == norm(g) for g in gold))


def parse_number(text: str | float | int) -> float:
    """Strict numeric parse: the whole string must be one number."""
    if isinstance(text, bool):
        raise ValueError("booleans are not numbers")
    if isinstance(text, (int, float)):
        value = float(text)
    else:
        s = text.strip()
        if not s or not _NUMBER_RE.match(s) or not any(ch.isdigit() for ch in s):
            raise ValueError(f"unparseable number {text!r}")
        value = float(s.replace(",", ""))
    if not math.isfinite(value):
        raise ValueError(f"non-finite number {text!r}")
    return value


def explain_numerical(
    predicted: str | float,
    gold: float | str | Sequence[float],
    tolerance: float = DEFAULT_RELAXED_TOLERANCE,
) -> tuple[int, str | None]:
    """Relaxed-accuracy score plus a diagnostic when the prediction is unusable."""
    if tolerance < 0:
        raise ValueError("tolerance must be >= 0")
    try:
        pred = parse_number(predicted)
    except ValueError as exc:
        return 0, f"unparseable: {exc}"
    if isinstance(gold, (list, tuple)):
        if len(gold) != 2:
            raise ValueError("range gold must be [lo, hi]")
        lo, hi = (parse_number(g) for g in gold)
        return int(lo * (1 - tolerance) <= pred <= hi * (1 + tolerance)), None
    g = parse_number(gold)
    if g == 0.0:
        return int(pred == 0.0), None
    return int(abs(pred - g) <= tolerance * abs(g)), None


def score_numerical(
    predicted: str | float,
    gold: float | str | Sequence[float],
    tolerance: float = DEFAULT_RELAXED_TOLERANCE,
) -> int:
    return explain_numerical(predicted, gold, tolerance)[0]


def split_multi_answer(text: str) -> list[str]:
    return [part.strip() for part in text.split(MULTI_ANSWER_DELIMITER) if part.strip()]


EquivalenceHook = Callable[[Sequence[str], Sequence[str]], bool]


def multi_answer_iou(predicted: Sequence[str], gold: Sequence[str]) -> float:
    p = {normalize_answer(x) for x in predicted} - {""}
    g = {normalize_answer(x) for x in gold} - {""}
    if not p or not g:
        return 0.0
    return len(p & g) / len(p | g)


def score_multi_answer(
    predicted: Sequence[str],
    gold: Sequence[str],
    equivalence: EquivalenceHook | None = None,
) -> int:
    """1 iff IoU of the normalized answer sets is at least 0.5.

    Below threshold, ``equivalence(predicted, gold)`` gets a second say when
    supplied (the slot for an external semantic matcher).
    """
    if not [x for x in predicted if normalize_answer(x)]:
        return 0
    if multi_answer_iou(predicted, gold) >= IOU_THRESHOLD:
        return 1
    if equivalence is not None:
        return int(bool(equivalence(list(predicted), list(gold))))
    return 0


@dataclass(frozen=True)
class EvalOutcome:
    query_id: str
    category: Category
    split: str
    predicted: Any
    gold: Any
    score: int
    diagnostic: str | None = None


@dataclass(frozen=True)
class ScoringOptions:
    relaxed_tolerance: float = DEFAULT_RELAXED_TOLERANCE
    normalize_dates: bool = False
    equivalence: EquivalenceHook | None = None
    equivalence_name: str = "string"


def score_row(row: dict[str, Any], opts: ScoringOptions = ScoringOptions()) -> EvalOutcome:
    """Score one ``{query_id, split, category, predicted, gold}`` row."""
    try:
        qid, split = str(row["query_id"]), str(row["split"])
        category = Category(str(row.get("category", "STRING")).upper())
        predicted, gold = row["predicted"], row["gold"]
    except (KeyError, ValueError) as exc:
        raise DataError(f"malformed eval row {row!r}: {exc}") from exc
    if predicted is None:
        predicted = ""
    diag = None
    if category is Category.NUMERICAL:
        if isinstance(gold, list) and len(gold) == 1:
            gold = gold[0]
        score, diag = explain_numerical(predicted, gold, opts.relaxed_tolerance)
    elif category is Category.MULTI_ANSWER:
        pred_list = split_multi_answer(predicted) if isinstance(predicted, str) else list(predicted)
        gold_list = split_multi_answer(gold) if isinstance(gold, str) else list(gold)
        score = score_multi_answer(pred_list, gold_list, opts.equivalence)
    else:
        gold_list = [gold] if isinstance(gold, str) else [str(g) for g in gold]
        if not gold_list:
            raise DataError(f"query {qid}: empty gold answer list")
        score = score_string_time(str(predicted), gold_list, opts.normalize_dates and category is Category.TIME)
    return EvalOutcome(qid, category, split, predicted, gold, score, diag)


def geometric_mean(values: Sequence[float]) -> float:
    if not values:
        raise ValueError("geometric mean of nothing")
    if any(v < 0 for v in values):
        raise ValueError("geometric mean needs non-negative values")
    if any(v == 0 for v in values):
        return 0.0
    return math.exp(math.fsum(math.log(v) for v in values) / len(values))


def overall_from_split_averages(split_averages: Sequence[float]) -> float:
    """Geometric mean across splits; a single split reports its own average."""
    if len(split_averages) == 1:
        return float(split_averages[0])
    return geometric_mean(split_averages)


@dataclass
class MetricReport:
    splits: list[str]
    split_averages: dict[str, float]
    per_category: dict[str, dict[str, float]]
    counts: dict[str, dict[str, int]]
    overall: float
    header: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "header": self.header,
            "splits": self.splits,
            "split_averages": self.split_averages,
            "per_category": self.per_category,
            "counts": self.counts,
            "overall": self.overall,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "MetricReport":
        return cls(d["splits"], d["split_averages"], d["per_category"], d["counts"], d["overall"], d.get("header", {}))


def aggregate(
    outcomes: Iterable[EvalOutcome],
    splits: Sequence[str] | None = None,
    header: dict[str, Any] | None = None,
) -> MetricReport:
    """Per-split and per-category averages (x100) and the geometric-mean overall.

    ``splits`` fixes the expected split names and their column order; a named
    split without outcomes is an error.
    """
    by_split: dict[str, list[int]] = defaultdict(list)
    by_cat: dict[str, dict[str, list[int]]] = defaultdict(lambda: defaultdict(list))
    for o in outcomes:
        by_split[o.split].append(o.score)
        by_cat[o.split][o.category.value].append(o.score)
    names = list(splits) if splits is not None else sorted(by_split)
    if not names:
        raise DataError("no outcomes to aggregate")
    for s in names:
        if not by_split.get(s):
            raise DataError(f"split {s!r} has no outcomes")
    extra = sorted(set(by_split) - set(names))
    if extra:
        raise DataError(f"outcomes for undeclared splits: {extra}")

    def avg(xs: list[int]) -> float:
        return 100.0 * math.fsum(xs) / len(xs)

    split_avgs = {s: avg(by_split[s]) for s in names}
    per_cat = {s: {c: avg(v) for c, v in sorted(by_cat[s].items())} for s in names}
    counts = {s: {"total": len(by_split[s]), **{c: len(v) for c, v in sorted(by_cat[s].items())}} for s in names}
    overall = overall_from_split_averages([split_avgs[s] for s in names])
    return MetricReport(names, split_avgs, per_cat, counts, overall, dict(header or {}))


def report_header(opts: ScoringOptions) -> dict[str, Any]:
    return {
        "relaxed_tolerance": opts.relaxed_tolerance,
        "normalization_version": NORMALIZATION_VERSION,
        "date_normalization": opts.normalize_dates,
        "multi_answer_matcher": opts.equivalence_name,
    }


def evaluate_rows(
    rows: Iterable[dict[str, Any]],
    opts: ScoringOptions = ScoringOptions(),
    splits: Sequence[str] | None = None,
) -> tuple[MetricReport, list[EvalOutcome]]:
    outcomes = [score_row(r, opts) for r in rows]
    return aggregate(outcomes, splits, report_header(opts)), outcomes


def format_table(columns: dict[str, MetricReport] | MetricReport, title: str = "") -> str:
    """Aligned text table: one row per report, split averages then Overall."""
    if isinstance(columns, MetricReport):
        columns = {"result": columns}
    splits: list[str] = []
    for rep in columns.values():
        for s in rep.splits:
            if s not in splits:
                splits.append(s)
    head = ["", *splits, "Overall"]
    rows = [
        [name, *(f"{rep.split_averages[s]:.1f}" if s in rep.split_averages else "-" for s in splits), f"{rep.overall:.1f}"]
        for name, rep in columns.items()
    ]
    widths = [max(len(r[i]) for r in [head, *rows]) for i in range(len(head))]
    lines = []
    first = next(iter(columns.values()))
    if first.header:
        lines.append("# " + "  ".join(f"{k}={v}" for k, v in first.header.items()))
    if title:
        lines.append(title)
    fmt = lambda r: "  ".join(c.ljust(widths[0]) if i == 0 else c.rjust(widths[i]) for i, c in enumerate(r))
    lines.append(fmt(head))
    lines.append("  ".join("-" * w for w in widths))
    lines.extend(fmt(r) for r in rows)
    return "\n".join(lines)
