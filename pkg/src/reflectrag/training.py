"""Instruction-tuning records and their loss, evaluated from supplied log-probs.

Two record families:

* L1 (plain visual instruction data): target ``[No Retrieval]`` followed by
  the answer, no context.
* L2 (annotated retrieval data): one record per paragraph. Every record has
  the query-level ``[Retrieval]`` target; a relevant paragraph adds
  ``[Relevant]`` + answer, an irrelevant one adds ``[Irrelevant]`` only.

Losses are negative means of the summed, masked segment log-probabilities.
No gradients are taken here; this checks target and mask structure.
"""

from __future__ import annotations

import enum
import math
import threading
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Protocol

from .annotation import AnnotationRecord, Label
from .backend import ReflectionToken
from .errors import DataError


class RecordKind(str, enum.Enum):
    L1 = "L1"
    L2_RELEVANT = "L2_relevant"
    L2_IRRELEVANT = "L2_irrelevant"


class DataSource(str, enum.Enum):
    VISUAL_IT = "visual_it"
    MR2AG_IT = "mr2ag_it"


class Segment(str, enum.Enum):
    """Scored target spans. Each is one joint log-probability term."""

    NO_RETRIEVAL_ANSWER = "no_retrieval+answer"  # log p([No Retrieval], answer | I, Q)
    RETRIEVAL = "retrieval"  # log p([Retrieval] | I, Q)
    RELEVANT_ANSWER = "relevant+answer"  # log p([Relevant], answer | I, Q, P)
    IRRELEVANT = "irrelevant"  # log p([Irrelevant] | I, Q, P)

    @property
    def has_answer(self) -> bool:
        return self in (Segment.NO_RETRIEVAL_ANSWER, Segment.RELEVANT_ANSWER)


_MASKS: dict[RecordKind, tuple[Segment, ...]] = {
    RecordKind.L1: (Segment.NO_RETRIEVAL_ANSWER,),
    RecordKind.L2_RELEVANT: (Segment.RETRIEVAL, Segment.RELEVANT_ANSWER),
    RecordKind.L2_IRRELEVANT: (Segment.RETRIEVAL, Segment.IRRELEVANT),
}
_TOKENS: dict[RecordKind, tuple[ReflectionToken, ...]] = {
    RecordKind.L1: (ReflectionToken.NO_RETRIEVAL,),
    RecordKind.L2_RELEVANT: (ReflectionToken.RETRIEVAL, ReflectionToken.RELEVANT),
    RecordKind.L2_IRRELEVANT: (ReflectionToken.RETRIEVAL, ReflectionToken.IRRELEVANT),
}


@dataclass(frozen=True)
class TrainingRecord:
    record_id: str
    kind: RecordKind
    question: str
    image_ref: str
    context_paragraph: str | None
    target_reflection_tokens: tuple[ReflectionToken, ...]
    target_answer: str | None
    loss_mask: Mapping[str, bool]
    source: DataSource = DataSource.MR2AG_IT
    origin: str | None = None

    def __post_init__(self):
        is_l2 = self.kind is not RecordKind.L1
        if is_l2 != (self.context_paragraph is not None):
            raise ValueError(f"{self.record_id}: context_paragraph must be present iff the record is L2")
        if self.target_reflection_tokens != _TOKENS[self.kind]:
            raise ValueError(f"{self.record_id}: targets {self.target_reflection_tokens} do not fit {self.kind.value}")
        wants_answer = self.kind is not RecordKind.L2_IRRELEVANT
        if wants_answer != (self.target_answer is not None):
            raise ValueError(f"{self.record_id}: answer presence does not fit {self.kind.value}")

    @property
    def scored_segments(self) -> list[Segment]:
        return [s for s in Segment if self.loss_mask.get(s.value, False)]

    def to_dict(self) -> dict[str, Any]:
        return {
            "record_id": self.record_id,
            "kind": self.kind.value,
            "question": self.question,
            "image_ref": self.image_ref,
            "context_paragraph": self.context_paragraph,
            "target_reflection_tokens": [t.value for t in self.target_reflection_tokens],
            "target_answer": self.target_answer,
            "loss_mask": dict(self.loss_mask),
            "source": self.source.value,
            "origin": self.origin,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainingRecord":
        return cls(
            record_id=d["record_id"],
            kind=RecordKind(d["kind"]),
            question=d["question"],
            image_ref=d.get("image_ref", ""),
            context_paragraph=d.get("context_paragraph"),
            target_reflection_tokens=tuple(ReflectionToken.parse(t) for t in d["target_reflection_tokens"]),
            target_answer=d.get("target_answer"),
            loss_mask=dict(d["loss_mask"]),
            source=DataSource(d.get("source", DataSource.MR2AG_IT.value)),
            origin=d.get("origin"),
        )


def make_record(
    record_id: str,
    kind: RecordKind,
    question: str,
    image_ref: str,
    answer: str | None,
    context: str | None = None,
    source: DataSource = DataSource.MR2AG_IT,
    origin: str | None = None,
) -> TrainingRecord:
    mask = {s.value: s in _MASKS[kind] for s in Segment}
    return TrainingRecord(record_id, kind, question, image_ref, context, _TOKENS[kind], answer, mask, source, origin)


def assemble_records(
    samples: Iterable[AnnotationRecord | Mapping[str, Any]],
    source: DataSource | str,
) -> list[TrainingRecord]:
    """Turn samples into training records.

    ``visual_it`` samples are mappings ``{sample_id, question, image_ref,
    answer}`` and give one L1 record each. ``mr2ag_it`` samples are
    :class:`AnnotationRecord` and give one L2 record per paragraph; flagged
    records and unjudged paragraphs are not accepted.
    """
    source = DataSource(source)
    out: list[TrainingRecord] = []
    if source is DataSource.VISUAL_IT:
        for n, s in enumerate(samples):
            try:
                sid, q, a = str(s["sample_id"]), s["question"], s["answer"]
            except (KeyError, TypeError) as exc:
                raise DataError(f"visual_it sample #{n} malformed: {exc}") from exc
            out.append(make_record(f"{sid}:L1", RecordKind.L1, q, s.get("image_ref", ""), a, None, source))
        return out

    for rec in samples:
        if not isinstance(rec, AnnotationRecord):
            rec = AnnotationRecord.from_dict(dict(rec))
        if not rec.paragraphs:
            raise DataError(f"{rec.sample_id}: mr2ag_it sample has no paragraphs")
        if rec.flags:
            raise DataError(f"{rec.sample_id}: flagged record ({', '.join(rec.flags)}) cannot be exported")
        answer = rec.gold_answers[0] if rec.gold_answers else None
        for j, p in enumerate(rec.paragraphs):
            if p.label is Label.RELEVANT:
                if answer is None:
                    raise DataError(f"{rec.sample_id}: relevant paragraph but no gold answer")
                kind, target = RecordKind.L2_RELEVANT, answer
            elif p.label is Label.IRRELEVANT:
                kind, target = RecordKind.L2_IRRELEVANT, None
            else:
                raise DataError(f"{rec.sample_id}: paragraph {j} is unjudged")
            out.append(
                make_record(f"{rec.sample_id}:p{j}", kind, rec.question, rec.image_ref, target, p.text, source, rec.source.value)
            )
    return out


class SegmentScorer(Protocol):
    """Returns ``log p(segment targets | conditioning)`` for one record."""

    def segment_logprob(self, record: TrainingRecord, segment: Segment) -> float: ...


class MissingSegmentError(DataError):
    pass


@dataclass
class TableScorer:
    """Scorer backed by a ``{(record_id, segment): logprob}`` table; logs every request."""

    table: dict[tuple[str, Segment], float]
    calls: list[tuple[str, Segment]] = field(default_factory=list)

    def __post_init__(self):
        self._lock = threading.Lock()

    def segment_logprob(self, record: TrainingRecord, segment: Segment) -> float:
        with self._lock:
            self.calls.append((record.record_id, segment))
        try:
            return self.table[(record.record_id, Segment(segment))]
        except KeyError:
            raise MissingSegmentError(f"no log-probability for {record.record_id} / {segment.value}") from None


@dataclass
class LossReport:
    l1: float | None
    l2: float | None
    per_record: list[dict[str, Any]]
    per_source: dict[str, dict[str, float | int]]

    def to_dict(self) -> dict[str, Any]:
        return {"L1": self.l1, "L2": self.l2, "per_source": self.per_source, "per_record": self.per_record}


def record_log_likelihood(record: TrainingRecord, scorer: SegmentScorer) -> float:
    """Sum of the masked segment log-probabilities for one record."""
    terms = []
    for seg in record.scored_segments:
        lp = scorer.segment_logprob(record, seg)
        if not math.isfinite(lp):
            raise DataError(f"{record.record_id}: non-finite log-probability for {seg.value}")
        terms.append(lp)
    return math.fsum(terms)


def evaluate_loss(
    records: Iterable[TrainingRecord],
    scorer: SegmentScorer,
    parallelism: int = 1,
) -> LossReport:
    """L1 and L2 as negative mean log-likelihood over their record families."""
    records = list(records)
    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            lls = list(pool.map(lambda r: record_log_likelihood(r, scorer), records))
    else:
        lls = [record_log_likelihood(r, scorer) for r in records]

    fam: dict[str, list[float]] = defaultdict(list)
    src: dict[str, list[float]] = defaultdict(list)
    per_record = []
    for r, ll in zip(records, lls):
        family = "L1" if r.kind is RecordKind.L1 else "L2"
        fam[family].append(ll)
        src[f"{family}/{r.source.value}"].append(ll)
        per_record.append({"record_id": r.record_id, "kind": r.kind.value, "loss": 0.0 - ll})

    def neg_mean(xs: list[float]) -> float | None:
        return (0.0 - math.fsum(xs)) / len(xs) if xs else None

    per_source = {k: {"loss": neg_mean(v), "records": len(v)} for k, v in sorted(src.items())}
    return LossReport(neg_mean(fam["L1"]), neg_mean(fam["L2"]), per_record, per_source)
