"""Building relevance-annotated training samples.

Three sources:

* infoseek: the ground-truth article is segmented with the same rule used at
  inference time, then each paragraph is labeled by a judge.
* nq: the long answer is the single evidence paragraph, the short answer is
  the gold response, optional distractors become irrelevant paragraphs.
* enc_vqa: evidence paragraphs come with the dataset; a strict string filter
  keeps only samples where every answer appears in evidence and nowhere else.
"""

from __future__ import annotations

import enum
import hashlib
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Protocol, Sequence

import numpy as np

from .errors import BackendError, DataError
from .knowledge_base import DEFAULT_MIN_PARAGRAPH_CHARS, segment_text

logger = logging.getLogger(__name__)


class Label(str, enum.Enum):
    RELEVANT = "Relevant"
    IRRELEVANT = "Irrelevant"
    UNJUDGED = "Unjudged"


class Source(str, enum.Enum):
    INFOSEEK = "infoseek"
    ENC_VQA = "enc_vqa"
    NQ = "nq"


FLAG_NO_EVIDENCE = "no-evidence"
FLAG_JUDGE_FAILURE = "judge-failure"


@dataclass(frozen=True)
class AnnotatedParagraph:
    text: str
    label: Label
    evidence_sentence: str | None = None

    def to_dict(self) -> dict[str, Any]:
        d = {"text": self.text, "label": self.label.value}
        if self.evidence_sentence is not None:
            d["evidence_sentence"] = self.evidence_sentence
        return d


@dataclass(frozen=True)
class AnnotationRecord:
    sample_id: str
    question: str
    image_ref: str
    gold_answers: tuple[str, ...]
    paragraphs: tuple[AnnotatedParagraph, ...]
    source: Source
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.paragraphs:
            raise DataError(f"annotation record {self.sample_id!r} has no paragraphs")

    @property
    def relevant_indices(self) -> list[int]:
        return [j for j, p in enumerate(self.paragraphs) if p.label is Label.RELEVANT]

    def to_dict(self) -> dict[str, Any]:
        return {
            "sample_id": self.sample_id,
            "question": self.question,
            "image_ref": self.image_ref,
            "gold_answers": list(self.gold_answers),
            "paragraphs": [p.to_dict() for p in self.paragraphs],
            "source": self.source.value,
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "AnnotationRecord":
        try:
            paragraphs = tuple(
                AnnotatedParagraph(p["text"], Label(p["label"]), p.get("evidence_sentence")) for p in d["paragraphs"]
            )
            return cls(
                sample_id=str(d["sample_id"]),
                question=d["question"],
                image_ref=d.get("image_ref", ""),
                gold_answers=tuple(d["gold_answers"]),
                paragraphs=paragraphs,
                source=Source(d["source"]),
                flags=tuple(d.get("flags", ())),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed annotation record: {exc}") from exc


# ---------------------------------------------------------------------------
# String matching

_THOUSANDS_RE = re.compile(r"(?<=\d)[,  ](?=\d{3}\b)")


def _squash(text: str) -> str:
    return " ".join(text.casefold().split())


def answer_in_text(answer: str, text: str) -> bool:
    """Case-insensitive substring test on whitespace-normalized text.

    Answers containing digits are also tried with thousands separators removed
    on both sides, so ``1,000`` and ``1000`` find each other.
    """
    a, t = _squash(answer), _squash(text)
    if not a:
        return False
    if a in t:
        return True
    if any(ch.isdigit() for ch in a):
        return _THOUSANDS_RE.sub("", a) in _THOUSANDS_RE.sub("", t)
    return False


# ---------------------------------------------------------------------------
# Judges


@dataclass(frozen=True)
class JudgeVerdict:
    label: Label
    evidence_sentence: str | None = None
    raw: str | None = None


class Judge(Protocol):
    def judge(self, question: str, answers: Sequence[str], paragraph: str) -> JudgeVerdict: ...


# Instruction text sent verbatim to an LLM judge; {question}/{answer}/{paragraph} are filled in.
JUDGE_PROMPT = """Instruction:
Given a question and its corresponding answer, I need your help to verify whether the retrieved document provided below can fully and effectively support the corresponding answer to the question, and then accurately locate the source of the answer within the paragraph. If so, please respond with [Relevant] and find the evidence sentence supporting the answer. If not, please just respond with [Irrelevant].

There are only two formats for your response:
1. [Relevant]
Answer source: source sentence.
2. [Irrelevant]

Input:
Question: {question}.
Answer: {answer}.
Retrieved document: {paragraph}."""

_SOURCE_RE = re.compile(r"answer\s+source\s*:\s*(.+)", re.IGNORECASE | re.DOTALL)


def parse_judge_response(text: str) -> JudgeVerdict:
    """Parse ``[Relevant]\\nAnswer source: ...`` or ``[Irrelevant]``."""
    rel = text.find("[Relevant]")
    irr = text.find("[Irrelevant]")
    if rel < 0 and irr < 0:
        raise BackendError(f"judge response has no relevance token: {text[:120]!r}")
    if irr >= 0 and (rel < 0 or irr < rel):
        return JudgeVerdict(Label.IRRELEVANT, None, text)
    m = _SOURCE_RE.search(text[rel:])
    evidence = m.group(1).strip() if m else None
    return JudgeVerdict(Label.RELEVANT, evidence or None, text)


_SENTENCE_RE = re.compile(r"(?<=[.!?])\s+")


class HeuristicJudge:
    """Offline judge: a paragraph is evidence iff it contains a gold answer string."""

    def judge(self, question: str, answers: Sequence[str], paragraph: str) -> JudgeVerdict:
        for answer in answers:
            if answer_in_text(answer, paragraph):
                sentence = next(
                    (s.strip() for s in _SENTENCE_RE.split(paragraph) if answer_in_text(answer, s)),
                    None,
                )
                return JudgeVerdict(Label.RELEVANT, sentence)
        return JudgeVerdict(Label.IRRELEVANT)


class ScriptedJudge:
    """Judge replaying raw LLM responses; ``responder`` maps (question, paragraph) to text."""

    def __init__(self, responder: Callable[[str, str], str]):
        self.responder = responder

    def judge(self, question: str, answers: Sequence[str], paragraph: str) -> JudgeVerdict:
        return parse_judge_response(self.responder(question, paragraph))


class RemoteJudge:
    """LLM judge behind ``POST {url}`` with body ``{"prompt": str}``.

    The reply must be JSON ``{"text": str}``. Only text is sent; the image is
    not part of the judging prompt.
    """

    def __init__(self, url: str, timeout: float = 120.0, prompt_template: str = JUDGE_PROMPT):
        import httpx

        self.url = url
        self.prompt_template = prompt_template
        self._client = httpx.Client(timeout=timeout)

    def judge(self, question: str, answers: Sequence[str], paragraph: str) -> JudgeVerdict:
        import httpx

        prompt = self.prompt_template.format(question=question, answer=", ".join(answers), paragraph=paragraph)
        try:
            resp = self._client.post(self.url, json={"prompt": prompt})
        except httpx.HTTPError as exc:
            raise BackendError(f"judge unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise BackendError(f"judge returned HTTP {resp.status_code}")
        try:
            text = resp.json()["text"]
        except (ValueError, KeyError, TypeError) as exc:
            raise BackendError("judge response lacks 'text'") from exc
        return parse_judge_response(text)


def open_judge(spec: str) -> Judge:
    if spec == "heuristic":
        return HeuristicJudge()
    if spec.startswith("remote:"):
        return RemoteJudge(spec[len("remote:"):])
    raise DataError(f"unknown judge spec {spec!r}; expected 'heuristic' or 'remote:<url>'")


# ---------------------------------------------------------------------------
# Sources


def annotate_infoseek(
    sample: dict[str, Any],
    judge: Judge,
    min_paragraph_chars: int = DEFAULT_MIN_PARAGRAPH_CHARS,
) -> AnnotationRecord:
    """Segment the article and label every paragraph with ``judge``.

    Judge failures leave the paragraph ``Unjudged`` and flag the record; a
    record with no relevant paragraph is flagged ``no-evidence``.
    """
    try:
        sample_id, question, article = str(sample["sample_id"]), sample["question"], sample["article"]
        answers = tuple(sample["answers"])
    except KeyError as exc:
        raise DataError(f"infoseek sample missing field {exc}") from exc
    if not answers:
        raise DataError(f"infoseek sample {sample_id}: no gold answers")
    paragraphs: list[AnnotatedParagraph] = []
    flags: list[str] = []
    for text in segment_text(article, min_paragraph_chars):
        try:
            v = judge.judge(question, answers, text)
            paragraphs.append(AnnotatedParagraph(text, v.label, v.evidence_sentence))
        except BackendError as exc:
            logger.warning("sample %s: judge failed: %s", sample_id, exc)
            paragraphs.append(AnnotatedParagraph(text, Label.UNJUDGED))
            if FLAG_JUDGE_FAILURE not in flags:
                flags.append(FLAG_JUDGE_FAILURE)
    if not any(p.label is Label.RELEVANT for p in paragraphs):
        flags.append(FLAG_NO_EVIDENCE)
    return AnnotationRecord(
        sample_id, question, sample.get("image_ref", ""), answers, tuple(paragraphs), Source.INFOSEEK, tuple(flags)
    )


class SampleSkipped(DataError):
    pass


def convert_nq(
    sample: dict[str, Any],
    max_distractors: int | None = None,
    rng: np.random.Generator | None = None,
) -> AnnotationRecord:
    """Long answer -> the one relevant paragraph; short answer -> gold.

    With ``max_distractors`` set, that many distractors are sampled (order
    preserved) using ``rng``; otherwise all provided distractors are kept.
    """
    question = (sample.get("question") or "").strip()
    long_answer = (sample.get("long_answer") or "").strip()
    short = sample.get("short_answer")
    short_answers = [short] if isinstance(short, str) else list(short or [])
    short_answers = [s.strip() for s in short_answers if s and s.strip()]
    if not question:
        raise SampleSkipped("empty question")
    if not long_answer:
        raise SampleSkipped("missing long answer")
    if not short_answers:
        raise SampleSkipped("missing short answer")
    distractors = [d.strip() for d in sample.get("distractors", []) if d and d.strip() and d.strip() != long_answer]
    if max_distractors is not None and len(distractors) > max_distractors:
        rng = rng or np.random.default_rng(0)
        keep = sorted(rng.choice(len(distractors), size=max_distractors, replace=False).tolist())
        distractors = [distractors[i] for i in keep]
    paragraphs = (AnnotatedParagraph(long_answer, Label.RELEVANT),) + tuple(
        AnnotatedParagraph(d, Label.IRRELEVANT) for d in distractors
    )
    sample_id = str(sample.get("sample_id") or "nq-" + hashlib.sha1(f"{question}\n{long_answer}".encode()).hexdigest()[:12])
    return AnnotationRecord(sample_id, question, sample.get("image_ref", ""), tuple(short_answers), paragraphs, Source.NQ)


def enc_vqa_record(sample: dict[str, Any]) -> AnnotationRecord:
    """Turn a raw Enc-VQA sample with ``paragraphs: [{text, is_evidence}]`` into a record."""
    try:
        paragraphs = tuple(
            AnnotatedParagraph(p["text"], Label.RELEVANT if p["is_evidence"] else Label.IRRELEVANT)
            for p in sample["paragraphs"]
        )
        answers = sample["answers"]
        if isinstance(answers, str):
            answers = [a.strip() for a in answers.split("&&") if a.strip()]
        return AnnotationRecord(
            str(sample["sample_id"]), sample["question"], sample.get("image_ref", ""), tuple(answers), paragraphs, Source.ENC_VQA
        )
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed enc_vqa sample: {exc}") from exc


@dataclass(frozen=True)
class Rejection:
    sample_id: str
    reason: str
    paragraph_index: int | None = None
    answer: str | None = None


def filter_enc_vqa(record: AnnotationRecord) -> AnnotationRecord | Rejection:
    """Keep a record only if each gold answer occurs in >= 1 evidence paragraph and in no other."""
    if record.source is not Source.ENC_VQA:
        raise ValueError("filter_enc_vqa applies to enc_vqa records only")
    if not record.gold_answers:
        return Rejection(record.sample_id, "no gold answers")
    for answer in record.gold_answers:
        in_relevant = False
        for j, p in enumerate(record.paragraphs):
            hit = answer_in_text(answer, p.text)
            if hit and p.label is not Label.RELEVANT:
                return Rejection(record.sample_id, "answer found outside evidence", j, answer)
            in_relevant |= hit
        if not in_relevant:
            return Rejection(record.sample_id, "answer missing from evidence", None, answer)
    return record


@dataclass
class AnnotationRun:
    records: list[AnnotationRecord] = field(default_factory=list)
    excluded: list[tuple[str, str]] = field(default_factory=list)

    @property
    def exported(self) -> list[AnnotationRecord]:
        return [r for r in self.records if not r.flags]


def annotate_corpus(
    samples: Iterable[dict[str, Any]],
    source: Source | str,
    judge: Judge | None = None,
    min_paragraph_chars: int = DEFAULT_MIN_PARAGRAPH_CHARS,
    max_distractors: int | None = None,
    seed: int = 0,
    parallelism: int = 1,
) -> AnnotationRun:
    """Annotate a corpus; output order follows input order.

    Flagged records stay in ``records`` for inspection but are left out of
    ``exported``; skipped and rejected samples land in ``excluded``.
    """
    source = Source(source)
    samples = list(samples)
    run = AnnotationRun()

    if source is Source.INFOSEEK:
        if judge is None:
            raise DataError("infoseek annotation needs a judge")
        work = lambda s: annotate_infoseek(s, judge, min_paragraph_chars)
        if parallelism > 1:
            with ThreadPoolExecutor(max_workers=parallelism) as pool:
                run.records = list(pool.map(work, samples))
        else:
            run.records = [work(s) for s in samples]
        run.excluded = [(r.sample_id, ",".join(r.flags)) for r in run.records if r.flags]
    elif source is Source.NQ:
        rng = np.random.default_rng(seed)
        for n, s in enumerate(samples):
            try:
                run.records.append(convert_nq(s, max_distractors, rng))
            except SampleSkipped as exc:
                run.excluded.append((str(s.get("sample_id", f"#{n}")), str(exc)))
    else:
        for s in samples:
            out = filter_enc_vqa(enc_vqa_record(s))
            if isinstance(out, Rejection):
                where = "" if out.paragraph_index is None else f" (paragraph {out.paragraph_index})"
                run.excluded.append((out.sample_id, f"{out.reason}: {out.answer!r}{where}"))
            else:
                run.records.append(out)
    return run
