"""Generator backend contract, a scripted test double and an HTTP client.

The engine never touches model weights. Every neural step goes through
``Backend.generate``, which returns the emitted reflection token with its
probability and/or an answer with per-token log-probabilities. Those numbers
are reported by the serving side; the engine does not re-derive them.
"""

from __future__ import annotations

import enum
import logging
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol

from .errors import BackendError, BackendTimeout, ConfigError, DataError, SchemaError
from .jsonl import iter_jsonl

logger = logging.getLogger(__name__)


class ReflectionToken(str, enum.Enum):
    RETRIEVAL = "Retrieval"
    NO_RETRIEVAL = "NoRetrieval"
    RELEVANT = "Relevant"
    IRRELEVANT = "Irrelevant"

    @classmethod
    def parse(cls, value: Any) -> "ReflectionToken":
        if isinstance(value, cls):
            return value
        if not isinstance(value, str):
            raise SchemaError(f"reflection token must be a string, got {value!r}")
        # accept "[No Retrieval]" and friends as well as the bare wire names
        key = value.strip().strip("[]").replace(" ", "").replace("_", "").lower()
        for tok in cls:
            if tok.value.lower() == key:
                return tok
        raise SchemaError(f"unknown reflection token {value!r}")

    @property
    def marker(self) -> str:
        return {"NoRetrieval": "[No Retrieval]"}.get(self.value, f"[{self.value}]")


class RequestMode(str, enum.Enum):
    RETRIEVAL_REFLECTION = "retrieval_reflection"
    DIRECT_ANSWER = "direct_answer"
    RELEVANCE_AND_ANSWER = "relevance_and_answer"


# Answer-format instructions appended by the serving side, keyed by prompt_template_id.
PROMPT_TEMPLATES: dict[str, str] = {
    "infoseek": "Based on the retrieved document, answer the question with a single word or phrase.",
    "enc_vqa_single": "Based on the retrieved document, answer the question with a single word or phrase.",
    "enc_vqa_multi": (
        "Based on the retrieved documents, answer the question as briefly as possible, "
        "using '&&' to connect multiple different answers."
    ),
}
DEFAULT_TEMPLATE_ID = "infoseek"


@dataclass(frozen=True)
class GenerationRequest:
    mode: RequestMode
    question: str
    image_ref: str | None = None
    context_paragraph: str | None = None
    prompt_template_id: str = DEFAULT_TEMPLATE_ID

    def __post_init__(self):
        object.__setattr__(self, "mode", RequestMode(self.mode))
        if not self.question or not self.question.strip():
            raise ValueError("question must be non-empty")
        needs_ctx = self.mode is RequestMode.RELEVANCE_AND_ANSWER
        if needs_ctx and not self.context_paragraph:
            raise ValueError("relevance_and_answer requests need a context_paragraph")
        if not needs_ctx and self.context_paragraph is not None:
            raise ValueError(f"{self.mode.value} requests must not carry a context_paragraph")

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "mode": self.mode.value,
            "question": self.question,
            "prompt_template_id": self.prompt_template_id,
        }
        if self.image_ref is not None:
            out["image_ref"] = self.image_ref
        if self.context_paragraph is not None:
            out["context_paragraph"] = self.context_paragraph
        return out

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "GenerationRequest":
        return cls(
            mode=RequestMode(d["mode"]),
            question=d["question"],
            image_ref=d.get("image_ref"),
            context_paragraph=d.get("context_paragraph"),
            prompt_template_id=d.get("prompt_template_id", DEFAULT_TEMPLATE_ID),
        )


@dataclass(frozen=True)
class GenerationResponse:
    reflection_token: ReflectionToken | None = None
    reflection_prob: float | None = None
    answer_text: str | None = None
    answer_token_logprobs: tuple[float, ...] | None = None
    # probability of the complementary token of the pair, when the server reports it
    reflection_alt_prob: float | None = None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        if self.reflection_token is not None:
            out["reflection_token"] = self.reflection_token.value
        if self.reflection_prob is not None:
            out["reflection_prob"] = self.reflection_prob
        if self.answer_text is not None:
            out["answer_text"] = self.answer_text
        if self.answer_token_logprobs is not None:
            out["answer_token_logprobs"] = list(self.answer_token_logprobs)
        if self.reflection_alt_prob is not None:
            out["reflection_alt_prob"] = self.reflection_alt_prob
        return out

    @classmethod
    def from_dict(cls, d: Any) -> "GenerationResponse":
        if not isinstance(d, dict):
            raise SchemaError("response body must be a JSON object")
        tok = d.get("reflection_token")
        lps = d.get("answer_token_logprobs")
        if lps is not None:
            if not isinstance(lps, list) or not all(isinstance(x, (int, float)) for x in lps):
                raise SchemaError("answer_token_logprobs must be a list of numbers")
            lps = tuple(float(x) for x in lps)
        ans = d.get("answer_text")
        if ans is not None and not isinstance(ans, str):
            raise SchemaError("answer_text must be a string")
        return cls(
            reflection_token=None if tok is None else ReflectionToken.parse(tok),
            reflection_prob=_opt_float(d, "reflection_prob"),
            answer_text=ans,
            answer_token_logprobs=lps,
            reflection_alt_prob=_opt_float(d, "reflection_alt_prob"),
        )

    def validate_for(self, mode: RequestMode) -> "GenerationResponse":
        """Check the mode/field coupling; returns self so calls can be chained."""
        mode = RequestMode(mode)
        has_answer = self.answer_text is not None or self.answer_token_logprobs is not None
        if mode is RequestMode.DIRECT_ANSWER:
            if self.reflection_token is not None or self.reflection_prob is not None:
                raise SchemaError("direct_answer responses must not carry reflection fields")
            self._check_answer()
            return self
        allowed = (
            {ReflectionToken.RETRIEVAL, ReflectionToken.NO_RETRIEVAL}
            if mode is RequestMode.RETRIEVAL_REFLECTION
            else {ReflectionToken.RELEVANT, ReflectionToken.IRRELEVANT}
        )
        if self.reflection_token not in allowed:
            raise SchemaError(f"{mode.value} response has reflection_token {self.reflection_token!r}")
        p = self.reflection_prob
        if p is None or not (0.0 < p <= 1.0):
            raise SchemaError(f"reflection_prob must lie in (0, 1], got {p!r}")
        if self.reflection_alt_prob is not None and not (0.0 <= self.reflection_alt_prob <= 1.0):
            raise SchemaError("reflection_alt_prob must lie in [0, 1]")
        if mode is RequestMode.RETRIEVAL_REFLECTION:
            if has_answer:
                raise SchemaError("retrieval_reflection responses carry no answer")
        elif self.reflection_token is ReflectionToken.RELEVANT:
            self._check_answer()
        elif has_answer:
            raise SchemaError("an [Irrelevant] judgment must not carry an answer")
        return self

    def _check_answer(self) -> None:
        if self.answer_text is None or self.answer_token_logprobs is None:
            raise SchemaError("answer_text and answer_token_logprobs are required")
        if len(self.answer_token_logprobs) < 1:
            raise SchemaError("answer_token_logprobs must be non-empty")
        for lp in self.answer_token_logprobs:
            if not math.isfinite(lp) or lp > 0.0:
                raise SchemaError(f"token log-probability {lp!r} is not a finite value <= 0")


def _opt_float(d: dict, key: str) -> float | None:
    v = d.get(key)
    if v is None:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SchemaError(f"{key} must be a number")
    return float(v)


def renormalize_reflection(resp: GenerationResponse) -> GenerationResponse:
    """Renormalize the reflection probability over its two-token pair.

    Needs ``reflection_alt_prob``; responses without it are returned unchanged.
    """
    if resp.reflection_prob is None or resp.reflection_alt_prob is None:
        return resp
    p, q = resp.reflection_prob, resp.reflection_alt_prob
    return GenerationResponse(
        resp.reflection_token, p / (p + q), resp.answer_text, resp.answer_token_logprobs, q / (p + q)
    )


class Backend(Protocol):
    def generate(self, request: GenerationRequest) -> GenerationResponse: ...


# ---------------------------------------------------------------------------
# Scripted backend


@dataclass(frozen=True)
class FixtureKey:
    mode: RequestMode
    question: str
    context_contains: str | None = None

    def matches(self, req: GenerationRequest) -> bool:
        if req.mode is not self.mode or req.question != self.question:
            return False
        if self.context_contains is None:
            return True
        return req.context_paragraph is not None and self.context_contains in req.context_paragraph


@dataclass
class ScriptedBackend:
    """Deterministic backend answering from a rule table.

    A rule with ``context_contains`` only fires for paragraphs containing that
    substring; rules are tried in insertion order and the first match wins.
    A rule whose response is ``{"error": "..."}`` raises :class:`BackendError`,
    for exercising failure policies. Unmatched requests get the defaults below
    and are logged. Every request is recorded in ``calls``.
    """

    rules: list[tuple[FixtureKey, dict[str, Any]]] = field(default_factory=list)
    default_retrieval: ReflectionToken = ReflectionToken.NO_RETRIEVAL
    default_relevance: ReflectionToken = ReflectionToken.IRRELEVANT
    default_prob: float = 1.0
    default_answer: str = "unknown"
    delay: Callable[[GenerationRequest], None] | None = None

    def __post_init__(self):
        self._lock = threading.Lock()
        self.calls: list[GenerationRequest] = []
        self.unmatched: list[GenerationRequest] = []
        keys = [k for k, _ in self.rules]
        if len(set(keys)) != len(keys):
            raise DataError("duplicate fixture key")

    def add_rule(
        self,
        mode: RequestMode | str,
        question: str,
        response: dict[str, Any],
        context_contains: str | None = None,
    ) -> "ScriptedBackend":
        key = FixtureKey(RequestMode(mode), question, context_contains)
        if any(k == key for k, _ in self.rules):
            raise DataError(f"duplicate fixture key {key}")
        self.rules.append((key, response))
        return self

    def calls_by_mode(self, mode: RequestMode | str) -> list[GenerationRequest]:
        mode = RequestMode(mode)
        with self._lock:
            return [c for c in self.calls if c.mode is mode]

    def reset(self) -> None:
        with self._lock:
            self.calls.clear()
            self.unmatched.clear()

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        with self._lock:
            self.calls.append(request)
        if self.delay is not None:
            self.delay(request)
        for key, payload in self.rules:
            if key.matches(request):
                if "error" in payload:
                    raise BackendError(str(payload["error"]))
                return GenerationResponse.from_dict(payload).validate_for(request.mode)
        with self._lock:
            self.unmatched.append(request)
        logger.debug("no fixture rule for %s %r; using default", request.mode.value, request.question)
        return self._default(request)

    def _default(self, request: GenerationRequest) -> GenerationResponse:
        if request.mode is RequestMode.RETRIEVAL_REFLECTION:
            return GenerationResponse(self.default_retrieval, self.default_prob)
        answer = (self.default_answer, (0.0,))
        if request.mode is RequestMode.DIRECT_ANSWER:
            return GenerationResponse(None, None, *answer)
        if self.default_relevance is ReflectionToken.RELEVANT:
            return GenerationResponse(ReflectionToken.RELEVANT, self.default_prob, *answer)
        return GenerationResponse(ReflectionToken.IRRELEVANT, self.default_prob)


def scripted_backend_from_fixture(path: str | Path, **defaults: Any) -> ScriptedBackend:
    """Build a :class:`ScriptedBackend` from a JSONL fixture.

    Each line is ``{"request_key": {"mode", "question", "context_contains"?},
    "response": {...}}``. An optional single line ``{"defaults": {...}}`` sets
    the fallback behaviour; keyword arguments override it.
    """
    backend_defaults: dict[str, Any] = {}
    rules: list[tuple[FixtureKey, dict[str, Any]]] = []
    seen: dict[FixtureKey, int] = {}
    for lineno, obj in iter_jsonl(path):
        where = f"{path}:{lineno}"
        if "defaults" in obj:
            backend_defaults.update(obj["defaults"])
            continue
        try:
            rk, resp = obj["request_key"], obj["response"]
            key = FixtureKey(RequestMode(rk["mode"]), rk["question"], rk.get("context_contains"))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{where}: malformed fixture line ({exc})") from exc
        if not isinstance(resp, dict):
            raise DataError(f"{where}: response must be an object")
        if key in seen:
            raise DataError(f"{where}: duplicate fixture key (first defined on line {seen[key]})")
        if "error" not in resp:
            try:
                GenerationResponse.from_dict(resp).validate_for(key.mode)
            except SchemaError as exc:
                raise DataError(f"{where}: {exc}") from exc
        seen[key] = lineno
        rules.append((key, resp))
    backend_defaults.update(defaults)
    for name in ("default_retrieval", "default_relevance"):
        if name in backend_defaults:
            backend_defaults[name] = ReflectionToken.parse(backend_defaults[name])
    return ScriptedBackend(rules=rules, **backend_defaults)


# ---------------------------------------------------------------------------
# Remote backend


class RemoteBackend:
    """HTTP client for a serving process exposing ``POST /generate``."""

    def __init__(self, base_url: str, timeout: float = 60.0, client: Any = None):
        import httpx

        self.base_url = base_url.rstrip("/")
        self._client = client or httpx.Client(timeout=timeout)

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        import httpx

        try:
            resp = self._client.post(f"{self.base_url}/generate", json=request.to_dict())
        except httpx.TimeoutException as exc:
            raise BackendTimeout(f"generate timed out: {exc}") from exc
        except httpx.HTTPError as exc:
            raise BackendError(f"backend unreachable at {self.base_url}: {exc}") from exc
        if resp.status_code != 200:
            raise BackendError(f"backend returned HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
        except ValueError as exc:
            raise SchemaError("backend response is not JSON") from exc
        return GenerationResponse.from_dict(body).validate_for(request.mode)

    def close(self) -> None:
        self._client.close()


class BoundedBackend:
    """Wraps a backend so at most ``limit`` generate calls are in flight."""

    def __init__(self, inner: Backend, limit: int):
        self.inner = inner
        self._sem = threading.BoundedSemaphore(max(1, limit))

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        with self._sem:
            return self.inner.generate(request)


def open_backend(spec: str, **kwargs: Any) -> Backend:
    """``http(s)://...`` selects the remote client, anything else a fixture path."""
    if spec.startswith(("http://", "https://")):
        return RemoteBackend(spec, **kwargs)
    p = spec[len("fixture:"):] if spec.startswith("fixture:") else spec
    if not Path(p).exists():
        raise ConfigError(f"backend fixture not found: {p}")
    return scripted_backend_from_fixture(p)
