"""Hierarchical answer post-processing.

Each candidate answer carries three confidences: the entry-level retrieval
score, the paragraph-level probability of the [Relevant] token, and the
length-normalized answer likelihood. The final answer maximizes a product of a
subset of those, chosen by :class:`RankingMode`. Products are formed as sums of
logs.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

# Log keys are rounded to this many decimals before sorting so that products
# equal in exact arithmetic (0.5*0.4 vs 0.4*0.5) tie and fall back to position.
KEY_DECIMALS = 12


class RankingMode(str, enum.Enum):
    RANDOM = "random"
    ANS = "ans"
    RET = "ret"
    REL = "rel"
    RET_ANS = "ret_ans"
    REL_ANS = "rel_ans"
    RET_REL = "ret_rel"
    RET_REL_ANS = "ret_rel_ans"

    @property
    def factors(self) -> tuple[str, ...]:
        if self is RankingMode.RANDOM:
            return ()
        return tuple(f"s_{name}" for name in self.value.split("_"))


class SRetPolicy(str, enum.Enum):
    """How raw retrieval scores enter a product.

    ``auto`` uses the raw cosine score unless some candidate in the set has a
    non-positive one, in which case the whole set is mapped through
    ``(s + 1) / 2``. ``raw`` never rescales, ``affine`` always does.
    """

    AUTO = "auto"
    RAW = "raw"
    AFFINE = "affine"


@dataclass(frozen=True)
class AnswerCandidate:
    answer_text: str
    entry_index: int
    paragraph_index: int
    s_ret: float
    s_rel: float
    s_ans: float
    token_logprobs: tuple[float, ...] = ()
    entry_id: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["token_logprobs"] = list(self.token_logprobs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AnswerCandidate":
        d = dict(d)
        d["token_logprobs"] = tuple(d.get("token_logprobs", ()))
        return cls(**d)

    @property
    def position(self) -> tuple[int, int]:
        return (self.entry_index, self.paragraph_index)


def answer_confidence(token_logprobs: Sequence[float]) -> float:
    """Geometric mean of the token probabilities, computed in the log domain."""
    lps = list(token_logprobs)
    if not lps:
        raise ValueError("answer_confidence needs at least one token")
    for lp in lps:
        if not math.isfinite(lp):
            raise ValueError(f"non-finite log-probability {lp!r}")
        if lp > 0.0:
            raise ValueError(f"log-probability {lp!r} is positive")
    first = lps[0]
    if all(lp == first for lp in lps):
        # exact mean for constant sequences; fsum/n can be off by one ulp
        return math.exp(first)
    return math.exp(math.fsum(lps) / len(lps))


def log_composite_score(
    candidate: AnswerCandidate,
    mode: RankingMode | str,
    s_ret_override: float | None = None,
) -> float:
    """Sum of the logs of the factors ``mode`` selects.

    Raises ValueError for a non-positive factor; callers that need to cope with
    negative cosine scores go through :func:`rank_candidates`.
    """
    mode = RankingMode(mode)
    if mode is RankingMode.RANDOM:
        raise ValueError("random mode has no deterministic score; use rank_candidates")
    total = 0.0
    for name in mode.factors:
        value = s_ret_override if (name == "s_ret" and s_ret_override is not None) else getattr(candidate, name)
        if not value > 0.0:
            raise ValueError(f"{mode.value} needs {name} > 0, got {value!r}")
        total += math.log(value)
    return total


def composite_score(
    candidate: AnswerCandidate,
    mode: RankingMode | str = RankingMode.RET_REL_ANS,
    rng: np.random.Generator | None = None,
) -> float:
    """Product of the selected confidences; a uniform draw in random mode."""
    mode = RankingMode(mode)
    if mode is RankingMode.RANDOM:
        return float((rng or np.random.default_rng()).random())
    return math.exp(log_composite_score(candidate, mode))


def effective_s_ret(candidates: Sequence[AnswerCandidate], policy: SRetPolicy | str = SRetPolicy.AUTO) -> list[float]:
    policy = SRetPolicy(policy)
    raw = [c.s_ret for c in candidates]
    if policy is SRetPolicy.RAW or (policy is SRetPolicy.AUTO and all(s > 0.0 for s in raw)):
        return raw
    return [(s + 1.0) / 2.0 for s in raw]


@dataclass(frozen=True)
class RankedCandidate:
    candidate: AnswerCandidate
    key: float

    def to_dict(self) -> dict:
        return {"key": self.key, **self.candidate.to_dict()}


def rank_candidates(
    candidates: Sequence[AnswerCandidate],
    mode: RankingMode | str = RankingMode.RET_REL_ANS,
    seed: int = 0,
    s_ret_policy: SRetPolicy | str = SRetPolicy.AUTO,
) -> list[RankedCandidate]:
    """Sort by composite score (log domain) descending, ties by position ascending.

    ``key`` is the log composite score rounded to ``KEY_DECIMALS``, or the
    uniform draw in random mode.
    """
    mode = RankingMode(mode)
    if mode is RankingMode.RANDOM:
        draws = np.random.default_rng(seed).random(len(candidates))
        keys = [float(x) for x in draws]
    else:
        s_ret = effective_s_ret(candidates, s_ret_policy) if "s_ret" in mode.factors else [None] * len(candidates)
        keys = [round(log_composite_score(c, mode, s), KEY_DECIMALS) for c, s in zip(candidates, s_ret)]
    order = sorted(range(len(candidates)), key=lambda i: (-keys[i], candidates[i].position))
    return [RankedCandidate(candidates[i], keys[i]) for i in order]


def select_final(
    candidates: Sequence[AnswerCandidate],
    mode: RankingMode | str = RankingMode.RET_REL_ANS,
    seed: int = 0,
    s_ret_policy: SRetPolicy | str = SRetPolicy.AUTO,
) -> tuple[str, list[AnswerCandidate]]:
    """Return the winning answer text and the full candidate ranking."""
    if not candidates:
        raise ValueError("select_final needs at least one candidate")
    ranked = [r.candidate for r in rank_candidates(candidates, mode, seed, s_ret_policy)]
    return ranked[0].answer_text, ranked
