"""Generation regimes: teacher-proposed/student-approved, its mirror, and solo.

The main regime ("rsd") decodes one token per step as follows: the teacher's
raw distribution is suppression-filtered and tempered, a candidate is
sampled from it, and the student's raw probability of that candidate is
compared against the threshold ``p_th``. A candidate strictly below the
threshold is rejected and the token is resampled from the student's own
tempered distribution (a *fallback*); otherwise the teacher's proposal is
accepted. Generation stops at the student's EOS token or after
``max_tokens`` emitted tokens, and every step is recorded in full.

The mirror regime ("skd") swaps the roles: the student proposes, the teacher
approves by threshold, and rejected proposals are resampled from the
teacher's suppressed, tempered distribution.

Randomness schedule: each step owns a :class:`~rsdkit.seeding.StepStream`
keyed on ``(seed, step index)``; the proposal consumes draw 0 and a fallback
resample consumes draw 1. Acceptance or rejection therefore never shifts the
randomness of later steps, which is what makes the ``p_th = 0`` regimes
degenerate bit-exactly into the corresponding solo decodes.

Thresholding uses the *raw* (temperature-1) probability by default so the
acceptance rule measures the same quantity as the sub-threshold diagnostics;
``threshold_uses_raw=False`` switches the check to the tempered value (the
recorded probabilities stay raw either way).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

from .models import Distribution, GenerationContext, LanguageModel, apply_temperature, sample
from .seeding import StepStream
from .vocab import DualContext, VocabularyAlignmentError, VocabularyMap, suppress

REGIMES = ("rsd", "skd", "solo-teacher", "solo-student")
TERMINATIONS = ("eos", "length-budget")


@dataclass(frozen=True)
class GenerationConfig:
    """Knobs for one decode: threshold, temperature, budgets, seed, regime."""

    p_th: float
    max_tokens: int
    temperature: float = 0.7
    context_limit: int = 8192
    seed: int = 0
    regime: str = "rsd"
    threshold_uses_raw: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_th <= 1.0:
            raise ValueError(f"p_th must lie in [0, 1], got {self.p_th}")
        if self.temperature <= 0.0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.max_tokens <= 0:
            raise ValueError(f"max_tokens must be positive, got {self.max_tokens}")
        if self.context_limit <= 0:
            raise ValueError(f"context_limit must be positive, got {self.context_limit}")
        if self.max_tokens > self.context_limit:
            raise ValueError(
                f"max_tokens {self.max_tokens} exceeds context_limit {self.context_limit}"
            )
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}, expected one of {REGIMES}")

    def with_seed(self, seed: int) -> "GenerationConfig":
        return replace(self, seed=seed)

    def to_json_dict(self) -> dict:
        return {
            "p_th": self.p_th,
            "max_tokens": self.max_tokens,
            "temperature": self.temperature,
            "context_limit": self.context_limit,
            "seed": self.seed,
            "regime": self.regime,
            "threshold_uses_raw": self.threshold_uses_raw,
        }

    @classmethod
    def from_json_dict(cls, payload: dict) -> "GenerationConfig":
        return cls(**{k: payload[k] for k in cls.__dataclass_fields__ if k in payload})


@dataclass(slots=True)
class TokenRecord:
    """One emitted token with its full decision context.

    ``proposer`` names the side whose sample was emitted; ``accepted`` means
    the proposing side's candidate survived the threshold check (always
    False in solo regimes, where no approval happens). ``p_teacher`` and
    ``p_student`` are raw temperature-1 probabilities of the emitted token;
    ``p_teacher`` is None when the token is not teacher-scoreable (student
    native) and ``p_student`` is None on unscored solo traces.
    ``surprisal_student`` is ``-ln(p_student)`` in nats.
    """

    token: int
    proposer: str
    accepted: bool
    fallback: bool
    p_teacher: float | None
    p_student: float | None
    surprisal_student: float | None

    def to_json_dict(self) -> dict:
        return {
            "token": self.token,
            "proposer": self.proposer,
            "accepted": self.accepted,
            "fallback": self.fallback,
            "p_teacher": self.p_teacher,
            "p_student": self.p_student,
            "surprisal_student": self.surprisal_student,
        }

    @classmethod
    def from_json_dict(cls, payload: dict) -> "TokenRecord":
        return cls(
            token=int(payload["token"]),
            proposer=str(payload["proposer"]),
            accepted=bool(payload["accepted"]),
            fallback=bool(payload["fallback"]),
            p_teacher=payload.get("p_teacher"),
            p_student=payload.get("p_student"),
            surprisal_student=payload.get("surprisal_student"),
        )


@dataclass
class Trace:
    """Prompt, per-token records, config, and how generation ended."""

    prompt: tuple[int, ...]
    records: list[TokenRecord]
    config: GenerationConfig
    terminated_by: str

    def tokens(self) -> list[int]:
        """Emitted token ids, prompt excluded."""
        return [r.token for r in self.records]

    def __len__(self) -> int:
        return len(self.records)

    @property
    def fallback_count(self) -> int:
        return sum(1 for r in self.records if r.fallback)

    @property
    def fallback_rate(self) -> float:
        return self.fallback_count / len(self.records) if self.records else 0.0

    def to_json_dict(self) -> dict:
        return {
            "prompt": list(self.prompt),
            "records": [r.to_json_dict() for r in self.records],
            "config": self.config.to_json_dict(),
            "terminated_by": self.terminated_by,
        }

    def to_json_line(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json_dict(cls, payload: dict) -> "Trace":
        terminated_by = str(payload["terminated_by"])
        if terminated_by not in TERMINATIONS:
            raise ValueError(f"unknown termination {terminated_by!r}")
        return cls(
            prompt=tuple(int(t) for t in payload["prompt"]),
            records=[TokenRecord.from_json_dict(r) for r in payload["records"]],
            config=GenerationConfig.from_json_dict(payload["config"]),
            terminated_by=terminated_by,
        )


def write_traces_jsonl(traces: Iterable[Trace], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for trace in traces:
            fh.write(trace.to_json_line() + "\n")


def read_traces_jsonl(path: str | Path) -> list[Trace]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(Trace.from_json_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}: malformed trace on line {i}: {exc}") from exc
    return out


def _surprisal(p: float) -> float:
    return math.inf if p <= 0.0 else -math.log(p)


class _Tempered:
    """Per-decode memo of suppressed/tempered distributions.

    Table backends return the same row objects step after step; keying on
    object identity (the dict holds the key alive, so ids cannot be reused)
    turns the per-step transforms into lookups.
    """

    __slots__ = ("_temperature", "_vmap", "_plain", "_suppressed")

    def __init__(self, temperature: float, vmap: VocabularyMap | None) -> None:
        self._temperature = temperature
        self._vmap = vmap
        self._plain: dict[int, tuple[Distribution, Distribution]] = {}
        self._suppressed: dict[int, tuple[Distribution, Distribution]] = {}

    def plain(self, dist: Distribution) -> Distribution:
        hit = self._plain.get(id(dist))
        if hit is None or hit[0] is not dist:
            hit = (dist, apply_temperature(dist, self._temperature))
            self._plain[id(dist)] = hit
        return hit[1]

    def suppressed(self, dist: Distribution) -> Distribution:
        hit = self._suppressed.get(id(dist))
        if hit is None or hit[0] is not dist:
            assert self._vmap is not None
            hit = (dist, apply_temperature(suppress(dist, self._vmap), self._temperature))
            self._suppressed[id(dist)] = hit
        return hit[1]


def _score(dist: Distribution, token: int) -> float:
    return dist[token] if 0 <= token < dist.vocab_size else 0.0


def rsd_decode(
    teacher: LanguageModel,
    student: LanguageModel,
    prompt: Sequence[int],
    cfg: GenerationConfig,
    vmap: VocabularyMap | None = None,
) -> Trace:
    """Teacher proposes each token; the student accepts or falls back.

    The teacher proposal is sampled from its suppressed, tempered
    distribution; the acceptance check compares the student's probability of
    the proposal against ``cfg.p_th`` (strict less-than rejects). Fallback
    tokens are sampled from the student's tempered distribution over its
    full vocabulary and are not re-checked against the threshold.
    """
    if cfg.regime != "rsd":
        raise ValueError(f"rsd_decode requires regime 'rsd', got {cfg.regime!r}")
    vmap = vmap or VocabularyMap.identity(student.vocab_size)
    _check_prompt(prompt, student)
    ctx = DualContext.from_prompt(prompt, vmap, cfg.context_limit)
    memo = _Tempered(cfg.temperature, vmap)
    records: list[TokenRecord] = []
    terminated = "length-budget"

    for step in range(cfg.max_tokens):
        stream = StepStream(cfg.seed, step)
        p_t_raw = teacher.next_distribution(ctx.teacher.tokens)
        proposal = sample(memo.suppressed(p_t_raw), stream)
        if proposal >= student.vocab_size or vmap.is_student_only(proposal):
            raise VocabularyAlignmentError(
                f"suppression failed to filter token {proposal}, unscoreable by the student"
            )
        p_s_raw = student.next_distribution(ctx.student.tokens)
        decision_p = p_s_raw[proposal] if cfg.threshold_uses_raw else memo.plain(p_s_raw)[proposal]

        if decision_p < cfg.p_th:
            token = sample(memo.plain(p_s_raw), stream)
            proposer, accepted, fallback = "student", False, True
        else:
            token = proposal
            proposer, accepted, fallback = "teacher", True, False

        p_student = p_s_raw[token]
        p_teacher = None if vmap.is_student_only(token) else _p_or_none(p_t_raw, token)
        records.append(
            TokenRecord(
                token=token,
                proposer=proposer,
                accepted=accepted,
                fallback=fallback,
                p_teacher=p_teacher,
                p_student=p_student,
                surprisal_student=_surprisal(p_student),
            )
        )
        ctx.append(token, vmap)
        if token == student.eos_token:
            terminated = "eos"
            break

    return Trace(prompt=tuple(prompt), records=records, config=cfg, terminated_by=terminated)


def skd_decode(
    teacher: LanguageModel,
    student: LanguageModel,
    prompt: Sequence[int],
    cfg: GenerationConfig,
    vmap: VocabularyMap | None = None,
) -> Trace:
    """Mirror regime: the student proposes, the teacher approves by threshold.

    Student-native proposals are unscoreable by the teacher and always fall
    back. Teacher resamples come from its suppressed, tempered distribution,
    so every resampled token is student-scoreable.
    """
    if cfg.regime != "skd":
        raise ValueError(f"skd_decode requires regime 'skd', got {cfg.regime!r}")
    vmap = vmap or VocabularyMap.identity(student.vocab_size)
    _check_prompt(prompt, student)
    ctx = DualContext.from_prompt(prompt, vmap, cfg.context_limit)
    memo = _Tempered(cfg.temperature, vmap)
    records: list[TokenRecord] = []
    terminated = "length-budget"

    for step in range(cfg.max_tokens):
        stream = StepStream(cfg.seed, step)
        p_s_raw = student.next_distribution(ctx.student.tokens)
        proposal = sample(memo.plain(p_s_raw), stream)
        p_t_raw = teacher.next_distribution(ctx.teacher.tokens)
        if vmap.is_student_only(proposal):
            decision_p = 0.0
        elif cfg.threshold_uses_raw:
            decision_p = _score(p_t_raw, proposal)
        else:
            decision_p = _score(memo.plain(p_t_raw), proposal)

        if decision_p < cfg.p_th:
            token = sample(memo.suppressed(p_t_raw), stream)
            if token >= student.vocab_size or vmap.is_student_only(token):
                raise VocabularyAlignmentError(
                    f"suppression failed to filter token {token}, unscoreable by the student"
                )
            proposer, accepted, fallback = "teacher", False, True
        else:
            token = proposal
            proposer, accepted, fallback = "student", True, False

        p_student = p_s_raw[token]
        p_teacher = None if vmap.is_student_only(token) else _p_or_none(p_t_raw, token)
        records.append(
            TokenRecord(
                token=token,
                proposer=proposer,
                accepted=accepted,
                fallback=fallback,
                p_teacher=p_teacher,
                p_student=p_student,
                surprisal_student=_surprisal(p_student),
            )
        )
        ctx.append(token, vmap)
        if token == student.eos_token:
            terminated = "eos"
            break

    return Trace(prompt=tuple(prompt), records=records, config=cfg, terminated_by=terminated)


def solo_decode(
    model: LanguageModel,
    prompt: Sequence[int],
    cfg: GenerationConfig,
    scorer: LanguageModel | None = None,
) -> Trace:
    """Single-model tempered sampling, terminating on the model's own EOS.

    With a ``scorer`` (e.g. a student scoring teacher-generated traces) the
    student-side probability and surprisal fields are filled by forced
    scoring along the way; tokens outside the scorer vocabulary record
    probability 0 (infinite surprisal) rather than aborting the trace.
    """
    if cfg.regime not in ("solo-teacher", "solo-student"):
        raise ValueError(f"solo_decode requires a solo regime, got {cfg.regime!r}")
    _check_prompt(prompt, model)
    ctx = GenerationContext(list(prompt), cfg.context_limit)
    memo = _Tempered(cfg.temperature, None)
    records: list[TokenRecord] = []
    terminated = "length-budget"
    proposer = "teacher" if cfg.regime == "solo-teacher" else "student"

    for step in range(cfg.max_tokens):
        stream = StepStream(cfg.seed, step)
        p_raw = model.next_distribution(ctx.tokens)
        token = sample(memo.plain(p_raw), stream)

        own_p = p_raw[token]
        if scorer is not None:
            p_student = _score(scorer.next_distribution(ctx.tokens), token)
        elif cfg.regime == "solo-student":
            p_student = own_p
        else:
            p_student = None
        p_teacher = own_p if cfg.regime == "solo-teacher" else None

        records.append(
            TokenRecord(
                token=token,
                proposer=proposer,
                accepted=False,
                fallback=False,
                p_teacher=p_teacher,
                p_student=p_student,
                surprisal_student=None if p_student is None else _surprisal(p_student),
            )
        )
        ctx.append(token)
        if token == model.eos_token:
            terminated = "eos"
            break

    return Trace(prompt=tuple(prompt), records=records, config=cfg, terminated_by=terminated)


def decode(
    teacher: LanguageModel | None,
    student: LanguageModel | None,
    prompt: Sequence[int],
    cfg: GenerationConfig,
    vmap: VocabularyMap | None = None,
) -> Trace:
    """Dispatch to the decoder named by ``cfg.regime``."""
    if cfg.regime in ("rsd", "skd") and (teacher is None or student is None):
        raise ValueError(f"regime {cfg.regime!r} needs both a teacher and a student")
    if cfg.regime == "rsd":
        return rsd_decode(teacher, student, prompt, cfg, vmap)
    if cfg.regime == "skd":
        return skd_decode(teacher, student, prompt, cfg, vmap)
    if cfg.regime == "solo-teacher":
        if teacher is None:
            raise ValueError("regime 'solo-teacher' needs a teacher")
        return solo_decode(teacher, prompt, cfg, scorer=student)
    if student is None:
        raise ValueError("regime 'solo-student' needs a student")
    return solo_decode(student, prompt, cfg, scorer=None)


def _check_prompt(prompt: Sequence[int], model: LanguageModel) -> None:
    for t in prompt:
        if not 0 <= t < model.vocab_size:
            raise ValueError(f"prompt token {t} outside vocabulary of size {model.vocab_size}")


def _p_or_none(dist: Distribution, token: int) -> float | None:
    return dist[token] if 0 <= token < dist.vocab_size else None
