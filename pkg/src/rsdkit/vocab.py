"""Vocabulary alignment between a teacher and a near-identical student.

Two mechanisms keep every teacher proposal scoreable by the student:

* **Suppression** — teacher-only vocabulary entries are zeroed out of the
  teacher's proposal distribution (and the survivors renormalized), so the
  teacher can never propose a token the student cannot score.
* **Expansion** — tokens that exist only in the student vocabulary (special
  markers such as thinking delimiters) are declared as a mapping to an
  equivalent sequence of teacher tokens. Generation keeps two contexts in
  lockstep: the student context holds the native token, the teacher context
  holds its expansion, and both always detokenize to the same text.

Expansion tables are configuration data supplied per model pair; nothing
here inspects tokenizer internals.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .models import Distribution, EmptySupportError, GenerationContext


class VocabularyAlignmentError(ValueError):
    """A vocabulary map is internally inconsistent or misused."""


@dataclass(frozen=True)
class VocabularyMap:
    """Alignment table between a teacher and a student vocabulary.

    ``shared_size`` is the boundary of the numerically shared id range;
    expansion keys inside that range are carved out as student-only (their
    teacher-side homonyms are suppressed). Immutable and freely shareable
    across workers.
    """

    shared_size: int
    suppressed: frozenset[int] = field(default_factory=frozenset)
    expansions: Mapping[int, tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.shared_size < 2:
            raise VocabularyAlignmentError(f"shared_size must be >= 2, got {self.shared_size}")
        object.__setattr__(self, "suppressed", frozenset(int(t) for t in self.suppressed))
        expansions = {int(k): tuple(int(t) for t in v) for k, v in self.expansions.items()}
        object.__setattr__(self, "expansions", expansions)
        value_ids = {t for seq in expansions.values() for t in seq}
        for key, seq in expansions.items():
            if key < 0:
                raise VocabularyAlignmentError(f"expansion key {key} is not a token id")
            if not seq:
                raise VocabularyAlignmentError(f"expansion for {key} must be non-empty")
            if key in value_ids:
                raise VocabularyAlignmentError(
                    f"id {key} is both an expansion key and an expansion value; key spaces overlap"
                )
            for t in seq:
                if t < 0:
                    raise VocabularyAlignmentError(f"expansion value {t} is not a token id")
                if t in self.suppressed:
                    raise VocabularyAlignmentError(
                        f"expansion for {key} references suppressed teacher id {t}"
                    )
        for t in self.suppressed:
            if t < self.shared_size and t not in expansions:
                raise VocabularyAlignmentError(
                    f"suppressed id {t} lies in the shared range and is not an expansion key"
                )

    @classmethod
    def identity(cls, vocab_size: int) -> "VocabularyMap":
        """Map for a teacher/student pair sharing one vocabulary."""
        return cls(shared_size=vocab_size)

    def is_student_only(self, token: int) -> bool:
        """True for tokens outside the shared range or carved out of it."""
        return token >= self.shared_size or token in self.expansions

    def expand(self, token: int) -> tuple[int, ...]:
        """Teacher-token sequence for a student-only token."""
        try:
            return self.expansions[token]
        except KeyError:
            raise VocabularyAlignmentError(f"token {token} has no declared expansion") from None

    def to_json_dict(self) -> dict:
        return {
            "shared_size": self.shared_size,
            "suppressed": sorted(self.suppressed),
            "expansions": {str(k): list(v) for k, v in sorted(self.expansions.items())},
        }

    @classmethod
    def from_json_dict(cls, payload: Mapping) -> "VocabularyMap":
        try:
            return cls(
                shared_size=int(payload["shared_size"]),
                suppressed=frozenset(int(t) for t in payload.get("suppressed", ())),
                expansions={int(k): tuple(v) for k, v in payload.get("expansions", {}).items()},
            )
        except (KeyError, TypeError) as exc:
            raise VocabularyAlignmentError(f"malformed vocabulary map document: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "VocabularyMap":
        return cls.from_json_dict(json.loads(Path(path).read_text()))


def build_vocab_map(
    teacher_vocab_size: int,
    student_vocab_size: int,
    expansions: Mapping[int, Sequence[int]] | None = None,
) -> VocabularyMap:
    """Derive the alignment map from the two vocabulary sizes.

    Teacher ids beyond the shared range are suppressed, as are teacher-side
    homonyms of declared student-only ids; teacher ids referenced by an
    expansion are exempted from suppression since teacher contexts need them.
    """
    if teacher_vocab_size < 2 or student_vocab_size < 2:
        raise VocabularyAlignmentError("both vocabularies must have size >= 2")
    expansions = {int(k): tuple(int(t) for t in v) for k, v in (expansions or {}).items()}
    shared = min(teacher_vocab_size, student_vocab_size)
    value_ids = {t for seq in expansions.values() for t in seq}
    for key, seq in expansions.items():
        if not 0 <= key < student_vocab_size:
            raise VocabularyAlignmentError(f"expansion key {key} outside student vocabulary")
        for t in seq:
            if not 0 <= t < teacher_vocab_size:
                raise VocabularyAlignmentError(f"expansion value {t} outside teacher vocabulary")
    suppressed = set(range(shared, teacher_vocab_size))
    suppressed |= {k for k in expansions if k < teacher_vocab_size}
    suppressed -= value_ids
    return VocabularyMap(shared_size=shared, suppressed=frozenset(suppressed), expansions=expansions)


def suppress(dist: Distribution, vmap: VocabularyMap) -> Distribution:
    """Zero suppressed entries and renormalize the survivors.

    Returns the input object unchanged when no suppressed entry carries
    mass, which also makes the operation exactly idempotent.
    """
    if not vmap.suppressed:
        return dist
    ids = [t for t in vmap.suppressed if t < dist.vocab_size]
    if not ids:
        return dist
    removed = float(dist.probs[ids].sum())
    if removed == 0.0:
        return dist
    out = dist.probs.copy()
    out[ids] = 0.0
    total = float(out.sum())
    if total <= 0.0:
        raise EmptySupportError("suppression removed all probability mass")
    return Distribution(out / total, validate=False)


@dataclass
class DualContext:
    """Teacher and student token contexts kept semantically in lockstep.

    Single-owner: one decode loop mutates it, nothing else. The teacher
    context is always at least as long as the student context because
    expansions only lengthen.
    """

    student: GenerationContext
    teacher: GenerationContext

    @classmethod
    def empty(cls, max_length: int) -> "DualContext":
        return cls(
            student=GenerationContext([], max_length),
            teacher=GenerationContext([], max_length),
        )

    @classmethod
    def from_prompt(
        cls, prompt: Sequence[int], vmap: VocabularyMap, max_length: int
    ) -> "DualContext":
        ctx = cls.empty(max_length)
        for token in prompt:
            ctx.append(token, vmap)
        return ctx

    def append(self, token: int, vmap: VocabularyMap, side: str | None = None) -> None:
        """Append one student-vocabulary token to both contexts.

        ``side`` may name the routing explicitly ("shared" or
        "student-native"); by default it is inferred from the map. Shared
        tokens go to both contexts verbatim; student-native tokens go to the
        student context as-is and to the teacher context as their expansion.
        """
        student_native = vmap.is_student_only(token)
        if side is not None:
            if side not in ("shared", "student-native"):
                raise ValueError(f"unknown side {side!r}")
            if side == "student-native" and not student_native:
                raise VocabularyAlignmentError(f"token {token} has no declared expansion")
            if side == "shared" and student_native:
                raise VocabularyAlignmentError(f"token {token} is student-only, not shared")
        self.student.append(token)
        if student_native:
            self.teacher.extend(vmap.expand(token))
        else:
            self.teacher.append(token)


def replay_student_context(student_tokens: Sequence[int], vmap: VocabularyMap) -> list[int]:
    """Recompute the teacher context implied by a student token sequence.

    Exists as the independent check for dual-context bookkeeping: after any
    append sequence, this replay must reproduce the teacher context exactly.
    """
    out: list[int] = []
    for token in student_tokens:
        if vmap.is_student_only(token):
            out.extend(vmap.expand(token))
        else:
            out.append(token)
    return out
