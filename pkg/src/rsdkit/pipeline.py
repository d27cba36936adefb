"""End-to-end distillation dataset generation.

Per problem: decode up to ``attempts`` candidate traces with seeds derived
from ``(base_seed, problem id, attempt index)``, verify each against the
reference answer, and keep the first correct one. Solved problems contribute
their full trace to the dataset; unsolved problems are salvaged as a short
prefix (first 128 generated tokens by default) so no training instance is
wasted.

Problems are independent work items; a worker pool may run them
concurrently, and results are always reduced in problem order, so parallel
runs produce byte-identical datasets to serial ones.
"""

from __future__ import annotations

import json
import math
import re
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .decoding import GenerationConfig, TokenRecord, Trace
from .models import LanguageModel
from .seeding import derive_seed

VERDICTS = ("correct", "incorrect", "unverifiable")
RECORD_KINDS = ("full-trace", "upft-prefix")
PREFIX_SOURCES = ("first", "longest", "lowest-perplexity")
DATASET_SCHEMA = "rsdkit-dataset-v1"
DEFAULT_PREFIX_LENGTH = 128
DEFAULT_ATTEMPTS = 16

Detokenizer = Callable[[Sequence[int]], str]
Generator = Callable[[Sequence[int], int], Trace]


class DatasetFormatError(ValueError):
    """A dataset file is malformed, truncated, or inconsistent."""


@dataclass(frozen=True)
class Problem:
    """One question-answer pair; the prompt is already tokenized."""

    id: str
    prompt_tokens: tuple[int, ...]
    answer: str
    prompt_text: str | None = None

    def __post_init__(self) -> None:
        if not self.prompt_tokens:
            raise ValueError(f"problem {self.id!r} has an empty prompt")
        object.__setattr__(self, "prompt_tokens", tuple(int(t) for t in self.prompt_tokens))


@dataclass
class AttemptOutcome:
    """One rejection-sampling attempt: its trace (if any) and the verdict."""

    problem_id: str
    attempt_index: int
    trace: Trace | None
    verdict: str
    error: str | None = None


@dataclass
class RejectionResult:
    """All attempts for one problem; ``solved`` is the first correct one."""

    problem_id: str
    solved: AttemptOutcome | None
    attempts: list[AttemptOutcome]


@dataclass
class DatasetRecord:
    """One training example: a full verified trace or a salvage prefix."""

    problem_id: str
    kind: str
    verdict: str
    tokens: tuple[int, ...]
    source_trace_ref: str
    regime: str
    records: list[TokenRecord]
    stats: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "problem_id": self.problem_id,
            "kind": self.kind,
            "verdict": self.verdict,
            "tokens": list(self.tokens),
            "source_trace_ref": self.source_trace_ref,
            "regime": self.regime,
            "records": [r.to_json_dict() for r in self.records],
            "stats": dict(self.stats),
        }

    @classmethod
    def from_json_dict(cls, payload: Mapping) -> "DatasetRecord":
        kind = str(payload["kind"])
        if kind not in RECORD_KINDS:
            raise DatasetFormatError(f"unknown record kind {kind!r}")
        return cls(
            problem_id=str(payload["problem_id"]),
            kind=kind,
            verdict=str(payload["verdict"]),
            tokens=tuple(int(t) for t in payload["tokens"]),
            source_trace_ref=str(payload["source_trace_ref"]),
            regime=str(payload["regime"]),
            records=[TokenRecord.from_json_dict(r) for r in payload["records"]],
            stats=dict(payload.get("stats", {})),
        )


_BOXED_MARKER = "\\boxed{"


def extract_boxed(text: str) -> str | None:
    """Contents of the last ``\\boxed{...}`` span, brace-balanced."""
    start = text.rfind(_BOXED_MARKER)
    if start < 0:
        return None
    i = start + len(_BOXED_MARKER)
    depth = 1
    out = []
    while i < len(text):
        c = text[i]
        if c == "{":
            depth += 1
        elif c == "}":
            depth -= 1
            if depth == 0:
                return "".join(out)
        out.append(c)
        i += 1
    return None  # unbalanced


@dataclass(frozen=True)
class Verifier:
    """Deterministic answer checker: same trace text, same verdict.

    Modes: ``exact-match`` compares normalized trace text against the
    reference; ``boxed-answer`` compares the last boxed span; and
    ``external-command`` delegates to a user script fed
    ``{"text": ..., "reference": ...}`` on stdin (exit 0 correct, 1
    incorrect, anything else unverifiable).
    """

    mode: str = "boxed-answer"
    normalization: tuple[str, ...] = ("strip", "casefold", "collapse-whitespace")
    command: tuple[str, ...] | None = None
    timeout_s: float = 30.0

    def __post_init__(self) -> None:
        if self.mode not in ("exact-match", "boxed-answer", "external-command"):
            raise ValueError(f"unknown verifier mode {self.mode!r}")
        if self.mode == "external-command" and not self.command:
            raise ValueError("external-command verifier needs a command")
        object.__setattr__(self, "normalization", tuple(self.normalization))

    def normalize(self, text: str) -> str:
        if "strip" in self.normalization:
            text = text.strip()
        if "casefold" in self.normalization:
            text = text.casefold()
        if "collapse-whitespace" in self.normalization:
            text = re.sub(r"\s+", " ", text)
        return text

    def judge(self, text: str, reference: str) -> str:
        if self.mode == "exact-match":
            return "correct" if self.normalize(text) == self.normalize(reference) else "incorrect"
        if self.mode == "boxed-answer":
            boxed = extract_boxed(text)
            if boxed is None:
                return "incorrect"
            return "correct" if self.normalize(boxed) == self.normalize(reference) else "incorrect"
        assert self.command is not None
        payload = json.dumps({"text": text, "reference": reference})
        try:
            proc = subprocess.run(
                list(self.command),
                input=payload.encode("utf-8"),
                capture_output=True,
                timeout=self.timeout_s,
            )
        except (OSError, subprocess.TimeoutExpired):
            return "unverifiable"
        if proc.returncode == 0:
            return "correct"
        if proc.returncode == 1:
            return "incorrect"
        return "unverifiable"


def rejection_sample(
    problem: Problem,
    generator: Generator,
    verifier: Verifier,
    attempts: int,
    base_seed: int,
    detokenize: Detokenizer,
) -> RejectionResult:
    """Decode and verify up to ``attempts`` candidates, stopping at the
    first correct one. Attempt k uses the seed derived from
    ``(base_seed, problem.id, k)``, so any attempt can be replayed in
    isolation. A generator failure records an unverifiable outcome and the
    run continues.
    """
    if attempts < 1:
        raise ValueError(f"attempts must be >= 1, got {attempts}")
    outcomes: list[AttemptOutcome] = []
    for k in range(attempts):
        seed = derive_seed(base_seed, problem.id, k)
        try:
            trace = generator(problem.prompt_tokens, seed)
            text = detokenize(trace.tokens())
        except Exception as exc:  # recorded, not fatal
            outcomes.append(
                AttemptOutcome(
                    problem_id=problem.id,
                    attempt_index=k,
                    trace=None,
                    verdict="unverifiable",
                    error=f"{type(exc).__name__}: {exc}",
                )
            )
            continue
        verdict = verifier.judge(text, problem.answer)
        outcome = AttemptOutcome(problem.id, k, trace, verdict)
        outcomes.append(outcome)
        if verdict == "correct":
            return RejectionResult(problem.id, solved=outcome, attempts=outcomes)
    return RejectionResult(problem.id, solved=None, attempts=outcomes)


def _record_stats(records: Sequence[TokenRecord]) -> dict:
    surprisals = [r.surprisal_student for r in records]
    if records and all(s is not None for s in surprisals):
        ppl = (
            math.inf
            if any(math.isinf(s) for s in surprisals)
            else math.exp(sum(surprisals) / len(surprisals))
        )
    else:
        ppl = None
    return {
        "token_count": len(records),
        "fallback_count": sum(1 for r in records if r.fallback),
        "perplexity": ppl,
    }


def full_trace_record(problem_id: str, trace: Trace, source_trace_ref: str) -> DatasetRecord:
    return DatasetRecord(
        problem_id=problem_id,
        kind="full-trace",
        verdict="correct",
        tokens=tuple(trace.tokens()),
        source_trace_ref=source_trace_ref,
        regime=trace.config.regime,
        records=list(trace.records),
        stats=_record_stats(trace.records),
    )


def upft_prefix(
    trace: Trace,
    prefix_length: int = DEFAULT_PREFIX_LENGTH,
    *,
    problem_id: str,
    source_trace_ref: str,
    verdict: str = "incorrect",
) -> DatasetRecord:
    """Salvage record holding the first ``prefix_length`` generated tokens.

    Counts generated tokens only (the prompt is excluded); shorter traces
    keep everything they have.
    """
    if prefix_length < 1:
        raise ValueError(f"prefix_length must be >= 1, got {prefix_length}")
    if not trace.records:
        raise ValueError("cannot take a prefix of an empty trace")
    clipped = list(trace.records[:prefix_length])
    return DatasetRecord(
        problem_id=problem_id,
        kind="upft-prefix",
        verdict=verdict,
        tokens=tuple(r.token for r in clipped),
        source_trace_ref=source_trace_ref,
        regime=trace.config.regime,
        records=clipped,
        stats=_record_stats(clipped),
    )


def _pick_prefix_source(result: RejectionResult, policy: str) -> AttemptOutcome:
    candidates = [a for a in result.attempts if a.trace is not None and a.trace.records]
    if not candidates:
        raise ValueError(
            f"problem {result.problem_id!r}: no attempt produced a trace to salvage"
        )
    if policy == "first":
        return candidates[0]
    if policy == "longest":
        return max(candidates, key=lambda a: len(a.trace.records))
    if policy == "lowest-perplexity":
        def key(a: AttemptOutcome) -> float:
            ppl = _record_stats(a.trace.records)["perplexity"]
            return math.inf if ppl is None else ppl

        return min(candidates, key=key)
    raise ValueError(f"unknown prefix source policy {policy!r}")


def assemble_dataset(
    results: Sequence[RejectionResult],
    prefix_length: int = DEFAULT_PREFIX_LENGTH,
    prefix_source: str = "first",
) -> list[DatasetRecord]:
    """One record per problem, in input order: full trace if solved, else a
    prefix drawn from the attempt named by ``prefix_source``."""
    records: list[DatasetRecord] = []
    for result in results:
        if result.solved is not None:
            assert result.solved.trace is not None
            ref = f"{result.problem_id}#attempt-{result.solved.attempt_index}"
            records.append(full_trace_record(result.problem_id, result.solved.trace, ref))
        else:
            source = _pick_prefix_source(result, prefix_source)
            ref = f"{result.problem_id}#attempt-{source.attempt_index}"
            records.append(
                upft_prefix(
                    source.trace,
                    prefix_length,
                    problem_id=result.problem_id,
                    source_trace_ref=ref,
                    verdict=source.verdict,
                )
            )
    return records


def export_dataset(records: Sequence[DatasetRecord], path: str | Path) -> None:
    """Newline-delimited JSON, one record per line, closed by a manifest
    line carrying the record count (the partial-write detector)."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json_dict(), sort_keys=True, separators=(",", ":")) + "\n")
        manifest = {"kind": "manifest", "schema": DATASET_SCHEMA, "record_count": len(records)}
        fh.write(json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n")


def import_dataset(path: str | Path) -> list[DatasetRecord]:
    """Inverse of :func:`export_dataset`; re-exporting the result reproduces
    the file byte for byte. Malformed lines are reported by number; a
    missing or inconsistent manifest means a partial write."""
    records: list[DatasetRecord] = []
    manifest: dict | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            if manifest is not None:
                raise DatasetFormatError(f"{path}: line {i}: content after manifest line")
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{path}: line {i}: invalid JSON: {exc}") from exc
            if isinstance(payload, dict) and payload.get("kind") == "manifest":
                manifest = payload
                continue
            try:
                records.append(DatasetRecord.from_json_dict(payload))
            except (DatasetFormatError, KeyError, TypeError, ValueError) as exc:
                raise DatasetFormatError(f"{path}: line {i}: bad record: {exc}") from exc
    if manifest is None:
        raise DatasetFormatError(f"{path}: no manifest line; file is truncated or partial")
    if manifest.get("record_count") != len(records):
        raise DatasetFormatError(
            f"{path}: manifest declares {manifest.get('record_count')} records, found {len(records)}"
        )
    return records


def score_external_traces(
    entries: Iterable[Mapping], student: LanguageModel
) -> list[Trace]:
    """Force-score externally generated token sequences under the student.

    Each entry carries ``prompt_tokens`` and ``tokens`` (both in the student
    vocabulary; out-of-vocabulary ids raise). The result is a solo-shaped
    trace with per-token student probabilities filled, ready for any of the
    trace metrics.
    """
    out: list[Trace] = []
    for n, entry in enumerate(entries):
        try:
            prompt = [int(t) for t in entry["prompt_tokens"]]
            tokens = [int(t) for t in entry["tokens"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"external trace {n}: {exc}") from exc
        for t in prompt + tokens:
            if not 0 <= t < student.vocab_size:
                raise ValueError(f"external trace {n}: token {t} out of vocabulary")
        if not tokens:
            raise DatasetFormatError(f"external trace {n}: empty token sequence")
        ctx = list(prompt)
        records = []
        for token in tokens:
            p = student.next_distribution(ctx)[token]
            records.append(
                TokenRecord(
                    token=token,
                    proposer="teacher",
                    accepted=False,
                    fallback=False,
                    p_teacher=None,
                    p_student=p,
                    surprisal_student=math.inf if p <= 0.0 else -math.log(p),
                )
            )
            ctx.append(token)
        cfg = GenerationConfig(
            p_th=0.0,
            max_tokens=len(tokens),
            temperature=1.0,
            context_limit=max(len(ctx), len(tokens)),
            seed=0,
            regime="solo-teacher",
        )
        out.append(
            Trace(
                prompt=tuple(prompt),
                records=records,
                config=cfg,
                terminated_by="eos" if tokens[-1] == student.eos_token else "length-budget",
            )
        )
    return out


def run_generation(
    problems: Sequence[Problem],
    generator: Generator,
    verifier: Verifier,
    attempts: int,
    base_seed: int,
    detokenize: Detokenizer,
    workers: int = 1,
    progress: Callable[[RejectionResult], None] | None = None,
) -> list[RejectionResult]:
    """Rejection-sample every problem, reducing results in problem order.

    ``workers=1`` runs fully serial; higher values fan problems out to a
    thread pool. Either way the returned list order (and any downstream
    dataset bytes) is identical.
    """
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")

    def one(problem: Problem) -> RejectionResult:
        return rejection_sample(problem, generator, verifier, attempts, base_seed, detokenize)

    if workers == 1:
        results = []
        for problem in problems:
            result = one(problem)
            if progress is not None:
                progress(result)
            results.append(result)
        return results

    results = []
    with ThreadPoolExecutor(max_workers=workers) as pool:
        # pool.map yields in submission order, so progress streams in
        # problem order even when later problems finish first
        for result in pool.map(one, problems):
            if progress is not None:
                progress(result)
            results.append(result)
    return results
