"""Run configuration: one JSON document validated before any work starts.

Top-level keys (defaults mirror the headline generation setup):

``generation``
    ``regime`` (rsd), ``p_th`` (0.01), ``temperature`` (0.7),
    ``max_tokens`` (required), ``context_limit`` (8192), ``seed`` (0),
    ``threshold_uses_raw`` (true).
``teacher`` / ``student``
    Model specs (see :func:`build_model`): ``{"backend": "table", ...}``,
    ``{"backend": "ngram", ...}`` or ``{"backend": "remote", ...}``.
``vocab_map``
    null for identity, ``{"path": ...}``, an inline map document, or
    ``{"teacher_vocab_size": ..., "student_vocab_size": ...,
    "expansions": {...}}`` to derive one.
``token_text``
    Optional list mapping token id -> text fragment, used to render traces
    for the verifier and to encode ``prompt_text`` problems (single-char
    fragments only; there is no tokenizer here).
``verifier``
    ``mode``, ``normalization``, ``command``.
``attempts`` (16), ``prefix_length`` (128), ``prefix_source`` ("first"),
``diagnostic_threshold`` (0.01, the sub-threshold metric cutoff in reports),
``problems`` (path), ``output.dataset`` / ``output.report`` (paths),
``workers`` (null = available parallelism).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .decoding import GenerationConfig
from .metrics import DEFAULT_SUB_THRESHOLD
from .models import LanguageModel, NgramModel, SerializedModel, TableModel
from .pipeline import (
    DEFAULT_ATTEMPTS,
    DEFAULT_PREFIX_LENGTH,
    PREFIX_SOURCES,
    Problem,
    Verifier,
)
from .remote import BackendEndpoint, RemoteModel, RetryPolicy
from .vocab import VocabularyAlignmentError, VocabularyMap, build_vocab_map


class ConfigError(ValueError):
    """The run configuration is missing, malformed, or inconsistent."""


class DataError(ValueError):
    """An input data file is missing or malformed."""


@dataclass
class RunConfig:
    generation: GenerationConfig
    teacher_spec: dict | None
    student_spec: dict | None
    vocab_map_spec: dict | None
    token_text: list[str] | None
    verifier: Verifier
    attempts: int
    prefix_length: int
    prefix_source: str
    diagnostic_threshold: float
    problems_path: str | None
    dataset_path: str
    report_path: str
    workers: int | None
    base_dir: Path

    def resolve_path(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"config root must be an object, got {type(payload).__name__}")
    return parse_run_config(payload, base_dir=path.parent)


_TOP_LEVEL_KEYS = frozenset(
    {
        "generation",
        "teacher",
        "student",
        "vocab_map",
        "token_text",
        "verifier",
        "attempts",
        "prefix_length",
        "prefix_source",
        "diagnostic_threshold",
        "problems",
        "output",
        "workers",
    }
)


def parse_run_config(payload: Mapping, base_dir: str | Path = ".") -> RunConfig:
    unknown = set(payload) - _TOP_LEVEL_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    gen_payload = payload.get("generation")
    if not isinstance(gen_payload, Mapping):
        raise ConfigError("config needs a 'generation' object")
    unknown = set(gen_payload) - set(GenerationConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown generation keys: {sorted(unknown)}")
    gen_defaults = {"p_th": 0.01, "temperature": 0.7, "context_limit": 8192, "seed": 0}
    try:
        generation = GenerationConfig.from_json_dict({**gen_defaults, **gen_payload})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad generation settings: {exc}") from exc

    regime = generation.regime
    teacher_spec = payload.get("teacher")
    student_spec = payload.get("student")
    if regime in ("rsd", "skd") and (teacher_spec is None or student_spec is None):
        raise ConfigError(f"regime {regime!r} needs both teacher and student model specs")
    if regime == "solo-teacher" and teacher_spec is None:
        raise ConfigError("regime 'solo-teacher' needs a teacher model spec")
    if regime == "solo-student" and student_spec is None:
        raise ConfigError("regime 'solo-student' needs a student model spec")
    for role, spec in (("teacher", teacher_spec), ("student", student_spec)):
        if spec is not None:
            validate_model_spec(spec, role)

    token_text = payload.get("token_text")
    if token_text is not None:
        if not isinstance(token_text, list) or not all(isinstance(s, str) for s in token_text):
            raise ConfigError("token_text must be a list of strings")

    verifier_payload = payload.get("verifier") or {}
    try:
        verifier = Verifier(
            mode=verifier_payload.get("mode", "boxed-answer"),
            normalization=tuple(
                verifier_payload.get("normalization", ("strip", "casefold", "collapse-whitespace"))
            ),
            command=tuple(verifier_payload["command"]) if verifier_payload.get("command") else None,
            timeout_s=float(verifier_payload.get("timeout_s", 30.0)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad verifier settings: {exc}") from exc

    attempts = int(payload.get("attempts", DEFAULT_ATTEMPTS))
    if attempts < 1:
        raise ConfigError(f"attempts must be >= 1, got {attempts}")
    prefix_length = int(payload.get("prefix_length", DEFAULT_PREFIX_LENGTH))
    if prefix_length < 1:
        raise ConfigError(f"prefix_length must be >= 1, got {prefix_length}")
    prefix_source = payload.get("prefix_source", "first")
    if prefix_source not in PREFIX_SOURCES:
        raise ConfigError(f"prefix_source must be one of {PREFIX_SOURCES}, got {prefix_source!r}")
    diagnostic_threshold = float(payload.get("diagnostic_threshold", DEFAULT_SUB_THRESHOLD))
    if not 0.0 <= diagnostic_threshold <= 1.0:
        raise ConfigError(f"diagnostic_threshold must lie in [0, 1], got {diagnostic_threshold}")

    workers = payload.get("workers")
    if workers is not None:
        workers = int(workers)
        if workers < 1:
            raise ConfigError(f"workers must be >= 1, got {workers}")

    output = payload.get("output") or {}
    vocab_map_spec = payload.get("vocab_map")
    if vocab_map_spec is not None and not isinstance(vocab_map_spec, Mapping):
        raise ConfigError("vocab_map must be null or an object")

    return RunConfig(
        generation=generation,
        teacher_spec=dict(teacher_spec) if teacher_spec else None,
        student_spec=dict(student_spec) if student_spec else None,
        vocab_map_spec=dict(vocab_map_spec) if vocab_map_spec else None,
        token_text=list(token_text) if token_text else None,
        verifier=verifier,
        attempts=attempts,
        prefix_length=prefix_length,
        prefix_source=prefix_source,
        diagnostic_threshold=diagnostic_threshold,
        problems_path=payload.get("problems"),
        dataset_path=output.get("dataset", "dataset.jsonl"),
        report_path=output.get("report", "report.json"),
        workers=workers,
        base_dir=Path(base_dir),
    )


def validate_model_spec(spec: Mapping, role: str) -> None:
    if not isinstance(spec, Mapping):
        raise ConfigError(f"{role} model spec must be an object")
    backend = spec.get("backend")
    if backend not in ("table", "ngram", "remote"):
        raise ConfigError(f"{role}: unknown backend {backend!r}")
    required = {
        "table": ("default",),
        "ngram": ("corpus", "order"),
        "remote": ("base_url", "model_name"),
    }[backend]
    for key in required:
        if key not in spec:
            raise ConfigError(f"{role}: backend {backend!r} needs {key!r}")


def build_model(spec: Mapping, role: str = "model") -> LanguageModel:
    """Instantiate a model from its spec; remote backends handshake here."""
    validate_model_spec(spec, role)
    backend = spec["backend"]
    try:
        if backend == "table":
            rows = {}
            for row in spec.get("rows", []):
                rows[tuple(int(t) for t in row["suffix"])] = row["probs"]
            model: LanguageModel = TableModel(
                rows, spec["default"], eos_token=spec.get("eos_token")
            )
        elif backend == "ngram":
            model = NgramModel(
                spec["corpus"],
                int(spec["order"]),
                float(spec.get("smoothing", 0.0)),
                vocab_size=spec.get("vocab_size"),
                eos_token=spec.get("eos_token"),
            )
        else:
            endpoint = BackendEndpoint(
                base_url=spec["base_url"],
                model_name=spec["model_name"],
                timeout_s=float(spec.get("timeout_s", 30.0)),
                retry=RetryPolicy(
                    max_retries=int(spec.get("max_retries", 3)),
                    backoff_s=float(spec.get("backoff_s", 0.2)),
                ),
                vocab_size=spec.get("vocab_size"),
                eos_token=spec.get("eos_token"),
                max_inflight=int(spec.get("max_inflight", 8)),
            )
            model = RemoteModel(endpoint)
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{role}: bad model spec: {exc}") from exc
    if not model.thread_safe:
        model = SerializedModel(model)
    return model


def build_vocab_map_from_spec(
    spec: Mapping | None, student_vocab_size: int
) -> VocabularyMap:
    if spec is None:
        return VocabularyMap.identity(student_vocab_size)
    try:
        if "path" in spec:
            return VocabularyMap.load(spec["path"])
        if "shared_size" in spec:
            return VocabularyMap.from_json_dict(spec)
        if "teacher_vocab_size" in spec:
            return build_vocab_map(
                int(spec["teacher_vocab_size"]),
                int(spec.get("student_vocab_size", student_vocab_size)),
                {int(k): tuple(v) for k, v in spec.get("expansions", {}).items()},
            )
    except (OSError, VocabularyAlignmentError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad vocab_map: {exc}") from exc
    raise ConfigError("vocab_map needs 'path', 'shared_size', or 'teacher_vocab_size'")


def build_detokenizer(token_text: Sequence[str] | None) -> Callable[[Sequence[int]], str]:
    """Token ids -> text for the verifier.

    With a ``token_text`` table, fragments are concatenated; without one,
    ids render as space-separated decimals (exact-match verification still
    works against references written the same way).
    """
    if token_text is None:
        return lambda tokens: " ".join(str(t) for t in tokens)
    table = list(token_text)

    def detokenize(tokens: Sequence[int]) -> str:
        try:
            return "".join(table[t] for t in tokens)
        except IndexError as exc:
            raise DataError(f"token outside token_text table of size {len(table)}") from exc

    return detokenize


def encode_text(text: str, token_text: Sequence[str]) -> tuple[int, ...]:
    """Character-wise inverse of the token_text table, for prompt_text.

    Only single-character entries participate (empty or multi-character
    fragments, such as an EOS rendered as "", cannot be the target of a
    character lookup); the lowest id wins when fragments repeat.
    """
    lookup: dict[str, int] = {}
    for i, frag in enumerate(token_text):
        if len(frag) == 1:
            lookup.setdefault(frag, i)
    if not lookup:
        raise ConfigError("prompt_text needs at least one single-character token_text entry")
    try:
        return tuple(lookup[c] for c in text)
    except KeyError as exc:
        raise DataError(f"prompt_text character {exc} not in token_text") from exc


def load_problems(path: str | Path, token_text: Sequence[str] | None) -> list[Problem]:
    """Problems from newline-delimited JSON: id, prompt_tokens|prompt_text, answer."""
    problems: list[Problem] = []
    seen: set[str] = set()
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open problems file {path}: {exc}") from exc
    with fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                pid = str(row["id"])
                answer = str(row["answer"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}: line {i}: {exc}") from exc
            if pid in seen:
                raise DataError(f"{path}: line {i}: duplicate problem id {pid!r}")
            seen.add(pid)
            text = row.get("prompt_text")
            if "prompt_tokens" in row:
                tokens = tuple(int(t) for t in row["prompt_tokens"])
            elif text is not None:
                if token_text is None:
                    raise DataError(
                        f"{path}: line {i}: prompt_text requires a token_text table in the config"
                    )
                tokens = encode_text(text, token_text)
            else:
                raise DataError(f"{path}: line {i}: need prompt_tokens or prompt_text")
            try:
                problems.append(Problem(id=pid, prompt_tokens=tokens, answer=answer, prompt_text=text))
            except ValueError as exc:
                raise DataError(f"{path}: line {i}: {exc}") from exc
    if not problems:
        raise DataError(f"{path}: no problems found")
    return problems
