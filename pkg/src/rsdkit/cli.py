"""Operator surface: generate datasets, analyze traces, sweep thresholds.

Subcommands: ``generate``, ``analyze``, ``sweep``, ``stub-serve``. Every
command is deterministic given its config file and seeds; progress goes to
stderr, machine output only to files. Exit codes: 0 success, 2 config
error, 3 backend error, 4 data error (1 for unexpected internal failures).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from dataclasses import replace
from pathlib import Path

from .config import (
    ConfigError,
    DataError,
    RunConfig,
    build_detokenizer,
    build_model,
    build_vocab_map_from_spec,
    load_problems,
    load_run_config,
)
from .decoding import Trace, decode, read_traces_jsonl
from .metrics import (
    DEFAULT_SUB_THRESHOLD,
    dataset_report,
    low_prob_token_tally,
    write_perplexity_csv,
    write_surprisal_csv,
    write_token_tally_csv,
    records_perplexity,
    summary_stats,
)
from .pipeline import (
    DatasetFormatError,
    assemble_dataset,
    export_dataset,
    import_dataset,
    run_generation,
    score_external_traces,
)
from .remote import BackendError
from .stub_server import StubServer

log = logging.getLogger("rsdkit")

DEFAULT_SWEEP_THRESHOLDS = (0.10, 0.03, 0.01, 0.003)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rsdkit",
        description="Coordinated teacher/student decoding and distillation dataset tooling.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="run rejection sampling and write a dataset")
    p_gen.add_argument("config", help="run configuration JSON file")
    p_gen.add_argument("--workers", type=int, default=None, help="worker pool size (1 = serial)")
    p_gen.add_argument("--threshold", type=float, default=None, help="override generation p_th")
    p_gen.add_argument("--seed", type=int, default=None, help="override the base seed")
    p_gen.add_argument("--attempts", type=int, default=None, help="override the attempt budget")
    p_gen.set_defaults(func=cmd_generate)

    p_ana = sub.add_parser("analyze", help="metrics, CSV series, and a report for a dataset")
    p_ana.add_argument("dataset", help="dataset records, traces, or external traces (JSONL)")
    p_ana.add_argument(
        "--threshold",
        type=float,
        default=DEFAULT_SUB_THRESHOLD,
        help="sub-threshold diagnostic cutoff (default 0.01)",
    )
    p_ana.add_argument("--out", default=None, help="output directory (default <dataset>_analysis)")
    p_ana.add_argument(
        "--config", default=None, help="run config providing the student model (external traces)"
    )
    p_ana.set_defaults(func=cmd_analyze)

    p_sweep = sub.add_parser("sweep", help="generate once per threshold and compare")
    p_sweep.add_argument("config", help="run configuration JSON file")
    p_sweep.add_argument(
        "--thresholds",
        default=",".join(str(t) for t in DEFAULT_SWEEP_THRESHOLDS),
        help="comma-separated p_th values (default %(default)s)",
    )
    p_sweep.add_argument("--out-dir", default=None, help="output directory (default <config>_sweep)")
    p_sweep.add_argument("--workers", type=int, default=None, help="worker pool size")
    p_sweep.set_defaults(func=cmd_sweep)

    p_stub = sub.add_parser("stub-serve", help="serve the config's in-process models over HTTP")
    p_stub.add_argument("config", help="run configuration JSON file")
    p_stub.add_argument("--host", default="127.0.0.1")
    p_stub.add_argument("--port", type=int, default=8000)
    p_stub.set_defaults(func=cmd_stub_serve)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _emit_error("config", exc)
        return 2
    except BackendError as exc:
        _emit_error("backend", exc)
        return 3
    except (DataError, DatasetFormatError) as exc:
        _emit_error("data", exc)
        return 4
    except Exception as exc:  # structured even for bugs
        _emit_error("internal", exc)
        return 1


def _emit_error(kind: str, exc: Exception) -> None:
    sys.stderr.write(
        json.dumps({"error": {"kind": kind, "type": type(exc).__name__, "message": str(exc)}})
        + "\n"
    )


def _build_pair(cfg: RunConfig):
    teacher = build_model(cfg.teacher_spec, "teacher") if cfg.teacher_spec else None
    student = build_model(cfg.student_spec, "student") if cfg.student_spec else None
    scoreholder = student or teacher
    assert scoreholder is not None
    vmap = build_vocab_map_from_spec(cfg.vocab_map_spec, scoreholder.vocab_size)
    return teacher, student, vmap


def _run_dataset(cfg: RunConfig, workers: int | None):
    if cfg.problems_path is None:
        raise ConfigError("config names no problems file")
    teacher, student, vmap = _build_pair(cfg)
    problems = load_problems(cfg.resolve_path(cfg.problems_path), cfg.token_text)
    detokenize = build_detokenizer(cfg.token_text)
    gen_cfg = cfg.generation

    def generator(prompt, seed):
        return decode(teacher, student, prompt, gen_cfg.with_seed(seed), vmap)

    def progress(result):
        log.info(
            "problem=%s attempts=%d solved=%s",
            result.problem_id,
            len(result.attempts),
            result.solved is not None,
        )

    resolved_workers = workers or cfg.workers or os.cpu_count() or 1
    results = run_generation(
        problems,
        generator,
        cfg.verifier,
        cfg.attempts,
        gen_cfg.seed,
        detokenize,
        workers=resolved_workers,
        progress=progress,
    )
    records = assemble_dataset(results, cfg.prefix_length, cfg.prefix_source)
    return records


def _write_outputs(cfg: RunConfig, records, dataset_path: Path, report_path: Path):
    # partial outputs stay visible under a .partial suffix until complete
    dataset_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    partial = dataset_path.with_name(dataset_path.name + ".partial")
    export_dataset(records, partial)
    os.replace(partial, dataset_path)
    report = dataset_report(records, cfg.diagnostic_threshold)
    report.save(report_path)
    return report


def cmd_generate(args) -> int:
    cfg = load_run_config(args.config)
    cfg = _apply_overrides(cfg, args)
    records = _run_dataset(cfg, args.workers)
    dataset_path = cfg.resolve_path(cfg.dataset_path)
    report_path = cfg.resolve_path(cfg.report_path)
    report = _write_outputs(cfg, records, dataset_path, report_path)
    log.info(
        "dataset=%s records=%d solved=%d report=%s",
        dataset_path,
        report.problems_attempted,
        report.correctly_solved,
        report_path,
    )
    return 0


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    gen = cfg.generation
    if getattr(args, "threshold", None) is not None:
        gen = replace(gen, p_th=args.threshold)
    if getattr(args, "seed", None) is not None:
        gen = replace(gen, seed=args.seed)
    cfg = replace(cfg, generation=gen)
    if getattr(args, "attempts", None) is not None:
        cfg = replace(cfg, attempts=args.attempts)
    return cfg


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", name) or "item"


def _sniff_kind(path: Path) -> str:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    row = json.loads(line)
                    break
            else:
                raise DataError(f"{path}: empty file")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: line 1: invalid JSON: {exc}") from exc
    if not isinstance(row, dict):
        raise DataError(f"{path}: lines must be JSON objects")
    if row.get("kind") in ("full-trace", "upft-prefix", "manifest"):
        return "dataset"
    if "records" in row and "config" in row:
        return "traces"
    if "tokens" in row and "prompt_tokens" in row:
        return "external"
    raise DataError(f"{path}: unrecognized line schema (keys: {sorted(row)})")


def cmd_analyze(args) -> int:
    dataset_path = Path(args.dataset)
    out_dir = Path(args.out) if args.out else dataset_path.with_name(dataset_path.stem + "_analysis")
    out_dir.mkdir(parents=True, exist_ok=True)
    kind = _sniff_kind(dataset_path)
    threshold = args.threshold

    if kind == "dataset":
        records = import_dataset(dataset_path)
        if not records:
            raise DataError(f"{dataset_path}: dataset is empty")
        report = dataset_report(records, threshold)
        report.save(out_dir / "report.json")
        items = [(r.problem_id, r.records) for r in records]
    else:
        if kind == "external":
            if not args.config:
                raise ConfigError("external traces need --config with a student model spec")
            cfg = load_run_config(args.config)
            if cfg.student_spec is None:
                raise ConfigError("--config carries no student model spec")
            student = build_model(cfg.student_spec, "student")
            entries = _read_jsonl(dataset_path)
            try:
                traces = score_external_traces(entries, student)
            except ValueError as exc:  # vocabulary mismatch and kin
                raise DataError(str(exc)) from exc
        else:
            try:
                traces = read_traces_jsonl(dataset_path)
            except ValueError as exc:
                raise DataError(str(exc)) from exc
            if not traces:
                raise DataError(f"{dataset_path}: no traces found")
        report_dict = _trace_report(traces, threshold)
        (out_dir / "report.json").write_text(
            json.dumps(report_dict, indent=2, sort_keys=True) + "\n"
        )
        items = [(str(i), t.records) for i, t in enumerate(traces)]

    for name, recs in items:
        write_surprisal_csv(recs, out_dir / f"surprisal_{_slug(name)}.csv")
    write_perplexity_csv(
        ((name, records_perplexity(recs), len(recs)) for name, recs in items),
        out_dir / "perplexity.csv",
    )
    tally = low_prob_token_tally((_RecordHolder(recs) for _, recs in items), threshold)
    write_token_tally_csv(tally, out_dir / "token_tally.csv")
    log.info("analysis=%s items=%d threshold=%g", out_dir, len(items), threshold)
    return 0


class _RecordHolder:
    """Adapts a bare record list to the trace-shaped metrics interface."""

    __slots__ = ("records",)

    def __init__(self, records):
        self.records = records


def _read_jsonl(path: Path) -> list[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: line {i}: invalid JSON: {exc}") from exc
    return rows


def _trace_report(traces: list[Trace], threshold: float) -> dict:
    total = sum(len(t.records) for t in traces)
    below = sum(
        1 for t in traces for r in t.records if r.p_student is not None and r.p_student < threshold
    )
    coordinated = all(t.config.regime in ("rsd", "skd") for t in traces)
    fallbacks = sum(t.fallback_count for t in traces)
    return {
        "traces": len(traces),
        "sub_threshold": threshold,
        "sub_threshold_pct": 100.0 * below / total if total else 0.0,
        "fallback_rate_pct": 100.0 * fallbacks / total if (coordinated and total) else None,
        "avg_token_count": total / len(traces) if traces else 0.0,
        "perplexity_summary": summary_stats([records_perplexity(t.records) for t in traces]),
    }


def cmd_sweep(args) -> int:
    try:
        thresholds = [float(x) for x in str(args.thresholds).split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --thresholds value: {exc}") from exc
    if not thresholds:
        raise ConfigError("sweep needs at least one threshold")
    cfg = load_run_config(args.config)
    out_dir = Path(args.out_dir) if args.out_dir else Path(args.config).with_name(
        Path(args.config).stem + "_sweep"
    )
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for th in thresholds:
        run_cfg = replace(cfg, generation=replace(cfg.generation, p_th=th))
        records = _run_dataset(run_cfg, args.workers)
        tag = f"p{th:g}"
        report = _write_outputs(
            run_cfg, records, out_dir / f"dataset_{tag}.jsonl", out_dir / f"report_{tag}.json"
        )
        rows.append({"p_th": th, **report.to_json_dict()})
        log.info("sweep p_th=%g solved=%d/%d", th, report.correctly_solved, report.problems_attempted)

    (out_dir / "sweep_report.json").write_text(
        json.dumps({"thresholds": thresholds, "rows": rows}, indent=2, sort_keys=True) + "\n"
    )
    (out_dir / "sweep_table.txt").write_text(_sweep_table(rows))
    log.info("sweep=%s thresholds=%d", out_dir, len(thresholds))
    return 0


def _sweep_table(rows: list[dict]) -> str:
    headers = ["p_th", "correctly_solved", "fallback_rate_pct", "sub_threshold_pct", "avg_token_count"]
    lines = ["\t".join(headers)]
    for row in rows:
        fb = row["fallback_rate_pct"]
        lines.append(
            "\t".join(
                [
                    f"{row['p_th']:g}",
                    f"{row['correctly_solved']}/{row['problems_attempted']}",
                    "n/a" if fb is None else f"{fb:.4f}",
                    f"{row['sub_threshold_pct']:.4f}",
                    f"{row['avg_token_count']:.2f}",
                ]
            )
        )
    return "\n".join(lines) + "\n"


def build_stub_server(cfg: RunConfig, host: str, port: int) -> StubServer:
    models = {}
    for role, spec in (("teacher", cfg.teacher_spec), ("student", cfg.student_spec)):
        if spec is None:
            continue
        if spec.get("backend") == "remote":
            raise ConfigError(f"{role}: cannot serve a remote backend from the stub")
        models[role] = build_model(spec, role)
    if not models:
        raise ConfigError("config carries no in-process models to serve")
    return StubServer(models, host=host, port=port, max_context=cfg.generation.context_limit)


def cmd_stub_serve(args) -> int:
    server = build_stub_server(load_run_config(args.config), args.host, args.port)
    log.info("serving %s at %s", ",".join(server.models), server.base_url)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    sys.exit(main())
