"""Decoder regime contracts: acceptance rule, seed schedule, bookkeeping."""

from __future__ import annotations

import math

import numpy as np
import pytest

from rsdkit.decoding import (
    GenerationConfig,
    Trace,
    rsd_decode,
    skd_decode,
    solo_decode,
)
from rsdkit.models import ContextOverflowError, TableModel
from rsdkit.vocab import build_vocab_map, replay_student_context


def cfg(**kwargs) -> GenerationConfig:
    base = dict(p_th=0.01, max_tokens=12, temperature=0.7, context_limit=64, seed=7, regime="rsd")
    base.update(kwargs)
    return GenerationConfig(**base)


def one_hot(vocab: int, token: int) -> list[float]:
    row = [0.0] * vocab
    row[token] = 1.0
    return row


class TestRsdAcceptance:
    def test_confident_student_accepts_everything(self):
        teacher = TableModel({}, one_hot(4, 1), eos_token=3)
        student = TableModel({}, [0.3, 0.5, 0.15, 0.05], eos_token=3)
        trace = rsd_decode(teacher, student, [0], cfg(p_th=0.01))
        assert len(trace) == 12
        assert all(r.accepted and not r.fallback for r in trace.records)
        assert trace.fallback_rate == 0.0

    def test_unconfident_student_rejects_everything(self):
        teacher = TableModel({}, one_hot(4, 1), eos_token=3)
        student = TableModel({}, [0.745, 0.005, 0.2, 0.05], eos_token=3)
        trace = rsd_decode(teacher, student, [0], cfg(p_th=0.01))
        assert all(r.fallback and not r.accepted for r in trace.records)
        assert trace.fallback_rate == 1.0
        assert all(r.proposer == "student" for r in trace.records)

    def test_accepted_records_meet_threshold_exactly_as_recorded(self):
        rng = np.random.default_rng(101)
        for trial in range(40):
            vocab = int(rng.integers(3, 7))
            teacher = TableModel({}, rng.dirichlet(np.ones(vocab)), eos_token=vocab - 1)
            student = TableModel({}, rng.dirichlet(np.ones(vocab) * 0.4), eos_token=vocab - 1)
            p_th = float(rng.choice([0.003, 0.01, 0.03, 0.1]))
            trace = rsd_decode(teacher, student, [0], cfg(p_th=p_th, seed=trial, max_tokens=8))
            for rec in trace.records:
                if rec.accepted:
                    assert rec.p_student >= p_th

    def test_boundary_probability_is_accepted(self):
        # strict less-than rejects: a student probability equal to p_th passes
        teacher = TableModel({}, one_hot(4, 1), eos_token=3)
        student = TableModel({}, [0.69, 0.01, 0.2, 0.1], eos_token=3)
        trace = rsd_decode(teacher, student, [0], cfg(p_th=0.01))
        assert all(r.accepted for r in trace.records)

    def test_tempered_threshold_mode_changes_the_decision(self):
        # raw 0.0099 < 1% but flattening at T=2 lifts it above the threshold
        teacher = TableModel({}, one_hot(3, 1), eos_token=2)
        student = TableModel({}, [0.9801, 0.0099, 0.01], eos_token=2)
        raw = rsd_decode(teacher, student, [0], cfg(temperature=2.0, max_tokens=4))
        tempered = rsd_decode(
            teacher, student, [0], cfg(temperature=2.0, max_tokens=4, threshold_uses_raw=False)
        )
        assert all(r.fallback for r in raw.records)
        assert all(r.accepted for r in tempered.records)
        # recorded probabilities stay raw in both modes
        for r in tempered.records:
            assert r.p_student == pytest.approx(0.0099)


class TestDegeneracy:
    def test_zero_threshold_rsd_equals_solo_teacher(self):
        rng = np.random.default_rng(5)
        for trial in range(20):
            vocab = int(rng.integers(3, 7))
            teacher = TableModel(
                {(1,): rng.dirichlet(np.ones(vocab))}, rng.dirichlet(np.ones(vocab)),
                eos_token=vocab - 1,
            )
            student = TableModel({}, rng.dirichlet(np.ones(vocab)), eos_token=vocab - 1)
            shared = dict(p_th=0.0, max_tokens=10, seed=1000 + trial)
            rsd = rsd_decode(teacher, student, [0], cfg(**shared))
            solo = solo_decode(teacher, [0], cfg(**shared, regime="solo-teacher"))
            assert rsd.tokens() == solo.tokens()
            assert rsd.terminated_by == solo.terminated_by

    def test_zero_threshold_skd_equals_solo_student(self):
        rng = np.random.default_rng(6)
        for trial in range(20):
            vocab = int(rng.integers(3, 7))
            teacher = TableModel({}, rng.dirichlet(np.ones(vocab)), eos_token=vocab - 1)
            student = TableModel(
                {(0, 0): rng.dirichlet(np.ones(vocab))}, rng.dirichlet(np.ones(vocab)),
                eos_token=vocab - 1,
            )
            shared = dict(p_th=0.0, max_tokens=10, seed=2000 + trial)
            skd = skd_decode(teacher, student, [0], cfg(**shared, regime="skd"))
            solo = solo_decode(student, [0], cfg(**shared, regime="solo-student"))
            assert skd.tokens() == solo.tokens()


class TestSkdMirror:
    def test_confident_teacher_approves_student_proposals(self):
        student = TableModel({}, one_hot(4, 1), eos_token=3)
        teacher = TableModel({}, [0.25, 0.35, 0.3, 0.1], eos_token=3)
        trace = skd_decode(teacher, student, [0], cfg(regime="skd"))
        assert all(r.accepted and r.proposer == "student" for r in trace.records)

    def test_dismissive_teacher_forces_teacher_resamples(self):
        student = TableModel({}, one_hot(4, 1), eos_token=3)
        teacher = TableModel({}, [0.6, 0.005, 0.295, 0.1], eos_token=3)
        trace = skd_decode(teacher, student, [0], cfg(regime="skd"))
        assert all(r.fallback and r.proposer == "teacher" for r in trace.records)
        assert trace.fallback_rate == 1.0

    def test_accepted_records_meet_threshold_on_teacher_side(self):
        rng = np.random.default_rng(77)
        for trial in range(25):
            vocab = int(rng.integers(3, 6))
            teacher = TableModel({}, rng.dirichlet(np.ones(vocab)), eos_token=vocab - 1)
            student = TableModel({}, rng.dirichlet(np.ones(vocab)), eos_token=vocab - 1)
            trace = skd_decode(
                teacher, student, [0], cfg(regime="skd", p_th=0.05, seed=trial, max_tokens=6)
            )
            for rec in trace.records:
                if rec.accepted:
                    assert rec.p_teacher >= 0.05


class TestSolo:
    def test_one_hot_model_is_seed_independent(self):
        model = TableModel({(1,): one_hot(4, 2), (2,): one_hot(4, 1)}, one_hot(4, 1), eos_token=3)
        outs = {
            tuple(solo_decode(model, [0], cfg(regime="solo-teacher", seed=s, max_tokens=6)).tokens())
            for s in range(25)
        }
        assert outs == {(1, 2, 1, 2, 1, 2)}

    def test_uniform_first_token_is_binomially_fair(self):
        model = TableModel({}, [0.5, 0.5])
        n = 10_000
        hits = sum(
            solo_decode(model, [0], cfg(regime="solo-student", seed=s, max_tokens=1)).tokens()[0]
            for s in range(n)
        )
        assert abs(hits / n - 0.5) <= 3 * math.sqrt(0.25 / n)

    def test_scorer_fills_student_fields_recomputable_independently(self):
        teacher = TableModel({}, [0.1, 0.2, 0.3, 0.4], eos_token=3)
        student = TableModel({(1,): [0.7, 0.1, 0.1, 0.1]}, [0.25] * 4, eos_token=3)
        trace = solo_decode(teacher, [2], cfg(regime="solo-teacher", seed=13), scorer=student)
        ctx = [2]
        for rec in trace.records:
            expected = student.next_distribution(ctx)[rec.token]
            assert rec.p_student == expected
            assert rec.surprisal_student == -math.log(expected)
            ctx.append(rec.token)

    def test_unscored_solo_trace_has_no_student_fields(self):
        teacher = TableModel({}, [0.25] * 4, eos_token=3)
        trace = solo_decode(teacher, [0], cfg(regime="solo-teacher"))
        assert all(r.p_student is None and r.surprisal_student is None for r in trace.records)
        assert all(not r.accepted and not r.fallback for r in trace.records)

    def test_regime_mismatch_rejected(self):
        model = TableModel({}, [0.25] * 4)
        with pytest.raises(ValueError, match="solo"):
            solo_decode(model, [0], cfg(regime="rsd"))
        with pytest.raises(ValueError, match="rsd"):
            rsd_decode(model, model, [0], cfg(regime="solo-teacher"))
        with pytest.raises(ValueError, match="skd"):
            skd_decode(model, model, [0], cfg(regime="rsd"))


class TestBookkeeping:
    def test_fallback_count_equals_rejected_count(self):
        rng = np.random.default_rng(3)
        for trial in range(20):
            teacher = TableModel({}, rng.dirichlet(np.ones(5)), eos_token=4)
            student = TableModel({}, rng.dirichlet(np.ones(5) * 0.3), eos_token=4)
            trace = rsd_decode(teacher, student, [0], cfg(p_th=0.05, seed=trial))
            assert trace.fallback_count == sum(1 for r in trace.records if not r.accepted)
            assert trace.fallback_rate == trace.fallback_count / len(trace)

    def test_monotone_fallback_in_threshold_on_common_proposal_stream(self):
        # context-free models: the proposal at step i is identical across
        # thresholds, so per-step fallback indicators must be monotone
        teacher = TableModel({}, [0.4, 0.3, 0.2, 0.1], eos_token=3)
        student = TableModel({}, [0.5, 0.05, 0.008, 0.442], eos_token=3)
        thresholds = [0.0, 0.003, 0.01, 0.03, 0.1, 0.3, 1.0]
        for seed in range(10):
            flags = []
            for th in thresholds:
                trace = rsd_decode(teacher, student, [0], cfg(p_th=th, seed=seed, max_tokens=6))
                flags.append([r.fallback for r in trace.records])
            for step in range(6):
                indicators = [f[step] if step < len(f) else None for f in flags]
                seen = [x for x in indicators if x is not None]
                assert seen == sorted(seen)  # False..False True..True

    def test_surprisal_matches_recorded_probability(self):
        teacher = TableModel({}, [0.4, 0.3, 0.2, 0.1], eos_token=3)
        student = TableModel({}, [0.25] * 4, eos_token=3)
        trace = rsd_decode(teacher, student, [0], cfg(seed=4))
        for rec in trace.records:
            assert rec.surprisal_student == pytest.approx(-math.log(rec.p_student), abs=1e-9)


class TestTermination:
    def test_eos_breaks_and_is_last_token(self):
        teacher = TableModel({}, one_hot(4, 3), eos_token=3)
        student = TableModel({}, [0.05, 0.05, 0.05, 0.85], eos_token=3)
        trace = rsd_decode(teacher, student, [0], cfg())
        assert trace.terminated_by == "eos"
        assert len(trace) == 1
        assert trace.records[-1].token == 3

    def test_teacher_eos_proposal_is_just_a_token(self):
        # teacher proposes its own EOS id, student EOS differs: no break
        teacher = TableModel({}, one_hot(4, 2), eos_token=2)
        student = TableModel({}, [0.3, 0.3, 0.3, 0.1], eos_token=3)
        trace = rsd_decode(teacher, student, [0], cfg(max_tokens=5))
        assert trace.terminated_by == "length-budget"
        assert len(trace) == 5

    def test_length_budget_respected(self):
        teacher = TableModel({}, one_hot(4, 1), eos_token=3)
        student = TableModel({}, [0.25] * 4, eos_token=3)
        trace = rsd_decode(teacher, student, [0], cfg(max_tokens=3))
        assert len(trace) == 3
        assert trace.terminated_by == "length-budget"

    def test_context_overflow_raises(self):
        teacher = TableModel({}, one_hot(4, 1), eos_token=3)
        student = TableModel({}, [0.25] * 4, eos_token=3)
        with pytest.raises(ContextOverflowError):
            rsd_decode(teacher, student, [0, 0, 0], cfg(max_tokens=4, context_limit=4))


class TestReproducibility:
    def test_identical_inputs_identical_serialized_bytes(self):
        teacher = TableModel({}, [0.4, 0.3, 0.2, 0.1], eos_token=3)
        student = TableModel({}, [0.1, 0.2, 0.3, 0.4], eos_token=3)
        a = rsd_decode(teacher, student, [0, 1], cfg(seed=99))
        b = rsd_decode(teacher, student, [0, 1], cfg(seed=99))
        assert a.to_json_line() == b.to_json_line()

    def test_config_is_recorded_in_trace(self):
        teacher = TableModel({}, [0.4, 0.3, 0.2, 0.1], eos_token=3)
        student = TableModel({}, [0.25] * 4, eos_token=3)
        c = cfg(seed=42, p_th=0.03)
        trace = rsd_decode(teacher, student, [0], c)
        assert trace.config == c

    def test_json_round_trip_preserves_everything(self):
        teacher = TableModel({}, [0.4, 0.3, 0.2, 0.1], eos_token=3)
        student = TableModel({}, [0.1, 0.2, 0.3, 0.4], eos_token=3)
        trace = rsd_decode(teacher, student, [2, 1], cfg(seed=17))
        import json

        back = Trace.from_json_dict(json.loads(trace.to_json_line()))
        assert back == trace
        assert back.to_json_line() == trace.to_json_line()


class TestStudentOnlyTokens:
    def test_fallback_can_emit_student_native_tokens(self):
        vmap = build_vocab_map(6, 6, {5: (1, 2)})
        teacher = TableModel({}, one_hot(6, 0), eos_token=3)
        student = TableModel({}, [0.001, 0.004, 0.005, 0.01, 0.08, 0.9], eos_token=3)
        trace = rsd_decode(teacher, student, [0], cfg(p_th=0.01, max_tokens=6, seed=3), vmap)
        natives = [r for r in trace.records if r.token == 5]
        assert natives, "construction should emit the student-native token"
        for rec in natives:
            assert rec.fallback
            assert rec.p_teacher is None
            assert rec.p_student == pytest.approx(0.9)

    def test_dual_context_replay_verifies_after_decode(self):
        vmap = build_vocab_map(6, 6, {5: (1, 2)})
        teacher = TableModel({}, one_hot(6, 0), eos_token=3)
        student = TableModel({}, [0.001, 0.004, 0.005, 0.01, 0.08, 0.9], eos_token=3)
        trace = rsd_decode(teacher, student, [4, 0], cfg(p_th=0.01, max_tokens=6, seed=3), vmap)
        student_stream = list(trace.prompt) + trace.tokens()
        teacher_stream = replay_student_context(student_stream, vmap)
        # replay must equal what the decode actually fed the teacher
        assert len(teacher_stream) >= len(student_stream)
        expected_growth = sum(len(vmap.expand(t)) - 1 for t in student_stream if vmap.is_student_only(t))
        assert len(teacher_stream) == len(student_stream) + expected_growth

    def test_suppression_keeps_teacher_proposals_scoreable(self):
        # teacher has 2 extra ids; its mass there must never be proposed
        vmap = build_vocab_map(6, 4)
        teacher = TableModel({}, [0.05, 0.05, 0.05, 0.05, 0.4, 0.4], eos_token=3)
        student = TableModel({}, [0.25] * 4, eos_token=3)
        trace = rsd_decode(teacher, student, [0], cfg(p_th=0.0, max_tokens=8, seed=11), vmap)
        assert all(r.token < 4 for r in trace.records)
