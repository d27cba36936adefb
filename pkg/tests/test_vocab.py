"""Vocabulary alignment: suppression, expansions, dual contexts."""

from __future__ import annotations

import numpy as np
import pytest

from rsdkit.models import Distribution, EmptySupportError
from rsdkit.vocab import (
    DualContext,
    VocabularyAlignmentError,
    VocabularyMap,
    build_vocab_map,
    replay_student_context,
    suppress,
)

# the real-model expansion this engine was built around: student-only id
# 151668 (</think>) renders in the teacher vocabulary as (522, 26865, 29)
THINK_CLOSE = 151668
THINK_CLOSE_EXPANSION = (522, 26865, 29)


class TestBuildVocabMap:
    def test_identical_vocabularies_need_nothing(self):
        m = build_vocab_map(8, 8)
        assert m.suppressed == frozenset()
        assert m.expansions == {}
        assert m.shared_size == 8

    def test_teacher_surplus_of_128_is_suppressed(self):
        m = build_vocab_map(151936 + 128, 151936)
        assert len(m.suppressed) == 128
        assert m.suppressed == frozenset(range(151936, 152064))

    def test_declared_expansion_returns_exact_sequence(self):
        m = build_vocab_map(152064, 151936, {THINK_CLOSE: THINK_CLOSE_EXPANSION})
        assert m.expand(THINK_CLOSE) == THINK_CLOSE_EXPANSION

    def test_expansion_key_suppressed_on_teacher_side(self):
        m = build_vocab_map(152064, 151936, {THINK_CLOSE: THINK_CLOSE_EXPANSION})
        assert THINK_CLOSE in m.suppressed
        for t in THINK_CLOSE_EXPANSION:
            assert t not in m.suppressed

    def test_expansion_value_exempt_from_suppression(self):
        # value id 9 sits in the teacher-only range but is needed for contexts
        m = build_vocab_map(10, 8, {6: (9, 1)})
        assert 9 not in m.suppressed
        assert 6 in m.suppressed

    def test_overlapping_key_spaces_rejected(self):
        with pytest.raises(VocabularyAlignmentError, match="overlap"):
            build_vocab_map(10, 10, {5: (5, 1)})
        with pytest.raises(VocabularyAlignmentError, match="overlap"):
            build_vocab_map(10, 10, {5: (6,), 6: (1,)})

    def test_out_of_range_ids_rejected(self):
        with pytest.raises(VocabularyAlignmentError, match="student vocabulary"):
            build_vocab_map(8, 8, {9: (1,)})
        with pytest.raises(VocabularyAlignmentError, match="teacher vocabulary"):
            build_vocab_map(8, 8, {5: (9,)})

    def test_declared_map_expansion_into_suppressed_rejected(self):
        with pytest.raises(VocabularyAlignmentError, match="suppressed"):
            VocabularyMap(shared_size=8, suppressed={9}, expansions={8: (9,)})

    def test_student_only_covers_undeclared_high_ids(self):
        m = build_vocab_map(8, 10)
        assert m.is_student_only(8)
        assert m.is_student_only(9)
        assert not m.is_student_only(7)


class TestSuppress:
    def test_uniform_with_one_suppressed_id(self):
        m = VocabularyMap(shared_size=3, suppressed={3})
        out = suppress(Distribution([0.25] * 4), m)
        np.testing.assert_allclose(out.probs, [1 / 3, 1 / 3, 1 / 3, 0.0], rtol=1e-12)

    def test_no_suppression_returns_same_object(self):
        m = VocabularyMap.identity(4)
        d = Distribution([0.1, 0.2, 0.3, 0.4])
        assert suppress(d, m) is d

    def test_mass_rescales_by_removed_fraction(self):
        m = VocabularyMap(shared_size=3, suppressed={3})
        out = suppress(Distribution([0.04, 0.05, 0.01, 0.9]), m)
        np.testing.assert_allclose(out.probs, [0.4, 0.5, 0.1, 0.0], rtol=1e-12)

    def test_all_mass_suppressed_signals_empty_support(self):
        m = VocabularyMap(shared_size=2, suppressed={2, 3})
        with pytest.raises(EmptySupportError):
            suppress(Distribution([0.0, 0.0, 0.5, 0.5]), m)

    def test_idempotent_exactly(self):
        m = VocabularyMap(shared_size=3, suppressed={3})
        once = suppress(Distribution([0.2, 0.2, 0.2, 0.4]), m)
        twice = suppress(once, m)
        assert twice is once

    def test_rank_order_of_survivors_preserved(self):
        rng = np.random.default_rng(23)
        m = VocabularyMap(shared_size=6, suppressed={6, 7})
        for _ in range(100):
            d = Distribution(rng.dirichlet(np.ones(8)))
            out = suppress(d, m)
            survivors = list(range(6))
            before = np.argsort([d.probs[t] for t in survivors], kind="stable")
            after = np.argsort([out.probs[t] for t in survivors], kind="stable")
            np.testing.assert_array_equal(before, after)


class TestDualContext:
    def map(self) -> VocabularyMap:
        return build_vocab_map(152064, 151936, {THINK_CLOSE: THINK_CLOSE_EXPANSION})

    def test_shared_token_goes_to_both(self):
        ctx = DualContext.empty(16)
        ctx.append(42, self.map())
        assert ctx.student.tokens == [42]
        assert ctx.teacher.tokens == [42]

    def test_student_native_token_expands_on_teacher_side(self):
        ctx = DualContext.empty(16)
        ctx.append(THINK_CLOSE, self.map())
        assert ctx.student.tokens == [THINK_CLOSE]
        assert ctx.teacher.tokens == list(THINK_CLOSE_EXPANSION)

    def test_shared_only_streams_stay_identical(self):
        ctx = DualContext.empty(16)
        for t in (5, 1, 3, 2, 5, 0):
            ctx.append(t, self.map())
            assert ctx.student.tokens == ctx.teacher.tokens

    def test_explicit_side_validation(self):
        ctx = DualContext.empty(16)
        with pytest.raises(VocabularyAlignmentError, match="no declared expansion"):
            ctx.append(7, self.map(), side="student-native")
        with pytest.raises(VocabularyAlignmentError, match="student-only"):
            ctx.append(THINK_CLOSE, self.map(), side="shared")
        with pytest.raises(ValueError, match="unknown side"):
            ctx.append(7, self.map(), side="both")

    def test_undeclared_student_only_token_rejected(self):
        m = build_vocab_map(8, 10)  # ids 8, 9 student-only, no expansions declared
        ctx = DualContext.empty(16)
        with pytest.raises(VocabularyAlignmentError, match="no declared expansion"):
            ctx.append(9, m)

    def test_replay_reproduces_teacher_context(self):
        m = self.map()
        ctx = DualContext.empty(64)
        stream = [7, THINK_CLOSE, 3, 3, THINK_CLOSE, 11]
        for t in stream:
            ctx.append(t, m)
        assert replay_student_context(ctx.student.tokens, m) == ctx.teacher.tokens
        assert len(ctx.teacher.tokens) >= len(ctx.student.tokens)

    def test_from_prompt_routes_prompt_tokens(self):
        m = self.map()
        ctx = DualContext.from_prompt([1, THINK_CLOSE, 2], m, 64)
        assert ctx.student.tokens == [1, THINK_CLOSE, 2]
        assert ctx.teacher.tokens == [1, *THINK_CLOSE_EXPANSION, 2]


class TestMapDocument:
    def test_round_trip_through_file(self, tmp_path):
        m = build_vocab_map(152064, 151936, {THINK_CLOSE: THINK_CLOSE_EXPANSION})
        path = tmp_path / "map.json"
        m.save(path)
        loaded = VocabularyMap.load(path)
        assert loaded == m

    def test_document_fields(self, tmp_path):
        import json

        m = VocabularyMap(shared_size=8, suppressed={9, 10}, expansions={8: (1, 2)})
        path = tmp_path / "map.json"
        m.save(path)
        doc = json.loads(path.read_text())
        assert doc["shared_size"] == 8
        assert doc["suppressed"] == [9, 10]
        assert doc["expansions"] == {"8": [1, 2]}

    def test_malformed_document_rejected(self):
        with pytest.raises(VocabularyAlignmentError, match="malformed"):
            VocabularyMap.from_json_dict({"suppressed": []})
