import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lexcorpus.clients import ClientError, StubGenerator, StubJudge
from lexcorpus.instruct import (InstructionRecord, MalformedRecord, PreferencePair,
                                Turn, build_preference_pair, curate_instructions,
                                dpo_objective, emit_stage_config,
                                read_instruction_jsonl, synth_legal_dialogue,
                                write_instruction_jsonl)
from lexcorpus.records import CleanDocument


def record(id, roles_texts, origin="o"):
    return InstructionRecord(id=id, origin=origin,
                             turns=tuple(Turn(r, t) for r, t in roles_texts))


def legal_doc(id="doc1"):
    return CleanDocument(id=id, source="s", text="The statute provides relief.",
                         metadata={"document_type": "statute", "issue_date": "1998-04-01"})


class TestCuration:
    def test_exact_duplicates_collapse(self):
        recs = [record("a", [("user", "q"), ("assistant", "r")]),
                record("b", [("user", "q"), ("assistant", "r")])]
        kept, report = curate_instructions(recs)
        assert [r.id for r in kept] == ["a"]
        assert report.dropped_duplicates == 1

    def test_consecutive_user_turns_dropped(self):
        recs = [record("bad", [("user", "q1"), ("user", "q2")]),
                record("ok", [("user", "q"), ("assistant", "r")])]
        kept, report = curate_instructions(recs)
        assert [r.id for r in kept] == ["ok"]
        assert report.dropped_malformed == 1

    def test_empty_turn_dropped(self):
        recs = [record("bad", [("user", "")])]
        kept, report = curate_instructions(recs)
        assert not kept and report.dropped_malformed == 1

    def test_retention_report_sums_to_output(self):
        recs = [record(f"a{i}", [("user", f"q{i}"), ("assistant", f"r{i}")], origin="x")
                for i in range(5)]
        recs += [record(f"b{i}", [("user", f"s{i}")], origin="y") for i in range(3)]
        kept, report = curate_instructions(recs)
        assert report.retained_total == len(kept)
        assert report.retained_by_origin == {"x": 5, "y": 3}


class TestDialogueSynthesis:
    def test_depth_3_roles(self):
        rec = synth_legal_dialogue(legal_doc(), depth=3, generator=StubGenerator())
        assert [t.role for t in rec.turns] == ["user", "assistant", "user"]

    def test_turn_2_mentions_metadata(self):
        rec = synth_legal_dialogue(legal_doc(), depth=3, generator=StubGenerator())
        assert "statute" in rec.turns[1].text
        assert "1998-04-01" in rec.turns[1].text

    def test_depth_5_alternates(self):
        rec = synth_legal_dialogue(legal_doc(), depth=5, generator=StubGenerator())
        assert [t.role for t in rec.turns] == ["user", "assistant", "user",
                                               "assistant", "user"]

    def test_generator_failure_skips_record(self):
        class Failing:
            def generate(self, prompt):
                raise ClientError("timeout")
        assert synth_legal_dialogue(legal_doc(), 3, Failing()) is None

    def test_deterministic_with_stub(self):
        r1 = synth_legal_dialogue(legal_doc(), 4, StubGenerator())
        r2 = synth_legal_dialogue(legal_doc(), 4, StubGenerator())
        assert r1 == r2


class FixedJudge:
    def __init__(self, scores):
        self.scores = list(scores)
        self.i = 0

    def score(self, prompt, response):
        s = self.scores[self.i]
        self.i += 1
        return {"factual_accuracy": s, "relevance": s, "logical_coherence": s}


class TestPreferencePairs:
    def test_argmax_chosen(self):
        pair = build_preference_pair("p", ["good", "bad"], FixedJudge([0.9, 0.2]))
        assert pair.chosen == "good" and pair.rejected == "bad"

    def test_tie_breaks_to_first(self):
        pair = build_preference_pair("p", ["first", "second"], FixedJudge([0.5, 0.5]))
        assert pair.chosen == "first" and pair.rejected == "second"

    def test_three_candidates(self):
        pair = build_preference_pair("p", ["a", "b", "c"], FixedJudge([0.5, 0.9, 0.1]))
        assert pair.chosen == "b" and pair.rejected == "c"

    def test_scores_recorded(self):
        pair = build_preference_pair("p", ["a", "b"], StubJudge())
        assert set(pair.judge_scores) == {"chosen", "rejected"}
        chosen_mean = sum(pair.judge_scores["chosen"].values()) / 3
        rejected_mean = sum(pair.judge_scores["rejected"].values()) / 3
        assert chosen_mean >= rejected_mean

    def test_needs_two_candidates(self):
        with pytest.raises(ValueError):
            build_preference_pair("p", ["only"], StubJudge())

    def test_permutation_invariant_with_distinct_scores(self):
        class ByText:
            def score(self, prompt, response):
                v = {"a": 0.2, "b": 0.9, "c": 0.4}[response]
                return {"factual_accuracy": v, "relevance": v, "logical_coherence": v}
        p1 = build_preference_pair("p", ["a", "b", "c"], ByText())
        p2 = build_preference_pair("p", ["c", "a", "b"], ByText())
        assert (p1.chosen, p1.rejected) == (p2.chosen, p2.rejected) == ("b", "a")


class TestDPOObjective:
    def test_zero_margin_is_ln2(self):
        for beta in (0.05, 0.1, 1.0):
            loss, _ = dpo_objective(-3.0, -3.0, -3.0, -3.0, beta=beta)
            assert loss == pytest.approx(math.log(2), abs=1e-12)

    def test_monotone_decreasing_in_margin(self):
        losses = [dpo_objective(m, 0.0, 0.0, 0.0, beta=0.1)[0]
                  for m in np.linspace(-50, 50, 41)]
        assert all(a > b for a, b in zip(losses, losses[1:]))
        assert all(l > 0 for l in losses)

    def test_large_margin_loss_vanishes(self):
        loss, _ = dpo_objective(1000.0, 0.0, 0.0, 0.0, beta=1.0)
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(0)
        h = 1e-6
        for _ in range(100):
            args = list(rng.normal(scale=3.0, size=4))
            beta = float(rng.uniform(0.05, 2.0))
            _, grads = dpo_objective(*args, beta=beta)
            for i in range(4):
                hi = list(args); hi[i] += h
                lo = list(args); lo[i] -= h
                fd = (dpo_objective(*hi, beta=beta)[0]
                      - dpo_objective(*lo, beta=beta)[0]) / (2 * h)
                denom = max(abs(fd), abs(grads[i]), 1e-8)
                assert abs(fd - grads[i]) / denom < 1e-6

    def test_beta_must_be_positive(self):
        with pytest.raises(ValueError):
            dpo_objective(0, 0, 0, 0, beta=0)

    @settings(max_examples=100)
    @given(st.floats(-20, 20), st.floats(-20, 20), st.floats(-20, 20), st.floats(-20, 20))
    def test_loss_always_positive(self, pc, pr, rc, rr):
        loss, _ = dpo_objective(pc, pr, rc, rr, beta=0.1)
        assert loss > 0


class TestStageConfigs:
    def test_pretrain(self):
        cfg = emit_stage_config("pretrain")
        assert cfg.learning_rate == 2e-5
        assert cfg.grad_accumulation == 4
        assert (cfg.beta1, cfg.beta2) == (0.99, 0.90)
        assert cfg.batch_size == 8

    def test_pretrain_large_profile(self):
        assert emit_stage_config("pretrain", profile="large").batch_size == 4

    def test_ift(self):
        cfg = emit_stage_config("ift")
        assert cfg.learning_rate == 1e-5
        assert cfg.epochs == 1

    def test_dpo(self):
        assert emit_stage_config("dpo").learning_rate == 1e-6

    def test_unknown_stage(self):
        with pytest.raises(ValueError):
            emit_stage_config("rlhf")


def test_instruction_jsonl_round_trip(tmp_path):
    recs = [record("a", [("user", "q"), ("assistant", "r")])]
    path = tmp_path / "instr.jsonl"
    assert write_instruction_jsonl(path, recs) == 1
    assert read_instruction_jsonl(path) == recs
