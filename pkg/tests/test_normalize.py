import sys
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lexcorpus.normalize import (ExtractionFailed, Rule, RuleConfigError, RuleSet,
                                 apply_rule_filters, count_repeated_ngrams,
                                 default_ruleset, extract_text, normalize_nfkc,
                                 repair_lines)
from lexcorpus.records import CleanDocument

from conftest import make_docs


def doc(text, id="d1"):
    return CleanDocument(id=id, source="s", text=text)


class TestExtractText:
    def test_plain_identity(self):
        assert extract_text(b"hello", "plain") == "hello"

    def test_html_strips_tags(self):
        assert extract_text(b"<p>Hello</p>", "html").strip() == "Hello"

    def test_html_entities(self):
        assert extract_text(b"a &amp; b", "html") == "a & b"

    def test_external_stub(self):
        out = extract_text(b"ignored", "external",
                           external_command=[sys.executable, "-c", "print('X')"])
        assert out.strip() == "X"

    def test_external_failure_carries_stderr(self):
        cmd = [sys.executable, "-c", "import sys; sys.stderr.write('boom'); sys.exit(3)"]
        with pytest.raises(ExtractionFailed, match="boom"):
            extract_text(b"", "external", external_command=cmd)

    def test_unknown_format(self):
        with pytest.raises(ValueError):
            extract_text(b"", "pdf")


class TestNFKC:
    def test_ligature(self):
        assert normalize_nfkc("ﬁ") == "fi"

    def test_circled_digit(self):
        assert normalize_nfkc("①") == "1"

    @settings(max_examples=200)
    @given(st.text(max_size=200))
    def test_idempotent(self, text):
        once = normalize_nfkc(text)
        assert normalize_nfkc(once) == once

    def test_idempotent_on_fixture_corpus(self):
        for d in make_docs(seed=3, count=100):
            once = normalize_nfkc(d.text)
            assert normalize_nfkc(once) == once


class TestRepairLines:
    def test_joins_broken_line(self):
        assert repair_lines("the court\nheld that") == "the court held that"

    def test_keeps_sentence_boundary(self):
        assert repair_lines("held that.\nThe court") == "held that.\nThe court"

    def test_keeps_line_before_uppercase(self):
        assert repair_lines("the court\nHeld that") == "the court\nHeld that"

    def test_empty(self):
        assert repair_lines("") == ""

    def test_paragraph_breaks_preserved(self):
        text = "first paragraph.\n\nsecond paragraph."
        assert repair_lines(text) == text


class TestRuleFilters:
    def test_page_number_removed(self):
        rules = RuleSet(removal_patterns=[Rule("page", r"^Page \d+\n")])
        outcome = apply_rule_filters(doc("Page 42\nThe statute applies."), rules)
        assert outcome.doc.text == "The statute applies."
        assert not outcome.rejected

    def test_no_rule_matches_is_noop(self):
        rules = RuleSet(removal_patterns=[Rule("page", r"^Page \d+\n")])
        outcome = apply_rule_filters(doc("The statute applies."), rules)
        assert outcome.doc.text == "The statute applies."

    def test_reject_pattern(self):
        rules = RuleSet(reject_patterns=[Rule("spam", r"BUY NOW", action="reject")])
        outcome = apply_rule_filters(doc("great deal BUY NOW"), rules)
        assert outcome.rejected
        assert outcome.reason == "spam"

    def test_removal_order_matters(self):
        # first rule removes the text the second would have rejected on
        rules = RuleSet(removal_patterns=[Rule("strip", r"BUY NOW")],
                        reject_patterns=[Rule("spam", r"BUY NOW", action="reject")])
        outcome = apply_rule_filters(doc("x BUY NOW y"), rules)
        assert not outcome.rejected

    def test_duplicate_rule_names_rejected(self):
        with pytest.raises(RuleConfigError):
            RuleSet(removal_patterns=[Rule("a", "x"), Rule("a", "y")])

    def test_bad_pattern_fails_at_load(self):
        with pytest.raises(RuleConfigError):
            RuleSet(removal_patterns=[Rule("broken", "(")])

    def test_config_round_trip(self):
        rules = default_ruleset()
        again = RuleSet.from_config(rules.to_config())
        assert again.to_config() == rules.to_config()


class TestRepeatedNgrams:
    def test_frequent_repeated_gram_removed(self):
        texts = ["----------\nsome text"] * 200
        stats = count_repeated_ngrams(texts, n=10)
        assert stats["-" * 10] == 200
        rules = RuleSet(repeated_ngram_min_count=100)
        outcome = apply_rule_filters(doc(texts[0]), rules, stats)
        assert "-" * 10 not in outcome.doc.text
        assert "some text" in outcome.doc.text

    def test_rare_gram_survives(self):
        stats = Counter({"-" * 10: 5})
        rules = RuleSet(repeated_ngram_min_count=100)
        outcome = apply_rule_filters(doc("----------x"), rules, stats)
        assert "-" * 10 in outcome.doc.text

    def test_long_runs_count_overlapping(self):
        stats = count_repeated_ngrams(["-" * 20], n=10)
        assert stats["-" * 10] == 11

    def test_permutation_invariance_per_document(self):
        docs = make_docs(seed=11, count=20)
        rules = default_ruleset()
        stats = count_repeated_ngrams((d.text for d in docs))
        out_fwd = [apply_rule_filters(d, rules, stats).doc.text for d in docs]
        out_rev = [apply_rule_filters(d, rules, stats).doc.text for d in reversed(docs)]
        assert out_fwd == list(reversed(out_rev))

    def test_emitted_text_never_matches_reject_rule(self):
        rules = RuleSet(reject_patterns=[Rule("held", r"held", action="reject")])
        for d in make_docs(seed=5, count=30):
            outcome = apply_rule_filters(d, rules)
            if not outcome.rejected:
                assert "held" not in outcome.doc.text
