from __future__ import annotations

import json
import math

import pytest

from miwv.dataset import (
    ALPACA_PROFILE,
    PromptText,
    ZERO_SHOT,
    load_dataset,
    render_instruction,
    render_one_shot_prompt,
)
from miwv.errors import (
    BackendUnavailableError,
    ConfigError,
    ContextOverflowError,
    EmptyResponseSpanError,
    MalformedResponseError,
)
from miwv.fnv import FNV64_OFFSET, FNV64_PRIME
from miwv.retrieval import NeighborAssignment
from miwv.scoring import (
    HashMockScorer,
    MiwvRecord,
    NgramReferenceScorer,
    RejectedSample,
    TokenLogProb,
    _one_shot_within_limit,
    compute_miwv,
    load_score_lines,
    locate_response_span,
    make_scorer,
    parse_score_line,
    record_line,
    response_loss,
    save_score_lines,
    score_corpus,
    score_tokens,
)

from conftest import FIXTURES
from doubles import (
    ConstantScorer,
    FailingScorer,
    LastTwoBytesScorer,
    ListScorer,
    ShiftedScorer,
)

MASK64 = (1 << 64) - 1
CORPUS = FIXTURES / "ngram_corpus.txt"


def mock_logprob_oracle(text: str) -> list[float]:
    """Recompute the hash-mock formula with an explicit prefix rescan."""
    data = text.encode("utf-8")
    out = []
    for i in range(len(data)):
        h = FNV64_OFFSET
        for b in data[: i + 1]:
            h = ((h ^ b) * FNV64_PRIME) & MASK64
        out.append(-(1.0 + (h % 1000) / 1000.0))
    return out


class TestHashMock:
    def test_frozen_two_byte_case(self):
        tokens = HashMockScorer().score("ab")
        assert [(t.token_text, t.char_start) for t in tokens] == [("a", 0), ("b", 1)]
        assert tokens[0].logprob == -1.996
        assert tokens[1].logprob == -1.762

    def test_matches_prefix_rescan_oracle(self):
        for text in ("ab", "hello", "Gebäcke im Café", "\n\n### Response:\n"):
            got = [t.logprob for t in HashMockScorer().score(text)]
            assert got == mock_logprob_oracle(text)

    def test_byte_tokens_and_offsets(self):
        tokens = HashMockScorer().score("Café")
        # UTF-8 encodes é as two bytes, so four chars become five tokens
        assert len(tokens) == 5
        assert [t.char_start for t in tokens] == [0, 1, 2, 3, 4]
        assert all(len(t.token_text) == 1 for t in tokens)

    def test_logprobs_in_declared_band(self):
        for tok in HashMockScorer().score("band check 0123"):
            assert -2.0 <= tok.logprob <= -1.0


class TestNgramReference:
    def test_matches_count_oracle(self):
        corpus = CORPUS.read_bytes()
        counts: dict[bytes, dict[int, int]] = {}
        totals: dict[bytes, int] = {}
        for i in range(2, len(corpus)):
            ctx = corpus[i - 2 : i]
            counts.setdefault(ctx, {})
            counts[ctx][corpus[i]] = counts[ctx].get(corpus[i], 0) + 1
            totals[ctx] = totals.get(ctx, 0) + 1

        def oracle_lp(prev2: bytes, b: int) -> float:
            num = counts.get(prev2, {}).get(b, 0) + 1
            den = totals.get(prev2, 0) + 256
            return math.log(num / den)

        scorer = NgramReferenceScorer(CORPUS)
        text = "abab ba"
        data = text.encode("utf-8")
        padded = b"\x00\x00" + data
        want = [oracle_lp(padded[i : i + 2], data[i]) for i in range(len(data))]
        got = [t.logprob for t in scorer.score(text)]
        assert got == pytest.approx(want, abs=1e-12)

    def test_distribution_sums_to_one(self):
        scorer = NgramReferenceScorer(CORPUS)
        for ctx in (b"ab", b"", b"zq"):
            # probe p(b | ctx) for every byte value via the padded scorer
            total = sum(
                math.exp(scorer._byte_logprobs(ctx + bytes([b]))[-1])
                for b in range(256)
            )
            assert total == pytest.approx(1.0, abs=1e-9)

    def test_all_finite_nonpositive(self):
        for tok in NgramReferenceScorer(CORPUS).score("never seen Zq!?"):
            assert tok.logprob is not None
            assert math.isfinite(tok.logprob) and tok.logprob <= 0.0


class TestSpanLocation:
    def tokens(self, offsets, lengths):
        return [
            TokenLogProb(token_text="x" * ln, char_start=off, logprob=-1.0)
            for off, ln in zip(offsets, lengths)
        ]

    def test_clean_boundary(self):
        toks = self.tokens([0, 5, 9], [5, 4, 5])
        assert locate_response_span(toks, 9) == (2, 3)

    def test_straddling_token_included(self):
        toks = self.tokens([0, 5, 9], [5, 4, 5])
        assert locate_response_span(toks, 7) == (1, 3)

    def test_boundary_at_text_end_is_empty(self):
        toks = self.tokens([0, 5, 9], [5, 4, 5])
        with pytest.raises(EmptyResponseSpanError):
            locate_response_span(toks, 14)

    def test_zero_boundary_is_whole_text(self):
        toks = self.tokens([0, 5, 9], [5, 4, 5])
        assert locate_response_span(toks, 0) == (0, 3)


class TestScoreTokensContract:
    def canned(self, *triples):
        return ListScorer([TokenLogProb(*t) for t in triples])

    def test_offsets_must_start_at_zero(self):
        scorer = self.canned(("ab", 1, -1.0))
        with pytest.raises(MalformedResponseError):
            score_tokens(scorer, "abc")

    def test_offsets_must_increase(self):
        scorer = self.canned(("ab", 0, -1.0), ("c", 0, -1.0))
        with pytest.raises(MalformedResponseError):
            score_tokens(scorer, "abc")

    def test_positive_logprob_rejected(self):
        scorer = self.canned(("ab", 0, -1.0), ("c", 2, 0.5))
        with pytest.raises(MalformedResponseError):
            score_tokens(scorer, "abc")

    def test_nan_logprob_rejected(self):
        scorer = self.canned(("ab", 0, float("nan")), ("c", 2, -1.0))
        with pytest.raises(MalformedResponseError):
            score_tokens(scorer, "abc")

    def test_null_only_allowed_first(self):
        ok = self.canned(("ab", 0, None), ("c", 2, -1.0))
        toks = score_tokens(ok, "abc")
        assert toks[0].logprob is None
        bad = self.canned(("ab", 0, -1.0), ("c", 2, None))
        with pytest.raises(MalformedResponseError):
            score_tokens(bad, "abc")

    def test_empty_text_rejected(self):
        with pytest.raises(ValueError):
            score_tokens(HashMockScorer(), "")

    def test_context_limit_enforced(self):
        scorer = HashMockScorer(context_limit=4)
        with pytest.raises(ContextOverflowError):
            score_tokens(scorer, "too long")


class TestResponseLoss:
    def prompt(self, text: str) -> PromptText:
        return PromptText(text=text, kind=ZERO_SHOT)

    def test_probability_one_gives_zero(self):
        scorer = ConstantScorer(0.0)
        loss = response_loss(scorer, self.prompt("Q: hi\nA: "), "sure")
        assert loss.sum_nll == 0.0
        assert loss.token_count == 4
        assert loss.mean_nll == 0.0

    def test_uniform_sixteen(self):
        scorer = ConstantScorer(-math.log(16.0))
        loss = response_loss(scorer, self.prompt("p"), "response text")
        assert loss.mean_nll == pytest.approx(math.log(16.0), rel=1e-12)

    def test_token_count_is_response_bytes(self):
        prompt = self.prompt("Frage: Café?\nAntwort: ")
        response = "Gebäck schmeckt."
        loss = response_loss(HashMockScorer(), prompt, response)
        assert loss.token_count == len(response.encode("utf-8"))

    def test_null_first_logprob_never_counts(self):
        # boundary 0 makes the whole text the span; the null first token
        # must be excluded from both the sum and the count
        scorer = ListScorer(
            [
                TokenLogProb("ab", 0, None),
                TokenLogProb("cd", 2, -2.0),
            ]
        )
        loss = response_loss(scorer, self.prompt(""), "abcd")
        assert loss.token_count == 1
        assert loss.sum_nll == 2.0

    def test_empty_response_rejected(self):
        with pytest.raises(EmptyResponseSpanError):
            response_loss(HashMockScorer(), self.prompt("prompt"), "")

    def test_mean_is_sequential_sum_then_divide(self):
        prompt = self.prompt("p: ")
        response = "abcdefgh"
        tokens = HashMockScorer().score(prompt.text + response)
        boundary = len((prompt.text).encode("utf-8"))
        expected = 0.0
        count = 0
        for tok in tokens:
            if tok.char_start >= boundary:
                expected += -tok.logprob
                count += 1
        loss = response_loss(HashMockScorer(), prompt, response)
        assert loss.sum_nll == expected
        assert loss.mean_nll == expected / count


class TestMiwv:
    def fixture(self):
        return load_dataset(FIXTURES / "fixture_dataset.json", "alpaca-json")

    def assignment(self, i=11, k=3):
        return NeighborAssignment(query_id=i, neighbor_id=k, similarity=0.5, tie_count=1)

    def test_constant_scorer_gives_exact_difference(self):
        ds = self.fixture()
        zero_need = len(
            (render_instruction(ds[11]).text + ds[11].response).encode("utf-8")
        )
        # per-byte constant depends on whether the example precedes the target
        scorer = ConstantScorer(lambda data: -2.0 if len(data) > zero_need else -1.5)
        rec = compute_miwv(scorer, ds[11], ds[3], self.assignment(), ALPACA_PROFILE)
        assert rec.loss.mean_nll == 1.5
        assert rec.loss_cond.mean_nll == 2.0
        assert rec.miwv == 0.5
        assert rec.truncated is False

    def test_bounded_context_scorer_cancels_exactly(self):
        ds = self.fixture()
        scorer = LastTwoBytesScorer()
        for i, k in ((11, 3), (0, 19), (14, 2)):
            rec = compute_miwv(
                scorer, ds[i], ds[k],
                NeighborAssignment(i, k, 0.9, 1), ALPACA_PROFILE,
            )
            assert rec.loss.sum_nll == rec.loss_cond.sum_nll
            assert rec.miwv == 0.0

    def test_hash_mock_is_context_sensitive(self):
        ds = self.fixture()
        rec = compute_miwv(
            HashMockScorer(), ds[11], ds[3], self.assignment(), ALPACA_PROFILE
        )
        assert rec.miwv != 0.0
        assert rec.loss.token_count == rec.loss_cond.token_count

    def test_shift_invariance(self):
        ds = self.fixture()
        base = compute_miwv(
            HashMockScorer(), ds[11], ds[3], self.assignment(), ALPACA_PROFILE
        )
        for shift in (-2.0, 0.7):
            shifted = compute_miwv(
                ShiftedScorer(HashMockScorer(), shift),
                ds[11], ds[3], self.assignment(), ALPACA_PROFILE,
            )
            assert shifted.loss.mean_nll - base.loss.mean_nll == pytest.approx(
                -shift, abs=1e-9
            )
            assert shifted.loss_cond.mean_nll - base.loss_cond.mean_nll == pytest.approx(
                -shift, abs=1e-9
            )
            assert shifted.miwv == pytest.approx(base.miwv, abs=1e-9)

    def test_assignment_mismatch_rejected(self):
        ds = self.fixture()
        with pytest.raises(ValueError):
            compute_miwv(
                HashMockScorer(), ds[11], ds[4], self.assignment(), ALPACA_PROFILE
            )

    def test_prompt_loss_is_conditioned_mean(self):
        ds = self.fixture()
        rec = compute_miwv(
            HashMockScorer(), ds[11], ds[3], self.assignment(), ALPACA_PROFILE
        )
        assert rec.prompt_loss == rec.loss_cond.mean_nll
        assert rec.miwv == rec.loss_cond.mean_nll - rec.loss.mean_nll


class TestTruncation:
    def fixture(self):
        return load_dataset(FIXTURES / "fixture_dataset.json", "alpaca-json")

    def room_for(self, example, target):
        """Backend units needed with the example response fully removed."""
        from dataclasses import replace

        scorer = HashMockScorer()
        stripped = render_one_shot_prompt(
            replace(example, response=""), target, ALPACA_PROFILE
        )
        return scorer.measure(stripped.text + target.response)

    def test_example_response_truncated_from_end(self):
        ds = self.fixture()
        example, target = ds[3], ds[11]
        full_need = HashMockScorer().measure(
            render_one_shot_prompt(example, target, ALPACA_PROFILE).text
            + target.response
        )
        limit = full_need - 5
        scorer = HashMockScorer(context_limit=limit)
        prompt, truncated = _one_shot_within_limit(scorer, example, target, ALPACA_PROFILE)
        assert truncated is True
        assert scorer.measure(prompt.text + target.response) <= limit
        # the kept example response is a strict prefix of the original
        zero = render_instruction(target, ALPACA_PROFILE).text
        kept = prompt.text[: -len("\n\n" + zero)]
        example_prompt = render_instruction(example, ALPACA_PROFILE).text
        assert kept.startswith(example_prompt)
        kept_response = kept[len(example_prompt):]
        assert example.response.startswith(kept_response)
        assert len(kept_response) < len(example.response)
        # the target side is intact
        assert prompt.text.endswith(zero)

    def test_truncated_flag_on_record(self):
        ds = self.fixture()
        example, target = ds[3], ds[11]
        full_need = HashMockScorer().measure(
            render_one_shot_prompt(example, target, ALPACA_PROFILE).text
            + target.response
        )
        scorer = HashMockScorer(context_limit=full_need - 5)
        rec = compute_miwv(
            scorer, target, example,
            NeighborAssignment(target.id, example.id, 0.5, 1), ALPACA_PROFILE,
        )
        assert rec.truncated is True
        # target response is never cut: both spans still cover all its bytes
        want = len(target.response.encode("utf-8"))
        assert rec.loss.token_count == want
        assert rec.loss_cond.token_count == want

    def test_overflow_with_example_removed_rejected(self):
        ds = self.fixture()
        example, target = ds[3], ds[11]
        limit = self.room_for(example, target) - 1
        scorer = HashMockScorer(context_limit=limit)
        with pytest.raises(ContextOverflowError):
            _one_shot_within_limit(scorer, example, target, ALPACA_PROFILE)

    def test_zero_shot_overflow_rejected(self):
        ds = self.fixture()
        target = ds[11]
        need = HashMockScorer().measure(
            render_instruction(target, ALPACA_PROFILE).text + target.response
        )
        scorer = HashMockScorer(context_limit=need - 1)
        with pytest.raises(ContextOverflowError):
            compute_miwv(
                scorer, target, ds[3],
                NeighborAssignment(target.id, 3, 0.5, 1), ALPACA_PROFILE,
            )


class TestScoreCorpus:
    def fixture(self):
        return load_dataset(FIXTURES / "fixture_dataset.json", "alpaca-json")

    def assignments(self, ds):
        n = ds.n
        return [
            NeighborAssignment(i, (i + 1) % n, 0.5, 1) for i in range(n)
        ]

    def test_scores_everything_in_order(self):
        ds = self.fixture()
        records, rejects = score_corpus(
            HashMockScorer(), ds, self.assignments(ds), ALPACA_PROFILE
        )
        assert [r.sample_id for r in records] == list(range(ds.n))
        assert rejects == []

    def test_parallel_equals_serial(self):
        ds = self.fixture()
        serial, _ = score_corpus(
            HashMockScorer(), ds, self.assignments(ds), ALPACA_PROFILE
        )
        parallel, _ = score_corpus(
            HashMockScorer(), ds, self.assignments(ds), ALPACA_PROFILE,
            max_in_flight=4,
        )
        assert [record_line(a) for a in serial] == [record_line(b) for b in parallel]

    def test_skip_ids(self):
        ds = self.fixture()
        records, _ = score_corpus(
            HashMockScorer(), ds, self.assignments(ds), ALPACA_PROFILE,
            skip_ids={0, 5, 19},
        )
        assert [r.sample_id for r in records] == [
            i for i in range(ds.n) if i not in {0, 5, 19}
        ]

    def test_per_sample_failures_become_rejects(self):
        ds = self.fixture()
        # a limit that admits most samples but not all
        needs = []
        scorer = HashMockScorer()
        for i, a in enumerate(self.assignments(ds)):
            text = render_one_shot_prompt(
                ds[a.neighbor_id], ds[i], ALPACA_PROFILE
            ).text
            needs.append(scorer.measure(text + ds[i].response))
        limit = sorted(needs)[ds.n // 2]
        tight = HashMockScorer(context_limit=limit)
        records, rejects = score_corpus(
            tight, ds, self.assignments(ds), ALPACA_PROFILE
        )
        assert rejects, "expected at least one reject under the tight limit"
        assert len(records) + len(rejects) == ds.n
        assert all(isinstance(r, RejectedSample) for r in rejects)
        assert all("context" in r.error or "span" in r.error for r in rejects)
        scored_ids = {r.sample_id for r in records}
        reject_ids = {r.sample_id for r in rejects}
        assert scored_ids.isdisjoint(reject_ids)

    def test_backend_unavailable_aborts(self):
        ds = self.fixture()
        scorer = FailingScorer(BackendUnavailableError("backend down"), succeed_first=4)
        with pytest.raises(BackendUnavailableError):
            score_corpus(scorer, ds, self.assignments(ds), ALPACA_PROFILE)

    def test_on_result_streams_everything(self):
        ds = self.fixture()
        seen: list[int] = []
        score_corpus(
            HashMockScorer(), ds, self.assignments(ds), ALPACA_PROFILE,
            on_result=lambda r: seen.append(r.sample_id),
        )
        assert sorted(seen) == list(range(ds.n))


class TestRecordSerialization:
    def sample_record(self):
        from miwv.scoring import LossValue

        return MiwvRecord(
            sample_id=4,
            neighbor_id=9,
            similarity=0.87654321055,
            loss=LossValue(12.5, 10),
            loss_cond=LossValue(11.0, 10),
            truncated=False,
        )

    def test_key_order_and_rounding(self):
        line = record_line(self.sample_record())
        row = json.loads(line)
        assert list(row) == [
            "i", "k", "sim", "loss", "loss_cond", "A", "A_cond", "miwv", "truncated",
        ]
        assert row["sim"] == 0.876543211
        assert row["A"] == 10 and row["A_cond"] == 10
        assert row["loss"] == 1.25 and row["loss_cond"] == 1.1
        assert " " not in line

    def test_round_trip(self, tmp_path):
        rec = self.sample_record()
        path = tmp_path / "scores.jsonl"
        save_score_lines([rec], path)
        loaded = load_score_lines(path)
        assert len(loaded) == 1
        got = loaded[0]
        assert got.sample_id == 4 and got.neighbor_id == 9
        assert got.loss == 1.25 and got.loss_cond == 1.1
        assert got.miwv == rec.miwv
        assert got.a == 10 and got.a_cond == 10
        again = parse_score_line(record_line(rec))
        assert again == got


class TestScorerFactory:
    def test_hash_mock(self):
        scorer = make_scorer("hash-mock", "hash-mock")
        assert isinstance(scorer, HashMockScorer)

    def test_ngram_requires_corpus(self):
        with pytest.raises(ConfigError):
            make_scorer("ngram-reference", "ngram-reference")
        scorer = make_scorer("ngram-reference", "ngram-reference", corpus_path=CORPUS)
        assert isinstance(scorer, NgramReferenceScorer)

    def test_remote_requires_base_url(self):
        with pytest.raises(ConfigError):
            make_scorer("remote", "some-model")

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            make_scorer("telepathy", "m")
