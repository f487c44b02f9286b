"""Scorer test doubles used across the test modules.

All of these speak UTF-8 byte units so that span boundaries and token
counts are easy to predict from the text alone.
"""

from __future__ import annotations

from collections.abc import Callable

from miwv.fnv import fnv1a64
from miwv.scoring import (
    HashMockScorer,
    ScorerBackend,
    SingleByteScorer,
    TokenLogProb,
)


class ConstantScorer(SingleByteScorer):
    """Assigns the same log probability to every byte of a text.

    ``value`` may be a float or a callable taking the UTF-8 payload, which
    lets a test make the per-token constant depend on the scored text (for
    example to force a specific loss difference).
    """

    kind = "test-constant"
    model_id = "constant"

    def __init__(
        self,
        value: float | Callable[[bytes], float],
        *,
        context_limit: int = 1_000_000,
    ) -> None:
        self.context_limit = context_limit
        self._value = value

    def _byte_logprobs(self, data: bytes) -> list[float]:
        v = self._value(data) if callable(self._value) else self._value
        return [v] * len(data)


class LastTwoBytesScorer(SingleByteScorer):
    """Deterministic scorer whose context window is exactly two bytes.

    The log probability of a byte depends only on that byte and the two
    preceding bytes (NUL-padded at the start), so any conditioning that
    ends at least two bytes before the response leaves response token
    scores bit-for-bit unchanged.
    """

    kind = "test-bounded"
    model_id = "last-two-bytes"

    def __init__(self, *, context_limit: int = 1_000_000) -> None:
        self.context_limit = context_limit

    def _byte_logprobs(self, data: bytes) -> list[float]:
        padded = b"\x00\x00" + data
        out = []
        for pos in range(len(data)):
            window = padded[pos : pos + 3]
            out.append(-(1.0 + (fnv1a64(window) % 97) / 97.0))
        return out


class ShiftedScorer(ScorerBackend):
    """Wraps another scorer and adds a constant to every log probability."""

    def __init__(self, inner: ScorerBackend, shift: float) -> None:
        self.kind = inner.kind
        self.model_id = f"{inner.model_id}+{shift}"
        self.context_limit = inner.context_limit
        self._inner = inner
        self._shift = shift

    def score(self, text: str) -> list[TokenLogProb]:
        shifted = []
        for tok in self._inner.score(text):
            lp = None if tok.logprob is None else tok.logprob + self._shift
            shifted.append(
                TokenLogProb(
                    token_text=tok.token_text, char_start=tok.char_start, logprob=lp
                )
            )
        return shifted

    def boundary_offset(self, prompt_text: str) -> int:
        return self._inner.boundary_offset(prompt_text)

    def measure(self, text: str) -> int:
        return self._inner.measure(text)


class ListScorer(ScorerBackend):
    """Returns a canned token list regardless of input; for parser tests."""

    kind = "test-canned"
    model_id = "canned"

    def __init__(self, tokens: list[TokenLogProb]) -> None:
        self._tokens = tokens

    def score(self, text: str) -> list[TokenLogProb]:
        return list(self._tokens)


class FailingScorer(ScorerBackend):
    """Raises a given exception after scoring ``succeed_first`` texts."""

    kind = "test-failing"
    model_id = "failing"

    def __init__(self, error: Exception, succeed_first: int = 0) -> None:
        self._error = error
        self._remaining = succeed_first
        self._inner = HashMockScorer()

    def score(self, text: str) -> list[TokenLogProb]:
        if self._remaining > 0:
            self._remaining -= 1
            return self._inner.score(text)
        raise self._error

    def boundary_offset(self, prompt_text: str) -> int:
        return self._inner.boundary_offset(prompt_text)

    def measure(self, text: str) -> int:
        return self._inner.measure(text)
