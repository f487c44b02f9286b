"""Response-loss scoring and the MIWV statistic.

For each sample the response is scored twice: once after its plain zero-shot
prompt and once after a one-shot prompt that prepends the nearest neighbor
as a worked example. Each scoring returns the mean negative log-likelihood
(natural log) per response token. MIWV is the conditioned mean minus the
unconditioned mean: a large positive value means one relevant example made
the response much easier to predict, i.e. the model had not internalized
that behavior.

Token bookkeeping: a backend reports (token_text, char_start, logprob)
triples covering the scored string from offset 0. The response span starts
at the first token whose text extends past the prompt/response boundary, so
a token straddling the boundary is included. Echo-style APIs return null for
the first token's logprob; that token is skipped in sums and token counts.
Mean losses are sequential sums in token order divided by the scored token
count, which keeps results bit-reproducible.

Offset units follow the backend's tokenizer: the builtin byte-level scorers
(hash-mock, ngram-reference) report byte offsets into the UTF-8 encoding,
remote completion backends report character offsets. Backends expose
``boundary_offset`` and ``measure`` so span location and context-limit
checks are always done in the right unit.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import FIRST_EXCEPTION, ThreadPoolExecutor, wait
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

from ._http import post_json
from .dataset import (
    Dataset,
    InstructionSample,
    PromptText,
    TemplateProfile,
    render_instruction,
    render_one_shot_prompt,
)
from .errors import (
    BackendUnavailableError,
    ContextOverflowError,
    EmptyResponseSpanError,
    MalformedResponseError,
    ParseError,
    PipelineError,
)
from .fnv import FNV64_OFFSET, fnv1a64_step
from .retrieval import SIM_DECIMALS, NeighborAssignment

DEFAULT_CONTEXT_LIMIT = 1_000_000


@dataclass(frozen=True)
class TokenLogProb:
    """One scored token.

    ``logprob`` is None only for a leading token an echo backend refuses to
    score; such tokens never contribute to sums or counts.
    """

    token_text: str
    char_start: int
    logprob: float | None


@dataclass(frozen=True)
class LossValue:
    sum_nll: float
    token_count: int

    @property
    def mean_nll(self) -> float:
        return self.sum_nll / self.token_count


@dataclass(frozen=True)
class MiwvRecord:
    sample_id: int
    neighbor_id: int
    similarity: float
    loss: LossValue  # response after the zero-shot prompt
    loss_cond: LossValue  # response after the one-shot prompt
    truncated: bool

    @property
    def miwv(self) -> float:
        return self.loss_cond.mean_nll - self.loss.mean_nll

    @property
    def prompt_loss(self) -> float:
        return self.loss_cond.mean_nll


@dataclass(frozen=True)
class ScoredSample:
    """One score-file row (the flattened form of a MiwvRecord)."""

    sample_id: int
    neighbor_id: int
    similarity: float
    loss: float
    loss_cond: float
    a: int
    a_cond: int
    miwv: float
    truncated: bool

    @property
    def prompt_loss(self) -> float:
        return self.loss_cond


@dataclass(frozen=True)
class RejectedSample:
    sample_id: int
    error: str


class ScorerBackend:
    """Base interface for loss backends."""

    kind: str = "abstract"
    model_id: str = "abstract"
    context_limit: int = DEFAULT_CONTEXT_LIMIT

    def score(self, text: str) -> list[TokenLogProb]:
        raise NotImplementedError

    def boundary_offset(self, prompt_text: str) -> int:
        """Length of the prompt in this backend's offset unit."""
        return len(prompt_text)

    def measure(self, text: str) -> int:
        """Length of a text in this backend's context-limit unit."""
        return len(text)


class SingleByteScorer(ScorerBackend):
    """Base for scorers whose tokens are single bytes of the UTF-8 text.

    Offsets and context measurements are byte offsets; each token's text is
    the byte's latin-1 character so its length is exactly one offset unit.
    """

    def boundary_offset(self, prompt_text: str) -> int:
        return len(prompt_text.encode("utf-8"))

    def measure(self, text: str) -> int:
        return len(text.encode("utf-8"))

    def score(self, text: str) -> list[TokenLogProb]:
        data = text.encode("utf-8")
        logprobs = self._byte_logprobs(data)
        return [
            TokenLogProb(token_text=chr(b), char_start=i, logprob=lp)
            for i, (b, lp) in enumerate(zip(data, logprobs))
        ]

    def _byte_logprobs(self, data: bytes) -> list[float]:
        raise NotImplementedError


class HashMockScorer(SingleByteScorer):
    """Deterministic context-sensitive mock.

    The logprob of byte t after the byte prefix s is
    ``-(1 + (fnv1a64(s + t) % 1000) / 1000)``, i.e. a value in [-2, -1] that
    depends on the entire prefix. Conditioned and unconditioned scores of
    the same response therefore differ, which makes the mock useful for
    exercising the full statistic without any model.
    """

    kind = "hash-mock"

    def __init__(self, model_id: str = "hash-mock", context_limit: int = DEFAULT_CONTEXT_LIMIT):
        self.model_id = model_id
        self.context_limit = context_limit

    def _byte_logprobs(self, data: bytes) -> list[float]:
        out: list[float] = []
        h = FNV64_OFFSET
        for b in data:
            h = fnv1a64_step(h, b)  # hash of the prefix ending at this byte
            out.append(-(1.0 + (h % 1000) / 1000.0))
        return out


class NgramReferenceScorer(SingleByteScorer):
    """Byte trigram model with add-1 smoothing, trained on a corpus file.

    ``p(b | prev2) = (count(prev2, b) + 1) / (count(prev2, .) + 256)`` where
    prev2 is the two preceding bytes; the first two positions of a scored
    text pad their context with NUL bytes. Because the context is at most
    two bytes, prepending a one-shot example cannot change any response
    token's distribution, so this backend's MIWV is identically zero. That
    property is what the test suite uses it for.
    """

    kind = "ngram-reference"

    def __init__(
        self,
        corpus_path: str | Path,
        model_id: str = "ngram-reference",
        context_limit: int = DEFAULT_CONTEXT_LIMIT,
    ):
        self.model_id = model_id
        self.context_limit = context_limit
        corpus = Path(corpus_path).read_bytes()
        counts: dict[bytes, list[int]] = {}
        totals: dict[bytes, int] = {}
        for i in range(len(corpus) - 2):
            prev2 = corpus[i : i + 2]
            nxt = corpus[i + 2]
            row = counts.get(prev2)
            if row is None:
                row = [0] * 256
                counts[prev2] = row
            row[nxt] += 1
            totals[prev2] = totals.get(prev2, 0) + 1
        self._counts = counts
        self._totals = totals

    def _byte_logprobs(self, data: bytes) -> list[float]:
        padded = b"\x00\x00" + data
        out: list[float] = []
        for i, b in enumerate(data):
            prev2 = padded[i : i + 2]
            row = self._counts.get(prev2)
            num = (row[b] if row is not None else 0) + 1
            den = self._totals.get(prev2, 0) + 256
            out.append(math.log(num / den))
        return out


class RemoteScorer(ScorerBackend):
    """Client for a POST {base_url}/v1/completions endpoint with echo.

    The request asks for zero generated tokens with ``echo`` and per-token
    logprobs; the reply's parallel ``tokens`` / ``token_logprobs`` /
    ``text_offset`` arrays describe the prompt's own tokens.
    """

    kind = "remote"

    def __init__(
        self,
        base_url: str,
        model_id: str,
        context_limit: int = DEFAULT_CONTEXT_LIMIT,
        *,
        timeout: float = 120.0,
        retries: int = 2,
    ):
        self.base_url = base_url.rstrip("/")
        self.model_id = model_id
        self.context_limit = context_limit
        self.timeout = timeout
        self.retries = retries

    def score(self, text: str) -> list[TokenLogProb]:
        reply = post_json(
            f"{self.base_url}/v1/completions",
            {
                "model": self.model_id,
                "prompt": text,
                "max_tokens": 0,
                "echo": True,
                "logprobs": 1,
            },
            timeout=self.timeout,
            retries=self.retries,
        )
        choices = reply.get("choices")
        if not isinstance(choices, list) or not choices or not isinstance(choices[0], dict):
            raise MalformedResponseError("completions reply has no choices")
        lp = choices[0].get("logprobs")
        if not isinstance(lp, dict):
            raise MalformedResponseError("completions reply has no logprobs block")
        try:
            tokens = lp["tokens"]
            logprobs = lp["token_logprobs"]
            offsets = lp["text_offset"]
        except KeyError as exc:
            raise MalformedResponseError(f"logprobs block missing {exc}") from exc
        if not (len(tokens) == len(logprobs) == len(offsets)):
            raise MalformedResponseError("logprobs arrays have mismatched lengths")
        return [
            TokenLogProb(
                token_text=str(tok),
                char_start=int(off),
                logprob=None if raw is None else float(raw),
            )
            for tok, raw, off in zip(tokens, logprobs, offsets)
        ]


def make_scorer(
    kind: str,
    model_id: str,
    context_limit: int = DEFAULT_CONTEXT_LIMIT,
    base_url: str | None = None,
    corpus_path: str | Path | None = None,
    *,
    timeout: float = 120.0,
    retries: int = 2,
) -> ScorerBackend:
    """Build a scorer backend from plain config values."""
    from .errors import ConfigError

    if kind == "hash-mock":
        return HashMockScorer(model_id=model_id, context_limit=context_limit)
    if kind == "ngram-reference":
        if not corpus_path:
            raise ConfigError("ngram-reference scorer needs a corpus_path")
        return NgramReferenceScorer(corpus_path, model_id=model_id, context_limit=context_limit)
    if kind == "remote":
        if not base_url:
            raise ConfigError("remote scorer needs a base_url")
        return RemoteScorer(
            base_url, model_id, context_limit, timeout=timeout, retries=retries
        )
    raise ConfigError(f"unknown scorer kind {kind!r}")


def score_tokens(scorer: ScorerBackend, full_text: str) -> list[TokenLogProb]:
    """Score a text and enforce the token-stream contract.

    Offsets must start at 0 and strictly increase; logprobs must be finite
    and non-positive, with None tolerated only on the first token.
    """
    if not full_text:
        raise ValueError("cannot score an empty text")
    if scorer.measure(full_text) > scorer.context_limit:
        raise ContextOverflowError(
            f"text of length {scorer.measure(full_text)} exceeds context limit "
            f"{scorer.context_limit}"
        )
    entries = scorer.score(full_text)
    if not entries:
        raise MalformedResponseError("backend returned no tokens")
    if entries[0].char_start != 0:
        raise MalformedResponseError(f"first token offset is {entries[0].char_start}, not 0")
    prev = -1
    for idx, tok in enumerate(entries):
        if tok.char_start <= prev:
            raise MalformedResponseError(f"token {idx}: offsets not strictly increasing")
        prev = tok.char_start
        if tok.logprob is None:
            if idx != 0:
                raise MalformedResponseError(f"token {idx}: null logprob after the first token")
        elif not math.isfinite(tok.logprob) or tok.logprob > 0.0:
            raise MalformedResponseError(f"token {idx}: bad logprob {tok.logprob!r}")
    return entries


def _token_end(tokens: Sequence[TokenLogProb], idx: int) -> int:
    if idx + 1 < len(tokens):
        return tokens[idx + 1].char_start
    return tokens[idx].char_start + len(tokens[idx].token_text)


def locate_response_span(tokens: Sequence[TokenLogProb], prompt_char_len: int) -> tuple[int, int]:
    """Index range of the tokens that carry the response.

    The span starts at the first token extending past the prompt boundary,
    so a token straddling the boundary belongs to the response. Raises
    EmptyResponseSpanError when no token reaches past the boundary.
    """
    for idx in range(len(tokens)):
        if _token_end(tokens, idx) > prompt_char_len:
            return idx, len(tokens)
    raise EmptyResponseSpanError(
        f"no tokens beyond prompt boundary at offset {prompt_char_len}"
    )


def response_loss(scorer: ScorerBackend, prompt: PromptText, response: str) -> LossValue:
    """Mean per-token NLL of the response given the prompt."""
    full_text = prompt.text + response
    tokens = score_tokens(scorer, full_text)
    start, end = locate_response_span(tokens, scorer.boundary_offset(prompt.text))
    total = 0.0
    count = 0
    for tok in tokens[start:end]:
        if tok.logprob is None:
            continue
        total += -tok.logprob
        count += 1
    if count == 0:
        raise EmptyResponseSpanError("response span contains no scored tokens")
    return LossValue(sum_nll=total, token_count=count)


def conditioned_response_loss(
    scorer: ScorerBackend, one_shot_prompt: PromptText, response: str
) -> LossValue:
    """Same as response_loss, under the one-shot prompt."""
    return response_loss(scorer, one_shot_prompt, response)


def _one_shot_within_limit(
    scorer: ScorerBackend,
    example: InstructionSample,
    target: InstructionSample,
    profile: TemplateProfile,
) -> tuple[PromptText, bool]:
    """Render the one-shot prompt, truncating only the example's response.

    The example response is cut from its end until prompt plus target
    response fit the backend context. The target prompt and target response
    are never touched; if the text still does not fit with the example
    response fully removed, the sample cannot be scored.
    """
    response = target.response
    full = render_one_shot_prompt(example, target, profile)
    if scorer.measure(full.text + response) <= scorer.context_limit:
        return full, False
    best: PromptText | None = None
    lo, hi = 0, len(example.response) - 1
    while lo <= hi:
        mid = (lo + hi) // 2
        candidate = render_one_shot_prompt(
            replace(example, response=example.response[:mid]), target, profile
        )
        if scorer.measure(candidate.text + response) <= scorer.context_limit:
            best = candidate
            lo = mid + 1
        else:
            hi = mid - 1
    if best is None:
        raise ContextOverflowError(
            f"sample {target.id}: one-shot text exceeds the context limit even with "
            "the example response removed"
        )
    return best, True


def compute_miwv(
    scorer: ScorerBackend,
    sample: InstructionSample,
    neighbor: InstructionSample,
    assignment: NeighborAssignment,
    profile: TemplateProfile,
) -> MiwvRecord:
    """Score one sample with and without its neighbor as a one-shot example."""
    if assignment.query_id != sample.id or assignment.neighbor_id != neighbor.id:
        raise ValueError(
            f"assignment ({assignment.query_id} -> {assignment.neighbor_id}) does not "
            f"match samples ({sample.id}, {neighbor.id})"
        )
    zero = render_instruction(sample, profile)
    if scorer.measure(zero.text + sample.response) > scorer.context_limit:
        raise ContextOverflowError(
            f"sample {sample.id}: zero-shot text exceeds the context limit"
        )
    one_shot, truncated = _one_shot_within_limit(scorer, neighbor, sample, profile)
    loss = response_loss(scorer, zero, sample.response)
    loss_cond = conditioned_response_loss(scorer, one_shot, sample.response)
    return MiwvRecord(
        sample_id=sample.id,
        neighbor_id=neighbor.id,
        similarity=assignment.similarity,
        loss=loss,
        loss_cond=loss_cond,
        truncated=truncated,
    )


def score_corpus(
    scorer: ScorerBackend,
    dataset: Dataset,
    assignments: Sequence[NeighborAssignment],
    profile: TemplateProfile,
    *,
    max_in_flight: int = 1,
    skip_ids: Iterable[int] = (),
    on_result: Callable[[MiwvRecord | RejectedSample], None] | None = None,
    progress: Callable[[int, int], None] | None = None,
) -> tuple[list[MiwvRecord], list[RejectedSample]]:
    """Score every sample not in ``skip_ids``.

    Per-sample failures (context overflow, malformed backend replies, empty
    spans) become RejectedSample entries and the run continues. A backend
    that is unreachable after its retries aborts the whole run instead,
    since nothing useful can come of rejecting every remaining sample.

    ``on_result`` fires as each sample finishes, in completion order, which
    lets the caller journal progress for resumable runs. The returned lists
    are sorted by sample id.
    """
    if len(assignments) != dataset.n:
        raise ValueError(f"{len(assignments)} assignments for {dataset.n} samples")
    skip = set(skip_ids)
    todo = [i for i in range(dataset.n) if i not in skip]

    records: list[MiwvRecord] = []
    rejects: list[RejectedSample] = []
    done = 0

    def work(i: int) -> MiwvRecord | RejectedSample:
        a = assignments[i]
        try:
            return compute_miwv(scorer, dataset[i], dataset[a.neighbor_id], a, profile)
        except BackendUnavailableError:
            raise
        except PipelineError as exc:
            return RejectedSample(sample_id=i, error=f"{type(exc).__name__}: {exc}")

    def consume(result: MiwvRecord | RejectedSample) -> None:
        nonlocal done
        if isinstance(result, RejectedSample):
            rejects.append(result)
        else:
            records.append(result)
        if on_result is not None:
            on_result(result)
        done += 1
        if progress is not None and done % 1000 == 0:
            progress(done, len(todo))

    if max_in_flight > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            futures = [pool.submit(work, i) for i in todo]
            finished, pending = wait(futures, return_when=FIRST_EXCEPTION)
            failure = next((f for f in finished if f.exception() is not None), None)
            if failure is not None:
                for f in pending:
                    f.cancel()
                raise failure.exception()
            for f in futures:
                consume(f.result())
    else:
        for i in todo:
            consume(work(i))

    records.sort(key=lambda r: r.sample_id)
    rejects.sort(key=lambda r: r.sample_id)
    return records, rejects


def record_row(record: MiwvRecord) -> dict:
    """Flatten a record into its score-file row."""
    return {
        "i": record.sample_id,
        "k": record.neighbor_id,
        "sim": round(record.similarity, SIM_DECIMALS),
        "loss": record.loss.mean_nll,
        "loss_cond": record.loss_cond.mean_nll,
        "A": record.loss.token_count,
        "A_cond": record.loss_cond.token_count,
        "miwv": record.miwv,
        "truncated": record.truncated,
    }


def record_line(record: MiwvRecord) -> str:
    return json.dumps(record_row(record), separators=(",", ":"))


def parse_score_line(line: str) -> ScoredSample:
    try:
        row = json.loads(line)
        return ScoredSample(
            sample_id=int(row["i"]),
            neighbor_id=int(row["k"]),
            similarity=float(row["sim"]),
            loss=float(row["loss"]),
            loss_cond=float(row["loss_cond"]),
            a=int(row["A"]),
            a_cond=int(row["A_cond"]),
            miwv=float(row["miwv"]),
            truncated=bool(row["truncated"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad score line: {exc}") from exc


def save_score_lines(records: Iterable[MiwvRecord], path: str | Path) -> None:
    text = "".join(record_line(r) + "\n" for r in records)
    Path(path).write_text(text, encoding="utf-8")


def load_score_lines(path: str | Path) -> list[ScoredSample]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(parse_score_line(line))
    return out
