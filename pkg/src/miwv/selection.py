"""Ranking, subset selection, export, and score statistics.

Rankings are total orders over scored sample ids. All strategies break
score ties by ascending sample id, so equal inputs always produce the same
order. Subset selection takes the first floor(ratio * n) ids of a ranking,
which makes subsets nest: the 1% subset is a prefix of the 5% subset from
the same ranking.

The ``random`` strategy shuffles ids with a SplitMix64 stream so that a
seed means the same thing in any implementation:

    state <- (state + 0x9E3779B97F4A7C15) mod 2^64
    z <- state
    z <- ((z XOR (z >> 30)) * 0xBF58476D1CE4E5B9) mod 2^64
    z <- ((z XOR (z >> 27)) * 0x94D049BB133111EB) mod 2^64
    output <- z XOR (z >> 31)

The shuffle is a descending Fisher-Yates over the ascending id list, using
``j = output mod (i + 1)``. First three outputs for seed 0:
0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .dataset import Dataset, sample_to_record
from .errors import (
    ConfigError,
    EmptyRecordsError,
    EmptySelectionError,
    IdNotFoundError,
    RatioOutOfRangeError,
)

STRATEGIES = ("miwv-desc", "miwv-asc", "prompt-loss-desc", "random")

_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
_SPLITMIX_M1 = 0xBF58476D1CE4E5B9
_SPLITMIX_M2 = 0x94D049BB133111EB
_MASK64 = (1 << 64) - 1


class ScoredLike(Protocol):
    """What rank() needs from a record: id, miwv, and the conditioned loss."""

    @property
    def sample_id(self) -> int: ...

    @property
    def miwv(self) -> float: ...

    @property
    def prompt_loss(self) -> float: ...


@dataclass(frozen=True)
class Ranking:
    ordered_ids: tuple[int, ...]
    strategy: str
    seed: int | None = None

    @property
    def n(self) -> int:
        return len(self.ordered_ids)


@dataclass(frozen=True)
class SelectionSubset:
    ids: tuple[int, ...]
    ratio: float
    count: int
    manifest: dict


class SplitMix64:
    """The 64-bit SplitMix generator (see module docstring for constants)."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_uint64(self) -> int:
        self._state = (self._state + _SPLITMIX_GAMMA) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * _SPLITMIX_M1) & _MASK64
        z = ((z ^ (z >> 27)) * _SPLITMIX_M2) & _MASK64
        return z ^ (z >> 31)


def shuffle_ids(ids: Sequence[int], seed: int) -> list[int]:
    """Descending Fisher-Yates shuffle driven by SplitMix64."""
    out = list(ids)
    gen = SplitMix64(seed)
    for i in range(len(out) - 1, 0, -1):
        j = gen.next_uint64() % (i + 1)
        out[i], out[j] = out[j], out[i]
    return out


def rank(records: Sequence[ScoredLike], strategy: str, seed: int | None = None) -> Ranking:
    """Order scored samples best-first under the given strategy."""
    if not records:
        raise EmptyRecordsError("cannot rank zero records")
    if strategy == "miwv-desc":
        ordered = sorted(records, key=lambda r: (-r.miwv, r.sample_id))
    elif strategy == "miwv-asc":
        ordered = sorted(records, key=lambda r: (r.miwv, r.sample_id))
    elif strategy == "prompt-loss-desc":
        ordered = sorted(records, key=lambda r: (-r.prompt_loss, r.sample_id))
    elif strategy == "random":
        if seed is None:
            seed = 0
        ids = shuffle_ids(sorted(r.sample_id for r in records), seed)
        return Ranking(ordered_ids=tuple(ids), strategy=strategy, seed=seed)
    else:
        raise ConfigError(f"unknown strategy {strategy!r}, expected one of {STRATEGIES}")
    return Ranking(ordered_ids=tuple(r.sample_id for r in ordered), strategy=strategy, seed=seed)


def select_top_fraction(
    ranking: Ranking, ratio: float, context: dict | None = None
) -> SelectionSubset:
    """Take the first floor(ratio * n) ids of a ranking.

    ``ratio`` is interpreted as the decimal it was written as (0.1 means
    exactly one tenth), so counts match pencil-and-paper arithmetic instead
    of drifting on binary float artifacts.
    """
    if not 0.0 < ratio <= 1.0:
        raise RatioOutOfRangeError(f"ratio must be in (0, 1], got {ratio}")
    count = math.floor(Fraction(str(ratio)) * ranking.n)
    if count < 1:
        raise EmptySelectionError(
            f"ratio {ratio} of {ranking.n} samples selects nothing"
        )
    manifest = {
        "strategy": ranking.strategy,
        "ratio": ratio,
        "count": count,
        "n_scored": ranking.n,
    }
    if ranking.seed is not None:
        manifest["seed"] = ranking.seed
    if context:
        manifest.update(context)
    return SelectionSubset(
        ids=tuple(ranking.ordered_ids[:count]),
        ratio=ratio,
        count=count,
        manifest=manifest,
    )


def export_subset(
    dataset: Dataset,
    subset: SelectionSubset,
    path: str | Path,
    output_format: str | None = None,
    *,
    source_order: bool = False,
) -> None:
    """Write the selected samples plus a sidecar manifest.

    Samples appear in ranking order unless ``source_order`` asks for
    ascending id order. Output bytes are a pure function of the inputs.
    """
    output_format = output_format or dataset.source_format
    ids = sorted(subset.ids) if source_order else list(subset.ids)
    for sample_id in ids:
        if not 0 <= sample_id < dataset.n:
            raise IdNotFoundError(f"selected id {sample_id} not in dataset")
    records = [sample_to_record(dataset[i], output_format) for i in ids]

    path = Path(path)
    if output_format == "generic-jsonl":
        text = "".join(json.dumps(r, ensure_ascii=False, separators=(",", ":")) + "\n" for r in records)
    else:
        text = json.dumps(records, ensure_ascii=False, indent=2) + "\n"
    path.write_text(text, encoding="utf-8")

    manifest_path = path.with_name(path.name + ".manifest.json")
    manifest_path.write_text(
        json.dumps(subset.manifest, ensure_ascii=False, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def score_statistics(records: Sequence[ScoredLike]) -> dict:
    """Summary statistics of the miwv distribution, all in float64.

    Quartiles use linear interpolation; the histogram is 20 equal-width bins
    over [min, max]; stddev is the population standard deviation.
    """
    if not records:
        raise EmptyRecordsError("cannot summarize zero records")
    values = np.array([r.miwv for r in records], dtype=np.float64)
    ids_by_desc = [r.sample_id for r in sorted(records, key=lambda r: (-r.miwv, r.sample_id))]
    ids_by_asc = [r.sample_id for r in sorted(records, key=lambda r: (r.miwv, r.sample_id))]
    q1, median, q3 = (float(q) for q in np.percentile(values, [25, 50, 75]))
    counts, edges = np.histogram(values, bins=20)
    return {
        "count": int(values.size),
        "mean": float(np.mean(values)),
        "stddev": float(np.std(values)),
        "min": float(np.min(values)),
        "max": float(np.max(values)),
        "q1": q1,
        "median": median,
        "q3": q3,
        "histogram": {
            "bin_edges": [float(e) for e in edges],
            "counts": [int(c) for c in counts],
        },
        "top_ids": ids_by_desc[:10],
        "bottom_ids": ids_by_asc[:10],
    }


def format_statistics(stats: dict) -> str:
    """Plain-text rendering of score_statistics output."""
    lines = [
        f"count   {stats['count']}",
        f"mean    {stats['mean']:.6f}",
        f"stddev  {stats['stddev']:.6f}",
        f"min     {stats['min']:.6f}",
        f"q1      {stats['q1']:.6f}",
        f"median  {stats['median']:.6f}",
        f"q3      {stats['q3']:.6f}",
        f"max     {stats['max']:.6f}",
        "top ids    " + " ".join(str(i) for i in stats["top_ids"]),
        "bottom ids " + " ".join(str(i) for i in stats["bottom_ids"]),
    ]
    return "\n".join(lines) + "\n"
