"""Exact all-pairs nearest-neighbor search over the embedding matrix.

Every sample is assigned the other sample with the highest cosine
similarity. There is no approximation and no similarity threshold: with at
least two samples, every query gets a neighbor, however dissimilar. Ties
within an absolute tolerance of TIE_TOLERANCE go to the lowest neighbor id
and are counted in the assignment.

Determinism: similarities are computed as float64 dot products of unit rows,
in fixed-size query chunks aligned to absolute row offsets. ``block_rows``
and ``workers`` only decide how those chunks are grouped into parallel
tasks, never the shape of a numeric kernel call, so the output is
bit-identical for every (block_rows, workers) setting. That matters because
BLAS matrix products are not bitwise stable across call shapes.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embedding import EmbeddingBackendDescriptor, EmbeddingMatrix
from .errors import ConfigError, IdOutOfRangeError, ParseError, TooSmallError

TIE_TOLERANCE = 1e-9

# Serialized similarities are rounded so that equal assignments print the
# same bytes regardless of which (equally valid) kernel produced them.
SIM_DECIMALS = 9

_NUMERIC_CHUNK = 256


@dataclass(frozen=True)
class NeighborAssignment:
    query_id: int
    neighbor_id: int
    similarity: float
    tie_count: int


@dataclass(frozen=True)
class NeighborMap:
    assignments: tuple[NeighborAssignment, ...]
    dataset_hash: str
    backend: EmbeddingBackendDescriptor

    @property
    def n(self) -> int:
        return len(self.assignments)

    def __getitem__(self, query_id: int) -> NeighborAssignment:
        return self.assignments[query_id]


def nearest_neighbor_exact(query_id: int, matrix: EmbeddingMatrix) -> NeighborAssignment:
    """Brute-force scan of all other rows for one query."""
    n = matrix.n
    if n < 2:
        raise TooSmallError(f"need at least 2 rows, have {n}")
    if not 0 <= query_id < n:
        raise IdOutOfRangeError(f"query id {query_id} outside 0..{n - 1}")
    rows64 = matrix.vectors.astype(np.float64)
    a = rows64[query_id]
    norm_a = float(np.linalg.norm(a))
    norms = matrix.norms64()
    dots = rows64 @ a
    den = norms * norm_a
    sims = np.divide(dots, den, out=np.zeros_like(dots), where=den > 0.0)
    np.clip(sims, -1.0, 1.0, out=sims)
    sims[query_id] = -2.0
    return _pick_neighbor(query_id, sims)


def _pick_neighbor(query_id: int, sims: np.ndarray) -> NeighborAssignment:
    best = float(np.max(sims))
    within = sims >= best - TIE_TOLERANCE
    neighbor = int(np.argmax(within))  # first hit, i.e. lowest id
    return NeighborAssignment(
        query_id=query_id,
        neighbor_id=neighbor,
        similarity=float(sims[neighbor]),
        tie_count=int(np.count_nonzero(within)),
    )


def all_nearest_neighbors(
    matrix: EmbeddingMatrix,
    *,
    block_rows: int = 512,
    workers: int = 1,
) -> NeighborMap:
    """Assign every sample its nearest other sample.

    Equivalent, assignment for assignment, to calling nearest_neighbor_exact
    on every id; implemented with chunked float64 matrix products instead of
    a per-query scan.
    """
    n = matrix.n
    if n < 2:
        raise TooSmallError(f"need at least 2 rows, have {n}")
    if block_rows < 1:
        raise ConfigError(f"block_rows must be >= 1, got {block_rows}")
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")

    unit = matrix.unit_rows64()
    neighbor = np.empty(n, dtype=np.int64)
    similarity = np.empty(n, dtype=np.float64)
    ties = np.empty(n, dtype=np.int64)

    chunks = [(lo, min(lo + _NUMERIC_CHUNK, n)) for lo in range(0, n, _NUMERIC_CHUNK)]
    per_task = max(1, -(-block_rows // _NUMERIC_CHUNK))
    tasks = [chunks[t : t + per_task] for t in range(0, len(chunks), per_task)]

    def run_task(task: list[tuple[int, int]]) -> None:
        for lo, hi in task:
            sims = unit[lo:hi] @ unit.T
            np.clip(sims, -1.0, 1.0, out=sims)
            rows = np.arange(hi - lo)
            sims[rows, np.arange(lo, hi)] = -2.0  # exclude self
            best = sims.max(axis=1)
            within = sims >= (best[:, None] - TIE_TOLERANCE)
            picked = within.argmax(axis=1)
            neighbor[lo:hi] = picked
            similarity[lo:hi] = sims[rows, picked]
            ties[lo:hi] = within.sum(axis=1)

    if workers > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_task, tasks))
    else:
        for task in tasks:
            run_task(task)

    assignments = tuple(
        NeighborAssignment(
            query_id=i,
            neighbor_id=int(neighbor[i]),
            similarity=float(similarity[i]),
            tie_count=int(ties[i]),
        )
        for i in range(n)
    )
    return NeighborMap(
        assignments=assignments,
        dataset_hash=matrix.dataset_hash,
        backend=matrix.backend,
    )


def assignment_line(a: NeighborAssignment) -> str:
    return json.dumps(
        {
            "i": a.query_id,
            "k": a.neighbor_id,
            "sim": round(a.similarity, SIM_DECIMALS),
            "ties": a.tie_count,
        },
        separators=(",", ":"),
    )


def save_assignments(assignments: tuple[NeighborAssignment, ...], path: str | Path) -> None:
    """Write one JSON line per query, in query-id order."""
    text = "\n".join(assignment_line(a) for a in assignments) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def load_assignments(path: str | Path) -> tuple[NeighborAssignment, ...]:
    path = Path(path)
    out: list[NeighborAssignment] = []
    for idx, line in enumerate(path.read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            a = NeighborAssignment(
                query_id=int(row["i"]),
                neighbor_id=int(row["k"]),
                similarity=float(row["sim"]),
                tie_count=int(row["ties"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{path}: line {idx + 1}: {exc}") from exc
        out.append(a)
    if [a.query_id for a in out] != list(range(len(out))):
        raise ParseError(f"{path}: query ids are not 0..n-1 in order")
    return tuple(out)
