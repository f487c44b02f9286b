"""Pipeline configuration and the embed/retrieve/score/select/run stages.

Each stage reads its inputs from the output directory, writes one artifact
plus a small meta sidecar, and returns a summary dict. The sidecars carry
the content hash of the dataset (and the upstream backend identities), so a
stage refuses to consume artifacts produced from different inputs instead
of silently mixing runs. ``run`` is nothing more than the four stages in
sequence over the same directory, which keeps staged and one-shot
invocations byte-identical.

Scoring is resumable: every finished sample is appended to a journal as it
completes, and a rerun skips journaled ids, so an interrupted run finishes
with exactly the same score file as an uninterrupted one.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import __version__ as TOOL_VERSION
from .dataset import SOURCE_FORMATS, Dataset, load_dataset, resolve_profile
from .embedding import (
    BACKEND_KINDS,
    EmbeddingMatrix,
    POOLING_MODES,
    embed_corpus,
    make_embedding_backend,
)
from .errors import ConfigError, MissingArtifactError, StaleArtifactError
from .retrieval import all_nearest_neighbors, load_assignments, save_assignments
from .scoring import (
    MiwvRecord,
    RejectedSample,
    load_score_lines,
    make_scorer,
    record_row,
    score_corpus,
)
from .selection import (
    STRATEGIES,
    format_statistics,
    rank,
    score_statistics,
    select_top_fraction,
    export_subset,
)

log = logging.getLogger("miwv")


@dataclass
class DatasetConfig:
    path: str
    format: str = "alpaca-json"


@dataclass
class EmbeddingConfig:
    kind: str = "builtin-hash"
    model_id: str = "fnv1a64-3gram"
    dimension: int = 256
    pooling: str = "backend-pooled"
    base_url: str | None = None
    cache_dir: str | None = None
    batch_size: int = 64
    workers: int = 1
    retries: int = 2
    timeout: float = 60.0


@dataclass
class ScorerConfig:
    kind: str = "hash-mock"
    model_id: str = "hash-mock"
    base_url: str | None = None
    corpus_path: str | None = None
    context_limit: int = 1_000_000
    max_in_flight: int = 1
    retries: int = 2
    timeout: float = 120.0


@dataclass
class RetrievalConfig:
    block_rows: int = 512
    workers: int = 1


@dataclass
class SelectionConfig:
    strategy: str = "miwv-desc"
    ratios: list[float] = field(default_factory=lambda: [0.01, 0.05, 0.10, 0.15])
    seed: int = 0
    output_format: str | None = None
    source_order: bool = False


@dataclass
class PipelineConfig:
    dataset: DatasetConfig
    output_dir: str
    template_profile: str = "alpaca-style"
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    scorer: ScorerConfig = field(default_factory=ScorerConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)

    def validate(self) -> None:
        if self.dataset.format not in SOURCE_FORMATS:
            raise ConfigError(f"unknown dataset format {self.dataset.format!r}")
        if self.embedding.kind not in BACKEND_KINDS:
            raise ConfigError(f"unknown embedding kind {self.embedding.kind!r}")
        if self.embedding.pooling not in POOLING_MODES:
            raise ConfigError(f"unknown pooling mode {self.embedding.pooling!r}")
        if self.embedding.kind == "remote" and not self.embedding.base_url:
            raise ConfigError("remote embeddings need embedding.base_url")
        if self.embedding.batch_size < 1:
            raise ConfigError("embedding.batch_size must be >= 1")
        if self.embedding.workers < 1 or self.retrieval.workers < 1:
            raise ConfigError("worker counts must be >= 1")
        if self.embedding.retries < 0 or self.scorer.retries < 0:
            raise ConfigError("retries must be >= 0")
        if self.scorer.kind not in ("hash-mock", "ngram-reference", "remote"):
            raise ConfigError(f"unknown scorer kind {self.scorer.kind!r}")
        if self.scorer.kind == "remote" and not self.scorer.base_url:
            raise ConfigError("remote scorer needs scorer.base_url")
        if self.scorer.kind == "ngram-reference" and not self.scorer.corpus_path:
            raise ConfigError("ngram-reference scorer needs scorer.corpus_path")
        if self.scorer.max_in_flight < 1:
            raise ConfigError("scorer.max_in_flight must be >= 1")
        if self.scorer.context_limit < 1:
            raise ConfigError("scorer.context_limit must be >= 1")
        if self.retrieval.block_rows < 1:
            raise ConfigError("retrieval.block_rows must be >= 1")
        if self.selection.strategy not in STRATEGIES:
            raise ConfigError(
                f"unknown strategy {self.selection.strategy!r}, expected one of {STRATEGIES}"
            )
        if not self.selection.ratios:
            raise ConfigError("selection.ratios must not be empty")
        for ratio in self.selection.ratios:
            if not 0.0 < ratio <= 1.0:
                raise ConfigError(f"selection ratio {ratio} outside (0, 1]")
        if self.selection.output_format is not None and (
            self.selection.output_format not in SOURCE_FORMATS
        ):
            raise ConfigError(f"unknown output format {self.selection.output_format!r}")

    @property
    def cache_dir(self) -> Path:
        if self.embedding.cache_dir:
            return Path(self.embedding.cache_dir)
        return Path(self.output_dir) / "embed-cache"


_SECTION_TYPES = {
    "dataset": DatasetConfig,
    "embedding": EmbeddingConfig,
    "scorer": ScorerConfig,
    "retrieval": RetrievalConfig,
    "selection": SelectionConfig,
}


def config_from_dict(data: dict) -> PipelineConfig:
    """Build and validate a config from parsed JSON."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    known = set(_SECTION_TYPES) | {"output_dir", "template_profile"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "dataset" not in data or "output_dir" not in data:
        raise ConfigError("config needs at least 'dataset' and 'output_dir'")

    sections: dict[str, object] = {}
    for name, cls in _SECTION_TYPES.items():
        if name not in data:
            continue
        section = data[name]
        if not isinstance(section, dict):
            raise ConfigError(f"config section {name!r} must be an object")
        allowed = set(cls.__dataclass_fields__)  # type: ignore[attr-defined]
        bad = set(section) - allowed
        if bad:
            raise ConfigError(f"unknown keys in config section {name!r}: {sorted(bad)}")
        try:
            sections[name] = cls(**section)
        except TypeError as exc:
            raise ConfigError(f"config section {name!r}: {exc}") from exc

    config = PipelineConfig(
        dataset=sections["dataset"],  # type: ignore[arg-type]
        output_dir=str(data["output_dir"]),
        template_profile=str(data.get("template_profile", "alpaca-style")),
        embedding=sections.get("embedding", EmbeddingConfig()),  # type: ignore[arg-type]
        scorer=sections.get("scorer", ScorerConfig()),  # type: ignore[arg-type]
        retrieval=sections.get("retrieval", RetrievalConfig()),  # type: ignore[arg-type]
        selection=sections.get("selection", SelectionConfig()),  # type: ignore[arg-type]
    )
    config.validate()
    return config


def load_config(path: str | Path) -> PipelineConfig:
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


class ArtifactPaths:
    def __init__(self, output_dir: str | Path):
        self.root = Path(output_dir)
        self.embeddings = self.root / "embeddings.bin"
        self.neighbors = self.root / "neighbors.jsonl"
        self.neighbors_meta = self.root / "neighbors.meta.json"
        self.scores = self.root / "scores.jsonl"
        self.scores_meta = self.root / "scores.meta.json"
        self.progress = self.root / "scores.progress.jsonl"
        self.rejects = self.root / "rejects.jsonl"
        self.statistics_json = self.root / "statistics.json"
        self.statistics_txt = self.root / "statistics.txt"
        self.histogram_csv = self.root / "histogram.csv"
        self.run_summary = self.root / "run_summary.json"

    def subset(self, strategy: str, ratio: float, output_format: str) -> Path:
        ext = "jsonl" if output_format == "generic-jsonl" else "json"
        return self.root / f"subset-{strategy}-r{ratio}.{ext}"


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def _read_json(path: Path) -> dict:
    return json.loads(path.read_text(encoding="utf-8"))


def _load_inputs(config: PipelineConfig) -> Dataset:
    return load_dataset(config.dataset.path, config.dataset.format)


def cmd_embed(config: PipelineConfig) -> dict:
    """Embed the corpus and write embeddings.bin."""
    t0 = time.perf_counter()
    dataset = _load_inputs(config)
    profile = resolve_profile(config.template_profile)
    backend = make_embedding_backend(
        config.embedding.kind,
        config.embedding.model_id,
        config.embedding.dimension,
        config.embedding.pooling,
        config.embedding.base_url,
        timeout=config.embedding.timeout,
        retries=config.embedding.retries,
    )
    paths = ArtifactPaths(config.output_dir)
    paths.root.mkdir(parents=True, exist_ok=True)

    def progress(done: int, total: int) -> None:
        log.info("stage=embed done=%d total=%d", done, total)

    matrix, stats = embed_corpus(
        dataset,
        profile,
        backend,
        config.cache_dir,
        batch_size=config.embedding.batch_size,
        workers=config.embedding.workers,
        progress=progress,
    )
    matrix.save(paths.embeddings)
    summary = {
        "stage": "embed",
        "n": dataset.n,
        "d": matrix.d,
        "cache_hits": stats.cache_hits,
        "cache_misses": stats.cache_misses,
        "backend_calls": stats.backend_calls,
        "seconds": round(time.perf_counter() - t0, 3),
    }
    log.info(
        "stage=embed n=%d cache_hits=%d cache_misses=%d seconds=%.3f",
        summary["n"], summary["cache_hits"], summary["cache_misses"], summary["seconds"],
    )
    return summary


def _load_embeddings(config: PipelineConfig, dataset: Dataset, paths: ArtifactPaths) -> EmbeddingMatrix:
    if not paths.embeddings.exists():
        raise MissingArtifactError(f"{paths.embeddings} not found; run the embed stage first")
    matrix = EmbeddingMatrix.load(paths.embeddings)
    if matrix.dataset_hash != dataset.content_hash:
        raise StaleArtifactError(
            f"{paths.embeddings} was computed from a different dataset "
            f"({matrix.dataset_hash[:12]}... vs {dataset.content_hash[:12]}...)"
        )
    if matrix.n != dataset.n:
        raise StaleArtifactError(f"{paths.embeddings} has {matrix.n} rows for {dataset.n} samples")
    return matrix


def cmd_retrieve(config: PipelineConfig) -> dict:
    """Assign nearest neighbors and write neighbors.jsonl."""
    t0 = time.perf_counter()
    dataset = _load_inputs(config)
    paths = ArtifactPaths(config.output_dir)
    matrix = _load_embeddings(config, dataset, paths)
    neighbor_map = all_nearest_neighbors(
        matrix,
        block_rows=config.retrieval.block_rows,
        workers=config.retrieval.workers,
    )
    save_assignments(neighbor_map.assignments, paths.neighbors)
    _write_json(
        paths.neighbors_meta,
        {
            "dataset_hash": dataset.content_hash,
            "embedding": matrix.backend.as_dict(),
            "n": neighbor_map.n,
            "tool_version": TOOL_VERSION,
        },
    )
    sims = [a.similarity for a in neighbor_map.assignments]
    summary = {
        "stage": "retrieve",
        "n": neighbor_map.n,
        "sim_min": round(min(sims), 6),
        "sim_mean": round(sum(sims) / len(sims), 6),
        "sim_max": round(max(sims), 6),
        "seconds": round(time.perf_counter() - t0, 3),
    }
    log.info(
        "stage=retrieve n=%d sim_min=%.4f sim_mean=%.4f sim_max=%.4f seconds=%.3f",
        summary["n"], summary["sim_min"], summary["sim_mean"], summary["sim_max"],
        summary["seconds"],
    )
    return summary


def _scorer_meta(config: PipelineConfig, dataset: Dataset, profile_name: str) -> dict:
    return {
        "dataset_hash": dataset.content_hash,
        "scorer_kind": config.scorer.kind,
        "scorer_model": config.scorer.model_id,
        "context_limit": config.scorer.context_limit,
        "profile": profile_name,
    }


def _read_progress(paths: ArtifactPaths, expected_meta: dict) -> tuple[dict[int, dict], dict[int, str]]:
    """Read the scoring journal; returns (ok rows by id, reject errors by id)."""
    ok: dict[int, dict] = {}
    rejected: dict[int, str] = {}
    if not paths.progress.exists():
        return ok, rejected
    lines = paths.progress.read_text(encoding="utf-8").splitlines()
    if not lines:
        return ok, rejected
    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError:
        return {}, {}
    if head.get("kind") != "meta" or {k: head.get(k) for k in expected_meta} != expected_meta:
        log.info("stage=score journal=stale action=restart")
        return {}, {}
    for line in lines[1:]:
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
        except json.JSONDecodeError:
            continue  # a torn final line from a killed run is expected
        if entry.get("kind") == "ok" and isinstance(entry.get("row"), dict):
            ok[int(entry["row"]["i"])] = entry["row"]
        elif entry.get("kind") == "reject":
            rejected[int(entry["i"])] = str(entry.get("error", ""))
    return ok, rejected


def cmd_score(config: PipelineConfig) -> dict:
    """Score every sample against its neighbor and write scores.jsonl."""
    t0 = time.perf_counter()
    dataset = _load_inputs(config)
    paths = ArtifactPaths(config.output_dir)
    profile = resolve_profile(config.template_profile)

    if not paths.neighbors.exists() or not paths.neighbors_meta.exists():
        raise MissingArtifactError(f"{paths.neighbors} not found; run the retrieve stage first")
    neighbors_meta = _read_json(paths.neighbors_meta)
    if neighbors_meta.get("dataset_hash") != dataset.content_hash:
        raise StaleArtifactError(f"{paths.neighbors} was computed from a different dataset")
    if neighbors_meta.get("embedding", {}).get("model_id") != config.embedding.model_id:
        raise StaleArtifactError(
            f"{paths.neighbors} was computed with embedding model "
            f"{neighbors_meta.get('embedding', {}).get('model_id')!r}, "
            f"config says {config.embedding.model_id!r}"
        )
    assignments = load_assignments(paths.neighbors)
    if len(assignments) != dataset.n:
        raise StaleArtifactError(
            f"{paths.neighbors} has {len(assignments)} rows for {dataset.n} samples"
        )

    scorer = make_scorer(
        config.scorer.kind,
        config.scorer.model_id,
        config.scorer.context_limit,
        config.scorer.base_url,
        config.scorer.corpus_path,
        timeout=config.scorer.timeout,
        retries=config.scorer.retries,
    )

    expected_meta = _scorer_meta(config, dataset, profile.name)
    previous_ok, previous_rejects = _read_progress(paths, expected_meta)
    skip = set(previous_ok) | set(previous_rejects)
    if skip:
        log.info("stage=score resumed=%d remaining=%d", len(skip), dataset.n - len(skip))

    fresh_journal = not skip
    paths.root.mkdir(parents=True, exist_ok=True)
    mode = "w" if fresh_journal else "a"
    with paths.progress.open(mode, encoding="utf-8") as journal:
        if fresh_journal:
            journal.write(json.dumps({"kind": "meta", **expected_meta}) + "\n")
            journal.flush()

        def on_result(result: MiwvRecord | RejectedSample) -> None:
            if isinstance(result, RejectedSample):
                entry = {"kind": "reject", "i": result.sample_id, "error": result.error}
            else:
                entry = {"kind": "ok", "row": record_row(result)}
            journal.write(json.dumps(entry, separators=(",", ":")) + "\n")
            journal.flush()

        def progress(done: int, total: int) -> None:
            log.info("stage=score done=%d total=%d", done, total)

        records, rejects = score_corpus(
            scorer,
            dataset,
            assignments,
            profile,
            max_in_flight=config.scorer.max_in_flight,
            skip_ids=skip,
            on_result=on_result,
            progress=progress,
        )

    all_rows: dict[int, dict] = dict(previous_ok)
    for record in records:
        all_rows[record.sample_id] = record_row(record)
    all_rejects: dict[int, str] = dict(previous_rejects)
    for reject in rejects:
        all_rejects[reject.sample_id] = reject.error

    tmp = paths.scores.with_suffix(".jsonl.tmp")
    tmp.write_text(
        "".join(
            json.dumps(all_rows[i], separators=(",", ":")) + "\n" for i in sorted(all_rows)
        ),
        encoding="utf-8",
    )
    os.replace(tmp, paths.scores)
    paths.rejects.write_text(
        "".join(
            json.dumps({"i": i, "error": all_rejects[i]}, ensure_ascii=False) + "\n"
            for i in sorted(all_rejects)
        ),
        encoding="utf-8",
    )
    _write_json(
        paths.scores_meta,
        {
            **expected_meta,
            "embedding": neighbors_meta.get("embedding"),
            "n": dataset.n,
            "n_scored": len(all_rows),
            "n_rejected": len(all_rejects),
            "tool_version": TOOL_VERSION,
        },
    )
    summary = {
        "stage": "score",
        "n": dataset.n,
        "n_scored": len(all_rows),
        "n_rejected": len(all_rejects),
        "resumed": len(skip),
        "seconds": round(time.perf_counter() - t0, 3),
    }
    log.info(
        "stage=score n_scored=%d n_rejected=%d resumed=%d seconds=%.3f",
        summary["n_scored"], summary["n_rejected"], summary["resumed"], summary["seconds"],
    )
    return summary


def cmd_select(config: PipelineConfig) -> dict:
    """Rank scored samples and export one subset per requested ratio."""
    t0 = time.perf_counter()
    dataset = _load_inputs(config)
    paths = ArtifactPaths(config.output_dir)
    if not paths.scores.exists() or not paths.scores_meta.exists():
        raise MissingArtifactError(f"{paths.scores} not found; run the score stage first")
    scores_meta = _read_json(paths.scores_meta)
    if scores_meta.get("dataset_hash") != dataset.content_hash:
        raise StaleArtifactError(f"{paths.scores} was computed from a different dataset")

    records = load_score_lines(paths.scores)
    strategy = config.selection.strategy
    ranking = rank(records, strategy, config.selection.seed)
    output_format = config.selection.output_format or dataset.source_format

    context = {
        "dataset_hash": dataset.content_hash,
        "embedding_model": (scores_meta.get("embedding") or {}).get("model_id"),
        "scorer_model": scores_meta.get("scorer_model"),
        "template_profile": scores_meta.get("profile"),
        "n_rejected": scores_meta.get("n_rejected", 0),
        "tool_version": TOOL_VERSION,
        "created_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }

    subset_files = {}
    previous_ids: tuple[int, ...] | None = None
    nested = True
    for ratio in sorted(config.selection.ratios):
        subset = select_top_fraction(ranking, ratio, context)
        out_path = paths.subset(strategy, ratio, output_format)
        export_subset(
            dataset,
            subset,
            out_path,
            output_format,
            source_order=config.selection.source_order,
        )
        subset_files[str(ratio)] = {"path": str(out_path), "count": subset.count}
        if previous_ids is not None and subset.ids[: len(previous_ids)] != previous_ids:
            nested = False
        previous_ids = subset.ids

    stats = score_statistics(records)
    _write_json(paths.statistics_json, stats)
    paths.statistics_txt.write_text(format_statistics(stats), encoding="utf-8")
    edges = stats["histogram"]["bin_edges"]
    rows = ["bin_lo,bin_hi,count"]
    rows += [
        f"{edges[b]},{edges[b + 1]},{c}" for b, c in enumerate(stats["histogram"]["counts"])
    ]
    paths.histogram_csv.write_text("\n".join(rows) + "\n", encoding="utf-8")

    summary = {
        "stage": "select",
        "strategy": strategy,
        "n_scored": ranking.n,
        "subsets": subset_files,
        "nested": nested,
        "seconds": round(time.perf_counter() - t0, 3),
    }
    log.info(
        "stage=select strategy=%s n_scored=%d subsets=%d nested=%s seconds=%.3f",
        strategy, ranking.n, len(subset_files), nested, summary["seconds"],
    )
    return summary


def cmd_run(config: PipelineConfig) -> dict:
    """All four stages in order over one output directory."""
    t0 = time.perf_counter()
    stages = [cmd_embed(config), cmd_retrieve(config), cmd_score(config), cmd_select(config)]
    summary = {
        "stages": stages,
        "tool_version": TOOL_VERSION,
        "seconds": round(time.perf_counter() - t0, 3),
    }
    _write_json(ArtifactPaths(config.output_dir).run_summary, summary)
    return summary
