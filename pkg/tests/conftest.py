from __future__ import annotations

import json
from pathlib import Path

import pytest

from miwv.dataset import ALPACA_PROFILE, Dataset, load_dataset

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def fixture_path() -> Path:
    return FIXTURES / "fixture_dataset.json"


@pytest.fixture(scope="session")
def fixture_dataset(fixture_path: Path) -> Dataset:
    return load_dataset(fixture_path, "alpaca-json")


@pytest.fixture(scope="session")
def profile():
    return ALPACA_PROFILE


@pytest.fixture(scope="session")
def oracle_lines() -> list[str]:
    text = (FIXTURES / "oracle_scores.jsonl").read_text(encoding="utf-8")
    return text.splitlines()


@pytest.fixture(scope="session")
def oracle_rows(oracle_lines: list[str]) -> list[dict]:
    return [json.loads(line) for line in oracle_lines]


def write_config(tmp_path: Path, dataset_path: Path, output_dir: Path, **over) -> Path:
    """Write a pipeline config file and return its path.

    Keyword arguments patch top-level sections, e.g.
    ``write_config(..., selection={"ratios": [0.5]})``.
    """
    cfg: dict = {
        "dataset": {"path": str(dataset_path), "format": "alpaca-json"},
        "output_dir": str(output_dir),
        "embedding": {"kind": "builtin-hash"},
        "scorer": {"kind": "hash-mock"},
        "selection": {"ratios": [0.1, 0.5]},
    }
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg, indent=2), encoding="utf-8")
    return path
