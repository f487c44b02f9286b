"""Instruction dataset loading, validation, and prompt rendering.

A dataset is an ordered list of (instruction, optional input, response)
records. Loading assigns ids 0..n-1 by position, validates required fields,
and computes a content hash over a canonical serialization so downstream
artifacts can detect stale inputs. Rendering turns samples into zero-shot or
one-shot prompt strings through a template profile; the default profile is
the common "Below is an instruction ..." layout.

Text is treated as opaque UTF-8 throughout: no unicode normalization, no
whitespace rewriting, and no special-casing of placeholder strings inside
fields. Duplicate records are kept.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .errors import (
    ParseError,
    SameSampleError,
    SchemaError,
    TemplateError,
    TooSmallError,
)

SOURCE_FORMATS = ("alpaca-json", "wizardlm-json", "generic-jsonl")

ZERO_SHOT = "zero_shot"
ONE_SHOT = "one_shot"


@dataclass(frozen=True)
class InstructionSample:
    """One instruction-tuning record.

    ``input`` is None when the source record has no input field; an empty
    string is kept as-is but renders the same as an absent one.
    """

    id: int
    instruction: str
    input: str | None
    response: str

    def content_hash(self) -> str:
        """sha256 of the sample body (id excluded, so duplicates share it)."""
        body = _canonical_json(
            {"instruction": self.instruction, "input": self.input, "output": self.response}
        )
        return hashlib.sha256(body.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Dataset:
    samples: tuple[InstructionSample, ...]
    source_format: str
    content_hash: str

    @property
    def n(self) -> int:
        return len(self.samples)

    def __getitem__(self, sample_id: int) -> InstructionSample:
        return self.samples[sample_id]


@dataclass(frozen=True)
class PromptText:
    """A rendered prompt plus which rendering produced it."""

    text: str
    kind: str  # ZERO_SHOT or ONE_SHOT

    @property
    def char_len(self) -> int:
        return len(self.text)


def _slot_count(template: str, slot: str) -> int:
    return template.count("{" + slot + "}")


def _require_slots(template: str, slots: Iterable[str], profile_name: str) -> None:
    for slot in slots:
        count = _slot_count(template, slot)
        if count != 1:
            raise TemplateError(
                f"profile {profile_name!r}: slot {{{slot}}} appears {count} times, expected 1"
            )


@dataclass(frozen=True)
class TemplateProfile:
    """A named set of prompt templates.

    Slots are written ``{name}``. Each template must use each of its declared
    slots exactly once; substitution is verbatim, so braces inside sample text
    are never re-interpreted.
    """

    name: str
    zero_shot_with_input: str
    zero_shot_no_input: str
    example_block: str
    separator: str
    one_shot_frame: str

    def __post_init__(self) -> None:
        _require_slots(self.zero_shot_with_input, ("instruction", "input"), self.name)
        _require_slots(self.zero_shot_no_input, ("instruction",), self.name)
        _require_slots(self.example_block, ("example_prompt", "example_response"), self.name)
        _require_slots(self.one_shot_frame, ("example_block", "target_block"), self.name)
        if _slot_count(self.one_shot_frame, "separator") > 1:
            raise TemplateError(
                f"profile {self.name!r}: slot {{separator}} may appear at most once"
            )


ALPACA_PROFILE = TemplateProfile(
    name="alpaca-style",
    zero_shot_with_input=(
        "Below is an instruction that describes a task, paired with an input "
        "that provides further context. Write a response that appropriately "
        "completes the request.\n\n"
        "### Instruction:\n{instruction}\n\n"
        "### Input:\n{input}\n\n"
        "### Response:\n"
    ),
    zero_shot_no_input=(
        "Below is an instruction that describes a task. Write a response "
        "that appropriately completes the request.\n\n"
        "### Instruction:\n{instruction}\n\n"
        "### Response:\n"
    ),
    example_block="{example_prompt}{example_response}",
    separator="\n\n",
    one_shot_frame="{example_block}{separator}{target_block}",
)


def _fill(template: str, values: dict[str, str]) -> str:
    """Substitute ``{name}`` slots with values, never rescanning the values."""
    pattern = re.compile("(" + "|".join(re.escape("{" + k + "}") for k in values) + ")")
    parts = pattern.split(template)
    return "".join(values[p[1:-1]] if p in _slot_tokens(values) else p for p in parts)


def _slot_tokens(values: dict[str, str]) -> set[str]:
    return {"{" + k + "}" for k in values}


def render_instruction(sample: InstructionSample, profile: TemplateProfile = ALPACA_PROFILE) -> PromptText:
    """Render the zero-shot prompt for one sample.

    The with-input template is used exactly when the sample has a non-empty
    input; the rendered text ends where the response would begin.
    """
    if sample.input:
        text = _fill(
            profile.zero_shot_with_input,
            {"instruction": sample.instruction, "input": sample.input},
        )
    else:
        text = _fill(profile.zero_shot_no_input, {"instruction": sample.instruction})
    return PromptText(text=text, kind=ZERO_SHOT)


def render_one_shot_prompt(
    example: InstructionSample,
    target: InstructionSample,
    profile: TemplateProfile = ALPACA_PROFILE,
) -> PromptText:
    """Render the one-shot prompt: worked example, separator, then target.

    The result covers everything up to (not including) the target response,
    and always ends with the target's zero-shot rendering as a suffix.
    """
    if example.id == target.id:
        raise SameSampleError(f"sample {target.id} cannot be its own one-shot example")
    example_prompt = render_instruction(example, profile).text
    block = _fill(
        profile.example_block,
        {"example_prompt": example_prompt, "example_response": example.response},
    )
    target_block = render_instruction(target, profile).text
    text = _fill(
        profile.one_shot_frame,
        {
            "example_block": block,
            "separator": profile.separator,
            "target_block": target_block,
        },
    )
    return PromptText(text=text, kind=ONE_SHOT)


def _canonical_json(obj: object) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def _canonical_line(sample: InstructionSample) -> str:
    return _canonical_json(
        {
            "id": sample.id,
            "instruction": sample.instruction,
            "input": sample.input,
            "output": sample.response,
        }
    )


def _dataset_hash(samples: Iterable[InstructionSample]) -> str:
    h = hashlib.sha256()
    for sample in samples:
        h.update(_canonical_line(sample).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def _required_str(record: dict, index: int, field: str) -> str:
    value = record.get(field)
    if not isinstance(value, str):
        raise SchemaError(index, field)
    if not value.strip():
        raise SchemaError(index, field, f"record {index}: field {field!r} is empty")
    return value


def _optional_input(record: dict, index: int) -> str | None:
    value = record.get("input")
    if value is None:
        return None
    if not isinstance(value, str):
        raise SchemaError(index, "input")
    return value


def _parse_json_array(raw: str, path: str) -> list:
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg} at position {exc.pos}", exc.pos) from exc
    if not isinstance(data, list):
        raise ParseError(f"{path}: top-level JSON value must be an array")
    return data


def _record_at(data: list, index: int) -> dict:
    record = data[index]
    if not isinstance(record, dict):
        raise SchemaError(index, "record", f"record {index}: not a JSON object")
    return record


def load_dataset(path: str | Path, source_format: str) -> Dataset:
    """Load and validate a dataset file.

    Ids are assigned 0..n-1 by position. Raises ParseError for syntactically
    bad files, SchemaError for bad records, and TooSmallError when fewer than
    two samples survive (one-shot retrieval needs a distinct neighbor).
    """
    if source_format not in SOURCE_FORMATS:
        raise ParseError(f"unknown source format {source_format!r}")
    path = Path(path)
    raw = path.read_text(encoding="utf-8")

    samples: list[InstructionSample] = []
    if source_format == "alpaca-json":
        data = _parse_json_array(raw, str(path))
        for i in range(len(data)):
            record = _record_at(data, i)
            samples.append(
                InstructionSample(
                    id=i,
                    instruction=_required_str(record, i, "instruction"),
                    input=_optional_input(record, i),
                    response=_required_str(record, i, "output"),
                )
            )
    elif source_format == "wizardlm-json":
        data = _parse_json_array(raw, str(path))
        for i in range(len(data)):
            record = _record_at(data, i)
            samples.append(
                InstructionSample(
                    id=i,
                    instruction=_required_str(record, i, "instruction"),
                    input=None,
                    response=_required_str(record, i, "output"),
                )
            )
    else:  # generic-jsonl
        for i, line in enumerate(_nonblank_lines(raw)):
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: line {i + 1}: {exc.msg}", exc.pos) from exc
            if not isinstance(record, dict):
                raise SchemaError(i, "record", f"record {i}: not a JSON object")
            declared_id = record.get("id", i)
            if declared_id != i:
                raise SchemaError(i, "id", f"record {i}: id {declared_id!r} out of order")
            samples.append(
                InstructionSample(
                    id=i,
                    instruction=_required_str(record, i, "instruction"),
                    input=_optional_input(record, i),
                    response=_required_str(record, i, "output"),
                )
            )

    if len(samples) < 2:
        raise TooSmallError(f"{path}: dataset has {len(samples)} samples, need at least 2")
    return Dataset(
        samples=tuple(samples),
        source_format=source_format,
        content_hash=_dataset_hash(samples),
    )


def _nonblank_lines(raw: str) -> list[str]:
    return [line for line in raw.splitlines() if line.strip()]


def sample_to_record(sample: InstructionSample, source_format: str) -> dict:
    """Shape one sample as a record of the given source format."""
    if source_format == "alpaca-json":
        return {
            "instruction": sample.instruction,
            "input": sample.input if sample.input is not None else "",
            "output": sample.response,
        }
    if source_format == "wizardlm-json":
        return {"instruction": sample.instruction, "output": sample.response}
    record: dict = {"id": sample.id, "instruction": sample.instruction}
    if sample.input is not None:
        record["input"] = sample.input
    record["output"] = sample.response
    return record


def save_dataset_jsonl(samples: Iterable[InstructionSample], path: str | Path) -> None:
    """Write samples as generic-jsonl (one record per line)."""
    lines = [_canonical_json(sample_to_record(s, "generic-jsonl")) for s in samples]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_profile(path: str | Path) -> TemplateProfile:
    """Load a template profile from a JSON file."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg} at position {exc.pos}", exc.pos) from exc
    if not isinstance(data, dict):
        raise ParseError(f"{path}: profile file must hold a JSON object")
    fields = (
        "name",
        "zero_shot_with_input",
        "zero_shot_no_input",
        "example_block",
        "separator",
        "one_shot_frame",
    )
    missing = [f for f in fields if not isinstance(data.get(f), str)]
    if missing:
        raise TemplateError(f"{path}: profile is missing string fields {missing}")
    return TemplateProfile(**{f: data[f] for f in fields})


def resolve_profile(spec: str | None) -> TemplateProfile:
    """Turn a profile spec (default name or a JSON file path) into a profile."""
    if spec is None or spec == ALPACA_PROFILE.name:
        return ALPACA_PROFILE
    return load_profile(spec)
