"""Labeled-sample data model, jsonl/csv ingestion, and seeded sampling.

Datasets are immutable after construction: every operation returns a new
Dataset, so values can be shared freely across threads.
"""

from __future__ import annotations

import csv
import json
import random
import re
import unicodedata
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator

CATEGORIES = ("hate", "sexual", "violence", "self_harm", "political")
LABELS = ("positive", "negative")
SOURCES = ("seed", "generated", "external")
ROLES = ("train", "harmful", "augmented", "eval")

_CRLF_RUN = re.compile(r"[\r\n]+")


class IngestError(ValueError):
    """An input file could not be turned into a valid Dataset."""


class SamplingError(ValueError):
    """A sampling request cannot be satisfied by the given dataset."""


def normalize_text(text: str) -> str:
    """Canonicalize raw record text: Unicode NFC, outer whitespace trimmed,
    internal CR/LF runs collapsed to single spaces."""
    text = unicodedata.normalize("NFC", text)
    text = _CRLF_RUN.sub(" ", text)
    return text.strip()


@dataclass(frozen=True)
class Sample:
    """One labeled text record. ``positive`` means harmful."""

    id: str
    text: str
    label: str
    category: str
    source: str = "seed"
    prompt_id: str | None = None
    model_id: str | None = None

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("sample id must be a non-empty string")
        if not self.text or not self.text.strip():
            raise ValueError(f"sample {self.id!r}: text is empty")
        if self.label not in LABELS:
            raise ValueError(f"sample {self.id!r}: unknown label {self.label!r}")
        if self.category not in CATEGORIES:
            raise ValueError(f"sample {self.id!r}: unknown category {self.category!r}")
        if self.source not in SOURCES:
            raise ValueError(f"sample {self.id!r}: unknown source {self.source!r}")
        if self.source == "generated" and not (self.prompt_id and self.model_id):
            raise ValueError(
                f"sample {self.id!r}: generated samples must carry prompt_id and model_id"
            )

    def to_record(self) -> dict:
        rec = {
            "id": self.id,
            "text": self.text,
            "label": self.label,
            "category": self.category,
            "source": self.source,
        }
        if self.prompt_id is not None:
            rec["prompt_id"] = self.prompt_id
        if self.model_id is not None:
            rec["model_id"] = self.model_id
        return rec

    @classmethod
    def from_record(cls, rec: dict, fallback_id: str | None = None,
                    default_source: str = "seed") -> "Sample":
        """Build a Sample from a parsed record, normalizing the text."""
        missing = [k for k in ("text", "label", "category") if not rec.get(k)]
        if missing:
            raise ValueError(f"missing required field(s): {', '.join(missing)}")
        sample_id = rec.get("id") or fallback_id
        if not sample_id:
            raise ValueError("missing required field(s): id")
        return cls(
            id=str(sample_id),
            text=normalize_text(str(rec["text"])),
            label=str(rec["label"]),
            category=str(rec["category"]),
            source=str(rec.get("source") or default_source),
            prompt_id=rec.get("prompt_id") or None,
            model_id=rec.get("model_id") or None,
        )


@dataclass(frozen=True)
class Dataset:
    """An ordered, id-unique collection of Samples with cached label counts."""

    name: str
    role: str
    samples: tuple[Sample, ...]
    category_counts: dict[str, tuple[int, int]] = field(init=False, compare=False)

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"dataset {self.name!r}: unknown role {self.role!r}")
        if not isinstance(self.samples, tuple):
            object.__setattr__(self, "samples", tuple(self.samples))
        seen: set[str] = set()
        dupes: list[str] = []
        for s in self.samples:
            if s.id in seen:
                dupes.append(s.id)
            seen.add(s.id)
        if dupes:
            raise ValueError(f"dataset {self.name!r}: duplicate ids: {sorted(set(dupes))}")
        object.__setattr__(self, "category_counts", count_by_category(self.samples))

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def ids(self) -> set[str]:
        return {s.id for s in self.samples}

    def positives(self) -> list[Sample]:
        return [s for s in self.samples if s.label == "positive"]

    def negatives(self) -> list[Sample]:
        return [s for s in self.samples if s.label == "negative"]

    def filter(self, *, label: str | None = None, category: str | None = None,
               source: str | None = None) -> list[Sample]:
        out = []
        for s in self.samples:
            if label is not None and s.label != label:
                continue
            if category is not None and s.category != category:
                continue
            if source is not None and s.source != source:
                continue
            out.append(s)
        return out

    def with_role(self, role: str, name: str | None = None) -> "Dataset":
        return Dataset(name=name or self.name, role=role, samples=self.samples)


def count_by_category(samples: Iterable[Sample]) -> dict[str, tuple[int, int]]:
    """Recount (positive, negative) per category from scratch."""
    counts: dict[str, list[int]] = {}
    for s in samples:
        pair = counts.setdefault(s.category, [0, 0])
        pair[0 if s.label == "positive" else 1] += 1
    return {cat: (p, n) for cat, (p, n) in counts.items()}


def ingest(path: str | Path, format: str = "jsonl", *, name: str | None = None,
           role: str = "train", default_source: str = "seed") -> Dataset:
    """Read a jsonl or csv file into a validated Dataset.

    Every record must provide text, label, and category; ids are taken from
    the file when present and assigned positionally otherwise. Any malformed
    record fails the whole ingest, with one diagnostic per offending line.
    """
    path = Path(path)
    if format not in ("jsonl", "csv"):
        raise IngestError(f"unknown format {format!r} (expected jsonl or csv)")
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IngestError(f"cannot read {path}: {exc}") from exc

    ds_name = name or path.stem
    samples: list[Sample] = []
    problems: list[str] = []

    if format == "jsonl":
        rows: list[tuple[int, dict]] = []
        for lineno, line in enumerate(raw.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                problems.append(f"line {lineno}: invalid json ({exc.msg})")
                continue
            if not isinstance(rec, dict):
                problems.append(f"line {lineno}: record is not an object")
                continue
            rows.append((lineno, rec))
    else:
        try:
            reader = csv.DictReader(raw.splitlines())
            rows = [(i, dict(rec)) for i, rec in enumerate(reader, start=2)]
        except csv.Error as exc:
            raise IngestError(f"{path}: csv parse error: {exc}") from exc

    seen_ids: set[str] = set()
    for lineno, rec in rows:
        try:
            sample = Sample.from_record(
                rec, fallback_id=f"{ds_name}-{lineno:06d}", default_source=default_source
            )
        except ValueError as exc:
            problems.append(f"line {lineno}: {exc}")
            continue
        if sample.id in seen_ids:
            problems.append(f"line {lineno}: duplicate id {sample.id!r}")
            continue
        seen_ids.add(sample.id)
        samples.append(sample)

    if problems:
        shown = "; ".join(problems[:20])
        more = f" (+{len(problems) - 20} more)" if len(problems) > 20 else ""
        raise IngestError(f"{path}: {shown}{more}")
    if not samples:
        raise IngestError(f"{path}: no records")
    return Dataset(name=ds_name, role=role, samples=tuple(samples))


def write_jsonl(dataset: Dataset, path: str | Path) -> Path:
    """Write a Dataset in the canonical one-record-per-line format (UTF-8, LF)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(s.to_record(), ensure_ascii=False) for s in dataset.samples]
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return path


def balanced_sample(d: Dataset, n_pos: int, n_neg: int, seed: int,
                    *, name: str | None = None) -> Dataset:
    """Draw exactly n_pos positives and n_neg negatives uniformly without
    replacement. Deterministic for a fixed (dataset, counts, seed)."""
    if n_pos < 0 or n_neg < 0:
        raise SamplingError("requested counts must be non-negative")
    pos, neg = d.positives(), d.negatives()
    if len(pos) < n_pos:
        raise SamplingError(
            f"dataset {d.name!r}: need {n_pos} positives, only {len(pos)} available"
        )
    if len(neg) < n_neg:
        raise SamplingError(
            f"dataset {d.name!r}: need {n_neg} negatives, only {len(neg)} available"
        )
    rng = random.Random(seed)
    chosen = rng.sample(pos, n_pos) + rng.sample(neg, n_neg)
    return Dataset(
        name=name or f"{d.name}-balanced",
        role=d.role,
        samples=tuple(chosen),
    )


def split_eval(d: Dataset, n: int, seed: int) -> tuple[Dataset, Dataset]:
    """Split off an n-sample evaluation set, stratified by label.

    The eval positive fraction matches the source within one sample per
    polarity; train and eval are disjoint by id and together cover d.
    """
    if n < 0:
        raise SamplingError("eval size must be non-negative")
    if n >= len(d):
        raise SamplingError(f"eval size {n} must be smaller than dataset size {len(d)}")
    pos, neg = d.positives(), d.negatives()
    target_pos = round(n * len(pos) / len(d)) if len(d) else 0
    target_pos = min(target_pos, len(pos), n)
    target_pos = max(target_pos, n - len(neg))
    target_neg = n - target_pos

    rng = random.Random(seed)
    eval_ids = {s.id for s in rng.sample(pos, target_pos)}
    eval_ids.update(s.id for s in rng.sample(neg, target_neg))

    eval_samples = tuple(s for s in d.samples if s.id in eval_ids)
    train_samples = tuple(s for s in d.samples if s.id not in eval_ids)
    train = Dataset(name=f"{d.name}-train", role=d.role, samples=train_samples)
    eval_ds = Dataset(name=f"{d.name}-eval", role="eval", samples=eval_samples)
    return train, eval_ds


def relabel_source(sample: Sample, source: str) -> Sample:
    return replace(sample, source=source)
