"""Duplicate detection over generated corpora: exact (normalized-key) and
near-duplicate (min-hash banded, exact-Jaccard verified) variants, plus the
duplication-rate report emitted per generation run.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import Sample

_WS_RUN = re.compile(r"\s+")
_TERMINAL_PUNCT = ".!?,;:…"

SHINGLE_WORDS = 3
DEFAULT_NUM_HASHES = 128
DEFAULT_BANDS = 32
_MINHASH_SEED = 0x5EED_1DEA


@dataclass(frozen=True)
class NormalizationPolicy:
    """Defines what counts as "the same text" for dedup purposes."""

    casefold: bool = True
    collapse_whitespace: bool = True
    strip_terminal_punct: bool = True

    def key(self, text: str) -> str:
        if self.casefold:
            text = text.casefold()
        if self.collapse_whitespace:
            text = _WS_RUN.sub(" ", text).strip()
        if self.strip_terminal_punct:
            text = text.rstrip(_TERMINAL_PUNCT).rstrip()
        return text


NORMALIZED = NormalizationPolicy()
EXACT_BYTES = NormalizationPolicy(casefold=False, collapse_whitespace=False,
                                  strip_terminal_punct=False)


@dataclass(frozen=True)
class DuplicationReport:
    """Duplication statistics over a generated corpus.

    dup_num counts entries beyond the first occurrence of each distinct key;
    the fixed-id fields restrict to duplicate pairs produced by the same
    prompt (dup_num_fixed_id is a pair count, dup_mean_fixed_id averages it
    over distinct prompt ids).
    """

    total: int
    dup_num: int
    dup_rate: float
    dup_num_fixed_id: int
    dup_mean_fixed_id: float
    clusters: tuple[tuple[str, tuple[str, ...]], ...]

    def __post_init__(self) -> None:
        distinct = self.total - self.dup_num
        if distinct < 0:
            raise ValueError("dup_num cannot exceed total")
        expected_rate = self.dup_num / self.total if self.total else 0.0
        if abs(self.dup_rate - expected_rate) > 1e-12:
            raise ValueError("dup_rate must equal dup_num / total")
        for key, members in self.clusters:
            if len(members) < 2:
                raise ValueError(f"cluster {key!r} has fewer than 2 members")

    def to_record(self) -> dict:
        return {
            "total": self.total,
            "dup_rate": self.dup_rate,
            "dup_num": self.dup_num,
            "dup_mean_fixed_id": self.dup_mean_fixed_id,
            "dup_num_fixed_id": self.dup_num_fixed_id,
            "clusters": [
                {"key": key, "member_ids": list(members)} for key, members in self.clusters
            ],
        }

    def to_table_row(self) -> dict:
        """Row shaped like the human-readable duplication table."""
        return {
            "dup_rate": f"{self.dup_rate * 100:.2f}%",
            "dup_num": self.dup_num,
            "dup_mean_fixed_id": f"{self.dup_mean_fixed_id:.2f}",
            "dup_num_fixed_id": self.dup_num_fixed_id,
        }


def dup_report(samples: Sequence[Sample],
               policy: NormalizationPolicy = NORMALIZED) -> DuplicationReport:
    """Compute exact-duplicate statistics under the normalization policy."""
    samples = list(samples)
    total = len(samples)
    by_key: dict[str, list[Sample]] = {}
    for s in samples:
        by_key.setdefault(policy.key(s.text), []).append(s)

    dup_num = total - len(by_key)
    clusters = tuple(
        (key, tuple(m.id for m in members))
        for key, members in by_key.items()
        if len(members) >= 2
    )

    pair_count = 0
    prompt_ids = {s.prompt_id for s in samples if s.prompt_id}
    for members in by_key.values():
        if len(members) < 2:
            continue
        per_prompt: dict[str, int] = {}
        for m in members:
            if m.prompt_id:
                per_prompt[m.prompt_id] = per_prompt.get(m.prompt_id, 0) + 1
        pair_count += sum(k * (k - 1) // 2 for k in per_prompt.values())

    mean = pair_count / len(prompt_ids) if prompt_ids else 0.0
    return DuplicationReport(
        total=total,
        dup_num=dup_num,
        dup_rate=dup_num / total if total else 0.0,
        dup_num_fixed_id=pair_count,
        dup_mean_fixed_id=mean,
        clusters=clusters,
    )


def shingle_set(text: str, policy: NormalizationPolicy = NORMALIZED,
                width: int = SHINGLE_WORDS) -> frozenset[str]:
    """Word shingles of the normalized text; short texts fall back to the
    whole normalized text so identical strings always match."""
    words = policy.key(text).split()
    if len(words) < width:
        return frozenset({" ".join(words)})
    return frozenset(" ".join(words[i:i + width]) for i in range(len(words) - width + 1))


def jaccard(a: frozenset[str], b: frozenset[str]) -> float:
    union = len(a | b)
    if union == 0:
        return 1.0
    return len(a & b) / union


def _hash64(value: str) -> int:
    return int.from_bytes(hashlib.blake2b(value.encode("utf-8"), digest_size=8).digest(),
                          "big")


def _mix64(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; uint64 arithmetic wraps, which is what we want.
    x = (x + np.uint64(0x9E3779B97F4A7C15)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def _signatures(shingles: list[frozenset[str]], num_hashes: int) -> np.ndarray:
    rng = np.random.default_rng(_MINHASH_SEED)
    seeds = rng.integers(0, 2 ** 63, size=num_hashes, dtype=np.uint64)
    sigs = np.full((len(shingles), num_hashes), np.iinfo(np.uint64).max, dtype=np.uint64)
    with np.errstate(over="ignore"):
        for i, sh in enumerate(shingles):
            if not sh:
                continue
            hashes = np.array([_hash64(s) for s in sorted(sh)], dtype=np.uint64)
            mixed = _mix64(hashes[:, None] ^ seeds[None, :])
            sigs[i] = mixed.min(axis=0)
    return sigs


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def near_dup_clusters(samples: Sequence[Sample], jaccard_threshold: float,
                      policy: NormalizationPolicy = NORMALIZED,
                      num_hashes: int = DEFAULT_NUM_HASHES,
                      bands: int = DEFAULT_BANDS) -> list[list[str]]:
    """Cluster samples whose word-shingle Jaccard similarity meets the
    threshold.

    Candidate pairs come from banded min-hash signatures and every candidate
    is verified with the exact Jaccard similarity, so there are no false
    positives. At threshold 1.0 this degenerates to exact normalized dedup.
    """
    if not 0 < jaccard_threshold <= 1:
        raise ValueError("jaccard_threshold must be in (0, 1]")
    samples = list(samples)
    if not samples:
        return []

    if jaccard_threshold == 1.0:
        report = dup_report(samples, policy)
        return [list(members) for _, members in report.clusters]

    if num_hashes % bands != 0:
        raise ValueError("num_hashes must be divisible by bands")
    rows = num_hashes // bands

    shingles = [shingle_set(s.text, policy) for s in samples]
    sigs = _signatures(shingles, num_hashes)

    candidates: set[tuple[int, int]] = set()
    for band in range(bands):
        buckets: dict[bytes, list[int]] = {}
        block = sigs[:, band * rows:(band + 1) * rows]
        for i in range(len(samples)):
            buckets.setdefault(block[i].tobytes(), []).append(i)
        for members in buckets.values():
            for a in range(len(members)):
                for b in range(a + 1, len(members)):
                    candidates.add((members[a], members[b]))

    # Exact-key duplicates are always candidates, whatever the banding did.
    by_key: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        by_key.setdefault(policy.key(s.text), []).append(i)
    for members in by_key.values():
        for a in range(len(members)):
            for b in range(a + 1, len(members)):
                candidates.add((members[a], members[b]))

    uf = _UnionFind(len(samples))
    for a, b in candidates:
        if jaccard(shingles[a], shingles[b]) >= jaccard_threshold:
            uf.union(a, b)

    groups: dict[int, list[int]] = {}
    for i in range(len(samples)):
        groups.setdefault(uf.find(i), []).append(i)
    clusters = [
        [samples[i].id for i in sorted(members)]
        for root, members in sorted(groups.items())
        if len(members) >= 2
    ]
    return clusters


def remove_duplicates(samples: Sequence[Sample],
                      policy: NormalizationPolicy = NORMALIZED,
                      protected: Iterable[Sample] | Iterable[str] = ()
                      ) -> tuple[list[Sample], list[Sample]]:
    """Drop all but the first occurrence of each normalized key.

    ``protected`` carries seed/few-shot material: any sample whose key
    collides with it is removed even on first occurrence, so generated data
    can never echo a seed verbatim.
    """
    protected_keys = {
        policy.key(p.text if isinstance(p, Sample) else p) for p in protected
    }
    seen: set[str] = set()
    unique: list[Sample] = []
    removed: list[Sample] = []
    for s in samples:
        key = policy.key(s.text)
        if key in protected_keys or key in seen:
            removed.append(s)
        else:
            seen.add(key)
            unique.append(s)
    return unique, removed


def write_report(report: DuplicationReport, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_record(), indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


def format_table(rows: dict[str, DuplicationReport]) -> str:
    """Human-readable table, one labeled row per report."""
    header = f"{'Run':<28} {'Dup Rate':>9} {'Dup Num':>8} {'Dup Mean for Fixed ID':>22} {'Dup Num for Fixed ID':>21}"
    lines = [header, "-" * len(header)]
    for label, report in rows.items():
        cells = report.to_table_row()
        lines.append(
            f"{label:<28} {cells['dup_rate']:>9} {cells['dup_num']:>8} "
            f"{cells['dup_mean_fixed_id']:>22} {cells['dup_num_fixed_id']:>21}"
        )
    return "\n".join(lines)
