"""Parsing of numbered-list model output and quality filtering of the parsed
entries.

The filters are cheap lexical heuristics aimed at the recurring failure
shapes of generator output: random character noise, internally repetitive
text, decorative symbol wrapping, refusal boilerplate echoed into an entry,
and fragments too short to be usable. Semantic screening is deliberately out
of scope here; that is the downstream classifier's job.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

from .corpus import Sample
from .dedup import NORMALIZED, NormalizationPolicy
from .genclient import DEFAULT_REFUSAL_PATTERNS, GenerationBatch, detect_refusal, with_counts

VERDICTS = ("accepted", "noise", "repetitive", "formatting", "too_short", "refusal_echo")

# Line-leading "N." or "N)" markers. "N." is the requested format; "N)" shows
# up often enough in real model output to be worth accepting.
_MARKER = re.compile(r"^[ \t]*(\d+)[.)][ \t]*", re.MULTILINE)

_ALPHA_WORD = re.compile(r"[^\W\d_]+", re.UNICODE)
_TOKEN = re.compile(r"[a-z0-9']+")
_ALNUM_RUN = re.compile(r"[^\W_]+", re.UNICODE)

# Ordinary sentence punctuation. An edge run made only of these (e.g. a
# trailing "...") is normal prose, not a formatting glitch.
_SENTENCE_PUNCT = set(".,!?;:'\"…‘’“”")


@dataclass(frozen=True)
class FilterConfig:
    """Thresholds for the quality filters. Defaults are calibrated, not
    sacred; every knob can be overridden from a config file."""

    noise_symbol_ratio: float = 0.30
    min_alnum_run: int = 3
    shingle_words: int = 4
    shingle_repeats: int = 3
    context_duplicates: int = 2
    edge_symbol_run: int = 3
    min_alpha_words: int = 3
    refusal_patterns: tuple[str, ...] = DEFAULT_REFUSAL_PATTERNS
    normalization: NormalizationPolicy = NORMALIZED

    @classmethod
    def from_file(cls, path: str | Path) -> "FilterConfig":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        kwargs = {}
        for key in ("noise_symbol_ratio", "min_alnum_run", "shingle_words",
                    "shingle_repeats", "context_duplicates", "edge_symbol_run",
                    "min_alpha_words"):
            if key in data:
                kwargs[key] = data[key]
        if "refusal_patterns" in data:
            kwargs["refusal_patterns"] = tuple(data["refusal_patterns"])
        return cls(**kwargs)


DEFAULT_FILTERS = FilterConfig()


@dataclass(frozen=True)
class ParsedEntry:
    index: int
    text: str
    verdict: str | None = None
    renumbered: bool = False

    def __post_init__(self) -> None:
        if self.verdict is not None and self.verdict not in VERDICTS:
            raise ValueError(f"unknown verdict {self.verdict!r}")


def parse_numbered(raw: str) -> list[ParsedEntry]:
    """Split raw model output on line-leading numbered markers.

    Entry text runs from its marker to the next marker (or end of input) and
    is whitespace-trimmed. Out-of-order numbering is repaired to a strictly
    increasing sequence and the repaired entries are flagged. Unstructured
    input yields an empty list; the parser never raises.
    """
    if not raw:
        return []
    matches = list(_MARKER.finditer(raw))
    if not matches:
        return []
    entries: list[ParsedEntry] = []
    last_index = 0
    for pos, m in enumerate(matches):
        start = m.end()
        end = matches[pos + 1].start() if pos + 1 < len(matches) else len(raw)
        text = raw[start:end].strip()
        index = int(m.group(1))
        renumbered = False
        if index <= last_index:
            index = last_index + 1
            renumbered = True
        last_index = index
        entries.append(ParsedEntry(index=index, text=text, renumbered=renumbered))
    return entries


def _edge_run_length(text: str, reverse: bool) -> int:
    """Length of the leading (or trailing) non-alphanumeric run, ignoring
    runs made purely of ordinary sentence punctuation."""
    chars = reversed(text) if reverse else text
    run: list[str] = []
    for ch in chars:
        if ch.isalnum():
            break
        if ch.isspace():
            break
        run.append(ch)
    if all(ch in _SENTENCE_PUNCT for ch in run):
        return 0
    return len(run)


def _symbol_ratio(text: str) -> float:
    meat = [ch for ch in text if not ch.isspace()]
    if not meat:
        return 0.0
    symbols = sum(1 for ch in meat if not ch.isalnum())
    return symbols / len(meat)


def _longest_alnum_run(text: str) -> int:
    runs = _ALNUM_RUN.findall(text)
    return max((len(r) for r in runs), default=0)


def _has_internal_repetition(text: str, width: int, repeats: int) -> bool:
    tokens = _TOKEN.findall(text.casefold())
    if len(tokens) < width:
        return False
    counts: dict[tuple[str, ...], int] = {}
    for i in range(len(tokens) - width + 1):
        shingle = tuple(tokens[i:i + width])
        counts[shingle] = counts.get(shingle, 0) + 1
        if counts[shingle] >= repeats:
            return True
    return False


def quality_filter(entry: ParsedEntry, batch_context: Sequence[ParsedEntry],
                   config: FilterConfig = DEFAULT_FILTERS) -> str:
    """Classify one parsed entry.

    Checks run in a fixed order: refusal echo, then decorative edge symbols,
    then character noise, then repetition (internal or duplicated within the
    batch), then the minimum-length floor. The first hit wins.
    """
    text = entry.text
    if detect_refusal(text, config.refusal_patterns):
        return "refusal_echo"
    if (_edge_run_length(text, reverse=False) >= config.edge_symbol_run
            or _edge_run_length(text, reverse=True) >= config.edge_symbol_run):
        return "formatting"
    if (_symbol_ratio(text) > config.noise_symbol_ratio
            or _longest_alnum_run(text) < config.min_alnum_run):
        return "noise"
    if _has_internal_repetition(text, config.shingle_words, config.shingle_repeats):
        return "repetitive"
    key = config.normalization.key(text)
    twins = sum(
        1 for other in batch_context
        if other is not entry and config.normalization.key(other.text) == key
    )
    if twins >= config.context_duplicates:
        return "repetitive"
    if len(_ALPHA_WORD.findall(text)) < config.min_alpha_words:
        return "too_short"
    return "accepted"


def apply_filters(entries: Sequence[ParsedEntry],
                  config: FilterConfig = DEFAULT_FILTERS) -> list[ParsedEntry]:
    """Assign verdicts to a whole batch of parsed entries."""
    entries = list(entries)
    return [replace(e, verdict=quality_filter(e, entries, config)) for e in entries]


def to_samples(entries: Sequence[ParsedEntry], category: str, polarity: str,
               prompt_id: str, model_id: str) -> list[Sample]:
    """Turn accepted entries into generated Samples.

    Ids are content-derived, so re-running the same batch yields the same
    ids, which keeps whole-run artifacts reproducible.
    """
    import hashlib

    for e in entries:
        if e.verdict is None:
            raise ValueError("entries must be filtered before conversion")
    samples = []
    for e in entries:
        if e.verdict != "accepted":
            continue
        digest = hashlib.sha256(
            f"{prompt_id}|{model_id}|{e.index}|{e.text}".encode("utf-8")
        ).hexdigest()[:16]
        samples.append(Sample(
            id=f"gen-{digest}",
            text=e.text,
            label=polarity,
            category=category,
            source="generated",
            prompt_id=prompt_id,
            model_id=model_id,
        ))
    return samples


def process_batch(batch: GenerationBatch, category: str, polarity: str,
                  model_id: str, config: FilterConfig = DEFAULT_FILTERS
                  ) -> tuple[GenerationBatch, list[ParsedEntry], list[Sample]]:
    """Parse, filter, and convert one generation batch, returning the batch
    with its parsed/valid counts attached."""
    entries = apply_filters(parse_numbered(batch.raw_output), config)
    if batch.status == "refusal":
        # Refusal text is not data; nothing from it may survive.
        entries = [replace(e, verdict="refusal_echo") for e in entries]
    samples = to_samples(entries, category, polarity, batch.prompt_id, model_id)
    accepted = sum(1 for e in entries if e.verdict == "accepted")
    return with_counts(batch, parsed_count=len(entries), valid_count=accepted), entries, samples


def write_verdicts(entries: Sequence[ParsedEntry], prompt_id: str,
                   path: str | Path) -> Path:
    """Append one verdict record per entry to the per-batch report file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps({
                "prompt_id": prompt_id,
                "index": e.index,
                "verdict": e.verdict,
                "renumbered": e.renumbered,
                "text": e.text,
            }, ensure_ascii=False) + "\n")
    return path
