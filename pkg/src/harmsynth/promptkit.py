"""Prompt rendering from the three-part Role / Requirement / Few-Shot structure.

Templates live in a data file (see assets/prompt_templates.json) keyed by
version and polarity, with per-category word substitutions applied at load
time. Rendering is a pure function of (spec, few-shot samples), so prompt ids
are stable and safe to use as cache keys downstream.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .corpus import CATEGORIES, LABELS, Dataset, Sample

log = logging.getLogger(__name__)

VERSIONS = ("V1", "V2", "V3")
SAMPLE_MODES = ("long", "short")

# Character-length boundary between "short" and "long" few-shot samples.
DEFAULT_SHORT_MAX = 120

# Every template body must instruct numbered output exactly once.
NUMBERED_OUTPUT_CLAUSE = "formatted as '1.', '2.', '3.', etc."

# Substrings that mark a template as using an alignment-bypass framing.
# Flagged with a policy warning at load time; kept verbatim as data.
_BYPASS_MARKERS = ("Absolutely Obedient Agent", "AOA")


class TemplateError(KeyError):
    """A template lookup or template file problem."""


class FewShotError(ValueError):
    """A few-shot selection request cannot be satisfied."""


@dataclass(frozen=True)
class PromptSpec:
    """A renderable prompt: which template, which polarity/category, and how
    many few-shot samples of which length class to attach."""

    version: str
    polarity: str
    category: str
    role_text: str
    requirement_text: str
    few_shot_count: int = 0
    sample_mode: str = "short"
    requested_entries: int = 30

    def __post_init__(self) -> None:
        if self.version not in VERSIONS:
            raise ValueError(f"unknown template version {self.version!r}")
        if self.polarity not in LABELS:
            raise ValueError(f"unknown polarity {self.polarity!r}")
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        if not self.role_text.strip() or not self.requirement_text.strip():
            raise ValueError("role_text and requirement_text must be non-empty")
        if self.few_shot_count < 0:
            raise ValueError("few_shot_count must be >= 0")
        if self.sample_mode not in SAMPLE_MODES:
            raise ValueError(f"unknown sample_mode {self.sample_mode!r}")
        if self.requested_entries < 1:
            raise ValueError("requested_entries must be >= 1")


@dataclass(frozen=True)
class RenderedPrompt:
    prompt_id: str
    text: str
    few_shot_ids: tuple[str, ...]


class TemplateRegistry:
    """Immutable map from (version, polarity, category) to template bodies."""

    def __init__(self, entries: dict[tuple[str, str, str], tuple[str, str]]):
        self._entries = dict(entries)
        self.policy_flags: dict[tuple[str, str, str], str] = {}
        for key, (role, requirement) in self._entries.items():
            body = role + "\n" + requirement
            if not role.strip() or not requirement.strip():
                raise TemplateError(f"template {key} has an empty body")
            if NUMBERED_OUTPUT_CLAUSE not in body:
                raise TemplateError(f"template {key} lacks the numbered-output clause")
            for marker in _BYPASS_MARKERS:
                if marker in body:
                    self.policy_flags[key] = (
                        f"template {key} uses an alignment-bypass framing ({marker!r}); "
                        "review before any live use"
                    )
                    break
        for key, msg in sorted(self.policy_flags.items()):
            log.warning("policy: %s", msg)

    def keys(self) -> list[tuple[str, str, str]]:
        return sorted(self._entries)

    def get(self, version: str, polarity: str, category: str) -> tuple[str, str]:
        key = (version, polarity, category)
        if key not in self._entries:
            raise TemplateError(f"no template registered for {key}")
        return self._entries[key]

    def spec_for(self, version: str, polarity: str, category: str, *,
                 few_shot_count: int = 0, sample_mode: str = "short",
                 requested_entries: int = 30) -> PromptSpec:
        role, requirement = self.get(version, polarity, category)
        return PromptSpec(
            version=version,
            polarity=polarity,
            category=category,
            role_text=role,
            requirement_text=requirement,
            few_shot_count=few_shot_count,
            sample_mode=sample_mode,
            requested_entries=requested_entries,
        )

    def save(self, path: str | Path) -> Path:
        """Write the fully-expanded registry as a flat template file."""
        path = Path(path)
        flat = {
            "format": "flat",
            "entries": [
                {
                    "version": v,
                    "polarity": p,
                    "category": c,
                    "role": role,
                    "requirement": req,
                }
                for (v, p, c), (role, req) in sorted(self._entries.items())
            ],
        }
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(flat, indent=2, ensure_ascii=False) + "\n",
                        encoding="utf-8")
        return path

    def __eq__(self, other: object) -> bool:
        return isinstance(other, TemplateRegistry) and self._entries == other._entries


def _default_template_text() -> str:
    return (resources.files("harmsynth") / "assets" / "prompt_templates.json").read_text(
        encoding="utf-8"
    )


def load_templates(path: str | Path | None = None) -> TemplateRegistry:
    """Load a template file (skeleton or flat format) into a registry.

    With no path, loads the packaged defaults, which carry the stock V1/V2/V3
    positive and negative bodies for every category.
    """
    if path is None:
        raw = _default_template_text()
        src = "<packaged defaults>"
    else:
        raw = Path(path).read_text(encoding="utf-8")
        src = str(path)
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise TemplateError(f"{src}: invalid template file: {exc.msg}") from exc

    fmt = data.get("format", "skeleton")
    entries: dict[tuple[str, str, str], tuple[str, str]] = {}
    if fmt == "flat":
        for rec in data.get("entries", []):
            key = (rec["version"], rec["polarity"], rec["category"])
            entries[key] = (rec["role"], rec["requirement"])
    elif fmt == "skeleton":
        subs = data.get("substitutions", {})
        templates = data.get("templates", {})
        for version in VERSIONS:
            if version not in templates:
                raise TemplateError(f"{src}: missing templates for version {version}")
            for polarity in LABELS:
                if polarity not in templates[version]:
                    raise TemplateError(
                        f"{src}: missing {polarity} template for version {version}"
                    )
                body = templates[version][polarity]
                for category, words in subs.items():
                    role = body["role"].format(**words)
                    requirement = body["requirement"].format(**words)
                    entries[(version, polarity, category)] = (role, requirement)
    else:
        raise TemplateError(f"{src}: unknown template file format {fmt!r}")
    if not entries:
        raise TemplateError(f"{src}: template file defines no entries")
    return TemplateRegistry(entries)


def select_few_shot(pool: Dataset, k: int, mode: str, seed: int, *,
                    polarity: str, category: str,
                    short_max: int = DEFAULT_SHORT_MAX) -> list[Sample]:
    """Pick k distinct few-shot samples of the requested length class.

    ``short`` means text length <= short_max characters, ``long`` means
    strictly longer. Selection is a seeded uniform draw, and evaluation
    splits are refused outright so eval text can never leak into a prompt.
    """
    if mode not in SAMPLE_MODES:
        raise FewShotError(f"unknown sample mode {mode!r}")
    if k < 0:
        raise FewShotError("k must be >= 0")
    if pool.role == "eval":
        raise FewShotError(
            f"dataset {pool.name!r} is an eval split and cannot supply few-shot samples"
        )
    eligible = [
        s for s in pool.filter(label=polarity, category=category)
        if (len(s.text) <= short_max) == (mode == "short")
    ]
    if len(eligible) < k:
        raise FewShotError(
            f"need {k} {mode} {polarity}/{category} samples, only {len(eligible)} eligible"
        )
    return random.Random(seed).sample(eligible, k)


def render(spec: PromptSpec, few_shot: list[Sample]) -> RenderedPrompt:
    """Render the final prompt text: role, requirement, then the few-shot block.

    Few-shot samples are listed once each under a "Samples:" header as
    "- <text>" lines (no leading digits, so they cannot collide with the
    numbered output format the prompt requests).
    """
    if len(few_shot) != spec.few_shot_count:
        raise ValueError(
            f"spec expects {spec.few_shot_count} few-shot samples, got {len(few_shot)}"
        )
    texts = [s.text for s in few_shot]
    if len(set(texts)) != len(texts):
        raise ValueError("few-shot samples must have distinct texts")

    parts = [f"{spec.role_text} {spec.requirement_text}"]
    if few_shot:
        block = "\n".join(f"- {t}" for t in texts)
        parts.append(f"Samples:\n{block}")
    text = "\n\n".join(parts)

    ids = tuple(s.id for s in few_shot)
    digest_input = json.dumps(
        {
            "version": spec.version,
            "polarity": spec.polarity,
            "category": spec.category,
            "role": spec.role_text,
            "requirement": spec.requirement_text,
            "sample_mode": spec.sample_mode,
            "requested_entries": spec.requested_entries,
            "few_shot_ids": list(ids),
        },
        sort_keys=True,
        ensure_ascii=False,
    )
    prompt_id = hashlib.sha256(digest_input.encode("utf-8")).hexdigest()[:16]
    return RenderedPrompt(prompt_id=prompt_id, text=text, few_shot_ids=ids)
