"""Ordered banks of feeling descriptions used as encoder prompts.

Channel order is a public contract: feature caches and checkpoints
record the bank digest and refuse to mix banks.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

from .errors import PromptError

OBJECTIVE = "objective"
SUBJECTIVE = "subjective"
KINDS = (OBJECTIVE, SUBJECTIVE)

# Objective descriptions name measurable quality factors, subjective ones
# name felt reactions to content. Paired so each quality axis has both ends.
_DEFAULT_OBJECTIVE = ("bright", "blurry", "noisy", "colorful", "dark", "sharp", "clean", "contrast")
_DEFAULT_SUBJECTIVE = ("pleasant", "boring", "interesting", "exciting", "depressing", "fearful",
                       "calm", "annoying")


@dataclass(frozen=True)
class Description:
    text: str
    kind: str
    index: int


@dataclass(frozen=True)
class PromptBank:
    descriptions: tuple[Description, ...]
    digest: str

    def __len__(self) -> int:
        return len(self.descriptions)

    @property
    def r(self) -> int:
        return len(self.descriptions)

    def texts(self) -> list[str]:
        return [d.text for d in self.descriptions]

    def kinds_present(self) -> set[str]:
        return {d.kind for d in self.descriptions}

    def channel_of(self, text: str) -> int:
        for d in self.descriptions:
            if d.text == text:
                return d.index
        raise PromptError(f"description {text!r} is not in the bank")


def _digest(pairs: list[tuple[str, str]]) -> str:
    h = hashlib.sha256()
    for kind, text in pairs:
        h.update(kind.encode("utf-8"))
        h.update(b":")
        h.update(text.encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def build_bank(pairs: list[tuple[str, str]]) -> PromptBank:
    """Construct a bank from ordered (kind, text) pairs."""
    if not pairs:
        raise PromptError("prompt bank cannot be empty")
    descriptions = []
    for idx, (kind, text) in enumerate(pairs):
        if kind not in KINDS:
            raise PromptError(f"unknown description kind {kind!r} (expected one of {KINDS})")
        if not text.strip():
            raise PromptError(f"empty description text at position {idx}")
        descriptions.append(Description(text=text.strip(), kind=kind, index=idx))
    return PromptBank(descriptions=tuple(descriptions), digest=_digest(pairs))


def default_bank() -> PromptBank:
    """The stock 16-channel bank: objective block first, then subjective."""
    pairs = [(OBJECTIVE, t) for t in _DEFAULT_OBJECTIVE]
    pairs += [(SUBJECTIVE, t) for t in _DEFAULT_SUBJECTIVE]
    return build_bank(pairs)


def load_bank(path: str | Path) -> PromptBank:
    """Load a bank from a `kind,text` CSV, one description per line."""
    p = Path(path)
    if not p.is_file():
        raise PromptError(f"prompts file not found: {p}")
    pairs: list[tuple[str, str]] = []
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if "," not in line:
            raise PromptError(f"{p}:{lineno}: expected 'kind,text'")
        kind, _, text = line.partition(",")
        pairs.append((kind.strip(), text.strip()))
    return build_bank(pairs)


def subset(bank: PromptBank, kinds: set[str]) -> PromptBank:
    """Keep only descriptions of the given kinds; reindex contiguously."""
    if not kinds:
        raise PromptError("subset kinds must be nonempty")
    unknown = kinds - set(KINDS)
    if unknown:
        raise PromptError(f"unknown kinds {sorted(unknown)}")
    pairs = [(d.kind, d.text) for d in bank.descriptions if d.kind in kinds]
    if not pairs:
        raise PromptError(f"subset over kinds {sorted(kinds)} is empty for this bank")
    return build_bank(pairs)


def render_prompts(bank: PromptBank, template: str = "<d>") -> list[str]:
    """Render descriptions with the template; `<d>` is the lowercased text."""
    if "<d>" not in template:
        raise PromptError(f"prompt template must contain '<d>', got {template!r}")
    return [template.replace("<d>", d.text.lower()) for d in bank.descriptions]
