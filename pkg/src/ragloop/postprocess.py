"""Rule-based cleaning of generator output.

Strips phrases that reveal the text was machine-written before it enters
the corpus. The phrase list ships as a plain-text resource and can be
replaced or extended without touching code.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

_WS_RE = re.compile(r"\s+")
# leftover clause separators at the start of the text once a leading
# phrase plus its comma has been removed
_DANGLING_HEAD_RE = re.compile(r"^[\s,;:]+")


class PhraseList:
    """Ordered list of literal phrases; matching is case-insensitive.

    Longer phrases are applied first so that removing a short phrase never
    leaves fragments of a longer one behind.
    """

    def __init__(self, phrases: list[str]):
        cleaned = [p.strip() for p in phrases]
        if any(not p for p in cleaned):
            raise ValueError("phrase list must not contain empty phrases")
        self.phrases = cleaned
        ordered = sorted(cleaned, key=len, reverse=True)
        self._patterns = [
            re.compile(re.escape(p) + r"[,\s]*", re.IGNORECASE) for p in ordered
        ]

    def __len__(self) -> int:
        return len(self.phrases)

    def contains_any(self, text: str) -> bool:
        lowered = text.lower()
        return any(p.lower() in lowered for p in self.phrases)

    @classmethod
    def from_file(cls, path: str | Path) -> "PhraseList":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        phrases = [ln.strip() for ln in lines
                   if ln.strip() and not ln.lstrip().startswith("#")]
        return cls(phrases)


def default_phrase_list() -> PhraseList:
    ref = resources.files("ragloop").joinpath("data/phrases.txt")
    lines = ref.read_text(encoding="utf-8").splitlines()
    phrases = [ln.strip() for ln in lines
               if ln.strip() and not ln.lstrip().startswith("#")]
    return PhraseList(phrases)


_DEFAULT: PhraseList | None = None


def _default() -> PhraseList:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = default_phrase_list()
    return _DEFAULT


@dataclass
class CleanResult:
    text: str
    removed: int
    kept_original: bool


def clean_detailed(text: str, phrases: PhraseList | None = None) -> CleanResult:
    """Remove every phrase occurrence; report what happened.

    Each match is deleted together with any directly following commas and
    whitespace, then whitespace is normalized. Cleaning that would empty
    the text keeps the original instead (flagged), so a document is never
    destroyed outright.
    """
    plist = phrases if phrases is not None else _default()
    out = text
    removed = 0
    # repeat until fixed point: a removal can expose a new match at the seam,
    # and collapsing whitespace can reassemble a phrase split by an earlier
    # removal, so rescan after every normalization
    for _ in range(100):
        changed = False
        for pattern in plist._patterns:
            out, n = pattern.subn(" ", out)
            if n:
                removed += n
                changed = True
        if not changed:
            break
        out = _WS_RE.sub(" ", out)
    out = _DANGLING_HEAD_RE.sub("", out)
    out = _WS_RE.sub(" ", out).strip()
    if text.strip() and not out:
        return CleanResult(text=text, removed=removed, kept_original=True)
    if removed == 0:
        return CleanResult(text=text, removed=0, kept_original=False)
    return CleanResult(text=out, removed=removed, kept_original=False)


def clean(text: str, phrases: PhraseList | None = None) -> str:
    """Cleaned text; see clean_detailed for the exact rules."""
    return clean_detailed(text, phrases).text
