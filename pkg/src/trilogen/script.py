"""Timestamped prompt scripts: ``"1: text; 49: more text"``.

Each entry gives the 1-based frame at which a clip starts and the clip's
description. Clip ``n`` owns frames ``[t_n, t_{n+1} - 1]``; the last clip runs
to the end of the video.
"""

from __future__ import annotations

from dataclasses import dataclass

RESERVED = (":", ";")


class ScriptError(ValueError):
    pass


@dataclass(frozen=True)
class Clip:
    start_frame: int
    text: str


@dataclass(frozen=True)
class PromptScript:
    clips: tuple[Clip, ...]

    def __post_init__(self):
        clips = tuple(self.clips)
        object.__setattr__(self, "clips", clips)
        _validate(clips)

    @property
    def starts(self) -> list[int]:
        return [c.start_frame for c in self.clips]

    def __len__(self):
        return len(self.clips)

    def __str__(self):
        return serialize_script(self)


def _validate(clips) -> None:
    if not clips:
        raise ScriptError("a script needs at least one clip")
    prev = 0
    for i, clip in enumerate(clips, start=1):
        if not isinstance(clip.start_frame, int) or isinstance(clip.start_frame, bool):
            raise ScriptError(f"non-integer start_frame at entry {i}")
        if i == 1 and clip.start_frame != 1:
            raise ScriptError(f"first start_frame must be 1, got {clip.start_frame} at entry 1")
        if clip.start_frame <= prev:
            raise ScriptError(f"non-increasing start_frame at entry {i}")
        text = clip.text
        if not text or not text.strip():
            raise ScriptError(f"empty text at entry {i}")
        if text != text.strip():
            raise ScriptError(f"untrimmed text at entry {i}")
        if any(ch in text for ch in RESERVED):
            raise ScriptError(f"reserved delimiter in text at entry {i}")
        prev = clip.start_frame


def parse_script(src: str) -> PromptScript:
    """Parse ``INT ':' TEXT (';' INT ':' TEXT)*`` into a PromptScript.

    Raises:
        ScriptError: naming the offending entry ordinal.
    """
    if src is None or not src.strip():
        raise ScriptError("empty script")
    clips = []
    for i, entry in enumerate(src.split(";"), start=1):
        if ":" not in entry:
            if not entry.strip():
                raise ScriptError(f"empty entry at entry {i}")
            raise ScriptError(f"missing ':' at entry {i}")
        idx, text = entry.split(":", 1)
        idx = idx.strip()
        if not idx.isdigit() or not idx.isascii():
            raise ScriptError(f"non-integer start_frame {idx!r} at entry {i}")
        clips.append(Clip(int(idx), text.strip()))
    return PromptScript(tuple(clips))


def serialize_script(s: PromptScript) -> str:
    return "; ".join(f"{c.start_frame}: {c.text}" for c in s.clips)


def clip_frame_ranges(s: PromptScript, total_frames: int) -> list[tuple[int, int]]:
    """Inclusive 1-based ``(lo, hi)`` frame interval owned by each clip."""
    starts = s.starts
    if total_frames < starts[-1]:
        raise ScriptError(f"total_frames {total_frames} is before the last clip start {starts[-1]}")
    ends = [t - 1 for t in starts[1:]] + [total_frames]
    return list(zip(starts, ends))
