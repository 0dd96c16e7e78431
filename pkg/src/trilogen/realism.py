"""Visual-realism reward against a reference corpus.

Every frame is scored by its smallest ORB distance to any reference image and
the video is scored by its worst frame: ``r_a = -max_frames min_refs D``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .imagekit import Image, Video, read_pnm
from .orbmatch import Features, OrbParams, distance_from_features, extract_features

MATCH_FLOOR = 1e-6
_SUFFIXES = (".pgm", ".ppm", ".pnm")


@dataclass(frozen=True)
class CorpusEntry:
    id: str
    image: Image
    features: Features

    @property
    def flagged(self) -> bool:
        """True if the entry has too few keypoints to ever beat D = 1."""
        return len(self.features) < OrbParams().min_matches


@dataclass(frozen=True)
class ReferenceCorpus:
    entries: tuple[CorpusEntry, ...]
    params: OrbParams = OrbParams()

    def __post_init__(self):
        entries = tuple(sorted(self.entries, key=lambda e: e.id))
        if not entries:
            raise ValueError("a reference corpus needs at least one entry")
        object.__setattr__(self, "entries", entries)

    def __len__(self):
        return len(self.entries)

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def with_entry(self, entry_id: str, image: Image) -> "ReferenceCorpus":
        return ReferenceCorpus(self.entries + (make_entry(entry_id, image, self.params),), self.params)


@dataclass(frozen=True)
class RealismReport:
    per_frame_min_distance: tuple[float, ...]
    argmin_reference_id: tuple[str, ...]
    worst_frame_index: int  # 1-based
    reward: float

    def to_text(self, first_frame: int = 1) -> str:
        lines = ["frame_id,min_distance,argmin_reference_id"]
        for i, (d, rid) in enumerate(zip(self.per_frame_min_distance, self.argmin_reference_id)):
            lines.append(f"{first_frame + i},{d!r},{rid}")
        lines.append(f"# worst_frame={self.worst_frame_index}")
        lines.append(f"# r_a={self.reward!r}")
        return "\n".join(lines) + "\n"


def make_entry(entry_id: str, image: Image, params: OrbParams = OrbParams()) -> CorpusEntry:
    return CorpusEntry(entry_id, image, extract_features(image, params))


def corpus_from_images(images: dict[str, Image], params: OrbParams = OrbParams()) -> ReferenceCorpus:
    return ReferenceCorpus(tuple(make_entry(k, v, params) for k, v in sorted(images.items())), params)


def build_corpus(directory, params: OrbParams = OrbParams()) -> ReferenceCorpus:
    """Load every P5/P6 file in ``directory`` in filename order and describe it.

    Raises:
        FileNotFoundError: if the directory holds no pixmap files.
        ValueError: naming the first malformed file.
    """
    directory = Path(directory)
    paths = sorted(p for p in directory.iterdir() if p.suffix.lower() in _SUFFIXES and p.is_file())
    if not paths:
        raise FileNotFoundError(f"no pixmap files in {directory}")
    entries = []
    for p in paths:
        try:
            img = read_pnm(p)
        except (OSError, ValueError) as exc:
            raise ValueError(f"cannot read reference image {p.name}: {exc}") from exc
        entries.append(make_entry(p.stem, img, params))
    return ReferenceCorpus(tuple(entries), params)


def _frame_min(feats: Features, corpus: ReferenceCorpus) -> tuple[float, str]:
    best, best_id = None, None
    for e in corpus.entries:
        d = distance_from_features(feats, e.features, corpus.params)
        if best is None or d < best:
            best, best_id = d, e.id
    return best, best_id


def frame_realism(frame: Image, corpus: ReferenceCorpus) -> tuple[float, str]:
    """Smallest distance to any reference and that reference's id.

    Ties keep the lexicographically smallest id.
    """
    return _frame_min(extract_features(frame, corpus.params), corpus)


def realism_reward(video: Video, corpus: ReferenceCorpus, frame_range: tuple[int, int] | None = None) -> RealismReport:
    """Max-min realism report, optionally restricted to an inclusive 1-based frame range."""
    lo, hi = frame_range if frame_range else (1, len(video))
    if not 1 <= lo <= hi <= len(video):
        raise ValueError(f"frame range [{lo}, {hi}] outside 1..{len(video)}")
    dists, ids = [], []
    for fr in video.frames[lo - 1:hi]:
        d, rid = frame_realism(fr, corpus)
        dists.append(d)
        ids.append(rid)
    worst = max(range(len(dists)), key=lambda i: (dists[i], -i))
    return RealismReport(tuple(dists), tuple(ids), lo + worst, -dists[worst])


def realism_reward_per_clip(video: Video, corpus: ReferenceCorpus, ranges) -> list[float]:
    report = realism_reward(video, corpus)
    return [-max(report.per_frame_min_distance[lo - 1:hi]) for lo, hi in ranges]


def match_score(frame: Image, corpus: ReferenceCorpus) -> float:
    d, _ = frame_realism(frame, corpus)
    return match_score_from_distance(d)


def match_score_from_distance(d: float) -> float:
    return 1.0 / max(d, MATCH_FLOOR)
