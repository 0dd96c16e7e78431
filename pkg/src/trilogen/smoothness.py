"""Frame-transition smoothness: per-frame embeddings and adjacent-frame FID.

``FID_t`` is the squared Euclidean distance between the embeddings of frames
``t`` and ``t + 1``. The smoothness reward is the negated sum of the curve and
splits exactly across clips by charging each transition to the clip that owns
its left frame.

The default embedder is a grid descriptor: the grayscale frame is cut into
``grid x grid`` cells (remainder pixels go to the last row/column of cells)
and each cell contributes its mean intensity, intensity standard deviation and
mean Sobel magnitude, scaled to [0, 1]. Features computed elsewhere (for
instance by a pretrained network) can be supplied through a binary embedding
file: little-endian int64 frame count, int64 dimension, then row-major float64
values.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .imagekit import Image, Video, sobel_magnitude, to_grayscale

SOBEL_MAX = 1020.0


@dataclass(frozen=True)
class EmbedderSpec:
    kind: str = "grid"
    grid: int = 8
    path: str | None = None

    def __post_init__(self):
        if self.kind not in ("grid", "precomputed"):
            raise ValueError(f"unknown embedder kind {self.kind!r}")
        if self.grid < 1:
            raise ValueError("grid must be at least 1")
        if self.kind == "precomputed" and not self.path:
            raise ValueError("precomputed embedder needs a path")

    @property
    def dim(self) -> int:
        return 3 * self.grid * self.grid


@dataclass(frozen=True)
class FidCurve:
    scores: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 1 or not np.all(np.isfinite(scores)) or np.any(scores < 0):
            raise ValueError("FID scores must be a 1-D array of finite nonnegative values")
        object.__setattr__(self, "scores", scores)

    def __len__(self):
        return len(self.scores)

    def mean(self) -> float:
        return float(np.mean(self.scores)) if len(self.scores) else 0.0


def _cell_edges(n: int, grid: int) -> np.ndarray:
    step = n // grid
    edges = np.arange(grid + 1) * step
    edges[-1] = n
    return edges


def _cell_reduce(stack: np.ndarray, grid: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell sums and counts of a ``(f, h, w)`` stack via reduceat."""
    h, w = stack.shape[1:]
    ye = _cell_edges(h, grid)
    xe = _cell_edges(w, grid)
    rows = np.add.reduceat(stack, ye[:-1], axis=1)
    cells = np.add.reduceat(rows, xe[:-1], axis=2)
    counts = np.outer(np.diff(ye), np.diff(xe))
    return cells, counts


def _grid_features(gray: np.ndarray, grad: np.ndarray, grid: int) -> np.ndarray:
    """Grid descriptor for stacked grayscale frames and their Sobel maps."""
    g = gray.astype(np.float64) / 255.0
    s, counts = _cell_reduce(g, grid)
    s2, _ = _cell_reduce(g * g, grid)
    sg, _ = _cell_reduce(grad / SOBEL_MAX, grid)
    mean = s / counts
    var = np.maximum(s2 / counts - mean * mean, 0.0)
    feats = np.stack([mean, np.sqrt(var), sg / counts], axis=-1)
    return feats.reshape(len(gray), -1)


def embed_frame(frame: Image, spec: EmbedderSpec = EmbedderSpec(), index: int | None = None) -> np.ndarray:
    """Embed one frame.

    For the precomputed kind, ``index`` is the 0-based row of the embedding file.
    """
    if spec.kind == "precomputed":
        if index is None:
            raise ValueError("precomputed embeddings are looked up by frame index")
        return load_embeddings(spec.path)[index]
    if frame.width < spec.grid or frame.height < spec.grid:
        raise ValueError(f"frame {frame.width}x{frame.height} is smaller than the {spec.grid}x{spec.grid} grid")
    gray = to_grayscale(frame)
    grad = sobel_magnitude(gray).values
    return _grid_features(gray.plane[None], grad[None], spec.grid)[0]


def embed_video(video: Video, spec: EmbedderSpec = EmbedderSpec()) -> np.ndarray:
    """Embeddings of every frame as an ``(f, dim)`` array."""
    if spec.kind == "precomputed":
        emb = load_embeddings(spec.path)
        if len(emb) < len(video):
            raise ValueError(f"embedding file covers {len(emb)} frames, video has {len(video)}")
        return emb[: len(video)]
    return np.stack([embed_frame(f, spec) for f in video])


def save_embeddings(path, emb: np.ndarray) -> None:
    emb = np.ascontiguousarray(emb, dtype="<f8")
    if emb.ndim != 2:
        raise ValueError("embeddings must be a 2-D array")
    Path(path).write_bytes(struct.pack("<qq", *emb.shape) + emb.tobytes())


def load_embeddings(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise ValueError(f"{path}: embedding file header is truncated")
    count, dim = struct.unpack_from("<qq", data)
    if count < 0 or dim < 1 or len(data) - 16 != count * dim * 8:
        raise ValueError(f"{path}: payload does not match {count} x {dim} float64 values")
    emb = np.frombuffer(data, dtype="<f8", offset=16).reshape(count, dim)
    if not np.all(np.isfinite(emb)):
        raise ValueError(f"{path}: embeddings contain non-finite values")
    return emb


def fid_from_embeddings(emb: np.ndarray) -> FidCurve:
    d = np.diff(np.asarray(emb, dtype=np.float64), axis=0)
    return FidCurve(np.einsum("ij,ij->i", d, d))


def fid_adjacent(video: Video, spec: EmbedderSpec = EmbedderSpec()) -> FidCurve:
    """Adjacent-frame FID curve; a single-frame video yields an empty curve."""
    if len(video) < 2:
        return FidCurve(np.zeros(0))
    return fid_from_embeddings(embed_video(video, spec))


def smoothness_reward(curve: FidCurve) -> float:
    return -math.fsum(curve.scores)


def smoothness_reward_per_clip(curve: FidCurve, ranges: Sequence[tuple[int, int]]) -> list[float]:
    """Split the smoothness reward over clips.

    Transition ``t`` (between frames ``t`` and ``t + 1``) is charged to the
    clip whose range contains frame ``t``, so the parts add up to the total.
    """
    f = len(curve) + 1
    if not ranges or ranges[0][0] != 1 or ranges[-1][1] != f:
        raise ValueError(f"clip ranges do not cover frames 1..{f}")
    for (lo, hi), (nlo, _) in zip(ranges, ranges[1:]):
        if nlo != hi + 1:
            raise ValueError("clip ranges are not contiguous")
    out = []
    for lo, hi in ranges:
        if hi < lo:
            raise ValueError(f"empty clip range [{lo}, {hi}]")
        stop = min(hi, f - 1)
        out.append(-math.fsum(curve.scores[lo - 1:stop]))
    return out


def write_fid_csv(path, curve: FidCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_id", "fid"])
        for t, v in enumerate(curve.scores, start=1):
            w.writerow([t, repr(float(v))])


def read_fid_csv(path) -> FidCurve:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["frame_id", "fid"]:
        raise ValueError(f"{path}: expected header frame_id,fid")
    return FidCurve(np.array([float(r[1]) for r in rows[1:]]))
