"""ORB features built from scratch: FAST-9 corners, intensity-centroid
orientation, steered binary tests and cross-checked brute-force matching.

The binary test pattern is fixed and reproducible. A 32-bit linear
congruential generator (seed 0x4F52425F, multiplier 1664525, increment
1013904223, modulus 2**32) drives Box-Muller draws: for every one of the 256
tests, four coordinates ``px, py, qx, qy`` are produced in that order, each
from two consecutive uniforms ``u1, u2`` (``u = state / 2**32`` after a step)
as ``sigma * sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`` with ``sigma = 31 / 5``,
rounded half away from zero and clamped to [-15, 15].

Descriptors are stored packed, 32 bytes each, bit ``i`` at byte ``i // 8``
position ``i % 8`` (little bit order). Sets of descriptors are ``(n, 32)``
``uint8`` arrays.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .imagekit import Image, box_blur, downscale_bilinear, round_half_away, to_grayscale

PATCH_RADIUS = 15
BORDER = 18
MIN_SIDE = 2 * BORDER + 1
N_BITS = 256
N_BYTES = N_BITS // 8
ANGLE_BINS = 30

LCG_SEED = 0x4F52425F
LCG_MUL = 1664525
LCG_INC = 1013904223

# Bresenham circle of radius 3, clockwise from 12 o'clock, as (dx, dy).
CIRCLE = (
    (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
    (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
)
FAST_ARC = 9


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    score: float
    angle: float = 0.0
    octave: int = 0


@dataclass(frozen=True)
class OrbParams:
    threshold: int = 20
    max_keypoints: int = 300
    n_levels: int = 2
    scale_factor: float = 1.2
    k_best: int = 32
    min_matches: int = 8
    blur_size: int = 5


@dataclass(frozen=True)
class Features:
    keypoints: tuple = ()
    descriptors: np.ndarray = field(default_factory=lambda: np.zeros((0, N_BYTES), np.uint8))

    def __len__(self):
        return len(self.keypoints)


@dataclass(frozen=True)
class Match:
    a: int
    b: int
    hamming: int


def _fast_scores(plane: np.ndarray, threshold: int) -> np.ndarray:
    """FAST-9 arc score for every pixel at least BORDER from the edges (0 elsewhere)."""
    h, w = plane.shape
    score = np.zeros((h, w))
    if h < MIN_SIDE or w < MIN_SIDE:
        return score
    p = plane.astype(np.int32)
    center = p[BORDER:h - BORDER, BORDER:w - BORDER]
    ring = np.stack([p[BORDER + dy:h - BORDER + dy, BORDER + dx:w - BORDER + dx] for dx, dy in CIRCLE]) - center
    # any 9-arc covers at least two of the four compass pixels
    compass = ring[::4]
    cand = ((compass > threshold).sum(0) >= 2) | ((compass < -threshold).sum(0) >= 2)
    cy, cx = np.nonzero(cand)
    if len(cy) == 0:
        return score
    ring = ring[:, cy, cx]
    best = np.zeros(len(cy))
    for terms in (ring - threshold, -ring - threshold):
        ok = np.concatenate([terms > 0, terms > 0])
        vals = np.concatenate([terms, terms]).astype(np.float64)
        cnt = np.zeros((33, len(cy)), np.int32)
        cs = np.zeros((33, len(cy)))
        np.cumsum(ok, axis=0, out=cnt[1:])
        np.cumsum(vals, axis=0, out=cs[1:])
        for length in range(FAST_ARC, 17):
            full = (cnt[length:length + 16] - cnt[:16]) == length
            if not full.any():
                break
            arc = np.where(full, cs[length:length + 16] - cs[:16], 0.0).max(axis=0)
            np.maximum(best, arc, out=best)
    score[BORDER + cy, BORDER + cx] = best
    return score


def detect_fast(gray: Image, threshold: int = 20, max_keypoints: int = 500) -> list[Keypoint]:
    """FAST-9 corners with 3x3 non-max suppression, strongest first.

    Raises:
        ValueError: if the image is smaller than 37x37 or not grayscale.
    """
    if gray.channels != 1:
        raise ValueError("detect_fast expects a grayscale image")
    if gray.width < MIN_SIDE or gray.height < MIN_SIDE:
        raise ValueError(f"image {gray.width}x{gray.height} is smaller than {MIN_SIDE}x{MIN_SIDE}")
    if not 1 <= threshold <= 255:
        raise ValueError("threshold must lie in 1..255")
    score = _fast_scores(gray.plane, threshold)
    padded = np.pad(score, 1)
    h, w = score.shape
    neigh = np.max(
        np.stack([padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w] for dy in (-1, 0, 1) for dx in (-1, 0, 1)]), axis=0
    )
    ys, xs = np.nonzero((score > 0) & (score >= neigh))
    vals = score[ys, xs]
    order = np.argsort(-vals, kind="stable")[: max(0, max_keypoints)]
    return [Keypoint(float(xs[i]), float(ys[i]), float(vals[i])) for i in order]


@lru_cache(maxsize=None)
def _disc_offsets(radius: int = PATCH_RADIUS) -> tuple[np.ndarray, np.ndarray]:
    d = np.arange(-radius, radius + 1)
    dx, dy = np.meshgrid(d, d)
    inside = dx * dx + dy * dy <= radius * radius
    return dx[inside], dy[inside]


def _orientations(plane: np.ndarray, xs, ys) -> list[float]:
    dx, dy = _disc_offsets()
    xs = np.asarray(xs, dtype=np.intp)[:, None]
    ys = np.asarray(ys, dtype=np.intp)[:, None]
    vals = plane[ys + dy, xs + dx].astype(np.int64)
    m10 = vals @ dx.astype(np.int64)
    m01 = vals @ dy.astype(np.int64)
    return [0.0 if a == 0 and b == 0 else math.atan2(b, a) % (2 * math.pi) for a, b in zip(m10.tolist(), m01.tolist())]


def _orientation_at(plane: np.ndarray, x: int, y: int) -> float:
    return _orientations(plane, [x], [y])[0]


def compute_orientation(gray: Image, kp: Keypoint) -> float:
    """Intensity-centroid angle in [0, 2*pi) of the radius-15 disc around ``kp``.

    ``kp`` is taken in the coordinates of ``gray`` (its octave image).
    """
    x, y = int(round(kp.x)), int(round(kp.y))
    if not (PATCH_RADIUS <= x < gray.width - PATCH_RADIUS and PATCH_RADIUS <= y < gray.height - PATCH_RADIUS):
        raise ValueError(f"keypoint ({x}, {y}) is too close to the border for orientation")
    return _orientation_at(gray.plane, x, y)


def _lcg_uniforms(n: int, seed: int = LCG_SEED) -> list[float]:
    out = []
    state = seed
    for _ in range(n):
        state = (LCG_MUL * state + LCG_INC) % (1 << 32)
        out.append(state / float(1 << 32))
    return out


@lru_cache(maxsize=None)
def brief_pattern() -> np.ndarray:
    """The 256 test pairs as a ``(256, 4)`` int array of ``px, py, qx, qy``."""
    sigma = 31 / 5
    u = _lcg_uniforms(N_BITS * 4 * 2)
    coords = []
    for k in range(N_BITS * 4):
        u1, u2 = u[2 * k], u[2 * k + 1]
        z = math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(2 * math.pi * u2)
        coords.append(min(PATCH_RADIUS, max(-PATCH_RADIUS, int(round_half_away(sigma * z)))))
    pat = np.array(coords, dtype=np.int64).reshape(N_BITS, 4)
    pat.setflags(write=False)
    return pat


def angle_bin(angle: float) -> int:
    return int(round_half_away(angle / (2 * math.pi / ANGLE_BINS))) % ANGLE_BINS


@lru_cache(maxsize=None)
def steered_pattern(bin_index: int) -> np.ndarray:
    theta = bin_index * 2 * math.pi / ANGLE_BINS
    c, s = math.cos(theta), math.sin(theta)
    pat = brief_pattern().astype(np.float64)
    out = np.empty_like(pat)
    for k in (0, 2):
        x, y = pat[:, k], pat[:, k + 1]
        out[:, k] = x * c - y * s
        out[:, k + 1] = x * s + y * c
    out = round_half_away(out).astype(np.int64)
    out.setflags(write=False)
    return out


def _describe(smooth: np.ndarray, pts: list[tuple[int, int, float]]) -> np.ndarray:
    h, w = smooth.shape
    if not pts:
        return np.zeros((0, N_BYTES), np.uint8)
    xs = np.array([p[0] for p in pts])[:, None]
    ys = np.array([p[1] for p in pts])[:, None]
    pat = np.stack([steered_pattern(angle_bin(p[2])) for p in pts])
    px = np.clip(xs + pat[:, :, 0], 0, w - 1)
    py = np.clip(ys + pat[:, :, 1], 0, h - 1)
    qx = np.clip(xs + pat[:, :, 2], 0, w - 1)
    qy = np.clip(ys + pat[:, :, 3], 0, h - 1)
    bits = smooth[py, px] < smooth[qy, qx]
    return np.packbits(bits, axis=1, bitorder="little")


def brief_descriptors(gray: Image, kps, blur_size: int = 5) -> np.ndarray:
    """Steered binary descriptors for keypoints given in ``gray``'s coordinates.

    The image is box-filtered (``blur_size`` square) before sampling; pattern
    points falling outside the image read the nearest edge pixel.
    """
    smooth = box_blur(gray, blur_size)
    pts = []
    for kp in kps:
        x, y = int(round(kp.x)), int(round(kp.y))
        if not (BORDER <= x < gray.width - BORDER and BORDER <= y < gray.height - BORDER):
            raise ValueError(f"keypoint ({x}, {y}) is not patch-feasible")
        pts.append((x, y, kp.angle))
    return _describe(smooth, pts)


def hamming(a, b) -> int:
    a = np.asarray(a, dtype=np.uint8)
    b = np.asarray(b, dtype=np.uint8)
    return int(np.bitwise_count(np.bitwise_xor(a, b)).sum())


def hamming_matrix(desc_a: np.ndarray, desc_b: np.ndarray) -> np.ndarray:
    """All-pairs Hamming distances, ``|a| + |b| - 2 a.b`` over unpacked bits."""
    a = np.unpackbits(np.asarray(desc_a, dtype=np.uint8), axis=1).astype(np.float32)
    b = np.unpackbits(np.asarray(desc_b, dtype=np.uint8), axis=1).astype(np.float32)
    dist = a.sum(1)[:, None] + b.sum(1)[None, :] - 2.0 * (a @ b.T)
    return np.rint(dist).astype(np.int64)


def match_bf(desc_a, desc_b) -> list[Match]:
    """Mutual nearest neighbours under Hamming distance, ties to the lowest index."""
    desc_a = np.asarray(desc_a, dtype=np.uint8).reshape(-1, N_BYTES)
    desc_b = np.asarray(desc_b, dtype=np.uint8).reshape(-1, N_BYTES)
    if len(desc_a) == 0 or len(desc_b) == 0:
        return []
    dist = hamming_matrix(desc_a, desc_b)
    nn_b = np.argmin(dist, axis=1)
    nn_a = np.argmin(dist, axis=0)
    return [Match(i, int(j), int(dist[i, j])) for i, j in enumerate(nn_b) if nn_a[j] == i]


def _octave_to_source(v: float, octave: int, scale: float) -> float:
    f = scale**octave
    return (v + 0.5) * f - 0.5


def extract_features(img: Image, params: OrbParams = OrbParams()) -> Features:
    """Detect, orient and describe ORB features over a small image pyramid."""
    gray = to_grayscale(img)
    levels = [gray]
    for _ in range(1, params.n_levels):
        prev = levels[-1]
        try:
            nxt = downscale_bilinear(prev, params.scale_factor, min_size=MIN_SIDE)
        except ValueError:
            break
        levels.append(nxt)
    if gray.width < MIN_SIDE or gray.height < MIN_SIDE:
        return Features()
    areas = [lv.width * lv.height for lv in levels]
    budgets = [int(params.max_keypoints * a / sum(areas)) for a in areas]
    budgets[0] += params.max_keypoints - sum(budgets)

    kps, descs = [], []
    for octave, (level, budget) in enumerate(zip(levels, budgets)):
        found = detect_fast(level, params.threshold, budget)
        xs = [int(kp.x) for kp in found]
        ys = [int(kp.y) for kp in found]
        angles = _orientations(level.plane, xs, ys) if found else []
        pts = list(zip(xs, ys, angles))
        for kp, (x, y, angle) in zip(found, pts):
            kps.append(Keypoint(
                _octave_to_source(x, octave, params.scale_factor),
                _octave_to_source(y, octave, params.scale_factor),
                kp.score, angle, octave,
            ))
        descs.append(_describe(box_blur(level, params.blur_size), pts))
    return Features(tuple(kps), np.concatenate(descs) if descs else Features().descriptors)


def distance_from_features(fa: Features, fb: Features, params: OrbParams = OrbParams()) -> float:
    """Mean normalised Hamming distance of the best ``k_best`` mutual matches.

    Fewer than ``min_matches`` mutual matches gives the maximal distance 1.0.
    """
    matches = match_bf(fa.descriptors, fb.descriptors)
    if len(matches) < params.min_matches:
        return 1.0
    ham = np.sort(np.array([m.hamming for m in matches]))[: params.k_best]
    return float(np.mean(ham) / N_BITS)


def frame_ref_distance(frame: Image, ref: Image, params: OrbParams = OrbParams()) -> float:
    return distance_from_features(extract_features(frame, params), extract_features(ref, params), params)


def write_keypoints_csv(path, kps) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "score", "angle", "octave"])
        for kp in kps:
            w.writerow([kp.x, kp.y, kp.score, kp.angle, kp.octave])
