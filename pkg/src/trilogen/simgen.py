"""Procedural stand-in for the text-to-animation generator.

A trilobite-like sprite moves across a smooth seabed. Prompt text is
interpreted by exact keyword match against a fixed vocabulary:

* movement verbs set the travel speed (``crawls`` 0.5, ``glides`` 1.0,
  ``darts`` 2.0 pixels per frame);
* detail adjectives switch on morphological detail: ``segmented`` draws
  thoracic bands with pleural spines, ``longitudinal lobes`` draws the axial
  lobe with its nodes, ``hard shell`` draws both plus eyes and genal spines at
  full contrast, ``plain`` draws a bare low-contrast ellipse;
* transition phrases scale the per-frame positional jitter (``smoothly``
  0.2x, ``gradually`` 0.5x, ``abruptly`` 2x the base jitter). Clips whose
  transition is not ``smoothly``/``gradually`` restart the sprite at its
  start position.

All randomness is drawn up front from the render seed, in the same amounts
regardless of the prompt, so swapping a token only changes how the same
random numbers are used.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .imagekit import Image, Video, to_uint8, write_pnm
from .script import Clip, PromptScript, clip_frame_ranges


@dataclass(frozen=True)
class TokenVocab:
    verbs: tuple[str, ...] = ("glides", "crawls", "darts")
    adjectives: tuple[str, ...] = ("plain", "segmented", "longitudinal lobes", "hard shell")
    transitions: tuple[str, ...] = ("abruptly", "gradually", "smoothly")

    @property
    def slots(self) -> tuple[tuple[str, ...], ...]:
        return (self.verbs, self.adjectives, self.transitions)

    @property
    def slot_names(self) -> tuple[str, ...]:
        return ("verb", "adjective", "transition")


VERB_SPEED = {"crawls": 0.5, "glides": 1.0, "darts": 2.0}
JITTER_SCALE = {"smoothly": 0.2, "gradually": 0.5, "abruptly": 2.0}
CONTINUOUS = ("smoothly", "gradually")


@dataclass(frozen=True)
class Detail:
    segments: int = 0
    lobes: bool = False
    eyes: bool = False
    contrast: float = 0.0


DETAIL = {
    "plain": Detail(),
    "segmented": Detail(segments=6, contrast=0.8),
    "longitudinal lobes": Detail(lobes=True, contrast=0.8),
    "hard shell": Detail(segments=6, lobes=True, eyes=True, contrast=1.0),
}

BACKGROUNDS = {
    "seabed": (0.22, 11),
    "reef": (0.30, 23),
}


@dataclass(frozen=True)
class RenderConfig:
    width: int = 128
    height: int = 128
    frames_per_clip: int = 12
    base_jitter: float = 2.0
    seed: int = 0
    background: str = "seabed"
    sprite_scale: float = 1.0
    fps: float = 12.0

    def __post_init__(self):
        if self.width < 1 or self.height < 1 or self.frames_per_clip < 1:
            raise ValueError("render dimensions and frames_per_clip must be positive")
        if self.base_jitter < 0:
            raise ValueError("base_jitter must be nonnegative")


@dataclass(frozen=True)
class ClipStyle:
    speed: float
    detail: Detail
    jitter: float
    continuous: bool


def _has_token(text: str, token: str) -> bool:
    return re.search(r"(?<!\w)" + re.escape(token) + r"(?!\w)", text) is not None


def clip_style(text: str, base_jitter: float) -> ClipStyle:
    """Interpret clip text; absent tokens fall back to glides/plain/abruptly."""
    speed = next((v for k, v in VERB_SPEED.items() if _has_token(text, k)), VERB_SPEED["glides"])
    found = [DETAIL[k] for k in DETAIL if _has_token(text, k)]
    detail = Detail(
        segments=max((d.segments for d in found), default=0),
        lobes=any(d.lobes for d in found),
        eyes=any(d.eyes for d in found),
        contrast=max((d.contrast for d in found), default=0.0),
    )
    trans = next((k for k in JITTER_SCALE if _has_token(text, k)), "abruptly")
    return ClipStyle(speed, detail, base_jitter * JITTER_SCALE[trans], trans in CONTINUOUS)


def expand_prompt(choice, n_clips: int, frames_per_clip: int, vocab: TokenVocab = TokenVocab()) -> PromptScript:
    """Template a PromptChoice into a script; every clip reads the same tokens."""
    words = [slot[i] for slot, i in zip(vocab.slots, choice.selections)]
    text = " ".join(words)
    return PromptScript(tuple(Clip(1 + n * frames_per_clip, text) for n in range(n_clips)))


def background(cfg: RenderConfig) -> np.ndarray:
    """Smooth low-contrast seabed shading in [0, 1]."""
    base, phase = BACKGROUNDS.get(cfg.background, BACKGROUNDS["seabed"])
    y, x = np.mgrid[0:cfg.height, 0:cfg.width].astype(np.float64)
    rng = np.random.default_rng([cfg.seed, phase])
    field_ = np.zeros_like(x)
    for _ in range(4):
        fx, fy = rng.uniform(0.01, 0.05, size=2)
        ph = rng.uniform(0, 2 * np.pi)
        field_ += np.sin(2 * np.pi * (fx * x + fy * y) + ph)
    return base + 0.012 * field_


def _soft(sd: np.ndarray) -> np.ndarray:
    # coverage from signed distance (negative inside), one-pixel ramp
    return np.clip(0.5 - sd, 0.0, 1.0)


def _segment_sd(px, py, ax, ay, bx, by, radius):
    vx, vy = bx - ax, by - ay
    t = np.clip(((px - ax) * vx + (py - ay) * vy) / (vx * vx + vy * vy), 0.0, 1.0)
    return np.hypot(px - ax - t * vx, py - ay - t * vy) - radius


def draw_sprite(canvas: np.ndarray, cx: float, cy: float, detail: Detail, scale: float = 1.0, angle: float = 0.0) -> np.ndarray:
    """Composite the sprite onto ``canvas`` (float, [0, 1]) and return the result."""
    h, w = canvas.shape
    a, b = 24.0 * scale, 14.0 * scale
    reach = int(math.ceil(a + 8 * scale)) + 2
    x0, x1 = max(0, int(cx) - reach), min(w, int(cx) + reach + 1)
    y0, y1 = max(0, int(cy) - reach), min(h, int(cy) + reach + 1)
    if x0 >= x1 or y0 >= y1:
        return canvas
    out = canvas.copy()
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    c, s = math.cos(angle), math.sin(angle)
    # sprite-local frame: u along the body (head at +u), v across
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    r = np.hypot(u / a, v / b)
    body = _soft((r - 1.0) * min(a, b))
    patch = out[y0:y1, x0:x1]
    k = detail.contrast
    shell = 0.52 + 0.1 * k
    patch = patch * (1 - body) + shell * body

    def paint(mask, value):
        nonlocal patch
        patch = patch * (1 - mask) + value * mask

    if detail.segments:
        spine_len = 6.0 * scale
        us = np.linspace(-0.55 * a, 0.35 * a, detail.segments)
        for i, uc in enumerate(us):
            half = b * math.sqrt(max(0.0, 1 - (uc / a) ** 2))
            band = _soft(np.maximum(np.abs(u - uc) - 1.2 * scale, np.abs(v) - half + 1.0)) * body
            paint(band, shell - 0.38 * k)
            for sign in (-1, 1):
                tip_u = uc - 3.0 * scale
                spine = _soft(_segment_sd(u, v, uc, sign * (half - 1), tip_u, sign * (half + spine_len), 0.9 * scale))
                paint(spine * (1 - body), shell - 0.05 * k * i / max(1, detail.segments))
    if detail.lobes:
        for sign in (-1, 1):
            furrow = _soft(_segment_sd(u, v, -0.7 * a, sign * b * 0.32, 0.55 * a, sign * b * 0.32, 0.9 * scale)) * body
            paint(furrow, shell - 0.42 * k)
        for uc in np.linspace(-0.6 * a, 0.45 * a, 5):
            node = _soft(np.hypot(u - uc, v) - 1.6 * scale)
            paint(node, min(1.0, shell + 0.35 * k))
    if detail.eyes:
        for sign in (-1, 1):
            eye = _soft(np.hypot(u - 0.62 * a, v - sign * b * 0.5) - 2.0 * scale)
            paint(eye, 0.08)
            genal = _soft(_segment_sd(u, v, 0.45 * a, sign * b * 0.85, -0.1 * a, sign * (b + 9 * scale), 1.0 * scale))
            paint(genal * (1 - body), shell)
    out[y0:y1, x0:x1] = patch
    return out


def _trajectory(s: PromptScript, cfg: RenderConfig, total: int):
    rng = np.random.default_rng([cfg.seed, 7])
    unit_jitter = rng.uniform(-1.0, 1.0, size=(total, 2))
    start = np.array([40.0, cfg.height / 2.0])
    ranges = clip_frame_ranges(s, total)
    styles = [clip_style(c.text, cfg.base_jitter) for c in s.clips]
    out = []
    pos = start.copy()
    for n, ((lo, hi), st) in enumerate(zip(ranges, styles)):
        for t in range(lo, hi + 1):
            if t == lo and n > 0 and not st.continuous:
                pos = start.copy()
            elif t > 1:
                pos = pos + np.array([st.speed, 0.0])
            out.append((pos + st.jitter * unit_jitter[t - 1], st.detail))
    return out


def default_total_frames(s: PromptScript, cfg: RenderConfig) -> int:
    return s.starts[-1] + cfg.frames_per_clip - 1


def render_script(s: PromptScript, cfg: RenderConfig = RenderConfig(), total_frames: int | None = None) -> Video:
    """Render a deterministic grayscale video for ``s``.

    ``total_frames`` defaults to the last clip start plus ``frames_per_clip - 1``.
    """
    total = default_total_frames(s, cfg) if total_frames is None else total_frames
    if total < s.starts[-1]:
        raise ValueError(f"frame budget {total} ends before the last clip start {s.starts[-1]}")
    bg = background(cfg)
    frames = []
    for (x, y), detail in _trajectory(s, cfg, total):
        canvas = draw_sprite(bg, x, y, detail, cfg.sprite_scale)
        frames.append(Image.gray(canvas * 255.0))
    return Video(tuple(frames), fps=cfg.fps)


@dataclass(frozen=True)
class NoiseSchedule:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    betas: np.ndarray = field(init=False, repr=False, compare=False)
    alpha_bar: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        betas = np.linspace(self.beta_start, self.beta_end, self.T, dtype=np.float64)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bar", np.cumprod(1.0 - betas))

    def abar(self, t: int) -> float:
        """Cumulative signal fraction at step ``t``; ``abar(0) == 1``."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise ValueError(f"noise step {t} outside 1..{self.T}")
        return float(self.alpha_bar[t - 1])


def noised_values(video: Video, t: int, sched: NoiseSchedule = NoiseSchedule(), seed: int = 0, eps=None) -> np.ndarray:
    """Unclamped noised samples in centred units (-1 black, 0 mid-gray, 1 white).

    Returns an array of shape ``(f, h, w, c)``.
    """
    if not 1 <= t <= sched.T:
        raise ValueError(f"noise step {t} outside 1..{sched.T}")
    x = np.stack([fr.pixels for fr in video]).astype(np.float64) / 127.5 - 1.0
    if eps is None:
        eps = np.random.default_rng(seed).standard_normal(x.shape)
    ab = sched.abar(t)
    return math.sqrt(ab) * x + math.sqrt(1.0 - ab) * np.broadcast_to(eps, x.shape)


def forward_noise(video: Video, t: int, sched: NoiseSchedule = NoiseSchedule(), seed: int = 0, eps=None) -> Video:
    """Diffuse ``video`` to step ``t``, clamp and requantize to 8 bits.

    Pixels are centred on mid-gray before noising, so the signal shrinks
    toward gray as ``t`` grows. ``eps`` overrides the seeded Gaussian draw
    (e.g. zeros for a noiseless check).
    """
    y = noised_values(video, t, sched, seed, eps)
    px = to_uint8((np.clip(y, -1.0, 1.0) + 1.0) * 127.5)
    return Video(tuple(Image(p) for p in px), fps=video.fps)


def reference_image(cfg: RenderConfig, rng: np.random.Generator) -> Image:
    angle = rng.uniform(-0.35, 0.35)
    scale = rng.uniform(0.9, 1.1)
    cx = cfg.width / 2 + rng.uniform(-12, 12)
    cy = cfg.height / 2 + rng.uniform(-8, 8)
    bg_cfg = replace(cfg, seed=int(rng.integers(1 << 31)), background=str(rng.choice(sorted(BACKGROUNDS))))
    canvas = draw_sprite(background(bg_cfg), cx, cy, DETAIL["hard shell"], scale * cfg.sprite_scale, angle)
    return Image.gray(canvas * 255.0)


def make_reference_corpus(directory, cfg: RenderConfig = RenderConfig(), count: int = 12, seed: int = 0) -> list[Path]:
    """Write ``count`` full-detail stills as ``ref_0001.pgm`` ... into ``directory``."""
    if count < 1:
        raise ValueError("count must be at least 1")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([seed, 0x5EED])
    paths = []
    for i in range(1, count + 1):
        p = directory / f"ref_{i:04d}.pgm"
        write_pnm(p, reference_image(cfg, rng))
        paths.append(p)
    return paths
