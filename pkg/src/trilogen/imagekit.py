"""Raster images, the binary netpbm codec and the low-level pixel kernels.

Every image is stored as an immutable ``uint8`` array of shape
``(height, width, channels)`` with ``channels`` in ``{1, 3}``. Convolutions
replicate the edge pixels and every rounding step rounds half away from zero.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FRAME_NAME = "frame_{:06d}.ppm"
_FRAME_RE = re.compile(r"^frame_(\d{6})\.(ppm|pgm)$")
_WHITESPACE = b" \t\n\r\v\f"


class PnmError(ValueError):
    """Malformed or truncated pixmap data."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def round_half_away(x):
    """Round to the nearest integer, ties away from zero."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def to_uint8(values) -> np.ndarray:
    """Round and clamp real-valued samples into 8-bit range."""
    return np.clip(round_half_away(values), 0, 255).astype(np.uint8)


@dataclass(frozen=True, eq=False)
class Image:
    """An 8-bit raster image, row-major with interleaved channels."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"expected (h, w, 1|3) pixel array, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image dimensions must be at least 1x1")
        if px.dtype != np.uint8:
            if np.any(px < 0) or np.any(px > 255) or np.any(px != np.floor(px)):
                raise ValueError("pixel samples must be integers in [0, 255]")
            px = px.astype(np.uint8)
        px = np.array(px, dtype=np.uint8, copy=True)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def plane(self) -> np.ndarray:
        """The single channel of a grayscale image as a 2-D array."""
        if self.channels != 1:
            raise ValueError("plane is only defined for grayscale images")
        return self.pixels[:, :, 0]

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(np.array_equal(self.pixels, other.pixels))

    def __hash__(self):
        return hash((self.pixels.shape, self.pixels.tobytes()))

    @classmethod
    def gray(cls, plane) -> "Image":
        """Build a grayscale image from a 2-D array, rounding and clamping reals."""
        plane = np.asarray(plane)
        if plane.dtype != np.uint8:
            plane = to_uint8(plane)
        return cls(plane[:, :, None])


@dataclass(frozen=True)
class GradientMap:
    """Per-pixel gradient magnitude in raw 8-bit units (max 1020 per axis)."""

    values: np.ndarray

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class Video:
    """An ordered, dimension-homogeneous frame sequence."""

    frames: tuple = field(default_factory=tuple)
    fps: float = 24.0

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise ValueError("a video needs at least one frame")
        shape = frames[0].pixels.shape
        for i, fr in enumerate(frames, start=1):
            if fr.pixels.shape != shape:
                raise ValueError(f"frame {i} has shape {fr.pixels.shape}, expected {shape}")
        object.__setattr__(self, "frames", frames)

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    def __iter__(self):
        return iter(self.frames)


def _next_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        ch = data[pos:pos + 1]
        if ch in (b"#",):
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch and ch in _WHITESPACE:
            pos += 1
        else:
            break
    start = pos
    while pos < n and data[pos:pos + 1] not in _WHITESPACE and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PnmError("unexpected end of header", start)
    return data[start:pos], pos


def decode_pnm(data: bytes) -> Image:
    """Decode a binary P5 (gray) or P6 (RGB) pixmap with maxval 255."""
    data = bytes(data)
    if len(data) < 2 or data[:2] not in (b"P5", b"P6"):
        raise PnmError("missing P5/P6 magic number", 0)
    channels = 1 if data[:2] == b"P5" else 3
    pos = 2
    fields = []
    for name in ("width", "height", "maxval"):
        start = pos
        tok, pos = _next_token(data, pos)
        if not tok.isdigit():
            raise PnmError(f"malformed {name} {tok!r}", start)
        fields.append(int(tok))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise PnmError("image dimensions must be positive", pos)
    if maxval != 255:
        raise PnmError(f"unsupported maxval {maxval}, only 255 is allowed", pos)
    if pos >= len(data) or data[pos:pos + 1] not in _WHITESPACE:
        raise PnmError("missing whitespace after maxval", pos)
    pos += 1
    need = width * height * channels
    have = len(data) - pos
    if have < need:
        raise PnmError(f"truncated pixel data: expected {need} bytes, found {have}", pos + have)
    px = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    return Image(px.reshape(height, width, channels))


def encode_pnm(img: Image) -> bytes:
    magic = b"P5" if img.channels == 1 else b"P6"
    header = magic + f"\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.pixels.tobytes()


def read_pnm(path) -> Image:
    path = Path(path)
    try:
        return decode_pnm(path.read_bytes())
    except PnmError as exc:
        raise PnmError(f"{path}: {exc.args[0].rsplit(' (byte offset', 1)[0]}", exc.offset) from None


def write_pnm(path, img: Image) -> None:
    Path(path).write_bytes(encode_pnm(img))


def to_grayscale(img: Image) -> Image:
    if img.channels == 1:
        return img
    rgb = img.pixels.astype(np.float64)
    luma = 0.299 * rgb[:, :, 0] + 0.587 * rgb[:, :, 1] + 0.114 * rgb[:, :, 2]
    return Image.gray(luma)


def sobel_magnitude(gray: Image) -> GradientMap:
    """Sobel gradient magnitude with replicated-edge borders.

    Raises:
        ValueError: if the image is not grayscale or smaller than 3x3.
    """
    if gray.channels != 1:
        raise ValueError("sobel_magnitude expects a grayscale image")
    if gray.width < 3 or gray.height < 3:
        raise ValueError(f"image {gray.width}x{gray.height} is smaller than 3x3")
    p = np.pad(gray.plane.astype(np.float64), 1, mode="edge")
    h, w = gray.height, gray.width
    win = lambda dy, dx: p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]  # noqa: E731
    gx = (win(-1, 1) + 2 * win(0, 1) + win(1, 1)) - (win(-1, -1) + 2 * win(0, -1) + win(1, -1))
    gy = (win(1, -1) + 2 * win(1, 0) + win(1, 1)) - (win(-1, -1) + 2 * win(-1, 0) + win(-1, 1))
    return GradientMap(np.sqrt(gx * gx + gy * gy))


def box_blur(gray: Image, size: int = 5) -> np.ndarray:
    """Mean filter over a ``size`` x ``size`` window; returns float samples."""
    r = size // 2
    p = np.pad(gray.plane.astype(np.float64), r, mode="edge")
    c = np.zeros((p.shape[0] + 1, p.shape[1] + 1))
    c[1:, 1:] = p.cumsum(0).cumsum(1)
    h, w = gray.height, gray.width
    s = c[size:size + h, size:size + w] - c[:h, size:size + w] - c[size:size + h, :w] + c[:h, :w]
    return s / (size * size)


def sample_bilinear(plane: np.ndarray, xs, ys) -> np.ndarray:
    """Bilinear lookup at real coordinates with edge replication."""
    h, w = plane.shape
    xs = np.clip(np.asarray(xs, dtype=np.float64), 0, w - 1)
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0, h - 1)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    p = plane.astype(np.float64)
    top = p[y0, x0] * (1 - fx) + p[y0, x1] * fx
    bot = p[y1, x0] * (1 - fx) + p[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def downscale_bilinear(img: Image, factor: float, min_size: int = 8) -> Image:
    """Shrink by ``factor`` sampling bilinearly at output pixel centers.

    ``min_size`` guards the pyramid use case; pass 1 to allow tiny results.
    """
    if not factor > 1:
        raise ValueError(f"downscale factor must exceed 1, got {factor}")
    out_w = int(np.floor(img.width / factor))
    out_h = int(np.floor(img.height / factor))
    if out_w < min_size or out_h < min_size:
        raise ValueError(f"downscaled size {out_w}x{out_h} is below {min_size}x{min_size}")
    xs = (np.arange(out_w) + 0.5) * factor - 0.5
    ys = (np.arange(out_h) + 0.5) * factor - 0.5
    gx, gy = np.meshgrid(xs, ys)
    planes = [sample_bilinear(img.pixels[:, :, c], gx, gy) for c in range(img.channels)]
    return Image(to_uint8(np.stack(planes, axis=2)))


def write_video(directory, video: Video | Sequence[Image]) -> list[Path]:
    """Write frames as ``frame_000001.ppm`` ... into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    frames = video.frames if isinstance(video, Video) else video
    paths = []
    for i, fr in enumerate(frames, start=1):
        p = directory / FRAME_NAME.format(i)
        write_pnm(p, fr)
        paths.append(p)
    return paths


def frame_paths(directory) -> list[Path]:
    names = sorted(n for n in os.listdir(directory) if _FRAME_RE.match(n))
    return [Path(directory) / n for n in names]


def read_video(directory, fps: float = 24.0) -> Video:
    paths = frame_paths(directory)
    if not paths:
        raise FileNotFoundError(f"no frame_NNNNNN.ppm files in {directory}")
    return Video(tuple(read_pnm(p) for p in paths), fps=fps)


def stack_gray(frames: Iterable[Image]) -> np.ndarray:
    """Stack grayscale versions of ``frames`` into an ``(f, h, w)`` array."""
    return np.stack([to_grayscale(f).plane for f in frames])
