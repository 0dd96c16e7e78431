import math
from pathlib import Path

import numpy as np
import pytest

from trilogen.imagekit import Image, sample_bilinear
from trilogen.realism import build_corpus
from trilogen.script import parse_script
from trilogen.simgen import RenderConfig, make_reference_corpus, render_script


def rotate_plane(plane, degrees, fill=40.0):
    """Rotate about the image centre: a point at offset p lands at R(theta) p,
    with R = [[cos, -sin], [sin, cos]] in (x right, y down) coordinates."""
    h, w = plane.shape
    cx, cy = (w - 1) / 2, (h - 1) / 2
    th = math.radians(degrees)
    y, x = np.mgrid[0:h, 0:w].astype(float)
    dx, dy = x - cx, y - cy
    sx = math.cos(th) * dx + math.sin(th) * dy + cx
    sy = -math.sin(th) * dx + math.cos(th) * dy + cy
    out = sample_bilinear(plane, sx, sy)
    out[(sx < 0) | (sx > w - 1) | (sy < 0) | (sy > h - 1)] = fill
    return out


def rotate_point(x, y, degrees, w, h):
    cx, cy = (w - 1) / 2, (h - 1) / 2
    th = math.radians(degrees)
    dx, dy = x - cx, y - cy
    return math.cos(th) * dx - math.sin(th) * dy + cx, math.sin(th) * dx + math.cos(th) * dy + cy


def corner_grid(size=160, seed=7):
    """Jittered grid of rectangles with random sizes and intensities on a dark field."""
    rng = np.random.default_rng(seed)
    img = np.full((size, size), 40.0)
    for cy in range(14, size - 14, 20):
        for cx in range(14, size - 14, 20):
            h, w = rng.integers(5, 19, 2)
            ox, oy = rng.integers(-5, 6, 2)
            img[max(0, cy + oy):cy + oy + h, max(0, cx + ox):cx + ox + w] = rng.integers(70, 256)
    return img


def textured(size=96, seed=0):
    rng = np.random.default_rng(seed)
    coarse = rng.integers(0, 256, size=(size // 8, size // 8)).astype(float)
    return Image.gray(np.kron(coarse, np.ones((8, 8))))


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    make_reference_corpus(d, RenderConfig(), count=6, seed=3)
    return d


@pytest.fixture(scope="session")
def corpus(corpus_dir):
    return build_corpus(corpus_dir)


@pytest.fixture(scope="session")
def detailed_video():
    s = parse_script("1: crawls hard shell smoothly; 7: crawls hard shell smoothly")
    return render_script(s, RenderConfig(frames_per_clip=6))


def rotation_survival(degrees=15.0, size=160, seed=7):
    """Share of visible corner-grid keypoints that come back as correct mutual
    matches after rotation, and their mean Hamming distance.

    Visible keypoints are those whose rotated position stays patch-feasible;
    a match is correct when it lands within 3 px of that position.
    """
    from trilogen.orbmatch import BORDER, OrbParams, extract_features, match_bf

    plane = corner_grid(size, seed)
    params = OrbParams(threshold=20, max_keypoints=500)
    fa = extract_features(Image.gray(plane), params)
    fb = extract_features(Image.gray(rotate_plane(plane, degrees)), params)
    lo, hi = BORDER + 2, size - 1 - BORDER - 2
    target = {i: rotate_point(k.x, k.y, degrees, size, size) for i, k in enumerate(fa.keypoints)}
    visible = {i for i, (x, y) in target.items() if lo <= x <= hi and lo <= y <= hi}
    good = [
        m for m in match_bf(fa.descriptors, fb.descriptors)
        if m.a in visible and math.dist(target[m.a], (fb.keypoints[m.b].x, fb.keypoints[m.b].y)) <= 3
    ]
    rate = len(good) / max(1, len(visible))
    mean_ham = float(np.mean([m.hamming for m in good])) if good else 256.0
    return rate, mean_ham, len(visible)


@pytest.fixture(scope="session")
def loop_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("loop") / "run"


@pytest.fixture(scope="session")
def default_scorer(loop_dir):
    """Memoising scorer for the default run configuration."""
    from trilogen.orchestrator import RunConfig, Scorer, load_or_make_corpus

    cfg = RunConfig(output_dir=str(loop_dir))
    return Scorer(cfg, load_or_make_corpus(cfg))


@pytest.fixture(scope="session")
def grid_scores(default_scorer):
    return {c: default_scorer.grid(c) for c in default_scorer.cfg.contexts}


@pytest.fixture(scope="session")
def default_run(default_scorer, grid_scores):
    from trilogen.orchestrator import run_loop

    manifest = run_loop(default_scorer.cfg, default_scorer)
    return manifest, (Path(default_scorer.cfg.output_dir) / "manifest.json").read_bytes()
