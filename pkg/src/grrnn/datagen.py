"""Synthetic handwriting corpus with a per-writer rendering style.

Each word is a row of 4-8 pseudo-glyphs, every glyph a chain of quadratic
Bezier segments through random control points. The writer's style fixes
slant, stroke width, curvature, baseline wobble, glyph geometry and the
gray-level ink texture; all randomness is drawn from generators seeded by
``(seed, writer)`` so writers can be rendered in any order.
"""

import math
import os
from dataclasses import astuple, dataclass

import numpy as np
from scipy import ndimage

from .errors import InputError
from .imageproc import CANVAS, ManifestRow, write_manifest, write_pgm

WORDS_PER_LINE = 5
LINES_PER_PAGE = 4
TEST_FRACTION = 0.2


@dataclass(frozen=True)
class WriterStyle:
    slant_mean: float       # degrees, positive leans right
    slant_jitter: float     # degrees, per-word uniform spread
    stroke_width: float     # pixels
    curvature: float        # control-point bulge, fraction of glyph size
    wobble: float           # baseline sine amplitude, pixels
    noise_level: float      # relative ink-texture noise amplitude
    ink_darkness: float     # 1 - mean ink intensity
    texture_grain: float    # smoothing sigma of the texture field, pixels
    glyph_width: float      # pixels
    x_height: float         # pixels

    def as_tuple(self):
        return astuple(self)


def writer_style(seed, writer):
    rng = np.random.default_rng([seed, writer, 0])
    return WriterStyle(
        slant_mean=float(rng.uniform(-30.0, 30.0)),
        slant_jitter=float(rng.uniform(1.0, 4.0)),
        stroke_width=float(rng.uniform(1.3, 4.0)),
        curvature=float(rng.uniform(0.15, 0.9)),
        wobble=float(rng.uniform(0.0, 3.0)),
        noise_level=float(rng.uniform(0.0, 0.6)),
        ink_darkness=float(rng.uniform(0.55, 0.95)),
        texture_grain=float(rng.uniform(0.5, 2.5)),
        glyph_width=float(rng.uniform(9.0, 15.0)),
        x_height=float(rng.uniform(14.0, 30.0)),
    )


def _bezier(p0, p1, p2, n):
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2


def _word_path(style, rng):
    """Dense (x, y) centreline samples for one pseudo-word, canvas coords."""
    n_glyphs = int(rng.integers(4, 9))
    gw = style.glyph_width * rng.uniform(0.9, 1.1)
    xh = style.x_height * rng.uniform(0.9, 1.1)
    total_w = n_glyphs * gw
    fit = min(1.0, (CANVAS[1] - 12) / total_w)
    gw, xh = gw * fit, xh * min(1.0, fit * 1.2)
    x0 = (CANVAS[1] - n_glyphs * gw) / 2
    baseline = CANVAS[0] / 2 + xh / 2
    pts = []
    cur = np.array([x0, baseline - rng.uniform(0, 0.3) * xh])
    for g in range(n_glyphs):
        left = x0 + g * gw
        for _ in range(int(rng.integers(2, 4))):
            nxt = np.array([left + rng.uniform(0.2, 1.0) * gw,
                            baseline - rng.uniform(0.0, 1.0) * xh])
            if rng.random() < 0.15:  # ascender / descender
                nxt[1] = baseline - xh * rng.uniform(1.2, 1.6) if rng.random() < 0.5 \
                    else baseline + xh * rng.uniform(0.2, 0.5)
            ctrl = (cur + nxt) / 2 + rng.normal(0.0, style.curvature, 2) * np.array([gw, xh])
            length = np.hypot(*(ctrl - cur)) + np.hypot(*(nxt - ctrl))
            seg = _bezier(cur, ctrl, nxt, 8 + int(length * 4))
            pts.append(seg)
            cur = nxt
    path = np.concatenate(pts)
    slant = math.radians(style.slant_mean + rng.uniform(-1, 1) * style.slant_jitter)
    phase = rng.uniform(0, 2 * math.pi)
    x = path[:, 0] + (baseline - path[:, 1]) * math.tan(slant)
    y = path[:, 1] + style.wobble * np.sin(2 * math.pi * path[:, 0] / CANVAS[1] * 2 + phase)
    return x, y


def render_word(style, rng, texture=True):
    """One gray word image (64 x 128, ink dark on white, values in [0, 1])."""
    h, w = CANVAS
    x, y = _word_path(style, rng)
    centre = np.zeros((h, w), dtype=bool)
    xi = np.clip(np.rint(x).astype(int), 0, w - 1)
    yi = np.clip(np.rint(y).astype(int), 0, h - 1)
    centre[yi, xi] = True
    dist = ndimage.distance_transform_edt(~centre)
    radius = style.stroke_width / 2
    coverage = np.clip(radius + 0.5 - dist, 0.0, 1.0)
    darkness = np.full((h, w), style.ink_darkness)
    if texture and style.noise_level > 0:
        field = ndimage.gaussian_filter(rng.standard_normal((h, w)), style.texture_grain)
        field /= field.std() + 1e-12
        # pressure: darker towards the stroke centre
        profile = 0.75 + 0.25 * np.clip(1.0 - dist / (radius + 0.5), 0.0, 1.0)
        darkness = darkness * profile * (1.0 + style.noise_level * field)
    darkness = np.clip(darkness, 0.05, 1.0)
    return np.clip(1.0 - coverage * darkness, 0.0, 1.0)


def split_counts(words):
    n_test = max(1, int(round(TEST_FRACTION * words)))
    return words - n_test, n_test


def generate_corpus(n_writers, words_per_writer, seed, out_dir, texture=True):
    """Render the corpus to ``out_dir`` and write ``manifest.tsv``.

    Per writer the first 80% of words are training words; lines (5 words)
    and pages (4 lines) are numbered inside each split so that no page is
    shared between train and test. Returns the manifest rows.
    """
    if n_writers < 2:
        raise InputError("need at least 2 writers")
    if words_per_writer < 2:
        raise InputError("need at least 2 words per writer")
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    n_train, _ = split_counts(words_per_writer)
    for wr in range(n_writers):
        style = writer_style(seed, wr)
        rng = np.random.default_rng([seed, wr, 1])
        wdir = os.path.join(out_dir, f"writer_{wr:04d}")
        os.makedirs(wdir, exist_ok=True)
        for k in range(words_per_writer):
            img = render_word(style, rng, texture)
            rel = f"writer_{wr:04d}/word_{k:04d}.pgm"
            write_pgm(os.path.join(out_dir, rel), img)
            split = "train" if k < n_train else "test"
            i = k if split == "train" else k - n_train
            page = i // (WORDS_PER_LINE * LINES_PER_PAGE)
            line = (i // WORDS_PER_LINE) % LINES_PER_PAGE
            page_id = f"w{wr:04d}-{split}-p{page:02d}"
            rows.append(ManifestRow(rel, f"w{wr:04d}", page_id, f"{page_id}-l{line:02d}", split))
    write_manifest(os.path.join(out_dir, "manifest.tsv"), rows)
    return rows
