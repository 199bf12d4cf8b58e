"""Word-image preprocessing: canvas fitting, Otsu binarisation, contours.

Gray images are dark ink on white (0 = black,
1 = white). Binary and contour images flip to ink = 1 so that zero padding
is plain background.
"""

import csv
import enum
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InputError

CANVAS = (64, 128)
MAX_SHIFT = 4
MANIFEST_COLUMNS = ("image_path", "writer_id", "page_id", "line_id", "split")


class ImageMode(str, enum.Enum):
    GRAY = "gray"
    BINARY = "binary"
    CONTOUR = "contour"

    @property
    def pad_value(self):
        return 1.0 if self is ImageMode.GRAY else 0.0


# --------------------------------------------------------------------------
# PGM


def _pgm_tokens(raw, count):
    """Read ``count`` whitespace-separated header tokens, skipping # comments."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise InputError("truncated PGM header")
        tokens.append(raw[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte ends the header


def read_pgm(path):
    """Binary (P5) 8-bit PGM -> float array in [0, 1], shape (height, width)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = _pgm_tokens(raw, 4)
    if tokens[0] != b"P5":
        raise InputError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    width, height, maxval = (int(t) for t in tokens[1:])
    if width < 1 or height < 1:
        raise InputError(f"{path}: empty image {width}x{height}")
    if not 0 < maxval <= 255:
        raise InputError(f"{path}: unsupported maxval {maxval}")
    data = np.frombuffer(raw, dtype=np.uint8, count=width * height, offset=pos)
    return data.reshape(height, width).astype(np.float64) / maxval


def write_pgm(path, img):
    """Write a [0, 1] image as 8-bit P5 (values rounded, clipped)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = img[..., 0]
    h, w = img.shape
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


# --------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class ManifestRow:
    image_path: str
    writer_id: str
    page_id: str
    line_id: str
    split: str


def read_manifest(path):
    """Rows with ``image_path`` resolved against the manifest's directory."""
    base = os.path.dirname(os.path.abspath(path))
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise InputError(f"{path}: manifest lacks columns {sorted(missing)}")
        for r in reader:
            if r["split"] not in ("train", "test"):
                raise InputError(f"{path}: bad split {r['split']!r}")
            img = r["image_path"]
            if not os.path.isabs(img):
                img = os.path.join(base, img)
            rows.append(ManifestRow(img, r["writer_id"], r["page_id"], r["line_id"], r["split"]))
    return rows


def write_manifest(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r in rows:
            w.writerow([r.image_path, r.writer_id, r.page_id, r.line_id, r.split])


# --------------------------------------------------------------------------
# Otsu, binarisation, contour


def _bins(img):
    return np.minimum((np.asarray(img) * 256).astype(np.int64), 255)


def otsu_threshold(img):
    """Threshold in [0, 1] maximising between-class variance.

    Candidates are the 255 inner boundaries ``k/256`` of a 256-bin histogram;
    the smallest maximiser wins. A single-valued image returns its value.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.size == 0:
        raise InputError("otsu_threshold: empty image")
    lo, hi = img.min(), img.max()
    if lo == hi:
        return float(lo)
    hist = np.bincount(_bins(img).ravel(), minlength=256).astype(np.float64)
    p = hist / hist.sum()
    centers = (np.arange(256) + 0.5) / 256
    w0 = np.cumsum(p)[:-1]  # mass of bins < k, k = 1..255
    m0 = np.cumsum(p * centers)[:-1]
    mu = (p * centers).sum()
    w1 = 1.0 - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mu * w0 - m0) ** 2 / (w0 * w1)
    between[(w0 <= 0) | (w1 <= 0)] = -1.0
    k = int(np.argmax(between)) + 1
    return k / 256


def binarize(img, threshold=None):
    """Ink (values below the threshold) -> 1, background -> 0."""
    img = np.asarray(img, dtype=np.float64)
    if threshold is None:
        threshold = otsu_threshold(img)
    return (img < threshold).astype(np.float64)


def extract_contour(binary):
    """Foreground pixels with at least one background 4-neighbour.

    Pixels outside the image count as background.
    """
    fg = np.asarray(binary) > 0.5
    p = np.pad(fg, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return (fg & ~interior).astype(np.float64)


# --------------------------------------------------------------------------
# canvas fitting and augmentation


def fitted_size(height, width, canvas=CANVAS):
    s = min(canvas[0] / height, canvas[1] / width)
    return (min(canvas[0], max(1, int(round(height * s)))),
            min(canvas[1], max(1, int(round(width * s)))))


def _resize_bilinear(img, size):
    if img.shape == tuple(size):
        return img.copy()
    zoom = (size[0] / img.shape[0], size[1] / img.shape[1])
    out = ndimage.zoom(img, zoom, order=1, mode="nearest", grid_mode=True)
    return np.clip(out, 0.0, 1.0)


def apply_mode(img, mode):
    mode = ImageMode(mode)
    if mode is ImageMode.GRAY:
        return img
    b = binarize(img)
    return b if mode is ImageMode.BINARY else extract_contour(b)


def resize_to_canvas(img, mode=ImageMode.GRAY, canvas=CANVAS):
    """Fit a raw gray image onto the canvas, keeping its aspect ratio.

    The image is bilinearly scaled by ``min(64/h, 128/w)``, converted to the
    requested mode, then centred (extra padding row/column goes to the
    bottom/right). Returns a ``(64, 128, 1)`` array.
    """
    mode = ImageMode(mode)
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = img[..., 0]
    if img.ndim != 2 or img.size == 0:
        raise InputError(f"resize_to_canvas: empty or malformed image {img.shape}")
    h, w = fitted_size(*img.shape, canvas)
    content = apply_mode(_resize_bilinear(img, (h, w)), mode)
    out = np.full(canvas, mode.pad_value)
    top = (canvas[0] - h) // 2
    left = (canvas[1] - w) // 2
    out[top:top + h, left:left + w] = content
    return out[..., None]


def shift_image(img, dy, dx, fill):
    """Translate by integer (dy, dx); positive dy moves content down."""
    out = np.full_like(img, fill)
    h, w = img.shape[:2]
    if abs(dy) >= h or abs(dx) >= w:
        return out
    src_y = slice(max(0, -dy), h - max(0, dy))
    dst_y = slice(max(0, dy), h - max(0, -dy))
    src_x = slice(max(0, -dx), w - max(0, dx))
    dst_x = slice(max(0, dx), w - max(0, -dx))
    out[dst_y, dst_x] = img[src_y, src_x]
    return out


def translate_augment(img, seed=None, fill=1.0, max_shift=MAX_SHIFT):
    """Random integer shift in [-max_shift, max_shift] per axis.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
    return shift_image(img, int(dy), int(dx), fill)


def load_image(path, mode=ImageMode.GRAY):
    return resize_to_canvas(read_pgm(path), mode)
