"""Loading manifest rows into arrays the model can consume."""

from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .imageproc import ImageMode, load_image, read_manifest


@dataclass(frozen=True)
class WordSample:
    image: np.ndarray   # (64, 128, 1)
    label: int
    writer_id: str
    line_id: str
    page_id: str
    sample_id: str


@dataclass
class Split:
    images: np.ndarray
    labels: np.ndarray
    samples: list

    def __len__(self):
        return len(self.samples)


def writer_index(rows):
    """Writer id -> class index, sorted so the mapping is order independent."""
    return {w: i for i, w in enumerate(sorted({r.writer_id for r in rows}))}


def load_split(rows, split, mode=ImageMode.GRAY, writers=None, dtype=np.float32):
    writers = writers if writers is not None else writer_index(rows)
    samples = []
    for r in rows:
        if r.split != split:
            continue
        if r.writer_id not in writers:
            raise InputError(f"writer {r.writer_id!r} unknown to the model")
        samples.append(WordSample(load_image(r.image_path, mode), writers[r.writer_id],
                                  r.writer_id, r.line_id, r.page_id, r.image_path))
    if samples:
        images = np.stack([s.image for s in samples]).astype(dtype)
    else:
        images = np.zeros((0, 64, 128, 1), dtype)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return Split(images, labels, samples)


def load_manifest_splits(path, mode=ImageMode.GRAY, dtype=np.float32):
    rows = read_manifest(path)
    writers = writer_index(rows)
    return (writers, load_split(rows, "train", mode, writers, dtype),
            load_split(rows, "test", mode, writers, dtype))
