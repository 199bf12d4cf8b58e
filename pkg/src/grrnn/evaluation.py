"""Word-level top-k, line/page aggregation and nearest-writer identification."""

import csv
from collections import OrderedDict, defaultdict
from dataclasses import dataclass

import numpy as np

from .errors import DataIntegrityError, DegenerateFeatureError, InputError

RESULT_COLUMNS = ("protocol", "variant", "axis", "mode", "top1", "top5")


@dataclass
class PredictionRecord:
    sample_id: str
    label: int
    line_id: str
    page_id: str
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-6:
            raise DataIntegrityError(f"{self.sample_id}: not a probability vector")


def ranks_of_true(scores, labels):
    """0-based rank of the true class; ties favour the smaller class index."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    true = scores[np.arange(len(labels)), labels][:, None]
    cls = np.arange(scores.shape[1])[None, :]
    ahead = (scores > true) | ((scores == true) & (cls < labels[:, None]))
    return ahead.sum(axis=1)


def topk_accuracy(records, k):
    if k < 1:
        raise InputError("k must be >= 1")
    if not records:
        raise InputError("topk_accuracy: no records")
    scores = np.stack([r.probs for r in records])
    labels = np.array([r.label for r in records])
    return float(np.mean(ranks_of_true(scores, labels) < k))


def aggregate_group(records, group_id=None):
    """Mean softmax response of a line or page; all members share one writer."""
    if not records:
        raise InputError("aggregate_group: empty group")
    labels = {r.label for r in records}
    if len(labels) != 1:
        raise DataIntegrityError(f"group {group_id!r} mixes writers {sorted(labels)}")
    probs = np.mean([r.probs for r in records], axis=0)
    first = records[0]
    return PredictionRecord(group_id if group_id is not None else first.sample_id,
                            first.label, first.line_id, first.page_id, probs)


def aggregate(records, level):
    """Group word records by ``line`` or ``page`` id, in first-seen order."""
    attr = {"line": "line_id", "page": "page_id"}[level]
    groups = OrderedDict()
    for r in records:
        groups.setdefault(getattr(r, attr), []).append(r)
    return [aggregate_group(members, gid) for gid, members in groups.items()]


def per_writer_accuracy(records):
    hits = defaultdict(list)
    for r in records:
        hits[r.label].append(int(np.argmax(r.probs) == r.label))
    return {w: float(np.mean(h)) for w, h in sorted(hits.items())}


# --------------------------------------------------------------------------
# feature protocol


def normalize(f):
    f = np.asarray(f, dtype=np.float64)
    norm = np.linalg.norm(f, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise DegenerateFeatureError("cannot normalise a zero feature vector")
    return f / norm


def extract_feature(model, img):
    """Unit-norm head feature for one image (or a batch) in eval mode."""
    img = np.asarray(img, dtype=model.dtype)
    single = img.ndim == 3
    feats = model.extract_features(img[None] if single else img)
    out = normalize(feats)
    return out[0] if single else out


@dataclass
class WriterModel:
    writer: int
    mean: np.ndarray


def build_writer_models(features, labels, renormalize=True):
    """Per-writer mean of unit features (training split only).

    With ``renormalize`` the mean is projected back onto the unit sphere.
    """
    features = normalize(features)
    labels = np.asarray(labels)
    models = []
    for w in np.unique(labels):
        mean = features[labels == w].mean(axis=0)
        models.append(WriterModel(int(w), normalize(mean) if renormalize else mean))
    return models


def nn_identify(query, models):
    """Writers sorted by Euclidean distance to ``query`` (ties: smaller id).

    Returns ``(best_writer, [(writer, distance), ...])``.
    """
    if not models:
        raise InputError("nn_identify: no writer models")
    ids = np.array([m.writer for m in models])
    means = np.stack([m.mean for m in models])
    d = np.linalg.norm(means - np.asarray(query, dtype=np.float64), axis=1)
    order = np.lexsort((ids, d))
    ranking = [(int(ids[i]), float(d[i])) for i in order]
    return ranking[0][0], ranking


def feature_scores(queries, models):
    """Negative distances (higher is better), columns indexed by writer id."""
    n_cls = max(m.writer for m in models) + 1
    scores = np.full((len(queries), n_cls), -np.inf)
    means = np.stack([m.mean for m in models])
    ids = [m.writer for m in models]
    d = np.sqrt(np.maximum(
        (queries ** 2).sum(1)[:, None] - 2 * queries @ means.T + (means ** 2).sum(1)[None], 0))
    scores[:, ids] = -d
    return scores


def feature_topk(query_features, query_labels, models, ks=(1, 5)):
    q = normalize(query_features)
    ranks = ranks_of_true(feature_scores(q, models), query_labels)
    return {k: float(np.mean(ranks < k)) for k in ks}


# --------------------------------------------------------------------------
# CSV output


def write_results(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            w.writerow([r[c] if c not in ("top1", "top5") else f"{r[c]:.6f}"
                        for c in RESULT_COLUMNS])


def write_per_writer(path, accuracy, names=None):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("writer", "top1"))
        for k, acc in accuracy.items():
            w.writerow((names[k] if names else k, f"{acc:.6f}"))
