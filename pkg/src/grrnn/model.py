"""The assembled writer-identification network."""

import numpy as np

from . import backbone, head
from . import tensor as T
from .backbone import BackboneConfig
from .variants import ModelVariant


class GRRNN:
    """Backbone + fragment head + classifier for one variant.

    Parameters live in ``params`` (name -> Tensor, insertion order is the
    canonical order used by checkpoints); BN running statistics in
    ``buffers`` (name -> ndarray).
    """

    def __init__(self, variant=ModelVariant(), n_writers=2, cfg=BackboneConfig(),
                 seed=0, dtype=np.float32):
        self.variant = variant if isinstance(variant, ModelVariant) else ModelVariant.parse(variant)
        self.cfg = cfg
        self.n_writers = int(n_writers)
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        arrays, self.buffers = backbone.init_params(cfg, self.variant, rng, self.dtype)
        arrays.update(head.init_params(self.variant.kind, cfg.local_dim, cfg.global_dim,
                                       self.n_writers, rng, self.dtype))
        self.params = {n: T.Tensor(a, requires_grad=True, name=n) for n, a in arrays.items()}

    def num_params(self):
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def features(self, images, training=False):
        """The pre-classifier feature f for a batch of (B, 64, 128, 1) images."""
        out = backbone.forward(self.params, self.buffers, images, self.cfg,
                               self.variant, training)
        kind = self.variant.kind
        xs, gru = [], None
        if kind.uses_fragments:
            frags = head.segment_fragments(out.f_l, self.variant.axis)
            xs = [head.embed_fragment(fr, self.params["head.fc.weight"],
                                      self.params["head.fc.bias"]) for fr in frags]
        if kind.uses_gru:
            gru = head.GruParams.from_params(self.params)
        f, _ = head.run_head(kind, xs, out.f_g, gru)
        return f

    def forward(self, images, training=False):
        """Returns ``(logits, feature)``."""
        if not isinstance(images, T.Tensor):
            images = T.Tensor(np.asarray(images, dtype=self.dtype))
        f = self.features(images, training)
        logits = head.classify(f, self.params["classifier.weight"],
                               self.params["classifier.bias"])
        return logits, f

    def predict_proba(self, images, batch_size=64):
        """Eval-mode softmax probabilities, computed without a tape."""
        out = []
        for i in range(0, len(images), batch_size):
            logits, _ = self.forward(images[i:i + batch_size], training=False)
            z = logits.data.astype(np.float64)
            z = z - z.max(axis=1, keepdims=True)
            p = np.exp(z)
            out.append(p / p.sum(axis=1, keepdims=True))
        return np.concatenate(out) if out else np.zeros((0, self.n_writers))

    def extract_features(self, images, batch_size=64):
        out = []
        for i in range(0, len(images), batch_size):
            _, f = self.forward(images[i:i + batch_size], training=False)
            out.append(f.data.astype(np.float64))
        return np.concatenate(out) if out else np.zeros((0, self.cfg.global_dim))

    def config(self):
        return {
            "variant": self.variant.kind.value,
            "axis": self.variant.axis.value,
            "n_writers": self.n_writers,
            "plan": list(self.cfg.plan),
            "width": self.cfg.width,
        }
