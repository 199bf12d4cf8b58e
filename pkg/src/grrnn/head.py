"""Fragment-sequence head: segmentation, embedding, GRU recurrence, classifier."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import N_FRAGMENTS
from .errors import ConfigurationError, DimensionError
from .variants import Axis, Kind

GRU_NAMES = ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")


@dataclass
class GruParams:
    W_z: T.Tensor
    W_r: T.Tensor
    W_h: T.Tensor
    U_z: T.Tensor
    U_r: T.Tensor
    U_h: T.Tensor
    b_z: T.Tensor
    b_r: T.Tensor
    b_h: T.Tensor

    @classmethod
    def from_params(cls, params, prefix="head.gru."):
        return cls(**{n: params[prefix + n] for n in GRU_NAMES})

    def tensors(self):
        return [getattr(self, n) for n in GRU_NAMES]


def segment_fragments(f_l, axis):
    """Split ``(..., 8, 16, C)`` into 8 slabs in reading order.

    Horizontal: one row band each (1 x 16 x C). Vertical: two-column bands
    (8 x 2 x C), left to right.
    """
    axis = Axis(axis)
    if f_l.data.ndim not in (3, 4):
        raise DimensionError("segment_fragments", "rank", "3 or 4", f_l.data.ndim)
    h, w = f_l.shape[-3], f_l.shape[-2]
    if h != N_FRAGMENTS:
        raise DimensionError("segment_fragments", "height", N_FRAGMENTS, h)
    if w != 2 * N_FRAGMENTS:
        raise DimensionError("segment_fragments", "width", 2 * N_FRAGMENTS, w)
    lead = (slice(None),) * (f_l.data.ndim - 3)
    frags = []
    for t in range(N_FRAGMENTS):
        if axis is Axis.HORIZONTAL:
            idx = lead + (slice(t, t + 1), slice(None), slice(None))
        else:
            idx = lead + (slice(None), slice(2 * t, 2 * t + 2), slice(None))
        frags.append(T.getitem(f_l, idx))
    return frags


def embed_fragment(frag, fc_weight, fc_bias):
    """GAP over the fragment, then the shared FC (local dim -> global dim)."""
    return T.linear(T.gap(frag), fc_weight, fc_bias)


def gru_step(x_t, f_prev, p):
    z = T.sigmoid(T.add_bias(T.add(T.linear(x_t, p.W_z), T.linear(f_prev, p.U_z)), p.b_z))
    r = T.sigmoid(T.add_bias(T.add(T.linear(x_t, p.W_r), T.linear(f_prev, p.U_r)), p.b_r))
    h = T.tanh(T.add_bias(T.add(T.linear(x_t, p.W_h),
                                T.linear(T.mul(r, f_prev), p.U_h)), p.b_h))
    return T.add(T.mul(z, f_prev), T.mul(T.one_minus(z), h))


def run_head(kind, xs, f_g=None, gru=None):
    """Combine fragment embeddings ``xs`` (and f_g) into the final feature.

    Returns ``(f, states)`` where ``states`` lists f^1..f^8 for RNN kinds.
    """
    kind = Kind(kind)
    if kind.uses_global and f_g is None:
        raise ConfigurationError(f"variant {kind.value} needs the global context f_g")
    if kind is Kind.BASELINE:
        return f_g, []
    if len(xs) != N_FRAGMENTS:
        raise DimensionError("run_head", "sequence", N_FRAGMENTS, len(xs))
    if kind is Kind.F:
        return T.sequence_sum(xs), []
    if gru is None:
        raise ConfigurationError(f"variant {kind.value} needs GRU parameters")
    f = f_g if kind.uses_global else T.zeros(xs[0].shape, xs[0].dtype)
    states = []
    for x in xs:
        f = gru_step(x, f, gru)
        if kind.residual:
            f = T.add(f, x)
        states.append(f)
    return T.sequence_sum(states), states


def classify(f, weight, bias):
    """Writer logits; the softmax lives in the loss."""
    if weight.shape[1] < 2:
        raise ConfigurationError("classifier needs at least 2 writers")
    return T.linear(f, weight, bias)


# The summed fragment states can have norms in the hundreds, so a plain
# Xavier classifier starts far from uniform predictions.
CLASSIFIER_GAIN = 0.01


def xavier_uniform(rng, fan_in, fan_out, dtype, gain=1.0):
    limit = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out)).astype(dtype)


def init_params(kind, local_dim, global_dim, n_writers, rng, dtype=np.float64):
    kind = Kind(kind)
    params = {}
    if kind.uses_fragments:
        params["head.fc.weight"] = xavier_uniform(rng, local_dim, global_dim, dtype)
        params["head.fc.bias"] = np.zeros(global_dim, dtype)
    if kind.uses_gru:
        for n in GRU_NAMES:
            if n.startswith("b"):
                params["head.gru." + n] = np.zeros(global_dim, dtype)
            else:
                params["head.gru." + n] = xavier_uniform(rng, global_dim, global_dim, dtype)
    params["classifier.weight"] = xavier_uniform(rng, global_dim, n_writers, dtype,
                                                 CLASSIFIER_GAIN)
    params["classifier.bias"] = np.zeros(n_writers, dtype)
    return params
