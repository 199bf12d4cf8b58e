"""Four-block CNN producing the local map f_l and the global context f_g."""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .variants import ModelVariant

INPUT_SHAPE = (64, 128, 1)
N_FRAGMENTS = 8


@dataclass(frozen=True)
class BackboneConfig:
    plan: tuple = (64, 128, 256, 512)
    width: float = 1.0

    @property
    def channels(self):
        return tuple(max(1, int(round(c * self.width))) for c in self.plan)

    @property
    def local_dim(self):
        return self.channels[2]

    @property
    def global_dim(self):
        return self.channels[3]


@dataclass
class BackboneOutput:
    f_l: T.Tensor
    f_g: Optional[T.Tensor] = None


def n_blocks(variant):
    return 4 if variant.kind.uses_global else 3


def conv_layers(cfg, blocks=4):
    """(name, c_in, c_out, out_h, out_w) for every conv layer executed."""
    layers = []
    c_in = INPUT_SHAPE[2]
    h, w = INPUT_SHAPE[:2]
    for i, c in enumerate(cfg.channels[:blocks], start=1):
        for j in (1, 2):
            layers.append((f"backbone.block{i}.conv{j}", c_in, c, h, w))
            c_in = c
        h, w = h // 2, w // 2
    return layers


def init_params(cfg, variant, rng, dtype=np.float64):
    """He-normal conv weights, unit BN scale, zero biases and shifts."""
    params, buffers = {}, {}
    for name, c_in, c_out, _, _ in conv_layers(cfg, n_blocks(variant)):
        std = np.sqrt(2.0 / (9 * c_in))
        params[name + ".weight"] = rng.normal(0.0, std, (3, 3, c_in, c_out)).astype(dtype)
        params[name + ".bias"] = np.zeros(c_out, dtype)
        bn = name.replace("conv", "bn")
        params[bn + ".gamma"] = np.ones(c_out, dtype)
        params[bn + ".beta"] = np.zeros(c_out, dtype)
        buffers[bn + ".running_mean"] = np.zeros(c_out, dtype)
        buffers[bn + ".running_var"] = np.ones(c_out, dtype)
    return params, buffers


def _check_input(img):
    if img.data.ndim not in (3, 4):
        raise DimensionError("backbone", "rank", "3 or 4", img.data.ndim)
    got = img.shape[-3:]
    for axis, want, have in zip(("height", "width", "channels"), INPUT_SHAPE, got):
        if want != have:
            raise DimensionError("backbone", axis, want, have)


def forward(params, buffers, img, cfg, variant, training):
    """Run the blocks the variant needs.

    ``params`` maps names to Tensors; ``buffers`` holds the BN running
    statistics as plain arrays (mutated in training mode).
    """
    img = img if isinstance(img, T.Tensor) else T.Tensor(img)
    _check_input(img)
    x = img
    f_l = None
    blocks = n_blocks(variant)
    for i in range(1, blocks + 1):
        for j in (1, 2):
            conv = f"backbone.block{i}.conv{j}"
            bn = f"backbone.block{i}.bn{j}"
            x = T.conv3x3(x, params[conv + ".weight"], params[conv + ".bias"])
            x = T.batchnorm(x, params[bn + ".gamma"], params[bn + ".beta"],
                            buffers[bn + ".running_mean"], buffers[bn + ".running_var"],
                            training)
            x = T.relu(x)
        x = T.maxpool2x2(x)
        if i == 3:
            f_l = x
    f_g = T.gap(x) if variant.kind.uses_global else None
    return BackboneOutput(f_l, f_g)


def count_params(variant, n_writers, cfg=BackboneConfig()):
    """Trainable parameters instantiated for ``variant`` (BN running stats excluded)."""
    variant = variant if isinstance(variant, ModelVariant) else ModelVariant.parse(variant)
    total = 0
    for _, c_in, c_out, _, _ in conv_layers(cfg, n_blocks(variant)):
        total += 9 * c_in * c_out + c_out + 2 * c_out
    d_l, d_g = cfg.local_dim, cfg.global_dim
    if variant.kind.uses_fragments:
        total += d_l * d_g + d_g
    if variant.kind.uses_gru:
        total += 6 * d_g * d_g + 3 * d_g
    total += d_g * n_writers + n_writers
    return total


def count_flops(variant, cfg=BackboneConfig(), conv_only=False):
    """Multiply-accumulates for one 64x128 image; one MAC counts as one FLOP.

    Conv layers always count. Unless ``conv_only``, the shared fragment FC
    (8 applications) and the GRU matrices (8 steps) count too. The
    classifier, BN, ReLU and pooling are ignored.
    """
    variant = variant if isinstance(variant, ModelVariant) else ModelVariant.parse(variant)
    total = sum(h * w * c_out * 9 * c_in
                for _, c_in, c_out, h, w in conv_layers(cfg, n_blocks(variant)))
    if conv_only:
        return total
    d_l, d_g = cfg.local_dim, cfg.global_dim
    if variant.kind.uses_fragments:
        total += N_FRAGMENTS * d_l * d_g
    if variant.kind.uses_gru:
        total += N_FRAGMENTS * 6 * d_g * d_g
    return total


def block4_flops(cfg=BackboneConfig()):
    return sum(h * w * c_out * 9 * c_in
               for name, c_in, c_out, h, w in conv_layers(cfg, 4) if "block4" in name)

