"""Group embedding and position injection.

A group of k neighbours goes through two shared per-point MLP stages with
max pooling over the neighbours, then a linear projection to the backbone
width. The same parameters also feed the prompt generator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ContractError
from .numerics import Tensor

# Widths that reproduce the published ~3.4M trainable parameters at d = 768.
PAPER_WIDTHS = (256, 1280)
# Widths used for desk-scale training runs.
DESK_WIDTHS = (64, 128)


@dataclass(frozen=True)
class PointEmbedConfig:
    d_out: int = 768
    widths: tuple = PAPER_WIDTHS
    in_channels: int = 3

    def __post_init__(self):
        if len(self.widths) != 2 or min(self.widths) < 1:
            raise ContractError(f"need two positive hidden widths, got {self.widths}")
        if self.d_out < 1 or self.in_channels < 3:
            raise ContractError("d_out must be positive and in_channels >= 3")


def _linear_init(rng, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    b = rng.uniform(-bound, bound, size=fan_out)
    return w, b


class PointEmbedParams:
    """Trainable weights of the group embedder, stored as ``x @ w + b``."""

    LAYERS = ("s1.fc1", "s1.fc2", "s2.fc1", "s2.fc2", "proj")

    def __init__(self, config, tensors):
        self.config = config
        self.tensors = tensors

    @classmethod
    def init(cls, config, seed=0):
        rng = np.random.default_rng(seed)
        w1, w2 = config.widths
        dims = {
            "s1.fc1": (config.in_channels, w1),
            "s1.fc2": (w1, w1),
            "s2.fc1": (2 * w1, w2),
            "s2.fc2": (w2, w2),
            "proj": (w2, config.d_out),
        }
        tensors = {}
        for layer in cls.LAYERS:
            w, b = _linear_init(rng, *dims[layer])
            tensors[f"embed.{layer}.weight"] = Tensor(w, requires_grad=True, name=f"embed.{layer}.weight")
            tensors[f"embed.{layer}.bias"] = Tensor(b, requires_grad=True, name=f"embed.{layer}.bias")
        return cls(config, tensors)

    def layer(self, name):
        return self.tensors[f"embed.{name}.weight"], self.tensors[f"embed.{name}.bias"]

    def named(self):
        return dict(self.tensors)

    def count(self):
        return sum(t.size for t in self.tensors.values())


def embed_param_count(config):
    w1, w2 = config.widths
    c, d = config.in_channels, config.d_out
    return (c * w1 + w1) + (w1 * w1 + w1) + (2 * w1 * w2 + w2) + (w2 * w2 + w2) + (w2 * d + d)


def _dense(x, params, layer):
    w, b = params.layer(layer)
    return x @ w + b


def point_embed(groups, params):
    """Embed grouped points.

    ``groups`` has shape (..., N_s, k, C_in); the result is (..., N_s, d).
    Each output row depends only on its own group and is invariant to the
    order of the k neighbours.
    """
    groups = groups if isinstance(groups, Tensor) else Tensor(groups)
    if groups.ndim < 3 or groups.shape[-1] != params.config.in_channels:
        raise ContractError(
            f"groups must be (..., N_s, k, {params.config.in_channels}), got {groups.shape}")
    h = nx.relu(_dense(groups, params, "s1.fc1"))
    h = _dense(h, params, "s1.fc2")
    pooled = h.max(axis=-2, keepdims=True)
    # Linear([pooled, h]) with the pooled half applied once per group
    w, b = params.layer("s2.fc1")
    width = h.shape[-1]
    h = nx.relu(pooled @ w[:width] + h @ w[width:] + b)
    h = _dense(h, params, "s2.fc2")
    h = h.max(axis=-2)
    return _dense(h, params, "proj")


def global_embedding(emb):
    """Channel-wise mean over the group axis."""
    if emb.shape[-2] < 1:
        raise ContractError("global_embedding needs at least one row")
    return emb.mean(axis=-2)


def init_posin():
    """PosIn starts as the identity: a = 0 (relative term), b = 1 (raw term)."""
    return Tensor([0.0, 1.0], requires_grad=True, name="posin.kernel")


def pos_inject(emb, kernel):
    """a * (e_i - e_g) + b * e_i for every row, with kernel = [a, b]."""
    eg = global_embedding(emb)
    rel = emb - nx.reshape(eg, eg.shape[:-1] + (1, eg.shape[-1]))
    return rel * kernel[0] + emb * kernel[1]


def pos_inject_conv(emb, kernel):
    """Same map written as a bias-free width-2 convolution over stacked channels."""
    eg = global_embedding(emb)
    rel = emb - nx.reshape(eg, eg.shape[:-1] + (1, eg.shape[-1]))
    stacked = nx.stack([rel, emb], axis=-1)           # (..., N_s, d, 2)
    out = stacked @ nx.reshape(kernel, (2, 1))        # (..., N_s, d, 1)
    return nx.reshape(out, out.shape[:-1])
