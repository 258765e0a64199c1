"""Frozen transformer encoder.

Weights are stored for ``x @ w + b`` (shape ``(d_in, d_out)``) under the
names ``blocks.{l}.{ln1,ln2}.{gamma,beta}``, ``blocks.{l}.attn.{wq,wk,wv,wo}``
(+ ``.bias``), ``blocks.{l}.mlp.{w1,w2}`` (+ ``.bias``) and ``cls_token``.
When ``final_norm`` is on, ``norm.gamma`` / ``norm.beta`` are also required.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .errors import ContractError
from .numerics import Tensor

LN_EPS = 1e-5


@dataclass(frozen=True)
class BackboneConfig:
    L: int = 12
    d: int = 768
    n_heads: int = 12
    mlp_hidden: int | None = None
    has_cls_token: bool = True
    prenorm: bool = True
    final_norm: bool = False

    def __post_init__(self):
        if self.L < 1:
            raise ContractError(f"need at least one block, got L={self.L}")
        if self.d < 1 or self.n_heads < 1 or self.d % self.n_heads:
            raise ContractError(f"d={self.d} must be divisible by n_heads={self.n_heads}")
        if self.mlp_hidden is None:
            object.__setattr__(self, "mlp_hidden", 4 * self.d)

    @classmethod
    def vit_b(cls):
        return cls(L=12, d=768, n_heads=12, mlp_hidden=3072)

    @property
    def head_dim(self):
        return self.d // self.n_heads

    def tensor_shapes(self):
        """Expected name -> shape for every backbone tensor."""
        d, h = self.d, self.mlp_hidden
        shapes = {"cls_token": (d,)}
        for l in range(self.L):
            p = f"blocks.{l}."
            shapes[p + "ln1.gamma"] = (d,)
            shapes[p + "ln1.beta"] = (d,)
            for w in ("wq", "wk", "wv", "wo"):
                shapes[p + f"attn.{w}"] = (d, d)
                shapes[p + f"attn.{w}.bias"] = (d,)
            shapes[p + "ln2.gamma"] = (d,)
            shapes[p + "ln2.beta"] = (d,)
            shapes[p + "mlp.w1"] = (d, h)
            shapes[p + "mlp.w1.bias"] = (h,)
            shapes[p + "mlp.w2"] = (h, d)
            shapes[p + "mlp.w2.bias"] = (d,)
        if self.final_norm:
            shapes["norm.gamma"] = (d,)
            shapes["norm.beta"] = (d,)
        return shapes

    def param_count(self):
        return sum(int(np.prod(s)) for s in self.tensor_shapes().values())

    def to_dict(self):
        return asdict(self)


def _trunc_normal(rng, shape, std=0.02):
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


class Backbone:
    """Named frozen tensors plus the config they satisfy."""

    def __init__(self, config, tensors, seed=None):
        self.config = config
        self.seed = seed
        expected = config.tensor_shapes()
        for name, shape in expected.items():
            if name not in tensors:
                raise ContractError(f"backbone tensor {name!r} missing")
            if tuple(tensors[name].shape) != shape:
                raise ContractError(f"backbone tensor {name!r} has shape {tensors[name].shape}, expected {shape}")
        self.tensors = {name: tensors[name] for name in expected}
        for name, t in self.tensors.items():
            t.requires_grad = False
            t.name = name

    @classmethod
    def init_random(cls, config, seed=0):
        """Truncated-normal(0, 0.02) weights, zero biases, unit LN gains.

        Values are rounded through float32 so checkpoints round-trip exactly.
        """
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in config.tensor_shapes().items():
            if name.endswith(".gamma"):
                arr = np.ones(shape)
            elif name.endswith(".beta") or name.endswith(".bias"):
                arr = np.zeros(shape)
            else:
                arr = _trunc_normal(rng, shape)
            tensors[name] = Tensor(arr.astype(np.float32).astype(np.float64))
        return cls(config, tensors, seed=seed)

    @property
    def cls_token(self):
        return self.tensors["cls_token"]

    def __getitem__(self, name):
        return self.tensors[name]

    def named(self):
        return dict(self.tensors)

    def count(self):
        return sum(t.size for t in self.tensors.values())


def mhsa(x, backbone, l):
    """Unmasked multi-head self-attention of block ``l`` on (..., T, d) tokens."""
    cfg = backbone.config
    p = f"blocks.{l}.attn."
    t = backbone.tensors
    lead, T = x.shape[:-2], x.shape[-2]
    H, dh = cfg.n_heads, cfg.head_dim

    def heads(w):
        y = x @ t[p + w] + t[p + w + ".bias"]
        return nx.reshape(y, lead + (T, H, dh)).swapaxes(-2, -3)   # (..., H, T, dh)

    q, k, v = heads("wq"), heads("wk"), heads("wv")
    att = nx.softmax((q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh)), axis=-1)
    mixed = (att @ v).swapaxes(-2, -3)                              # (..., T, H, dh)
    mixed = nx.reshape(mixed, lead + (T, cfg.d))
    return mixed @ t[p + "wo"] + t[p + "wo.bias"]


def mlp(x, backbone, l):
    t = backbone.tensors
    p = f"blocks.{l}.mlp."
    h = nx.gelu(x @ t[p + "w1"] + t[p + "w1.bias"])
    return h @ t[p + "w2"] + t[p + "w2.bias"]


def block_forward(x, backbone, l):
    """One encoder block; token count and width are preserved.

    Pre-norm by default. With ``prenorm=False`` the block follows the
    printed form where only the MLP branch is normalised.
    """
    t = backbone.tensors
    p = f"blocks.{l}."
    if x.shape[-1] != backbone.config.d:
        raise ContractError(f"block {l} expects width {backbone.config.d}, got {x.shape[-1]}")
    if backbone.config.prenorm:
        x = x + mhsa(nx.layer_norm(x, t[p + "ln1.gamma"], t[p + "ln1.beta"], LN_EPS), backbone, l)
    else:
        x = x + mhsa(x, backbone, l)
    return x + mlp(nx.layer_norm(x, t[p + "ln2.gamma"], t[p + "ln2.beta"], LN_EPS), backbone, l)


def final_norm(x, backbone):
    t = backbone.tensors
    return nx.layer_norm(x, t["norm.gamma"], t["norm.beta"], LN_EPS)


# integrity ------------------------------------------------------------------

def tensor_digests(tensors):
    """sha256 of the raw bytes of each tensor, keyed by name."""
    return {name: hashlib.sha256(np.ascontiguousarray(t.data).tobytes()).hexdigest()
            for name, t in sorted(tensors.items())}


def combined_digest(tensors):
    h = hashlib.sha256()
    for name, digest in tensor_digests(tensors).items():
        h.update(name.encode())
        h.update(digest.encode())
    return h.hexdigest()
