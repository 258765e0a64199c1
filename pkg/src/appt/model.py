"""The assembled classifier and its frozen/trainable parameter partition."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .backbone import Backbone, BackboneConfig
from .embed import (PointEmbedConfig, PointEmbedParams, embed_param_count, global_embedding,
                    init_posin, point_embed, pos_inject)
from .errors import ContractError, IntegrityError
from .numerics import Tensor
from .prompt import gen_prompt, pool_cls, prompted_forward


@dataclass(frozen=True)
class ModelConfig:
    embed: PointEmbedConfig = field(default_factory=PointEmbedConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig.vit_b)
    n_classes: int = 15
    use_prompt: bool = True
    use_posin: bool = True
    pooled_cls: bool = True
    head_bias: bool = False

    def __post_init__(self):
        if self.embed.d_out != self.backbone.d:
            raise ContractError(f"embed width {self.embed.d_out} must equal backbone width {self.backbone.d}")
        if self.n_classes < 2:
            raise ContractError("a classifier needs at least two classes")


def trainable_param_count(config):
    head = config.n_classes * config.backbone.d + (config.n_classes if config.head_bias else 0)
    return embed_param_count(config.embed) + 2 + head


@dataclass
class Encoding:
    embeddings: Tensor
    global_embedding: Tensor
    prompt: Tensor | None
    tokens: Tensor
    state: object
    e_cls: Tensor


class APPTModel:
    def __init__(self, config, backbone, embed_params=None, posin=None, head=None, seed=0):
        if backbone.config != config.backbone:
            raise ContractError("backbone config does not match model config")
        self.config = config
        self.backbone = backbone
        self.embed_params = embed_params or PointEmbedParams.init(config.embed, seed=seed)
        self.posin = posin if posin is not None else init_posin()
        if head is None:
            head = init_head(config.n_classes, config.backbone.d, seed=seed + 1, bias=config.head_bias)
        self.head = head

    @classmethod
    def random(cls, config, seed=0, backbone_seed=None):
        bb = Backbone.init_random(config.backbone, seed=seed if backbone_seed is None else backbone_seed)
        return cls(config, bb, seed=seed)

    @property
    def prompt_params(self):
        """The prompt generator reuses the embedder's parameters (same objects)."""
        return self.embed_params

    def encode(self, groups):
        emb = point_embed(groups, self.embed_params)
        eg = global_embedding(emb)
        tokens = pos_inject(emb, self.posin) if self.config.use_posin else emb
        p0 = gen_prompt(emb) if self.config.use_prompt else None
        state = prompted_forward(tokens, p0, self.backbone.cls_token, self.backbone,
                                 use_prompt=self.config.use_prompt)
        if self.config.pooled_cls:
            e_cls = pool_cls(state)
        else:
            e_cls = nx.reshape(state.cls, state.cls.shape[:-2] + (state.cls.shape[-1],))
        return Encoding(emb, eg, p0, tokens, state, e_cls)

    def logits(self, e_cls):
        w = self.head["head.weight"]
        out = e_cls @ w.T if e_cls.ndim > 1 else nx.reshape(nx.reshape(e_cls, (1, -1)) @ w.T, (w.shape[0],))
        if "head.bias" in self.head:
            out = out + self.head["head.bias"]
        return out

    def forward(self, groups):
        """Class logits for (..., N_s, k, C) grouped points."""
        return self.logits(self.encode(groups).e_cls)

    __call__ = forward

    def trainable(self):
        out = self.embed_params.named()
        out["posin.kernel"] = self.posin
        out.update(self.head)
        return out

    def frozen(self):
        return self.backbone.named()

    def parameters(self):
        """Every tensor held by the model, found by walking its attributes.

        Independent of :meth:`frozen` and :meth:`trainable`, so a tensor
        attached outside those registries is still seen by the partition check.
        """
        out, seen = {}, set()

        def add(name, t):
            if id(t) in seen:
                return
            seen.add(id(t))
            while name in out:
                name += "'"
            out[name] = t

        def visit(prefix, obj):
            if isinstance(obj, Tensor):
                add(obj.name or prefix, obj)
            elif isinstance(obj, dict):
                for k, v in obj.items():
                    visit(str(k), v)
            elif hasattr(obj, "named"):
                for k, v in obj.named().items():
                    add(k, v)

        for attr, value in vars(self).items():
            if attr != "config":
                visit(attr, value)
        return out


def init_head(n_classes, d, seed=0, bias=False):
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 0.02, size=(n_classes, d)).clip(-0.04, 0.04)
    head = {"head.weight": Tensor(w, requires_grad=True, name="head.weight")}
    if bias:
        head["head.bias"] = Tensor(np.zeros(n_classes), requires_grad=True, name="head.bias")
    return head


@dataclass
class Partition:
    frozen: dict
    trainable: dict

    @property
    def frozen_count(self):
        return sum(t.size for t in self.frozen.values())

    @property
    def trainable_count(self):
        return sum(t.size for t in self.trainable.values())

    @property
    def ratio(self):
        return self.trainable_count / (self.trainable_count + self.frozen_count)


def param_partition(model):
    """Split parameters into frozen (backbone + cls) and trainable (embed, PosIn, head).

    Raises IntegrityError if a parameter belongs to neither or both sets, or
    if its ``requires_grad`` flag contradicts its set.
    """
    frozen, trainable = model.frozen(), model.trainable()
    frozen_ids = {id(t) for t in frozen.values()}
    trainable_ids = {id(t) for t in trainable.values()}
    if frozen_ids & trainable_ids:
        raise IntegrityError("a parameter is both frozen and trainable")
    for name, t in model.parameters().items():
        if id(t) not in frozen_ids | trainable_ids:
            raise IntegrityError(f"parameter {name!r} is in neither set")
    for name, t in frozen.items():
        if t.requires_grad:
            raise IntegrityError(f"frozen parameter {name!r} has requires_grad set")
    for name, t in trainable.items():
        if not t.requires_grad:
            raise IntegrityError(f"trainable parameter {name!r} is not marked requires_grad")
    return Partition(frozen, trainable)
