"""Flat ``key = value`` run configuration with dotted keys and typed defaults."""

from __future__ import annotations

from .backbone import BackboneConfig
from .embed import PointEmbedConfig
from .errors import ConfigError
from .model import ModelConfig
from .train import TrainConfig


def _bool(text):
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(text)


def _ints(text):
    return tuple(int(p) for p in text.split(","))


def _opt_float(text):
    return None if text.lower() == "none" else float(text)


# key: (default, parser, description)
DEFAULTS = {
    "data.points": (1024, int, "points per generated synthetic cloud"),
    "data.noise": (0.01, float, "Gaussian noise sigma for generated clouds"),
    "pointcloud.n_groups": (64, int, "FPS centroids per cloud (N_s)"),
    "pointcloud.k": (16, int, "neighbours per group"),
    "pointcloud.normalize": (True, _bool, "centre and scale clouds to the unit sphere"),
    "pointcloud.seed": (0, int, "seed for per-cloud FPS start points"),
    "embed.widths": ((64, 128), _ints, "hidden widths of the two embedding stages"),
    "backbone.L": (4, int, "number of transformer blocks"),
    "backbone.d": (128, int, "token width"),
    "backbone.n_heads": (4, int, "attention heads"),
    "backbone.mlp_hidden": (512, int, "MLP hidden width"),
    "backbone.prenorm": (True, _bool, "pre-norm block wiring (false: LN on the MLP branch only)"),
    "backbone.final_norm": (False, _bool, "layer-norm the last block output"),
    "model.prompt": (True, _bool, "point-prompt on (false: ablation)"),
    "model.posin": (True, _bool, "position injector on (false: ablation)"),
    "model.pooled_cls": (True, _bool, "pool cls/prompts/tokens (false: raw class token)"),
    "model.head_bias": (False, _bool, "bias in the classifier head"),
    "train.lr_max": (5e-4, float, "initial learning rate"),
    "train.lr_min": (1e-6, float, "final learning rate of the cosine schedule"),
    "train.weight_decay": (5e-2, float, "decoupled weight decay"),
    "train.epochs": (200, int, "maximum epochs"),
    "train.batch_size": (8, int, "clouds per optimiser step"),
    "train.seed": (0, int, "seed for initialisation and shuffling"),
    "train.beta1": (0.9, float, "Adam beta1"),
    "train.beta2": (0.999, float, "Adam beta2"),
    "train.eps": (1e-8, float, "Adam epsilon"),
    "train.grad_clip": (10.0, float, "global gradient-norm clip"),
    "train.augment": (False, _bool, "random z-rotation and jitter each epoch"),
    "train.target_train_acc": (None, _opt_float, "stop early at this train accuracy ('none' disables)"),
    "fewshot.epochs": (20, int, "fine-tuning epochs per few-shot episode"),
    "fewshot.seed": (0, int, "episode sampling seed"),
}


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value is None:
        return "none"
    return repr(value) if isinstance(value, float) else str(value)


class RunConfig:
    def __init__(self, values=None):
        self.values = {k: v[0] for k, v in DEFAULTS.items()}
        for key, value in (values or {}).items():
            self.set(key, value)

    def set(self, key, value):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str):
            text = value.strip()
            if not text:
                raise ConfigError(f"missing value for config key {key!r}")
            try:
                value = DEFAULTS[key][1](text)
            except ValueError:
                raise ConfigError(f"bad value {text!r} for config key {key!r}") from None
        self.values[key] = value

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def loads(cls, text, source="<config>"):
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, eq, value = line.partition("=")
            if not eq:
                raise ConfigError(f"{source}:line {lineno}: expected 'key = value', got {line!r}")
            cfg.set(key.strip(), value)
        return cfg

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.loads(text, source=str(path))

    def apply_overrides(self, pairs):
        for pair in pairs:
            key, eq, value = pair.partition("=")
            if not eq:
                raise ConfigError(f"override must be key=value, got {pair!r}")
            self.set(key.strip(), value)

    def dumps(self):
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.values.items())

    def model_config(self, n_classes):
        v = self.values
        try:
            bb = BackboneConfig(L=v["backbone.L"], d=v["backbone.d"], n_heads=v["backbone.n_heads"],
                                mlp_hidden=v["backbone.mlp_hidden"], prenorm=v["backbone.prenorm"],
                                final_norm=v["backbone.final_norm"])
            emb = PointEmbedConfig(d_out=v["backbone.d"], widths=tuple(v["embed.widths"]))
            return ModelConfig(emb, bb, n_classes, v["model.prompt"], v["model.posin"],
                               v["model.pooled_cls"], v["model.head_bias"])
        except Exception as exc:
            raise ConfigError(f"invalid model configuration: {exc}") from None

    def train_config(self):
        v = self.values
        return TrainConfig(lr_max=v["train.lr_max"], lr_min=v["train.lr_min"],
                           weight_decay=v["train.weight_decay"], epochs=v["train.epochs"],
                           batch_size=v["train.batch_size"], seed=v["train.seed"],
                           beta1=v["train.beta1"], beta2=v["train.beta2"], eps=v["train.eps"],
                           grad_clip=v["train.grad_clip"], augment=v["train.augment"],
                           target_train_acc=v["train.target_train_acc"])
