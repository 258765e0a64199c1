"""Fine-tuning of the trainable subset: loss, AdamW, cosine schedule, evaluation."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .backbone import combined_digest
from .errors import ConfigError, ContractError, IntegrityError, NonFiniteError
from .model import APPTModel, ModelConfig, init_head, param_partition
from .pointcloud import PointCloud, group_cloud

METRICS_HEADER = "epoch,step,lr,loss,accuracy"


@dataclass
class TrainConfig:
    lr_max: float = 5e-4
    lr_min: float = 1e-6
    weight_decay: float = 5e-2
    epochs: int = 200
    batch_size: int = 8
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 10.0
    augment: bool = False
    # stop once post-epoch train accuracy reaches this value (None: run all epochs)
    target_train_acc: float | None = None

    def __post_init__(self):
        # lr_max == lr_min == 0 is allowed as a no-op run
        if not (self.lr_max > self.lr_min >= 0 or self.lr_max == self.lr_min == 0):
            raise ConfigError(f"need lr_max > lr_min >= 0, got {self.lr_max}, {self.lr_min}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self):
        return asdict(self)


# loss / schedule / optimiser ------------------------------------------------

def cross_entropy(logits, labels):
    """Mean of -log softmax(logits)[label] over the leading axis (or a single row)."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n_classes = logits.shape[-1]
    if ((labels < 0) | (labels >= n_classes)).any():
        raise ContractError(f"labels {labels.tolist()} out of range for {n_classes} classes")
    logp = nx.log_softmax(logits, axis=-1)
    if logits.ndim == 1:
        if labels.size != 1:
            raise ContractError("one row of logits needs exactly one label")
        return -logp[int(labels[0])]
    picked = logp[np.arange(len(labels)), labels]
    return -picked.mean()


def cosine_lr(step, total_steps, config):
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return config.lr_max
    frac = step / total_steps
    return config.lr_min + 0.5 * (config.lr_max - config.lr_min) * (1 + math.cos(math.pi * frac))


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state, lr, config):
    """Decoupled weight decay, then a bias-corrected Adam update, in place.

    ``params`` maps names to trainable tensors and ``grads`` names to arrays;
    a parameter without a gradient is treated as having a zero gradient.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name}; step aborted")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    for name, p in params.items():
        if not p.requires_grad:
            raise IntegrityError(f"optimiser asked to update frozen tensor {name!r}")
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        p.data *= 1.0 - lr * config.weight_decay
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + config.eps)


def clip_grad_norm(grads, max_norm):
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for name in grads:
            grads[name] = grads[name] * scale
    return total


# data -----------------------------------------------------------------------

@dataclass
class GroupedDataset:
    """Pre-grouped clouds: ``groups`` is (M, N_s, k, C), ``labels`` is (M,)."""

    groups: np.ndarray
    labels: np.ndarray
    classes: list
    clouds: list | None = None
    n_groups: int = 0
    k: int = 0
    normalize: bool = True
    seed: int = 0

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_clouds(cls, clouds, classes, n_groups, k, seed=0, normalize=True, keep_clouds=False):
        if not clouds:
            raise ContractError("dataset is empty")
        seeds = np.random.default_rng(seed).integers(2 ** 31, size=len(clouds))
        groups = np.stack([group_cloud(c, n_groups, k, seed=int(s), normalize=normalize).groups
                           for c, s in zip(clouds, seeds)])
        labels = np.array([c.label for c in clouds], dtype=np.int64)
        return cls(groups, labels, list(classes), clouds if keep_clouds else None,
                   n_groups, k, normalize, seed)

    def subset(self, idx, labels=None):
        idx = np.asarray(idx)
        return GroupedDataset(self.groups[idx], self.labels[idx] if labels is None else np.asarray(labels),
                              self.classes, None if self.clouds is None else [self.clouds[i] for i in idx],
                              self.n_groups, self.k, self.normalize, self.seed)


def augment_cloud(cloud, rng, jitter=0.01):
    """Random rotation about the vertical axis plus Gaussian jitter."""
    theta = rng.uniform(0, 2 * np.pi)
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    coords = cloud.coords @ rot.T + rng.normal(scale=jitter, size=cloud.coords.shape)
    return PointCloud(coords, cloud.features, cloud.label)


def _augmented(dataset, epoch, seed):
    if dataset.clouds is None:
        raise ConfigError("augmentation needs the raw clouds (build the dataset with keep_clouds=True)")
    rng = np.random.default_rng([seed, epoch, 1])
    clouds = [augment_cloud(c, rng) for c in dataset.clouds]
    return GroupedDataset.from_clouds(clouds, dataset.classes, dataset.n_groups, dataset.k,
                                      seed=dataset.seed, normalize=dataset.normalize, keep_clouds=True)


# loops ----------------------------------------------------------------------

@dataclass
class EvalResult:
    accuracy: float
    per_class: np.ndarray
    confusion: np.ndarray
    loss: float


def evaluate(model, dataset, batch_size=32):
    """Argmax accuracy, per-class accuracy and confusion matrix; no parameter changes."""
    n_classes = model.config.n_classes
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    total_loss = 0.0
    with nx.no_grad():
        for start in range(0, len(dataset), batch_size):
            g = dataset.groups[start:start + batch_size]
            y = dataset.labels[start:start + batch_size]
            logits = model.forward(g)
            total_loss += cross_entropy(logits, y).item() * len(y)
            pred = logits.data.argmax(axis=-1)
            np.add.at(confusion, (y, pred), 1)
    counts = confusion.sum(axis=1)
    per_class = np.divide(np.diag(confusion), counts, out=np.full(n_classes, np.nan), where=counts > 0)
    acc = float(np.trace(confusion)) / max(len(dataset), 1)
    return EvalResult(acc, per_class, confusion, total_loss / max(len(dataset), 1))


@dataclass
class Trainer:
    """Holds optimiser state and the step counter across epochs."""

    model: APPTModel
    config: TrainConfig
    total_steps: int
    state: AdamWState = field(default_factory=AdamWState)
    frozen_digest: str = ""

    def __post_init__(self):
        self.partition = param_partition(self.model)
        self.frozen_digest = combined_digest(self.partition.frozen)

    def check_frozen(self):
        now = combined_digest(self.partition.frozen)
        if now != self.frozen_digest:
            raise IntegrityError("frozen backbone tensors changed during training")

    def step(self, groups, labels):
        loss = cross_entropy(self.model.forward(groups), labels)
        grads_by_tensor = nx.backward(loss)
        names = {id(t): n for n, t in self.partition.trainable.items()}
        grads = {}
        for t, g in grads_by_tensor.items():
            if id(t) not in names:
                raise IntegrityError(f"gradient reached a non-trainable leaf {t.name!r}")
            grads[names[id(t)]] = g
        clip_grad_norm(grads, self.config.grad_clip)
        lr = cosine_lr(min(self.state.step, self.total_steps), self.total_steps, self.config)
        adamw_step(self.partition.trainable, grads, self.state, lr, self.config)
        return loss.item(), lr

    def train_epoch(self, dataset, epoch):
        """One seeded pass over ``dataset``; accuracy is measured after the epoch."""
        if len(dataset) == 0:
            raise ContractError("dataset is empty")
        data = _augmented(dataset, epoch, self.config.seed) if self.config.augment else dataset
        order = np.random.default_rng([self.config.seed, epoch]).permutation(len(data))
        bs = self.config.batch_size
        loss_sum, lr = 0.0, cosine_lr(min(self.state.step, self.total_steps), self.total_steps, self.config)
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            loss, lr = self.step(data.groups[idx], data.labels[idx])
            loss_sum += loss * len(idx)
        self.check_frozen()
        acc = evaluate(self.model, dataset).accuracy
        return {"epoch": epoch, "step": self.state.step, "lr": lr,
                "loss": loss_sum / len(order), "accuracy": acc}


def steps_per_epoch(n, batch_size):
    return -(-n // batch_size)


def train_epoch(model, dataset, config, trainer=None, epoch=0):
    trainer = trainer or Trainer(model, config, steps_per_epoch(len(dataset), config.batch_size))
    return trainer.train_epoch(dataset, epoch)


def format_metrics_row(m):
    return f"{m['epoch']},{m['step']},{m['lr']!r},{m['loss']!r},{m['accuracy']!r}"


def fit(model, dataset, config, on_epoch=None):
    """Train for ``config.epochs`` epochs (or until ``target_train_acc``).

    Returns the list of per-epoch metric dicts; ``on_epoch`` is called with
    each one as it is produced.
    """
    total = config.epochs * steps_per_epoch(len(dataset), config.batch_size)
    trainer = Trainer(model, config, total)
    history = []
    for epoch in range(config.epochs):
        m = trainer.train_epoch(dataset, epoch)
        history.append(m)
        if on_epoch is not None:
            on_epoch(m)
        if config.target_train_acc is not None and m["accuracy"] >= config.target_train_acc:
            break
    return history


def metrics_csv(history):
    return "\n".join([METRICS_HEADER] + [format_metrics_row(m) for m in history]) + "\n"


# few-shot -------------------------------------------------------------------

@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int
    k_shot: int
    queries_per_class: int = 20
    repeats: int = 10


@dataclass
class Episode:
    classes: list
    support: np.ndarray
    query: np.ndarray


def few_shot_episodes(labels, spec, seed=0):
    """Sample ``spec.repeats`` N-way K-shot episodes over dataset labels."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if spec.n_way > len(classes):
        raise ConfigError(f"{spec.n_way}-way episodes need {spec.n_way} classes, dataset has {len(classes)}")
    need = spec.k_shot + spec.queries_per_class
    eligible = [c for c in classes if (labels == c).sum() >= need]
    if len(eligible) < spec.n_way:
        raise ConfigError(f"only {len(eligible)} classes have the {need} samples an episode needs")
    rng = np.random.default_rng(seed)
    episodes = []
    for _ in range(spec.repeats):
        chosen = sorted(rng.choice(eligible, size=spec.n_way, replace=False).tolist())
        support, query = [], []
        for c in chosen:
            idx = rng.permutation(np.flatnonzero(labels == c))[:need]
            support.extend(idx[:spec.k_shot])
            query.extend(idx[spec.k_shot:])
        episodes.append(Episode(chosen, np.array(support), np.array(query)))
    return episodes


def clone_for_task(model, n_classes, seed=0):
    """Copy of ``model`` sharing the frozen backbone, with fresh trainable copies and a new head."""
    cfg = model.config
    new_cfg = ModelConfig(cfg.embed, cfg.backbone, n_classes, cfg.use_prompt, cfg.use_posin,
                          cfg.pooled_cls, cfg.head_bias)
    embed = copy.deepcopy(model.embed_params)
    posin = copy.deepcopy(model.posin)
    head = init_head(n_classes, cfg.backbone.d, seed=seed, bias=cfg.head_bias)
    return APPTModel(new_cfg, model.backbone, embed, posin, head)


def run_few_shot(model, dataset, spec, config, seed=0):
    """Fine-tune a copy of the model on each episode's support set and score its queries.

    Returns (mean accuracy, standard deviation, per-episode accuracies).
    """
    accs = []
    for i, ep in enumerate(few_shot_episodes(dataset.labels, spec, seed)):
        remap = {c: j for j, c in enumerate(ep.classes)}
        sup = dataset.subset(ep.support, [remap[c] for c in dataset.labels[ep.support]])
        qry = dataset.subset(ep.query, [remap[c] for c in dataset.labels[ep.query]])
        task = clone_for_task(model, spec.n_way, seed=seed + i)
        ep_cfg = TrainConfig(**{**config.to_dict(), "seed": config.seed + i, "target_train_acc": None})
        fit(task, sup, ep_cfg)
        accs.append(evaluate(task, qry).accuracy)
    accs = np.array(accs)
    return float(accs.mean()), float(accs.std()), accs
