import math

import numpy as np
import pytest

from appt import numerics as nx
from appt.backbone import tensor_digests
from appt.errors import ConfigError, ContractError, IntegrityError, NonFiniteError
from appt.oracles import adamw_scalar_oracle
from appt.pointcloud import SHAPE_KINDS, gen_synthetic
from appt.properties import random_groups, small_model
from appt.train import (METRICS_HEADER, AdamWState, EpisodeSpec, GroupedDataset, TrainConfig, Trainer,
                        adamw_step, clip_grad_norm, cosine_lr, cross_entropy, evaluate, few_shot_episodes, fit,
                        metrics_csv, run_few_shot, train_epoch)


def shapes_dataset(per_class=6, n=128, n_groups=8, k=8, seed=0, keep_clouds=False):
    rng = np.random.default_rng(seed)
    clouds = [gen_synthetic(kind, n, 0.01, seed=int(rng.integers(2 ** 31)))
              for kind in SHAPE_KINDS for _ in range(per_class)]
    return GroupedDataset.from_clouds(clouds, SHAPE_KINDS, n_groups, k, seed=seed, keep_clouds=keep_clouds)


def tiny_model(seed=0, **flags):
    return small_model(L=2, d=16, n_heads=2, widths=(8, 16), seed=seed, **flags)


def trainable_bytes(model):
    return {n: t.data.tobytes() for n, t in model.trainable().items()}


# loss -----------------------------------------------------------------------

def test_cross_entropy_examples():
    assert cross_entropy(nx.Tensor(np.zeros(4)), 2).item() == pytest.approx(math.log(4), abs=1e-15)
    assert cross_entropy(nx.Tensor([20.0, 0.0, 0.0]), 0).item() <= 1e-8
    logits = nx.Tensor([0.0, 0.0], requires_grad=True)
    np.testing.assert_allclose(nx.backward(cross_entropy(logits, 0))[logits], [-0.5, 0.5], atol=1e-15)


def test_cross_entropy_batch_and_range():
    logits = nx.Tensor([[0.0, 0.0], [5.0, 0.0]])
    expected = (math.log(2) + math.log1p(math.exp(-5))) / 2
    assert cross_entropy(logits, [0, 0]).item() == pytest.approx(expected, rel=1e-14)
    with pytest.raises(ContractError):
        cross_entropy(logits, [0, 2])
    with pytest.raises(ContractError):
        cross_entropy(nx.Tensor([1.0, 2.0]), -1)


# schedule / optimiser -------------------------------------------------------

def test_cosine_lr_examples():
    cfg = TrainConfig()
    assert cosine_lr(0, 100, cfg) == 5e-4
    assert cosine_lr(100, 100, cfg) == pytest.approx(1e-6, abs=1e-18)
    assert cosine_lr(50, 100, cfg) == pytest.approx((5e-4 + 1e-6) / 2, rel=1e-14)
    with pytest.raises(ContractError):
        cosine_lr(101, 100, cfg)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr_max=1e-6, lr_min=1e-6)
    TrainConfig(lr_max=0.0, lr_min=0.0)


def test_adamw_zero_gradient():
    cfg = TrainConfig(weight_decay=0.0)
    p = nx.Tensor([1.0, -2.0], requires_grad=True)
    adamw_step({"p": p}, {"p": np.zeros(2)}, AdamWState(), 5e-4, cfg)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adamw_decay_only():
    p = nx.Tensor([1.0, -2.0], requires_grad=True)
    adamw_step({"p": p}, {"p": np.zeros(2)}, AdamWState(), 5e-4, TrainConfig())
    np.testing.assert_allclose(p.data, np.array([1.0, -2.0]) * (1 - 2.5e-5), rtol=0, atol=1e-15)


@pytest.mark.parametrize("wd", [0.0, 5e-2])
def test_adamw_matches_scalar_oracle(wd):
    cfg = TrainConfig(weight_decay=wd)
    w = nx.Tensor([0.0], requires_grad=True)
    state = AdamWState()
    trace = []
    for _ in range(3):
        g = nx.backward(nx.tsum((w - 1.0) * (w - 1.0)))[w]
        adamw_step({"w": w}, {"w": g}, state, 5e-4, cfg)
        trace.append(w.data[0])
    ref = adamw_scalar_oracle(lambda x: 2 * (x - 1), 0.0, 3, 5e-4, wd)
    assert max(abs(a - b) for a, b in zip(trace, ref)) <= 1e-12


def test_adamw_rejects_non_finite_and_frozen():
    p = nx.Tensor([1.0], requires_grad=True)
    with pytest.raises(NonFiniteError):
        adamw_step({"p": p}, {"p": np.array([np.inf])}, AdamWState(), 1e-3, TrainConfig())
    assert p.data[0] == 1.0
    with pytest.raises(IntegrityError):
        adamw_step({"q": nx.Tensor([1.0])}, {}, AdamWState(), 1e-3, TrainConfig())


def test_clip_grad_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_grad_norm(grads, 1.0) == 5.0
    assert math.hypot(grads["a"][0], grads["b"][0]) == pytest.approx(1.0)
    small = {"a": np.array([0.3])}
    clip_grad_norm(small, 10.0)
    assert small["a"][0] == 0.3


# loop -----------------------------------------------------------------------

def test_lr_zero_epoch_is_noop():
    ds = shapes_dataset(per_class=3)
    model = tiny_model()
    before = trainable_bytes(model)
    cfg = TrainConfig(lr_max=0.0, lr_min=0.0, batch_size=4)
    first = evaluate(model, ds).loss
    m = train_epoch(model, ds, cfg)
    assert trainable_bytes(model) == before
    assert evaluate(model, ds).loss == first and m["lr"] == 0.0


def test_only_trainable_parameters_change():
    ds = shapes_dataset(per_class=3)
    model = tiny_model()
    frozen = tensor_digests(model.frozen())
    before = trainable_bytes(model)
    trainer = Trainer(model, TrainConfig(batch_size=4), total_steps=30)
    for epoch in range(5):
        trainer.train_epoch(ds, epoch)
    assert tensor_digests(model.frozen()) == frozen
    after = trainable_bytes(model)
    assert all(after[n] != before[n] for n in before)


def test_frozen_mutation_is_hard_error():
    ds = shapes_dataset(per_class=2)
    model = tiny_model()
    trainer = Trainer(model, TrainConfig(batch_size=4), total_steps=10)
    model.backbone.tensors["cls_token"].data[0] += 1e-3
    with pytest.raises(IntegrityError):
        trainer.train_epoch(ds, 0)


def test_first_batch_loss_decreases():
    # overfit-run shape: L=4, d=128, N_s=32, k=16, batch 8
    ds = shapes_dataset(per_class=8, n=512, n_groups=32, k=16, seed=0)
    decreased = 0
    for seed in range(10):
        model = small_model(L=4, d=128, n_heads=4, seed=seed)
        trainer = Trainer(model, TrainConfig(seed=seed), total_steps=200 * 4)
        order = np.random.default_rng([seed, 0]).permutation(len(ds))
        g, y = ds.groups[order[:8]], ds.labels[order[:8]]
        with nx.no_grad():
            start = cross_entropy(model(g), y).item()
        for i in range(10):
            idx = order[(8 * i) % 32:(8 * i) % 32 + 8]
            trainer.step(ds.groups[idx], ds.labels[idx])
        with nx.no_grad():
            decreased += cross_entropy(model(g), y).item() < start
    assert decreased >= 9


def test_fit_is_bit_reproducible_and_consistent():
    ds = shapes_dataset(per_class=4)
    runs = []
    for _ in range(2):
        model = tiny_model()
        history = fit(model, ds, TrainConfig(epochs=3, batch_size=4))
        runs.append((metrics_csv(history), trainable_bytes(model)))
        assert evaluate(model, ds).accuracy == history[-1]["accuracy"]
    assert runs[0] == runs[1]
    assert runs[0][0].splitlines()[0] == METRICS_HEADER
    assert len(runs[0][0].splitlines()) == 4


def test_fit_early_stop():
    ds = shapes_dataset(per_class=2)
    history = fit(tiny_model(), ds, TrainConfig(epochs=5, batch_size=4, target_train_acc=0.0))
    assert len(history) == 1


def test_augmentation_is_seeded():
    ds = shapes_dataset(per_class=2, keep_clouds=True)
    a = fit(tiny_model(), ds, TrainConfig(epochs=2, batch_size=4, augment=True))
    b = fit(tiny_model(), ds, TrainConfig(epochs=2, batch_size=4, augment=True))
    assert metrics_csv(a) == metrics_csv(b)
    with pytest.raises(ConfigError):
        fit(tiny_model(), shapes_dataset(per_class=2), TrainConfig(epochs=1, augment=True))


# evaluation -----------------------------------------------------------------

def test_evaluate_random_head_near_chance():
    rng = np.random.default_rng(0)
    model = tiny_model()
    model.head["head.weight"].data[...] = rng.normal(size=model.head["head.weight"].shape)
    groups = random_groups(rng, 8, 4, batch=200)
    labels = np.repeat(np.arange(4), 50)
    ds = GroupedDataset(groups, labels, list(SHAPE_KINDS))
    before = trainable_bytes(model)
    res = evaluate(model, ds)
    assert abs(res.accuracy - 0.25) <= 0.10
    np.testing.assert_array_equal(res.confusion.sum(axis=1), [50, 50, 50, 50])
    assert trainable_bytes(model) == before
    assert evaluate(model, ds).accuracy == res.accuracy


# few-shot -------------------------------------------------------------------

def test_episode_composition():
    labels = np.repeat(np.arange(6), 30)
    spec = EpisodeSpec(5, 10)
    episodes = few_shot_episodes(labels, spec, seed=3)
    assert len(episodes) == 10
    for ep in episodes:
        assert len(ep.support) == 50 and len(ep.query) == 100
        assert not set(ep.support) & set(ep.query)
        assert set(labels[ep.support]) == set(ep.classes) == set(labels[ep.query])
    again = few_shot_episodes(labels, spec, seed=3)
    assert all((a.support == b.support).all() and (a.query == b.query).all() for a, b in zip(episodes, again))


def test_episode_errors():
    with pytest.raises(ConfigError):
        few_shot_episodes(np.repeat(np.arange(4), 30), EpisodeSpec(5, 10))
    with pytest.raises(ConfigError):
        few_shot_episodes(np.repeat(np.arange(5), 29), EpisodeSpec(5, 10))


def test_run_few_shot_leaves_source_model_untouched():
    ds = shapes_dataset(per_class=6)
    model = tiny_model()
    before = trainable_bytes(model)
    spec = EpisodeSpec(2, 2, queries_per_class=3, repeats=2)
    mean, std, accs = run_few_shot(model, ds, spec, TrainConfig(epochs=1, batch_size=4))
    assert len(accs) == 2 and 0.0 <= mean <= 1.0 and std >= 0.0
    assert trainable_bytes(model) == before
