"""Executable property suite (permutation invariance, gradients, partition, oracles).

Every property returns a :class:`PropertyResult`; diagnostics are formatted
with fixed precision so seeded runs print identical text.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from . import oracles
from .backbone import Backbone, BackboneConfig, block_forward, tensor_digests
from .embed import DESK_WIDTHS, PointEmbedConfig, pos_inject
from .model import APPTModel, ModelConfig, param_partition, trainable_param_count
from .pointcloud import PointCloud, fps, gen_synthetic, group_cloud, knn_group
from .train import TrainConfig, Trainer, cross_entropy

PAPER_TRAINABLE = 3.4e6
PAPER_RATIO = 0.038


@dataclass
class PropertyResult:
    name: str
    passed: bool
    detail: str

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def small_model(L, d, n_heads, n_classes=4, widths=DESK_WIDTHS, seed=0, **flags):
    cfg = ModelConfig(PointEmbedConfig(d_out=d, widths=widths), BackboneConfig(L=L, d=d, n_heads=n_heads),
                      n_classes, **flags)
    return APPTModel.random(cfg, seed=seed)


def random_groups(rng, n_s, k, batch=None):
    shape = (n_s, k, 3) if batch is None else (batch, n_s, k, 3)
    return rng.normal(scale=0.1, size=shape)


def rel_change(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


# individual properties ------------------------------------------------------

def check_fps_oracle(n_clouds, seed):
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(n_clouds):
        n = int(rng.integers(2, 65))
        coords = rng.normal(size=(n, 3))
        n_s = int(rng.integers(1, n + 1))
        start = int(rng.integers(n))
        got = fps(PointCloud(coords), n_s, start=start).indices.tolist()
        mismatches += got != oracles.fps_oracle(coords.tolist(), n_s, start)
    return PropertyResult("fps_oracle", mismatches == 0, f"{n_clouds} clouds, {mismatches} mismatches")


def check_knn_oracle(n_clouds, seed):
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(n_clouds):
        n = int(rng.integers(2, 65))
        coords = rng.normal(size=(n, 3))
        k = int(rng.integers(1, n + 1))
        cloud = PointCloud(coords)
        cents = fps(cloud, min(4, n), start=0)
        groups = knn_group(cloud, cents, k)
        for i, c in enumerate(cents.coords):
            mismatches += groups.member_indices[i].tolist() != oracles.knn_oracle(coords.tolist(), c.tolist(), k)
    return PropertyResult("knn_oracle", mismatches == 0, f"{n_clouds} clouds, {mismatches} mismatches")


def check_fps_spread(trials, seed):
    rng = np.random.default_rng(seed)
    wins = 0
    for _ in range(trials):
        coords = rng.uniform(size=(64, 3))
        picked = fps(PointCloud(coords), 8, seed=int(rng.integers(2 ** 31))).indices
        rand = rng.choice(64, size=8, replace=False)
        wins += (oracles.min_pairwise_distance(coords[picked].tolist())
                 >= oracles.min_pairwise_distance(coords[rand].tolist()))
    frac = wins / trials
    return PropertyResult("fps_spread", frac >= 0.9, f"FPS at least as spread in {frac:.2f} of {trials} trials")


def check_permutation(model, n_s, k, n_perms, seed, chunk=25):
    """Invariance of e_g, p_0, e_cls and equivariance of the final tokens under group permutation."""
    rng = np.random.default_rng(seed)
    groups = random_groups(rng, n_s, k)
    with nx.no_grad():
        base = model.encode(groups)
        worst = {"e_g": 0.0, "p_0": 0.0, "e_cls": 0.0, "tokens": 0.0}
        perms = [rng.permutation(n_s) for _ in range(n_perms)]
        for start in range(0, n_perms, chunk):
            batch = perms[start:start + chunk]
            enc = model.encode(np.stack([groups[p] for p in batch]))
            for i, p in enumerate(batch):
                worst["e_g"] = max(worst["e_g"], rel_change(enc.global_embedding.data[i], base.global_embedding.data))
                if enc.prompt is not None:
                    worst["p_0"] = max(worst["p_0"], rel_change(enc.prompt.data[i], base.prompt.data))
                worst["e_cls"] = max(worst["e_cls"], rel_change(enc.e_cls.data[i], base.e_cls.data))
                row_err = np.abs(enc.state.tokens.data[i] - base.state.tokens.data[p]).max()
                worst["tokens"] = max(worst["tokens"], float(row_err))
    inv_ok = max(worst["e_g"], worst["p_0"], worst["e_cls"]) <= 1e-5
    eq_ok = worst["tokens"] <= 1e-9
    inv = PropertyResult("permutation_invariance", inv_ok,
                         f"{n_perms} perms, max rel change e_g {worst['e_g']:.1e} p_0 {worst['p_0']:.1e} "
                         f"e_cls {worst['e_cls']:.1e} (tol 1e-5)")
    eq = PropertyResult("token_equivariance", eq_ok,
                        f"max row deviation of permuted E^(L) {worst['tokens']:.1e} (tol 1e-9)")
    return inv, eq


def tiny_grad_problem(seed=0):
    """Tiny model plus a fixed two-cloud batch, for gradient checks."""
    model = small_model(L=2, d=8, n_heads=2, n_classes=2, widths=(4, 8), seed=seed)
    rng = np.random.default_rng(seed + 7)
    groups = random_groups(rng, 4, 3, batch=2) * 10.0
    labels = np.array([0, 1])
    return model, lambda: cross_entropy(model.forward(groups), labels)


def check_gradients(seed, n_coords=20):
    model, loss = tiny_grad_problem(seed)
    report = nx.finite_diff_check(loss, model.trainable(), h=1e-5, tolerance=1e-4,
                                  n_coords=n_coords, seed=seed)
    return PropertyResult("gradient_check", report.passed,
                          f"{len(report.entries)} coords, max rel err {report.max_rel_err:.1e} (tol 1e-4)"), report


def check_frozen_hash(seed, corrupt=False, steps=3):
    model = small_model(L=2, d=16, n_heads=2, seed=seed)
    before = tensor_digests(model.frozen())
    trainer = Trainer(model, TrainConfig(seed=seed), total_steps=steps)
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        trainer.step(random_groups(rng, 8, 4, batch=4), rng.integers(4, size=4))
    if corrupt:
        # negative control: flip one frozen weight behind the optimiser's back
        model.backbone.tensors["blocks.0.attn.wq"].data[0, 0] += 1.0
    after = tensor_digests(model.frozen())
    changed = [n for n in before if before[n] != after[n]]
    detail = f"{len(before)} frozen tensors, {len(changed)} changed"
    if changed:
        detail += f" (first: {changed[0]})"
    return PropertyResult("frozen_hash", not changed, detail)


def check_shape_law(L, d, n_heads, n_s, seed):
    model = small_model(L=L, d=d, n_heads=n_heads, widths=(8, 16), seed=seed)
    rng = np.random.default_rng(seed)
    with nx.no_grad():
        enc = model.encode(random_groups(rng, n_s, 4))
    bad = [t.level for t in enc.state.trace if t.input_rows != 1 + t.level + n_s]
    fresh = all(np.array_equal(t.prompt_in, enc.prompt.data) for t in enc.state.trace)
    z_ok = enc.state.prompts.shape[-2] == L
    ok = not bad and fresh and z_ok and len(enc.state.trace) == L
    return PropertyResult("shape_law", ok,
                          f"L={L}, N_s={n_s}: widths 1+l+N_s at every level={not bad}, "
                          f"Z rows={enc.state.prompts.shape[-2]}, fresh p_0={fresh}")


def vit_b_counts(n_classes=15):
    cfg = ModelConfig()
    trainable = trainable_param_count(ModelConfig(n_classes=n_classes))
    frozen = cfg.backbone.param_count()
    return trainable, frozen


def check_param_ratio():
    trainable, frozen = vit_b_counts()
    d = 768
    closed_form = 12 * (12 * d * d + 13 * d) + d
    ratio = trainable / (trainable + frozen)
    ok = (ratio <= 0.05 and abs(trainable - PAPER_TRAINABLE) <= 0.3 * PAPER_TRAINABLE
          and frozen == closed_form)
    return PropertyResult("param_ratio", ok,
                          f"ViT-B: trainable {trainable:,} frozen {frozen:,} ratio {ratio:.2%} "
                          f"(reported {PAPER_RATIO:.1%}, 3.4M trainable)")


def check_posin(seed):
    rng = np.random.default_rng(seed)
    emb = nx.Tensor(rng.normal(size=(8, 16)))
    out = pos_inject(emb, nx.Tensor([0.0, 1.0]))
    model = small_model(L=1, d=16, n_heads=2, seed=seed)
    ok = np.array_equal(out.data, emb.data) and model.posin.size == 2
    return PropertyResult("posin_identity", ok,
                          f"(a,b)=(0,1) exact identity={np.array_equal(out.data, emb.data)}, "
                          f"PosIn parameters={model.posin.size}")


def check_ablations(seed):
    """Each ablation switch must change e_cls on a fixed grouped synthetic cloud."""
    groups = group_cloud(gen_synthetic("torus", 512, 0.01, seed=seed), 32, 8, seed=seed).groups
    outs = {}
    for name, flags in {"full": {}, "no_prompt": {"use_prompt": False},
                        "no_posin": {"use_posin": False}}.items():
        model = small_model(L=4, d=128, n_heads=4, seed=seed, **flags)
        if name != "no_posin":
            model.posin.data[:] = [0.5, 1.0]  # a != 0, otherwise PosIn is the identity
        with nx.no_grad():
            outs[name] = model.encode(groups).e_cls.data
    d_prompt = float(np.abs(outs["full"] - outs["no_prompt"]).max())
    d_posin = float(np.abs(outs["full"] - outs["no_posin"]).max())
    return PropertyResult("ablation_switches", d_prompt > 1e-6 and d_posin > 1e-6,
                          f"max |delta e_cls|: no-prompt {d_prompt:.1e}, no-posin {d_posin:.1e} (need > 1e-6)")


# suite ----------------------------------------------------------------------

def run_suite(level="fast", seed=0, corrupt_frozen=False):
    full = level == "full"
    results = []
    timings = {}

    def timed(name, fn):
        t0 = time.perf_counter()
        out = fn()
        timings[name] = time.perf_counter() - t0
        return out

    results.append(timed("fps", lambda: check_fps_oracle(50 if full else 10, seed)))
    results.append(timed("knn", lambda: check_knn_oracle(50 if full else 10, seed)))
    results.append(timed("spread", lambda: check_fps_spread(100, seed)))
    if full:
        model = small_model(L=4, d=128, n_heads=4, seed=seed)
        inv, eq = timed("perm", lambda: check_permutation(model, 32, 8, 100, seed))
    else:
        model = small_model(L=2, d=32, n_heads=4, widths=(16, 32), seed=seed)
        inv, eq = timed("perm", lambda: check_permutation(model, 16, 8, 20, seed))
    results += [inv, eq]
    results.append(timed("grad", lambda: check_gradients(seed)[0]))
    results.append(timed("frozen", lambda: check_frozen_hash(seed, corrupt=corrupt_frozen)))
    results.append(timed("shape", lambda: check_shape_law(12, 64 if full else 16, 4 if full else 2,
                                                          32 if full else 8, seed)))
    results.append(check_param_ratio())
    results.append(check_posin(seed))
    results.append(timed("ablation", lambda: check_ablations(seed)))
    return results, timings
