import math
import warnings

import numpy as np
import pytest

from appt import checkpoint as ck
from appt import numerics as nx
from appt.backbone import Backbone, BackboneConfig, block_forward, combined_digest, mhsa, tensor_digests
from appt.errors import CheckpointError, ContractError, IntegrityError, ParseError
from appt.model import APPTModel, ModelConfig, param_partition, trainable_param_count
from appt.numerics import Tensor
from appt.oracles import block_oracle, mhsa_oracle
from appt.properties import small_model


def tiny(d=4, heads=2, L=1, seed=0, **kw):
    return Backbone.init_random(BackboneConfig(L=L, d=d, n_heads=heads, **kw), seed=seed)


def randomise(bb, seed):
    """Non-trivial LN/bias values so the oracles exercise every term."""
    rng = np.random.default_rng(seed)
    for name, t in bb.tensors.items():
        t.data[...] = rng.normal(scale=0.5, size=t.shape)
        if name.endswith(".gamma"):
            t.data[...] += 1.0
    return bb


def attn_weights(bb, l):
    p = f"blocks.{l}.attn."
    return {k[len(p):]: v.data for k, v in bb.tensors.items() if k.startswith(p)}


# config / init --------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ContractError):
        BackboneConfig(L=1, d=10, n_heads=3)
    with pytest.raises(ContractError):
        BackboneConfig(L=0, d=8, n_heads=2)
    assert BackboneConfig(L=1, d=8, n_heads=2).mlp_hidden == 32


def test_vit_b_closed_form_count():
    d = 768
    cfg = BackboneConfig.vit_b()
    assert cfg.param_count() == 12 * (12 * d * d + 13 * d) + d == 85_055_232


def test_init_deterministic_and_frozen():
    a, b = tiny(d=8, seed=3), tiny(d=8, seed=3)
    assert tensor_digests(a.tensors) == tensor_digests(b.tensors)
    assert all(not t.requires_grad for t in a.tensors.values())
    assert tensor_digests(tiny(d=8, seed=4).tensors) != tensor_digests(a.tensors)


def test_init_values():
    bb = tiny(d=64, heads=4, L=2, seed=0)
    for name, t in bb.tensors.items():
        if name.endswith(".gamma"):
            assert (t.data == 1.0).all()
        elif name.endswith((".beta", ".bias")):
            assert (t.data == 0.0).all()
    weights = np.concatenate([t.data.ravel() for n, t in bb.tensors.items()
                              if not n.endswith((".gamma", ".beta", ".bias"))])
    assert np.abs(weights).max() <= 0.04 + 1e-9
    # truncation at 2 sigma shrinks the std to about 0.88 * 0.02
    sigma = 0.02 * 0.8796
    assert abs(weights.mean()) <= 3 * sigma / math.sqrt(weights.size)


# attention / block ----------------------------------------------------------

def test_mhsa_single_token():
    bb = randomise(tiny(), 1)
    x = np.random.default_rng(0).normal(size=(1, 4))
    w = attn_weights(bb, 0)
    expected = (x @ w["wv"] + w["wv.bias"]) @ w["wo"] + w["wo.bias"]
    np.testing.assert_allclose(mhsa(Tensor(x), bb, 0).data, expected, rtol=0, atol=1e-14)


def test_mhsa_duplicate_rows():
    bb = randomise(tiny(), 2)
    x = np.random.default_rng(1).normal(size=(3, 4))
    x[2] = x[0]
    out = mhsa(Tensor(x), bb, 0).data
    np.testing.assert_array_equal(out[0], out[2])


def test_mhsa_matches_per_head_oracle():
    bb = randomise(tiny(), 3)
    x = np.random.default_rng(2).normal(size=(3, 4))
    ref = mhsa_oracle(x, attn_weights(bb, 0), n_heads=2)
    assert np.abs(mhsa(Tensor(x), bb, 0).data - ref).max() <= 1e-10


@pytest.mark.parametrize("prenorm", [True, False])
def test_block_matches_oracle(prenorm):
    bb = randomise(tiny(d=8, heads=2, prenorm=prenorm), 4)
    x = np.random.default_rng(3).normal(size=(5, 8))
    ref = block_oracle(x, {k: t.data for k, t in bb.tensors.items()}, 0, 2, prenorm=prenorm)
    assert np.abs(block_forward(Tensor(x), bb, 0).data - ref).max() <= 1e-10


def test_block_permutation_equivariance():
    bb = randomise(tiny(d=8, heads=2), 5)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(6, 8))
    perm = rng.permutation(6)
    a = block_forward(Tensor(x), bb, 0).data
    b = block_forward(Tensor(x[perm]), bb, 0).data
    assert np.abs(b - a[perm]).max() <= 1e-9


def test_block_identity_with_zero_projections():
    bb = randomise(tiny(d=8, heads=2), 6)
    for name in ("attn.wo", "attn.wo.bias", "mlp.w2", "mlp.w2.bias"):
        bb.tensors[f"blocks.0.{name}"].data[...] = 0.0
    x = np.random.default_rng(5).normal(size=(4, 8))
    np.testing.assert_array_equal(block_forward(Tensor(x), bb, 0).data, x)


@pytest.mark.parametrize("T", [1, 2, 7])
def test_block_preserves_shape(T):
    bb = tiny(d=8, heads=2)
    assert block_forward(Tensor(np.ones((2, T, 8))), bb, 0).shape == (2, T, 8)


def test_block_width_error():
    with pytest.raises(ContractError):
        block_forward(Tensor(np.ones((3, 6))), tiny(d=8, heads=2), 0)


# checkpoints ----------------------------------------------------------------

def test_backbone_round_trip_bit_exact(tmp_path):
    bb = tiny(d=16, heads=4, L=2, seed=9)
    path = tmp_path / "bb.ckpt"
    ck.save_backbone(bb, path)
    back = ck.load_backbone(path)
    assert back.config == bb.config and back.seed == 9
    for name, t in bb.tensors.items():
        assert back.tensors[name].data.tobytes() == t.data.tobytes()
        assert not back.tensors[name].requires_grad


def test_manifest_order_irrelevant(tmp_path):
    bb = tiny(d=8, heads=2, seed=1)
    path = tmp_path / "bb.ckpt"
    ck.save_backbone(bb, path)
    lines = path.read_text().splitlines()
    head = [l for l in lines if not l.startswith("tensor ")]
    body = [l for l in lines if l.startswith("tensor ")]
    path.write_text("\n".join(head + body[::-1]) + "\n")
    assert combined_digest(ck.load_backbone(path).tensors) == combined_digest(bb.tensors)


def test_offset_beyond_blob(tmp_path):
    path = tmp_path / "bb.ckpt"
    ck.save_backbone(tiny(d=8, heads=2), path)
    text = path.read_text().replace("tensor cls_token f32 8 0 32", "tensor cls_token f32 8 100000 32")
    path.write_text(text)
    with pytest.raises(CheckpointError, match="cls_token"):
        ck.load_backbone(path)


def test_truncated_blob(tmp_path):
    path = tmp_path / "bb.ckpt"
    ck.save_backbone(tiny(d=8, heads=2), path)
    blob = tmp_path / "bb.ckpt.bin"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(CheckpointError, match="tensor '"):
        ck.load_backbone(path)


def test_shape_mismatch_names_tensor(tmp_path):
    path = tmp_path / "bb.ckpt"
    ck.save_backbone(tiny(d=16, heads=2), path)
    with pytest.raises(CheckpointError, match="cls_token"):
        ck.load_backbone(path, BackboneConfig(L=1, d=32, n_heads=2))


def test_missing_tensor(tmp_path):
    path = tmp_path / "bb.ckpt"
    ck.save_backbone(tiny(d=8, heads=2), path)
    path.write_text("\n".join(l for l in path.read_text().splitlines() if "mlp.w2.bias" not in l) + "\n")
    with pytest.raises(CheckpointError, match="blocks.0.mlp.w2.bias"):
        ck.load_backbone(path)


def test_extra_tensor_warns(tmp_path):
    bb = tiny(d=8, heads=2)
    tensors = dict(bb.tensors, **{"pos_embed": Tensor(np.ones((3, 8)))})
    path = tmp_path / "bb.ckpt"
    ck.save_checkpoint(tensors, path, ck.backbone_metadata(bb))
    with pytest.warns(UserWarning, match="pos_embed"):
        back = ck.load_backbone(path)
    assert "pos_embed" not in back.tensors


@pytest.mark.parametrize("text, error", [
    ("", ParseError),
    ("format = 1\n", ParseError),
    ("format = 2\nblob = x.bin\n", ParseError),
    ("format = 1\nblob = x.bin\ntensor a f32 2\n", ParseError),
    ("format = 1\nblob = x.bin\ntensor a f16 2 0 4\n", ParseError),
    ("format = 1\nblob = nowhere.bin\n", CheckpointError),
])
def test_malformed_manifests(tmp_path, text, error):
    path = tmp_path / "m.ckpt"
    path.write_text(text)
    (tmp_path / "x.bin").write_bytes(b"\0" * 16)
    with pytest.raises(error):
        ck.read_manifest(path)


@pytest.mark.parametrize("lines, match", [
    (["tensor a f32 2 0 8", "tensor a f32 2 8 8"], "twice"),
    (["tensor a f32 2 0 12"], "length"),
    (["tensor a f32 2 0 8", "tensor b f32 2 4 8"], "overlaps"),
])
def test_manifest_validation(tmp_path, lines, match):
    path = tmp_path / "m.ckpt"
    path.write_text("format = 1\nblob = x.bin\n" + "\n".join(lines) + "\n")
    (tmp_path / "x.bin").write_bytes(b"\0" * 16)
    with pytest.raises(CheckpointError, match=match):
        ck.read_manifest(path)


def test_blob_is_little_endian_f32(tmp_path):
    path = tmp_path / "t.ckpt"
    ck.save_checkpoint({"x": np.array([1.0, -2.5])}, path)
    assert (tmp_path / "t.ckpt.bin").read_bytes() == np.array([1.0, -2.5], dtype="<f4").tobytes()


def test_trainable_round_trip(tmp_path):
    model = small_model(L=1, d=16, n_heads=2, seed=0)
    for t in model.trainable().values():
        t.data[...] = np.random.default_rng(0).normal(size=t.shape)
    path = tmp_path / "tr.ckpt"
    ck.save_checkpoint(model.trainable(), path)
    other = small_model(L=1, d=16, n_heads=2, seed=1)
    ck.load_trainable(path, other)
    for name, t in model.trainable().items():
        np.testing.assert_array_equal(other.trainable()[name].data, t.data.astype(np.float32))
    with pytest.raises(CheckpointError, match="head.weight"):
        ck.load_trainable(path, small_model(L=1, d=16, n_heads=2, n_classes=3))


# partition ------------------------------------------------------------------

def test_partition_small_model():
    model = small_model(L=2, d=16, n_heads=2)
    part = param_partition(model)
    assert set(part.frozen) == set(model.backbone.tensors)
    assert "cls_token" in part.frozen
    assert set(part.trainable) == set(model.embed_params.named()) | {"posin.kernel", "head.weight"}
    assert part.trainable_count == trainable_param_count(model.config)


def test_partition_detects_stray_and_misflagged():
    model = small_model(L=1, d=16, n_heads=2)
    model.stray = Tensor([1.0], requires_grad=True)
    with pytest.raises(IntegrityError, match="neither"):
        param_partition(model)
    model = small_model(L=1, d=16, n_heads=2)
    model.backbone.tensors["blocks.0.mlp.w1"].requires_grad = True
    with pytest.raises(IntegrityError, match="blocks.0.mlp.w1"):
        param_partition(model)


def test_vit_b_partition_counts():
    cfg = ModelConfig()
    trainable = trainable_param_count(cfg)
    frozen = cfg.backbone.param_count()
    assert 85e6 <= frozen <= 86e6
    assert abs(trainable - 3.4e6) <= 0.3 * 3.4e6
    assert trainable / (trainable + frozen) <= 0.05
