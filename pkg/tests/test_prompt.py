import numpy as np
import pytest

from appt import numerics as nx
from appt.backbone import Backbone, BackboneConfig
from appt.errors import ContractError
from appt.model import APPTModel
from appt.numerics import Tensor
from appt.oracles import block_oracle
from appt.prompt import BlockState, gen_prompt, pool_cls, prompted_forward
from appt.properties import check_permutation, random_groups, small_model
from appt.train import cross_entropy


def test_gen_prompt_examples():
    np.testing.assert_array_equal(gen_prompt(Tensor([[1.0, 4.0], [3.0, 2.0]])).data, [5.0, 7.0])
    np.testing.assert_array_equal(gen_prompt(Tensor([[1.5, -2.0]])).data, [3.0, -4.0])


def test_gen_prompt_permutation():
    rng = np.random.default_rng(0)
    emb = rng.normal(size=(64, 768))
    base = gen_prompt(Tensor(emb)).data
    for _ in range(5):
        out = gen_prompt(Tensor(emb[rng.permutation(64)])).data
        assert np.linalg.norm(out - base) / np.linalg.norm(base) <= 1e-9


def test_pool_cls_examples():
    d = 2
    state = BlockState(Tensor([[1.0, 2.0]]), Tensor(np.zeros((0, d))), Tensor([[3.0, 0.0]]), 0)
    np.testing.assert_array_equal(pool_cls(state).data, [5.0, 3.0])
    r = np.array([0.5, -1.0])
    state = BlockState(Tensor([r]), Tensor([r, r]), Tensor([r, r, r]), 2)
    np.testing.assert_array_equal(pool_cls(state).data, 2 * r)


def identity_backbone(L, d, heads=2, seed=0):
    bb = Backbone.init_random(BackboneConfig(L=L, d=d, n_heads=heads), seed=seed)
    for l in range(L):
        for name in ("attn.wo", "attn.wo.bias", "mlp.w2", "mlp.w2.bias"):
            bb.tensors[f"blocks.{l}.{name}"].data[...] = 0.0
    return bb


def test_identity_blocks_residual_path():
    L, d, n_s = 3, 8, 5
    bb = identity_backbone(L, d)
    rng = np.random.default_rng(1)
    tokens, p0 = Tensor(rng.normal(size=(n_s, d))), Tensor(rng.normal(size=d))
    state = prompted_forward(tokens, p0, bb.cls_token, bb)
    assert state.prompts.shape == (L, d)
    np.testing.assert_array_equal(state.prompts.data, np.tile(p0.data, (L, 1)))
    np.testing.assert_array_equal(state.tokens.data, tokens.data)
    np.testing.assert_array_equal(state.cls.data[0], bb.cls_token.data)


def test_single_block_against_reference_trace():
    d, n_s = 4, 2
    bb = Backbone.init_random(BackboneConfig(L=1, d=d, n_heads=2), seed=2)
    rng = np.random.default_rng(2)
    for t in bb.tensors.values():
        t.data[...] += rng.normal(scale=0.3, size=t.shape)
    tokens, p0 = rng.normal(size=(n_s, d)), rng.normal(size=d)
    state = prompted_forward(Tensor(tokens), Tensor(p0), bb.cls_token, bb)
    x = np.vstack([bb.cls_token.data, p0, tokens])
    assert state.trace[0].input_rows == 4
    np.testing.assert_array_equal(state.trace[0].prompt_in, p0)
    ref = block_oracle(x, {k: t.data for k, t in bb.tensors.items()}, 0, 2)
    assert np.abs(state.cls.data - ref[0:1]).max() <= 1e-10
    assert np.abs(state.prompts.data - ref[1:2]).max() <= 1e-10
    assert np.abs(state.tokens.data - ref[2:]).max() <= 1e-10


def test_two_blocks_against_reference_trace():
    d, n_s = 4, 3
    bb = Backbone.init_random(BackboneConfig(L=2, d=d, n_heads=2), seed=3)
    rng = np.random.default_rng(3)
    for t in bb.tensors.values():
        t.data[...] += rng.normal(scale=0.3, size=t.shape)
    tokens, p0 = rng.normal(size=(n_s, d)), rng.normal(size=d)
    arrays = {k: t.data for k, t in bb.tensors.items()}
    y1 = block_oracle(np.vstack([bb.cls_token.data, p0, tokens]), arrays, 0, 2)
    y2 = block_oracle(np.vstack([y1[0], p0, y1[1], y1[2:]]), arrays, 1, 2)
    state = prompted_forward(Tensor(tokens), Tensor(p0), bb.cls_token, bb)
    assert np.abs(state.rows().data - y2).max() <= 1e-10
    assert [t.input_rows for t in state.trace] == [1 + 1 + n_s, 1 + 2 + n_s]


@pytest.mark.parametrize("L", [1, 4])
def test_shape_law(L):
    n_s = 6
    model = small_model(L=L, d=16, n_heads=2, widths=(8, 16))
    with nx.no_grad():
        enc = model.encode(random_groups(np.random.default_rng(0), n_s, 4))
    assert [t.input_rows for t in enc.state.trace] == [1 + l + n_s for l in range(1, L + 1)]
    assert enc.state.prompts.shape[-2] == L and enc.state.level == L
    for t in enc.state.trace:
        assert t.prompt_in.tobytes() == enc.prompt.data.tobytes()


def test_no_prompt_wiring():
    model = small_model(L=3, d=16, n_heads=2, widths=(8, 16), use_prompt=False)
    with nx.no_grad():
        enc = model.encode(random_groups(np.random.default_rng(0), 5, 4))
    assert enc.prompt is None and enc.state.prompts.shape[-2] == 0
    assert [t.input_rows for t in enc.state.trace] == [6, 6, 6]


def test_width_mismatch():
    bb = Backbone.init_random(BackboneConfig(L=1, d=8, n_heads=2), seed=0)
    with pytest.raises(ContractError):
        prompted_forward(Tensor(np.ones((3, 6))), Tensor(np.ones(6)), bb.cls_token, bb)


def test_end_to_end_permutation():
    model = small_model(L=2, d=32, n_heads=4, widths=(16, 32), seed=1)
    inv, eq = check_permutation(model, 16, 6, 10, seed=1)
    assert inv.passed, inv.detail
    assert eq.passed, eq.detail


def test_weight_sharing():
    model = small_model(L=1, d=16, n_heads=2, widths=(8, 16))
    assert model.prompt_params is model.embed_params
    groups = random_groups(np.random.default_rng(0), 5, 4)
    with nx.no_grad():
        before = model.encode(groups)
        model.embed_params.named()["embed.proj.bias"].data[0] += 1.0
        after = model.encode(groups)
    assert not np.array_equal(before.embeddings.data, after.embeddings.data)
    assert not np.array_equal(before.prompt.data, after.prompt.data)


def test_prompt_path_changes_gradient():
    model = small_model(L=2, d=16, n_heads=2, widths=(8, 16), seed=2)
    off_cfg = type(model.config)(model.config.embed, model.config.backbone, model.config.n_classes, use_prompt=False)
    off = APPTModel(off_cfg, model.backbone, model.embed_params, model.posin, model.head)
    groups = random_groups(np.random.default_rng(2), 6, 4, batch=2)
    labels = np.array([0, 1])
    params = model.embed_params.named()
    g_on = nx.backward(cross_entropy(model(groups), labels))
    g_off = nx.backward(cross_entropy(off(groups), labels))
    assert any(not np.array_equal(g_on[t], g_off[t]) for t in params.values())
    assert all(t in g_on for t in params.values())
    assert all(t not in g_on for t in model.backbone.tensors.values())
