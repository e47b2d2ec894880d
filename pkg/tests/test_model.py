import dataclasses

import numpy as np
import pytest

from composites import COMPOSITES, TINY
from gradcheck import TOL
from stormlatent import autodiff as ad
from stormlatent.layers import MultiHeadAttention, MultiScaleBlock
from stormlatent.model import (
    LatentForecaster,
    LatentState,
    ModelConfig,
    PhysicalIterator,
    ViT,
    time_embedding,
)


@pytest.fixture(scope="module")
def toy():
    m = LatentForecaster(ModelConfig())
    m.eval()
    return m


@pytest.fixture(scope="module")
def tiny():
    m = LatentForecaster(TINY)
    m.eval()
    return m


def toy_inputs(rng, n=2, cfg=ModelConfig(), satellite=True):
    q = rng.standard_normal((n, cfg.qpe_radar_channels, cfg.height, cfg.width))
    r = rng.standard_normal((n, cfg.reanalysis_channels, cfg.coarse_height, cfg.coarse_width))
    s = rng.standard_normal((n, cfg.satellite_channels, cfg.height, cfg.width)) if satellite else None
    return q, r, s


@pytest.mark.parametrize("name", sorted(COMPOSITES))
def test_composite_gradients(name):
    worst = max(COMPOSITES[name](seed) for seed in range(20))
    assert worst < TOL, f"{name}: {worst:.2e}"


# multi-scale block


def test_msb_zero_weights_is_identity():
    rng = np.random.default_rng(0)
    block = MultiScaleBlock(4, rng)
    for p in block.parameters():
        p.data[...] = 0.0
    x = rng.standard_normal((1, 4, 6, 6))
    assert np.array_equal(block(ad.Tensor(x)).data, x)


def test_msb_shape_and_branch_ablation():
    rng = np.random.default_rng(1)
    block = MultiScaleBlock(4, rng)
    x = ad.Tensor(rng.standard_normal((2, 4, 7, 7)))
    full = block(x).data
    assert full.shape == (2, 4, 7, 7)
    block.branch5.conv.weight.data[...] = 0.0
    assert not np.allclose(block(x).data, full)


def test_msb_channel_mismatch():
    block = MultiScaleBlock(4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        block(ad.Tensor(np.zeros((1, 3, 4, 4))))


# encoder


def test_encode_toy_shape(toy):
    rng = np.random.default_rng(2)
    h = toy.encode(*toy_inputs(rng))
    assert h.shape == (2, 16, 16, 16)


def test_encode_without_satellite(toy):
    rng = np.random.default_rng(3)
    q, r, _ = toy_inputs(rng, satellite=False)
    assert toy.encode(q, r, None).shape == (2, 16, 16, 16)


def test_encode_requires_radar_and_grids(toy):
    rng = np.random.default_rng(4)
    q, r, s = toy_inputs(rng)
    with pytest.raises(ValueError):
        toy.encode(None, r, s)
    with pytest.raises(ValueError):
        toy.encode(q[:, :, :32, :32], r, s)


def test_encode_large_grid_factor_four():
    cfg = ModelConfig(height=32, width=48, coarse_height=8, coarse_width=12, features=2)
    m = LatentForecaster(cfg)
    h = m.encode(*toy_inputs(np.random.default_rng(5), 1, cfg))
    assert h.shape == (1, 16, 8, 12)


def test_modality_branches_do_not_share_parameters(toy):
    ids = {}
    for name, branch in toy.encoder.branches.items():
        ids[name] = {id(p) for p in branch.parameters()}
    names = list(ids)
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            assert not ids[names[i]] & ids[names[j]]


# vit


def test_vit_token_count_and_shape():
    rng = np.random.default_rng(6)
    vit = ViT(16, 16, 16, 16, ModelConfig(), rng)
    vit.eval()
    assert vit.pos.shape[1] == 16
    assert vit(ad.Tensor(rng.standard_normal((1, 16, 16, 16)))).shape == (1, 16, 16, 16)


def test_vit_indivisible_extent():
    vit = ViT(4, 4, 8, 8, ModelConfig(), np.random.default_rng(0))
    vit.eval()
    with pytest.raises(ValueError):
        vit(ad.Tensor(np.zeros((1, 4, 6, 6))))


def test_attention_rows_sum_to_one_and_single_token():
    rng = np.random.default_rng(7)
    mha = MultiHeadAttention(8, 2, rng)
    mha.eval()
    mha(ad.Tensor(rng.standard_normal((2, 5, 8))))
    assert np.allclose(mha.last_weights.sum(-1), 1.0)
    mha(ad.Tensor(rng.standard_normal((1, 1, 8))))
    assert np.array_equal(mha.last_weights, np.ones((1, 2, 1, 1)))


# latent predictor


def _pair(rng, delta, shape=(2, 4, 4, 4), t0=(3, 5)):
    a = LatentState(ad.Tensor(rng.standard_normal(shape), requires_grad=True), np.array(t0))
    b = LatentState(ad.Tensor(rng.standard_normal(shape), requires_grad=True), np.array(t0) + delta)
    return a, b


def test_lpm_shape_time_sensitivity_and_grads(tiny):
    rng = np.random.default_rng(8)
    a, b = _pair(rng, 2)
    out = tiny.lpm_predict(2, a, b)
    assert out.tensor.shape == a.tensor.shape
    assert np.array_equal(out.time_index, b.time_index + 2)
    shifted = tiny.lpm_predict(2, LatentState(a.tensor, a.time_index + 7), LatentState(b.tensor, b.time_index + 7))
    assert not np.allclose(shifted.tensor.data, out.tensor.data)
    ad.backward(ad.tsum(out.tensor))
    assert np.any(a.tensor.grad != 0) and np.any(b.tensor.grad != 0)


def test_lpm_spacing_and_delta_errors(tiny):
    rng = np.random.default_rng(9)
    a, b = _pair(rng, 1)
    with pytest.raises(ValueError):
        tiny.lpm_predict(2, a, b)
    with pytest.raises(ValueError):
        tiny.predictor(3)


def test_three_predictors_disjoint_and_equal_size(toy):
    counts = toy.group_parameter_counts()
    assert counts["lpm1"] == counts["lpm2"] == counts["lpm4"]
    sets = [{id(p) for p in toy.predictor(d).parameters()} for d in (1, 2, 4)]
    assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])


def test_time_embedding_deterministic():
    a = time_embedding([5, 30], 4, 3, 3)
    assert np.array_equal(a, time_embedding([5, 30], 4, 3, 3))
    assert a.shape == (2, 4, 3, 3)
    assert not np.allclose(a[0], a[1])


# projector and reconstructor


def test_project_shapes(toy):
    rng = np.random.default_rng(10)
    assert toy.project(rng.standard_normal((2, 16, 16, 16))).shape == (2, 1, 64, 64)
    with pytest.raises(ValueError):
        toy.project(rng.standard_normal((2, 8, 16, 16)))


def test_project_large_grid():
    cfg = ModelConfig(height=256, width=256, coarse_height=64, coarse_width=64, features=1)
    m = LatentForecaster(cfg)
    m.eval()
    with ad.no_grad():
        out = m.project(np.random.default_rng(0).standard_normal((1, 16, 64, 64)))
    assert out.shape == (1, 1, 256, 256)


def test_batched_projection_is_bit_exact(toy):
    rng = np.random.default_rng(11)
    latents = [ad.Tensor(rng.standard_normal((2, 16, 16, 16))) for _ in range(3)]
    with ad.no_grad():
        batched = toy.project_many(latents)
        single = [toy.project(h) for h in latents]
    for x, y in zip(batched, single):
        assert np.array_equal(x.data, y.data)


def test_reconstruct_channels_and_zero_latent():
    m = LatentForecaster(ModelConfig())
    rec = m.reconstruct(np.zeros((1, 16, 16, 16)))
    assert {k: v.shape[1] for k, v in rec.items()} == {"qpe_radar": 4, "reanalysis": 8, "satellite": 3}
    assert rec["reanalysis"].shape[-2:] == (16, 16) and rec["qpe_radar"].shape[-2:] == (64, 64)
    for p_name, p in m.reconstructor.named_parameters():
        if p_name.endswith("bias"):
            p.data[...] = 0.0
    rec = m.reconstruct(np.zeros((1, 16, 16, 16)))
    assert all(np.array_equal(v.data, np.zeros_like(v.data)) for v in rec.values())


# whole-model properties


def test_eval_forward_is_deterministic_and_dropout_train_only(tiny):
    rng = np.random.default_rng(12)
    a, b = _pair(rng, 1)
    tiny.eval()
    x1 = tiny.lpm_predict(1, a, b).tensor.data
    x2 = tiny.lpm_predict(1, a, b).tensor.data
    assert np.array_equal(x1, x2)
    nodrop = LatentForecaster(dataclasses.replace(TINY, dropout=0.0))
    nodrop.eval()
    assert np.array_equal(nodrop.lpm_predict(1, a, b).tensor.data, x1)
    tiny.train()
    tiny.dropout_rng = np.random.default_rng(0)
    x3 = tiny.lpm_predict(1, a, b).tensor.data
    tiny.eval()
    assert not np.array_equal(x1, x3)


def test_checkpoint_names_are_reserved(toy):
    prefixes = {n.split(".")[0] for n, _ in toy.named_parameters()}
    assert prefixes == {"encoder", "lpm1", "lpm2", "lpm4", "projector", "reconstructor", "const_embed"}


def test_physical_iterator_state():
    cfg = dataclasses.replace(TINY, features=2)
    m = PhysicalIterator(cfg)
    rng = np.random.default_rng(13)
    q, r, s = toy_inputs(rng, 1, cfg)
    state = m.encode(q, r, s)
    assert state.shape == (1, 15, 16, 16)
    assert np.array_equal(m.project(state).data[:, 0], q[:, 0])
