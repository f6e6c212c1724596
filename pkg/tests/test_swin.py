import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loradet.autograd import Tensor, attention_probs, softmax
from loradet.detector import DetectorConfig, DetectorModel
from loradet.errors import ArgumentError, ShapeError
from loradet.gradcheck import check_swin_stage
from loradet.linalg import Rng
from loradet.policy import apply_policy
from loradet.swin import (
    BackboneConfig,
    StageConfig,
    backbone_forward,
    cyclic_shift,
    init_backbone,
    merge_neighbourhoods,
    patch_merging,
    relative_position_index,
    shifted_window_mask,
    swin_block_pair_forward,
    window_attention,
    window_partition,
    window_unpartition,
)


def rand(shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


def tiny_block_params(dim=8, heads=2, m=2, seed=0, prefix="s"):
    rng = np.random.default_rng(seed)
    p = {}
    for b in range(2):
        bp = f"{prefix}.blocks.{b}"
        for n in ("norm1", "norm2"):
            p[f"{bp}.{n}.weight"] = np.ones(dim)
            p[f"{bp}.{n}.bias"] = np.zeros(dim)
        for n in ("wq", "wk", "wv", "wo"):
            p[f"{bp}.attn.{n}.weight"] = 0.3 * rng.normal(size=(dim, dim))
            p[f"{bp}.attn.{n}.bias"] = 0.1 * rng.normal(size=dim)
        p[f"{bp}.attn.rel_bias_table"] = 0.1 * rng.normal(size=((2 * m - 1) ** 2, heads))
        p[f"{bp}.mlp.fc1.weight"] = 0.3 * rng.normal(size=(2 * dim, dim))
        p[f"{bp}.mlp.fc1.bias"] = np.zeros(2 * dim)
        p[f"{bp}.mlp.fc2.weight"] = 0.3 * rng.normal(size=(dim, 2 * dim))
        p[f"{bp}.mlp.fc2.bias"] = np.zeros(dim)
    return {k: Tensor(v) for k, v in p.items()}


# -- stage configuration --------------------------------------------------------


def test_stage_config_invariants():
    with pytest.raises(ArgumentError):
        StageConfig(8, 3, 2, 4, 8)
    with pytest.raises(ArgumentError):
        StageConfig(9, 2, 2, 4, 8)
    st_ = StageConfig(8, 2, 2, 4, 2)
    assert st_.effective_window == 2 and st_.shift == 0
    assert StageConfig(8, 2, 2, 4, 16).shift == 2


def test_backbone_config_rejects_bad_topology():
    with pytest.raises(ShapeError):
        BackboneConfig(image_size=60)
    with pytest.raises(ArgumentError):
        BackboneConfig(dims=(16, 32, 48, 128))
    with pytest.raises(ArgumentError):
        BackboneConfig(ranks=(8, 8, 8, 200))


# -- windows --------------------------------------------------------------------


def test_partition_counts_and_single_window():
    x = rand((1, 8, 8, 3))
    assert window_partition(x, 4).shape == (4, 16, 3)
    y = rand((1, 4, 4, 3))
    assert np.array_equal(window_partition(y, 4)[0], y.reshape(16, 3))


def test_partition_row_major_order():
    x = np.arange(16.0).reshape(1, 4, 4, 1)
    w = window_partition(x, 2)[..., 0]
    assert w.tolist() == [[0, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]]


def test_partition_indivisible():
    with pytest.raises(ShapeError):
        window_partition(rand((1, 6, 8, 2)), 4)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([1, 2, 4]), st.integers(1, 3), st.integers(1, 3), st.integers(1, 2), st.integers(0, 999))
def test_partition_inverse(m, gh, gw, n, seed):
    x = rand((n, m * gh, m * gw, 3), seed)
    back = window_unpartition(window_partition(x, m), m, m * gh, m * gw)
    assert np.array_equal(back, x)


@settings(max_examples=30, deadline=None)
@given(st.integers(-5, 5), st.integers(-5, 5), st.integers(0, 999))
def test_shift_inverse(dy, dx, seed):
    x = rand((2, 4, 4, 3), seed)
    assert np.array_equal(cyclic_shift(cyclic_shift(x, dy, dx), -dy, -dx), x)
    assert np.array_equal(cyclic_shift(x, 0, 0), x)


def test_shift_index_oracle():
    x = np.arange(16.0).reshape(1, 4, 4, 1)
    y = cyclic_shift(x, 1, 0)
    for i in range(4):
        assert np.array_equal(y[0, (i + 1) % 4], x[0, i])


def test_relative_index_range_and_symmetry():
    for m in (1, 2, 4):
        idx = relative_position_index(m)
        assert idx.shape == (m * m, m * m)
        assert idx.min() >= 0 and idx.max() < (2 * m - 1) ** 2
        assert np.all(np.diag(idx) == (2 * m - 1) * (m - 1) + (m - 1))


def test_shift_mask_blocks_only_wrapped_pairs():
    mask = shifted_window_mask(8, 8, 4, 2)
    assert mask.shape == (4, 16, 16)
    assert not np.any(mask[0])  # top-left window never wraps
    assert np.all(np.isin(mask, [0.0, -1e9]))
    assert np.array_equal(mask, mask.transpose(0, 2, 1))


# -- attention --------------------------------------------------------------------


def test_softmax_rows_sum_to_one():
    q, k = rand((3, 2, 16, 4), 1), rand((3, 2, 16, 4), 2)
    probs = attention_probs(q, k, rand((2, 16, 16), 3))
    assert np.max(np.abs(probs.sum(-1) - 1)) <= 1e-12
    mask = shifted_window_mask(8, 8, 4, 2)[:3]
    probs = attention_probs(q, k, np.zeros((2, 16, 16)), mask)
    assert np.max(np.abs(probs.sum(-1) - 1)) <= 1e-12
    assert np.all(probs[mask[:, None].repeat(2, 1) < 0] < 1e-300)


def naive_attention(x, p, prefix, heads):
    t, c = x.shape
    dh = c // heads
    m = int(math.isqrt(t))
    idx = relative_position_index(m)
    table = p[prefix + ".rel_bias_table"].data

    def dense(name, z):
        out = z @ p[f"{prefix}.{name}.weight"].data.T + p[f"{prefix}.{name}.bias"].data
        if f"{prefix}.{name}.lora_A" in p:
            out = out + z @ (p[f"{prefix}.{name}.lora_B"].data @ p[f"{prefix}.{name}.lora_A"].data).T
        return out

    q, k, v = dense("wq", x), dense("wk", x), dense("wv", x)
    heads_out = []
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        out = np.zeros((t, dh))
        for i in range(t):
            logits = np.array([q[i, sl] @ k[j, sl] / math.sqrt(dh) + table[idx[i, j], h] for j in range(t)])
            w = np.exp(logits - logits.max())
            w /= w.sum()
            out[i] = sum(w[j] * v[j, sl] for j in range(t))
        heads_out.append(out)
    return dense("wo", np.concatenate(heads_out, axis=1))


def test_window_attention_matches_naive_loop():
    p = tiny_block_params(dim=8, heads=2, m=4, seed=4)
    rng = np.random.default_rng(5)
    p["s.blocks.0.attn.wq.lora_A"] = Tensor(0.3 * rng.normal(size=(2, 8)))
    p["s.blocks.0.attn.wq.lora_B"] = Tensor(0.3 * rng.normal(size=(8, 2)))
    x = rand((3, 16, 8), 6)
    got = window_attention(Tensor(x), p, "s.blocks.0.attn", 2).data
    for b in range(3):
        assert np.max(np.abs(got[b] - naive_attention(x[b], p, "s.blocks.0.attn", 2))) <= 1e-12


def test_uniform_attention_on_equal_tokens():
    p = tiny_block_params(dim=4, heads=2, m=2, seed=7)
    p["s.blocks.0.attn.rel_bias_table"] = Tensor(np.zeros((9, 2)))
    tok = rand((4,), 8)
    x = np.tile(tok, (1, 4, 1))
    got = window_attention(Tensor(x), p, "s.blocks.0.attn", 2).data
    wv, bv = p["s.blocks.0.attn.wv.weight"].data, p["s.blocks.0.attn.wv.bias"].data
    wo, bo = p["s.blocks.0.attn.wo.weight"].data, p["s.blocks.0.attn.wo.bias"].data
    single = wo @ (wv @ tok + bv) + bo
    assert np.max(np.abs(got[0] - single)) <= 1e-12


def test_attention_rejects_bad_shapes():
    p = tiny_block_params(dim=8, heads=3, m=2)
    with pytest.raises(ShapeError):
        window_attention(Tensor(rand((1, 4, 8))), p, "s.blocks.0.attn", 3)
    with pytest.raises(ShapeError):
        window_attention(Tensor(rand((1, 5, 8))), p, "s.blocks.0.attn", 2)


# -- blocks and merging -------------------------------------------------------------


def test_block_pair_pure_residual():
    p = tiny_block_params(dim=8, heads=2, m=2, seed=9)
    for b in range(2):
        p[f"s.blocks.{b}.attn.wo.weight"] = Tensor(np.zeros((8, 8)))
        p[f"s.blocks.{b}.attn.wo.bias"] = Tensor(np.zeros(8))
        p[f"s.blocks.{b}.mlp.fc2.weight"] = Tensor(np.zeros((8, 16)))
    stage = StageConfig(8, 2, 2, 2, 4)
    x = rand((2, 4, 4, 8), 10)
    assert np.array_equal(swin_block_pair_forward(x, p, "s", stage), x)


def test_block_pair_constant_input_constant_output():
    p = tiny_block_params(dim=8, heads=2, m=2, seed=11)
    for b in range(2):
        p[f"s.blocks.{b}.attn.rel_bias_table"] = Tensor(np.zeros((9, 2)))
    stage = StageConfig(8, 2, 2, 2, 4)
    x = np.tile(rand((8,), 12), (1, 4, 4, 1))
    y = swin_block_pair_forward(x, p, "s", stage)
    assert np.max(np.abs(y - y[:, :1, :1])) <= 1e-12


def test_block_pair_gradients_match_finite_differences():
    rep = check_swin_stage(seed=1, tol=1e-5)
    assert rep.ok, rep.failures[:3]


def test_patch_merging_gather_oracle():
    x = rand((1, 4, 4, 3), 13)
    merged = merge_neighbourhoods(x)
    for i in range(2):
        for j in range(2):
            expected = np.concatenate([x[0, 2 * i, 2 * j], x[0, 2 * i + 1, 2 * j], x[0, 2 * i, 2 * j + 1], x[0, 2 * i + 1, 2 * j + 1]])
            assert np.array_equal(merged[0, i, j], expected)


def test_patch_merging_shapes_and_constants():
    w = rand((6, 12), 14)
    p = {"d.reduction.weight": Tensor(w)}
    out = patch_merging(rand((2, 8, 8, 3), 15), p, "d")
    assert out.shape == (2, 4, 4, 6)
    const = patch_merging(np.ones((1, 4, 4, 3)), p, "d")
    assert np.allclose(const, const[:, :1, :1], atol=0)
    with pytest.raises(ShapeError):
        merge_neighbourhoods(rand((1, 3, 4, 2)))


# -- full backbone ------------------------------------------------------------------


def test_backbone_feature_extents():
    cfg = BackboneConfig()
    p = {k: Tensor(v) for k, v in init_backbone(cfg, Rng(0)).items()}
    outs = backbone_forward(rand((2, 64, 64), 16), p, cfg)
    assert [o.shape for o in outs] == [(2, 16, 16, 16), (2, 8, 8, 32), (2, 4, 4, 64), (2, 2, 2, 128)]


def test_backbone_lora_neutral_at_init():
    model = DetectorModel.create(DetectorConfig(), 0)
    cfg = model.config.backbone
    images = rand((2, 64, 64), 17)
    base = [o.data for o in backbone_forward(images, model.bind(), cfg)]
    model.attach_lora(Rng(1))
    lora = [o.data for o in backbone_forward(images, model.bind(), cfg)]
    for a, b in zip(base, lora):
        assert np.max(np.abs(a - b)) <= 1e-15


def test_lora_backbone_census_counts_only_adapters():
    model = DetectorModel.create(DetectorConfig(), 0)
    model.attach_lora(Rng(1))
    mask = apply_policy(model, "LoraDet")
    backbone = [n for n in mask.trainable if n.startswith("backbone.")]
    assert backbone and all(n.endswith((".lora_A", ".lora_B")) and (".attn.wq." in n or ".attn.wv." in n) for n in backbone)
    cfg = model.config.backbone
    expected = sum(2 * r * (st_.dim + st_.dim) * st_.depth for r, st_ in zip(cfg.ranks, cfg.stages))
    assert sum(model.params[n].size for n in backbone) == expected


def test_softmax_helper_is_stable():
    z = np.array([[1000.0, 1000.0], [-1000.0, 0.0]])
    assert np.allclose(softmax(z), [[0.5, 0.5], [0.0, 1.0]])
