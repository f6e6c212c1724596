import math

import numpy as np
import pytest

from loradet import autograd as ag
from loradet.autograd import Tensor
from loradet.data import mixture, stack_images, synth_dataset
from loradet.detector import (
    DetectorConfig,
    DetectorModel,
    assign_targets,
    decode_box,
    detection_loss,
    detector_forward,
    encode_box,
    lora_targets,
    parameter_groups,
)
from loradet.errors import ArgumentError, ConfigError, NumericError, StateError, TrainingError
from loradet.gradcheck import check_detector, tiny_detector_config
from loradet.linalg import Rng
from loradet.policy import FinetunePolicy, apply_policy, parse_policy, policy_names, trainable_names
from loradet.swin import backbone_forward
from loradet.training import OptimizerConfig, train


@pytest.fixture(scope="module")
def model():
    m = DetectorModel.create(DetectorConfig(), 0)
    m.attach_lora(Rng(1))
    return m


@pytest.fixture(scope="module")
def images():
    return stack_images(mixture(5, 1))


def gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def conv3x3(x, w, b):
    """Zero-padded 3x3 convolution, neighbour-major weight layout, written as loops."""
    n, h, wd, c = x.shape
    out = np.zeros((n, h, wd, w.shape[0]))
    for i in range(h):
        for j in range(wd):
            cols = []
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    y, z = i + dy, j + dx
                    cols.append(x[:, y, z] if 0 <= y < h and 0 <= z < wd else np.zeros((n, c)))
            out[:, i, j] = np.concatenate(cols, axis=1) @ w.T + b
    return out, None


def replay(model, images):
    """Neck and head replayed layer by layer with plain numpy."""
    p = model.params
    cfg = model.config
    feats = [f.data for f in backbone_forward(images, model.bind(), cfg.backbone)]
    lat = [f @ p[f"neck.lateral.{i}.weight"].T + p[f"neck.lateral.{i}.bias"] for i, f in enumerate(feats)]
    top = lat[-1]
    tops = [top]
    for i in range(len(lat) - 2, -1, -1):
        top = lat[i] + top.repeat(2, axis=1).repeat(2, axis=2)
        tops.insert(0, top)
    pyr = [conv3x3(t, p[f"neck.smooth.{i}.weight"], p[f"neck.smooth.{i}.bias"])[0] for i, t in enumerate(tops)]
    obj = []
    for lv in pyr:
        r = gelu(conv3x3(lv, p["rpn.conv.weight"], p["rpn.conv.bias"])[0])
        obj.append((r @ p["rpn.objectness.weight"].T + p["rpn.objectness.bias"])[..., 0])
    level = pyr[cfg.roi_levels[0]]
    n, h, w, c = level.shape
    crops = np.zeros((n, h * w, 9 * c))
    for i in range(h):
        for j in range(w):
            k = 0
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    y, z = i + dy, j + dx
                    if 0 <= y < h and 0 <= z < w:
                        crops[:, i * w + j, k * c : (k + 1) * c] = level[:, y, z]
                    k += 1

    def fc(name, x):
        wt = p[name + ".weight"]
        if name + ".lora_A" in p:
            wt = wt + p[name + ".lora_B"] @ p[name + ".lora_A"]
        return x @ wt.T + p[name + ".bias"]

    x = gelu(fc("head.fc2", gelu(fc("head.fc1", crops))))
    return fc("head.cls_fc", x), fc("head.reg_fc", x), obj


# -- structure ------------------------------------------------------------------


def test_parameter_names_unique_and_stable():
    a = DetectorModel.create(DetectorConfig(), 0)
    b = DetectorModel.create(DetectorConfig(), 0)
    assert list(a.params) == list(b.params)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    groups = parameter_groups(a)
    assert sum(len(v) for v in groups.values()) == len(a.params)


def test_config_validation():
    with pytest.raises(ArgumentError):
        DetectorConfig(roi_levels=(4,))
    with pytest.raises(ArgumentError):
        DetectorConfig(roi_levels=(1, 1))
    with pytest.raises(ArgumentError):
        DetectorConfig(head_ranks=(200, 4))


def test_forward_shapes(model, images):
    out = model.predict(images)
    cfg = model.config
    assert out["cls"].shape == (2, cfg.num_rois, cfg.num_classes + 1)
    assert out["reg"].shape == (2, cfg.num_rois, 5)
    assert cfg.num_rois == 64
    assert [o.shape for o in out["obj"]] == [(2, 16, 16), (2, 8, 8), (2, 4, 4), (2, 2, 2)]


def test_forward_matches_replay(images):
    m = DetectorModel.create(DetectorConfig(), 3)
    m.attach_lora(Rng(4))
    for prefix, _ in lora_targets(m.config):
        m.params[prefix + ".lora_B"] = 0.05 * np.random.default_rng(5).normal(size=m.params[prefix + ".lora_B"].shape)
    out = m.predict(images)
    cls, reg, obj = replay(m, images)
    assert np.max(np.abs(out["cls"] - cls)) <= 1e-12
    assert np.max(np.abs(out["reg"] - reg)) <= 1e-12
    for a, b in zip(out["obj"], obj):
        assert np.max(np.abs(a - b)) <= 1e-12


def test_zero_init_lora_is_neutral(images):
    base = DetectorModel.create(DetectorConfig(), 6)
    ref = base.predict(images)
    lora = base.copy()
    lora.attach_lora(Rng(7))
    out = lora.predict(images)
    for k in ("cls", "reg"):
        assert np.max(np.abs(out[k] - ref[k])) <= 1e-15
    with pytest.raises(StateError):
        lora.attach_lora(Rng(7))


def test_merge_unmerge_round_trip(images):
    m = DetectorModel.create(DetectorConfig(), 8)
    m.attach_lora(Rng(9))
    rng = np.random.default_rng(10)
    for prefix, _ in lora_targets(m.config):
        m.params[prefix + ".lora_B"] = 0.05 * rng.normal(size=m.params[prefix + ".lora_B"].shape)
    before = m.predict(images)
    m.merge()
    after = m.predict(images)
    assert np.max(np.abs(after["cls"] - before["cls"])) <= 1e-12 * np.max(np.abs(before["cls"]))
    with pytest.raises(StateError):
        m.merge()
    m.unmerge()
    with pytest.raises(StateError):
        m.unmerge()


# -- boxes and loss -----------------------------------------------------------------


def test_box_encoding_round_trip():
    anchor = (12.0, 20.0, 12.0)
    box = (14.5, 18.0, 15.0, 6.0, 0.4)
    back = decode_box(encode_box(box, anchor), anchor).to_array()
    assert np.allclose(back, box, atol=1e-12)


def test_target_assignment_places_each_box_in_its_cell():
    cfg = DetectorConfig()
    boxes = np.array([[20.0, 44.0, 12.0, 5.0, 0.2]])
    t = assign_targets(cfg, [boxes], [np.array([2])])
    idx = int(44 // 8) * 8 + int(20 // 8)
    assert t.labels[0, idx] == 2 and np.count_nonzero(t.labels) == 1
    assert t.objectness[0][0, 11, 5] == 1 and t.objectness[1][0, 5, 2] == 1


def test_loss_terms_analytic():
    n, r, c = 1, 4, 3
    labels = np.array([[0, 1, 0, 2]])
    deltas = np.random.default_rng(11).normal(size=(n, r, 5))
    pred = {"cls": Tensor(np.zeros((n, r, c))), "reg": Tensor(deltas.copy()), "obj": []}
    targets = type("T", (), {"labels": labels, "deltas": deltas, "objectness": []})()
    loss = detection_loss(pred, targets)
    assert float(loss.data) == pytest.approx(math.log(3), abs=1e-15)
    pred["cls"] = Tensor(np.full((n, r, c), np.nan))
    with pytest.raises(NumericError):
        detection_loss(pred, targets)


def test_loss_non_negative(model, images):
    samples = mixture(5, 1)
    t = assign_targets(model.config, [s.boxes for s in samples], [s.labels for s in samples])
    assert float(detection_loss(detector_forward(model, images), t).data) >= 0


def test_bce_and_smooth_l1_values():
    z = Tensor(np.array([0.0, 2.0]))
    assert float(ag.bce_logits(z, np.array([1.0, 0.0])).data) == pytest.approx((math.log(2) + 2 + math.log1p(math.exp(-2))) / 2)
    sl = ag.smooth_l1(Tensor(np.array([[0.5, 3.0]])), np.zeros((1, 2)), np.ones(1))
    assert float(sl.data) == pytest.approx(0.125 + 2.5)


# -- policies --------------------------------------------------------------------------


def test_policy_parsing():
    assert parse_policy("LoRA-Det-hybrid") is FinetunePolicy.LORA_DET_HYBRID
    assert parse_policy("LoRA-Det (hybrid)") is FinetunePolicy.LORA_DET_HYBRID
    assert parse_policy("full fine-tune head only") is FinetunePolicy.HEAD_ONLY
    with pytest.raises(ConfigError) as info:
        parse_policy("Nope")
    assert all(name in str(info.value) for name in policy_names())


def test_policy_boundaries_and_ordering(model):
    ratios = {p.value: apply_policy(model, p).ratio for p in FinetunePolicy}
    assert ratios["Pretrained"] == 0 and ratios["FullFinetune"] == 1
    order = ["Pretrained", "LoraDet", "LoraDetHybrid", "LoraBackboneFullHead", "FullFinetune"]
    assert all(ratios[a] < ratios[b] for a, b in zip(order, order[1:]))
    assert set(trainable_names(model, "LoraDet")) < set(trainable_names(model, "LoraDetHybrid"))


def test_lora_det_ratio_parameter_walk(model):
    cfg = model.config
    expected = 0
    for i, st in enumerate(cfg.backbone.stages):
        expected += st.depth * 2 * cfg.backbone.ranks[i] * (st.dim + st.dim)
    r1, r2 = cfg.head_ranks
    expected += r1 * (cfg.head_hidden + 9 * cfg.fpn_dim) + r2 * (2 * cfg.head_hidden)
    expected += (cfg.num_classes + 1) * (cfg.head_hidden + 1) + 5 * (cfg.head_hidden + 1)
    mask = apply_policy(model, "LoraDet")
    assert mask.trainable_count == expected
    assert mask.ratio_exact.denominator * expected == mask.ratio_exact.numerator * mask.total_count


def test_lora_det_freezes_neck_and_biases(model):
    names = set(trainable_names(model, "LoraDet"))
    assert not any(n.startswith(("neck.", "rpn.")) for n in names)
    assert "backbone.stages.0.blocks.0.attn.wq.bias" not in names
    assert "backbone.stages.0.blocks.0.attn.rel_bias_table" not in names
    hybrid = set(trainable_names(model, "LoraDetHybrid"))
    assert {n for n in hybrid - names} == {n for n in model.params if n.startswith(("neck.", "rpn."))}


def test_explicit_policy_names(model):
    mask = apply_policy(model, ["head.cls_fc.weight"])
    assert mask.trainable == ("head.cls_fc.weight",)
    with pytest.raises(ConfigError):
        apply_policy(model, ["head.nothing"])
    with pytest.raises(ConfigError):
        trainable_names(DetectorModel.create(DetectorConfig(), 0), "LoraDet")


def test_detector_gradients_under_lora_det():
    (rep,) = check_detector(["LoraDet"], seed=2)
    assert rep.ok, rep.failures[:3]


# -- training ------------------------------------------------------------------------


def snapshot(m):
    return {k: v.copy() for k, v in m.params.items()}


@pytest.mark.parametrize("policy", [p.value for p in FinetunePolicy])
def test_freeze_contract(policy):
    m = DetectorModel.create(tiny_detector_config(), 0)
    m.attach_lora(Rng(1))
    samples = _tiny_samples(4)
    before = snapshot(m)
    train(m, policy, samples, 1, OptimizerConfig(lr=1e-3, batch_size=2))
    trainable = set(trainable_names(m, policy))
    for k, v in m.params.items():
        if k in trainable:
            continue
        assert v.tobytes() == before[k].tobytes(), k
    if policy != "Pretrained":
        assert any(not np.array_equal(m.params[k], before[k]) for k in trainable)


def _tiny_samples(n, seed=0):
    from loradet.data import SceneSample

    out = []
    for s in synth_dataset(seed, "D1", n):
        out.append(SceneSample(s.image[::4, ::4].copy(), s.boxes / np.array([4, 4, 4, 4, 1.0]), s.labels, s.domain))
    return out


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_lora_det_reduces_loss(seed):
    m = DetectorModel.create(DetectorConfig(), seed)
    m.attach_lora(Rng(seed + 10))
    tlog = train(m, "LoraDet", synth_dataset(seed, "D1", 4), 20, OptimizerConfig(lr=1e-3, batch_size=4, flip=False), seed=seed)
    assert len(tlog.epoch_losses) == 20
    assert tlog.final_loss < tlog.initial_loss


def test_divergence_raises_training_error():
    m = DetectorModel.create(tiny_detector_config(), 0)
    m.params["head.cls_fc.weight"] = m.params["head.cls_fc.weight"] * 1e308
    with pytest.raises(TrainingError) as info:
        train(m, "FullFinetune", _tiny_samples(2), 2, OptimizerConfig(lr=1e-3, batch_size=2))
    assert info.value.epoch in (0, 1)
