from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from eq4d.diffcore import grad_check
from eq4d.errors import InvalidConfig
from eq4d.group import make_group
from eq4d.heads import (
    HeadConfig,
    PanopticHeads,
    centerness_loss,
    decode_offsets,
    decode_prediction,
    local_offset_targets,
    offset_losses,
    semantic_head,
    semantic_loss,
    total_loss,
)


def test_local_target_examples():
    g = make_group(4)
    labels, local, degenerate = local_offset_targets(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.5]]), g)
    assert labels.tolist() == [0, 1]
    np.testing.assert_allclose(local, [[1.0, 0.0, 0.0], [1.0, 0.0, 0.5]], atol=1e-15)
    assert not degenerate.any()


@pytest.mark.parametrize("n", [1, 2, 3, 4, 6])
def test_round_trip_and_local_angle(n, rng):
    g = make_group(n)
    v = rng.normal(size=(2000, 3)) * 5
    labels, local, _ = local_offset_targets(v, g)
    np.testing.assert_allclose(decode_offsets(local, labels, g), v, atol=1e-12, rtol=0)
    ang = np.arctan2(local[:, 1], local[:, 0])
    assert (ang >= -math.pi / n - 1e-12).all() and (ang < math.pi / n + 1e-12).all()


def test_head_config_rules():
    with pytest.raises(InvalidConfig):
        HeadConfig(invariant_pool_mode="rcs", use_rotation_head=False)
    with pytest.raises(InvalidConfig):
        HeadConfig(invariant_pool_mode="sum")
    with pytest.raises(InvalidConfig):
        HeadConfig(offset_loss="L2")


def test_semantic_loss_examples(f64):
    feats = torch.randn(5, 3)
    logits = semantic_head(feats, torch.zeros(3, 4))
    target = torch.tensor([0, 1, 2, 3, 0])
    assert semantic_loss(logits, target).item() == pytest.approx(math.log(4))
    perfect = torch.nn.functional.one_hot(target, 4).double() * 50
    assert semantic_loss(perfect, target).item() < 1e-15


def test_centerness_loss_examples(f64):
    t = torch.tensor([1.0, 0.2])
    assert centerness_loss(t, t).item() == 0.0
    assert centerness_loss(torch.tensor([0.5]), torch.tensor([1.0])).item() == 0.25


def test_total_loss_weights(f64):
    parts = {"sem": torch.tensor(2.0), "off": torch.tensor(3.0)}
    assert total_loss(parts, {"sem": 1.0, "off": 0.0}).item() == 2.0
    assert total_loss(parts, {"sem": 2.0, "off": 1.0}).item() == 7.0
    with pytest.raises(InvalidConfig):
        total_loss(parts, {"sem": 0.0, "off": 0.0})


def test_stuff_points_get_no_offset_gradient(f64):
    g = make_group(4)
    m = 6
    scores = torch.randn(m, 4, requires_grad=True)
    local = torch.randn(m, 4, 3, requires_grad=True)
    offsets = torch.randn(m, 3)
    labels = torch.tensor(local_offset_targets(offsets.numpy(), g)[0])
    thing = torch.tensor([True, True, True, False, False, False])
    rot, off = offset_losses(scores, local, offsets, labels, torch.zeros(m, dtype=torch.bool), thing, g)
    (rot + off).backward()
    assert scores.grad[3:].abs().sum() == 0 and local.grad[3:].abs().sum() == 0
    assert scores.grad[:3].abs().sum() > 0


def test_degenerate_points_skip_rotation_loss_only(f64):
    g = make_group(4)
    scores = torch.randn(2, 4, requires_grad=True)
    local = torch.randn(2, 4, 3, requires_grad=True)
    offsets = torch.tensor([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    labels = torch.tensor([0, 0])
    degenerate = torch.tensor([True, False])
    rot, off = offset_losses(scores, local, offsets, labels, degenerate, torch.ones(2, dtype=torch.bool), g)
    (rot + off).backward()
    assert scores.grad[0].abs().sum() == 0
    assert local.grad[0, 0].abs().sum() > 0


def test_no_things_means_zero_offset_losses(f64):
    g = make_group(2)
    scores = torch.randn(3, 2)
    local = torch.randn(3, 2, 3)
    z = torch.zeros(3, dtype=torch.bool)
    rot, off = offset_losses(scores, local, torch.zeros(3, 3), torch.zeros(3, dtype=torch.long), z, z, g)
    assert rot.item() == 0.0 and off.item() == 0.0


def test_decode_prediction_uses_top_anchor(f64):
    g = make_group(4)
    scores = torch.tensor([[0.0, 0.0, 2.0, 0.0]])
    local = torch.zeros(1, 4, 3)
    local[0, 2] = torch.tensor([1.0, 0.0, 0.0])
    anchor, vec = decode_prediction(scores, local, g)
    assert anchor.item() == 2
    torch.testing.assert_close(vec, torch.tensor([[-1.0, 0.0, 0.0]]), atol=1e-15, rtol=0)


@pytest.mark.parametrize("mode", ["avg", "max", "attentive", "rcs"])
def test_heads_forward_and_gradients(mode, f64):
    torch.manual_seed(0)
    g = make_group(3)
    heads = PanopticHeads(4, 4, g, HeadConfig(invariant_pool_mode=mode)).double()
    feats = torch.randn(10, 3, 4)
    offsets = torch.randn(10, 3)
    labels, _, degenerate = local_offset_targets(offsets.numpy(), g)
    targets = {
        "offsets": offsets, "labels": torch.tensor(labels), "degenerate": torch.tensor(degenerate),
        "thing_mask": torch.tensor([True] * 6 + [False] * 4), "semantic": torch.randint(0, 4, (10,)),
        "centerness": torch.rand(10),
    }
    rcs = (targets["labels"], ~targets["degenerate"]) if mode == "rcs" else None
    out = heads(feats, rcs)
    assert out["logits"].shape == (10, 4) and out["scores"].shape == (10, 3)
    parts = heads.losses(out, targets)
    assert set(parts) == {"sem", "off", "rot", "ctr"}

    def loss():
        o = heads(feats, rcs)
        return total_loss(heads.losses(o, targets), heads.cfg.weights)

    assert grad_check(loss, list(heads.parameters()), max_coords=6) < 1e-4


def test_plain_rotation_head_shapes(f64):
    heads = PanopticHeads(5, 4, make_group(1), HeadConfig(), plain_anchors=make_group(4)).double()
    out = heads(torch.randn(7, 1, 5))
    assert out["scores"].shape == (7, 4) and out["local"].shape == (7, 4, 3)
    with pytest.raises(InvalidConfig):
        PanopticHeads(5, 4, make_group(2), HeadConfig(), plain_anchors=make_group(4))


def test_without_rotation_head_offsets_are_plain_regression(f64):
    heads = PanopticHeads(5, 4, make_group(4), HeadConfig(use_rotation_head=False)).double()
    assert heads.offset_group.n == 1
    out = heads(torch.randn(7, 4, 5))
    assert out["local"].shape == (7, 1, 3)
