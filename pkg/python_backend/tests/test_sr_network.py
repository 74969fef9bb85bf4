from collections import OrderedDict

import numpy as np
import pytest
import torch

from cdasr.services.losses import total_loss
from cdasr.models import LossWeights
from cdasr.services.resampling import upsample_tensor
from cdasr.services.semantic_encoder import EncoderFactory
from cdasr.services.sr_network import (
    ParameterSet,
    backbone_forward,
    clip_feature_processor,
    expected_tensor_count,
    forward,
    forward_values,
    fuse,
    init_network,
    parameter_count,
    reconstruct,
    spatial_feature_generator,
)
from cdasr.utils.errors import RejectedInputError

pytestmark = pytest.mark.unit


def perturbed(params: ParameterSet, seed: int = 0, scale: float = 0.05) -> ParameterSet:
    """Same names and shapes, every entry nudged so no branch is dead."""
    g = torch.Generator().manual_seed(seed)
    return params.replace(OrderedDict(
        (k, v + scale * torch.randn(v.shape, generator=g, dtype=v.dtype)) for k, v in params.items()
    ))


def zero_biases(params: ParameterSet) -> ParameterSet:
    return params.replace(OrderedDict(
        (k, torch.zeros_like(v) if k.endswith(".bias") else v) for k, v in params.items()
    ))


@pytest.mark.parametrize("scale", [2, 4, 8, 16])
@pytest.mark.parametrize("side", [8, 16, 24])
def test_output_is_scale_times_input(tiny_net, scale, side):
    cfg = tiny_net(scale)
    params = init_network(cfg, seed=0)
    lr = torch.rand(1, 3, side, side)
    emb = torch.nn.functional.normalize(torch.randn(1, 64), dim=1)
    out = forward(params, cfg, lr, emb)
    assert out.shape == (1, 3, scale * side, scale * side)


@pytest.mark.parametrize("scale", [2, 4, 8, 16])
def test_fresh_network_is_bicubic_exactly(tiny_net, scale):
    cfg = tiny_net(scale)
    params = init_network(cfg, seed=1)
    g = torch.Generator().manual_seed(scale)
    for _ in range(10):
        lr = torch.rand(1, 3, 8, 8, generator=g)
        emb = torch.nn.functional.normalize(torch.randn(1, 64, generator=g), dim=1)
        assert torch.equal(forward(params, cfg, lr, emb), upsample_tensor(lr, scale))


def test_same_seed_same_parameters(tiny_net):
    a = init_network(tiny_net(4), seed=3)
    b = init_network(tiny_net(4), seed=3)
    c = init_network(tiny_net(4), seed=4)
    assert a.equal(b)
    assert not a.equal(c)


@pytest.mark.parametrize("scale", [2, 4, 8, 16])
@pytest.mark.parametrize("use_alignment", [True, False])
def test_parameter_census(tiny_net, scale, use_alignment):
    cfg = tiny_net(scale, use_alignment=use_alignment)
    params = init_network(cfg, seed=0)
    assert len(params) == expected_tensor_count(cfg)
    assert params.numel() == parameter_count(cfg)
    assert len(set(params.names)) == len(params)
    assert all(params.grads[n].shape == params[n].shape for n in params.names)


def test_mlp_shapes_follow_config(tiny_net):
    params = init_network(tiny_net(2), seed=0)
    assert params["alignment.processor.fc1.weight"].shape == (16, 64)
    assert params["alignment.processor.fc2.weight"].shape == (8, 16)


def test_backbone_shape(tiny_net):
    params = init_network(tiny_net(2, backbone_channels=64), seed=0)
    feat = backbone_forward(params, torch.rand(1, 3, 16, 16))
    assert feat.shape == (1, 64, 16, 16)


def test_backbone_maps_zero_to_zero(tiny_net):
    params = zero_biases(perturbed(init_network(tiny_net(2), seed=0)))
    feat = backbone_forward(params, torch.zeros(1, 3, 8, 8))
    assert torch.count_nonzero(feat) == 0


def test_backbone_checksum_is_pinned(tiny_net, golden):
    params = init_network(tiny_net(2), seed=0, dtype=torch.float64)
    x = (torch.arange(3 * 8 * 8, dtype=torch.float64) / 191).reshape(1, 3, 8, 8)
    feat = backbone_forward(params, x)
    golden("backbone_checksum_seed0", [float(feat.sum()), float((feat ** 2).sum())])


def test_spatial_generator_checksum_is_pinned(tiny_net, golden):
    params = init_network(tiny_net(2), seed=0, dtype=torch.float64)
    f_proc = torch.tensor([k / 8 - 0.4 for k in range(8)], dtype=torch.float64)
    out = spatial_feature_generator(params, f_proc, (4, 4))
    assert out.shape == (1, 8, 4, 4)
    golden("spatial_checksum_seed0", [float(out.sum()), float((out ** 2).sum())])


def test_backbone_rejects_tiny_inputs(tiny_net):
    params = init_network(tiny_net(2), seed=0)
    with pytest.raises(RejectedInputError):
        backbone_forward(params, torch.rand(1, 3, 4, 4))


def test_processor_maps_zero_to_zero(tiny_net):
    params = zero_biases(perturbed(init_network(tiny_net(2), seed=0)))
    out = clip_feature_processor(params, torch.zeros(1, 64))
    assert out.shape == (1, 8)
    assert torch.count_nonzero(out) == 0


def test_processor_rejects_wrong_dimension(tiny_net):
    params = init_network(tiny_net(2), seed=0)
    with pytest.raises(RejectedInputError):
        clip_feature_processor(params, torch.zeros(1, 32))


def test_processor_jvp_matches_finite_differences(tiny_net):
    params = init_network(tiny_net(2), seed=0, dtype=torch.float64)
    g = torch.Generator().manual_seed(0)
    emb = torch.randn(1, 64, generator=g, dtype=torch.float64)
    direction = torch.randn(1, 64, generator=g, dtype=torch.float64)
    f = lambda e: clip_feature_processor(params, e)
    _, jvp = torch.func.jvp(f, (emb,), (direction,))
    h = 1e-5
    numeric = (f(emb + h * direction) - f(emb - h * direction)) / (2 * h)
    rel = float((jvp - numeric).norm() / numeric.norm().clamp_min(1e-12))
    assert rel < 1e-4


def test_spatial_generator_maps_zero_to_zero(tiny_net):
    params = zero_biases(perturbed(init_network(tiny_net(2), seed=0)))
    out = spatial_feature_generator(params, torch.zeros(1, 8), (6, 9))
    assert out.shape == (1, 8, 6, 9)
    assert torch.count_nonzero(out) == 0


def test_fusion_with_zero_weights_is_identity(tiny_net):
    params = init_network(tiny_net(2), seed=0)
    sr_feat = torch.rand(1, 8, 8, 8)
    spatial = torch.rand(1, 8, 8, 8)
    assert torch.equal(fuse(params, sr_feat, spatial), sr_feat)


def test_fusion_rejects_mismatched_maps(tiny_net):
    params = init_network(tiny_net(2), seed=0)
    with pytest.raises(RejectedInputError):
        fuse(params, torch.rand(1, 8, 8, 8), torch.rand(1, 8, 4, 4))


def test_zero_reconstruction_is_bicubic(tiny_net):
    params = perturbed(init_network(tiny_net(4), seed=0))
    params = params.replace(OrderedDict(
        (k, torch.zeros_like(v) if k.startswith("reconstruction.") else v) for k, v in params.items()
    ))
    lr = torch.rand(1, 3, 8, 8)
    feat = backbone_forward(params, lr)
    assert torch.equal(reconstruct(params, feat, lr, 4), upsample_tensor(lr, 4))


def test_reconstruction_at_x8(tiny_net):
    cfg = tiny_net(8)
    params = perturbed(init_network(cfg, seed=0))
    lr = torch.rand(1, 3, 16, 16)
    out = reconstruct(params, backbone_forward(params, lr), lr, 8)
    assert out.shape == (1, 3, 128, 128)


def test_reconstruction_rejects_other_scales(tiny_net):
    params = init_network(tiny_net(2), seed=0)
    lr = torch.rand(1, 3, 8, 8)
    with pytest.raises(RejectedInputError):
        reconstruct(params, backbone_forward(params, lr), lr, 4)


def test_without_alignment_no_embedding_is_needed(tiny_net):
    cfg = tiny_net(2, use_alignment=False)
    params = init_network(cfg, seed=0)
    assert not any(n.startswith("alignment.") for n in params.names)
    out = forward(params, cfg, torch.rand(1, 3, 8, 8), None)
    assert out.shape == (1, 3, 16, 16)



@pytest.mark.parametrize(
    "weights",
    [
        LossWeights(pixel=1.0, perceptual=0.0, semantic=0.0),
        LossWeights(pixel=0.0, perceptual=1.0, semantic=0.0),
        LossWeights(pixel=0.0, perceptual=0.0, semantic=1.0),
        LossWeights(),
    ],
)
def test_gradients_match_central_differences(tiny_net, stub_spec, weights):
    cfg = tiny_net(2)
    params = perturbed(init_network(cfg, seed=0, dtype=torch.float64), seed=1)
    g = torch.Generator().manual_seed(2)
    lr = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64)
    # target far above any prediction keeps the L1 term away from its kink
    hr = 3.0 + torch.rand(1, 3, 16, 16, generator=g, dtype=torch.float64)
    emb = EncoderFactory.create(stub_spec).embed(lr).detach()

    def loss_of(values):
        return total_loss(forward_values(values, cfg, lr, emb), hr, weights, stub_spec).total

    leaves = params.leaves()
    names = list(leaves)
    grads = dict(zip(names, torch.autograd.grad(loss_of(leaves), list(leaves.values()))))

    def central(name, idx, h):
        values = OrderedDict((k, v.detach().clone()) for k, v in params.items())
        values[name][idx] += h
        with torch.no_grad():
            up = float(loss_of(values))
            values[name][idx] -= 2 * h
            down = float(loss_of(values))
        return (up - down) / (2 * h)

    rng = np.random.default_rng(3)
    checked = 0
    for _ in range(200):
        name = names[rng.integers(len(names))]
        idx = tuple(int(rng.integers(s)) for s in params[name].shape)
        numeric = central(name, idx, 1e-5)
        # a ReLU switching inside the interval shows up as disagreement between step sizes
        if abs(numeric - central(name, idx, 5e-6)) > 1e-6 * max(abs(numeric), 1e-8):
            continue
        analytic = float(grads[name][idx])
        assert abs(analytic - numeric) <= 1e-4 * max(abs(analytic), abs(numeric)) + 1e-9, name
        checked += 1
        if checked == 20:
            break
    assert checked == 20


def test_replace_rejects_shape_changes(tiny_net):
    params = init_network(tiny_net(2), seed=0)
    entries = OrderedDict(params.items())
    name = params.names[0]
    entries[name] = torch.zeros(1)
    with pytest.raises(RejectedInputError):
        params.replace(entries)
