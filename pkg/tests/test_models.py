import numpy as np
import pytest

from dcss import autodiff as ad
from dcss.cost import expected_flops
from dcss.models import (ConfigurationError, ModelSpec, StateError, build_model, collect_cost_inputs,
                         n_prunable, one_hot_full)


@pytest.mark.parametrize("arch,blocks", [("plain_cnn6", 1), ("mini_resnet", 1), ("mini_resnet", 2)])
def test_forward_shapes(arch, blocks, rng):
    net = build_model(ModelSpec(arch=arch, base_channels=4, image_size=6, blocks_per_stage=blocks))
    out = net.forward(rng.normal(size=(3, 3, 6, 6)).astype(np.float32), "train", rng, 1.0)
    assert out.shape == (3, 10)
    assert len(net.prunable) == n_prunable(net.spec)
    assert set(net.gates()).isdisjoint(net.weights())


def test_regression_head_keeps_image_shape(rng):
    net = build_model(ModelSpec(base_channels=4, image_size=6, task="regress"))
    out = net.forward(rng.normal(size=(2, 3, 6, 6)).astype(np.float32), "train", rng, 1.0)
    assert out.shape == (2, 3, 6, 6)


@pytest.mark.parametrize("arch", ["plain_cnn6", "mini_resnet"])
def test_counter_cost_model_and_true_flops_agree_at_full_width(arch, rng):
    net = build_model(ModelSpec(arch=arch, base_channels=8, image_size=8, dtype="float64"))
    with ad.no_grad(), ad.MultiplyCounter() as mc:
        net.forward(rng.normal(size=(2, 3, 8, 8)), "train", probs=one_hot_full(net))
    specs, probs, cands, const = collect_cost_inputs(net)
    assert mc.per_sample == expected_flops(specs, probs, cands, const).item() == net.true_flops()


def test_plain_cnn6_flops_hand_value():
    # six 3x3 convs at 32x32 with widths 16,16,32,32,64,64 plus a 64x10 head
    widths = [3, 16, 16, 32, 32, 64, 64]
    convs = sum(9 * a * b * 32 * 32 for a, b in zip(widths, widths[1:]))
    net = build_model(ModelSpec(base_channels=16, image_size=32, gated=False))
    assert net.true_flops() == convs + 640 == 73581184


def test_builder_errors():
    with pytest.raises(ConfigurationError):
        build_model(ModelSpec(arch="vgg"))
    with pytest.raises(ConfigurationError):
        build_model(ModelSpec(gated=False, widths=[1, 2, 3]))
    with pytest.raises(ConfigurationError):
        build_model(ModelSpec(base_channels=4, gated=True, widths=[1, 4, 8, 8, 16, 16]))
    with pytest.raises(ConfigurationError):
        ModelSpec.from_dict({"arch": "plain_cnn6", "depth": 3})


def test_input_shape_is_checked(rng):
    net = build_model(ModelSpec(base_channels=4, image_size=6))
    with pytest.raises(ad.DimensionError):
        net.forward(rng.normal(size=(1, 3, 7, 7)).astype(np.float32), "train", rng, 1.0)


def test_cost_inputs_need_a_forward_first():
    with pytest.raises(StateError):
        collect_cost_inputs(build_model(ModelSpec(base_channels=4, image_size=6)))


def test_spec_json_round_trip():
    spec = ModelSpec(arch="mini_resnet", widths=[], dtype="float64")
    assert ModelSpec.from_json(spec.to_json()) == spec
