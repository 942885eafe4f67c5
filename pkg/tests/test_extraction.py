import json

import numpy as np
import pytest

from dcss import autodiff as ad
from dcss.data import make_synthetic
from dcss.extraction import (LayerPlan, SlimPlan, StructuralError, derive_plan, extract_slim, finetune,
                             match_uniform, plan_from_model, round_half_up, uniform_plan)
from dcss.gates import CandidateSet, make_candidates
from dcss.models import ModelSpec, build_model, one_hot_full
from dcss.search import SearchConfig


def test_round_half_up():
    assert [round_half_up(v) for v in (2.5, 3.5, 2.4999, 0.5, 7.0)] == [3, 4, 2, 1, 7]


def test_zero_gates_pick_the_mean_candidate():
    cands = [make_candidates(8, 8), CandidateSet((2, 4), 4)]
    plan = derive_plan([np.zeros(8), np.zeros(2)], cands, 0.1)
    assert [l.expected_c for l in plan.layers] == pytest.approx([4.5, 3.0])
    assert plan.widths == [5, 3]


def test_plan_is_shift_invariant_and_never_zero(rng):
    cands = [make_candidates(16, 4)]
    theta = rng.normal(size=4)
    assert derive_plan([theta], cands, 0.1).widths == derive_plan([theta + 17.0], cands, 0.1).widths
    low = derive_plan([np.array([50.0, 0.0])], [CandidateSet((1, 2), 2)], 0.1)
    assert low.widths == [1]


def test_plan_rejects_misaligned_gates():
    with pytest.raises(StructuralError):
        derive_plan([np.zeros(2)], [], 0.1)


def test_plan_json_round_trip():
    plan = SlimPlan([LayerPlan("a", 2.4, 2, 4)], 10.0, 8, 0.2, meta={"seed": 1})
    back = SlimPlan.from_dict(json.loads(plan.to_json()))
    assert back == plan


@pytest.fixture
def searched(rng):
    with ad.default_dtype(np.float64):
        net = build_model(ModelSpec(base_channels=8, image_size=6, dtype="float64"), rng=rng)
    for t in net.gates().values():
        t.values[:] = rng.normal(size=t.shape)
    net.forward(rng.normal(size=(4, 3, 6, 6)), "train", rng, 1.0)
    return net


def test_inherited_weights_are_leading_slices(searched):
    plan = plan_from_model(searched, 0.1)
    slim = extract_slim(searched, plan)
    src = searched.weights()
    for name, t in slim.weights().items():
        np.testing.assert_array_equal(t.values, src[name].values[tuple(slice(0, d) for d in t.shape)])
    for name, bn in slim.buffers().items():
        c = bn.running_mean.shape[0]
        np.testing.assert_array_equal(bn.running_var, searched.buffers()[name].running_var[:c])


def test_full_width_plan_reproduces_supernet(searched, rng):
    full = extract_slim(searched, uniform_plan(searched, 1.0))
    x = rng.normal(size=(3, 3, 6, 6))
    with ad.no_grad():
        a = searched.forward(x, "eval", probs=one_hot_full(searched)).values
        b = full.forward(x, "eval").values
    assert np.abs(a - b).max() <= 1e-10


def test_scratch_mode_reinitializes(searched):
    plan = plan_from_model(searched, 0.1)
    slim = extract_slim(searched, plan, inherit=False, rng=np.random.default_rng(5))
    name = "layers.0.weight"
    assert not np.array_equal(slim.weights()[name].values,
                              searched.weights()[name].values[:plan.widths[0]])


def test_extract_checks_plan_structure(searched):
    plan = plan_from_model(searched, 0.1)
    plan.layers[0].name = "other"
    with pytest.raises(StructuralError):
        extract_slim(searched, plan)
    plan = plan_from_model(searched, 0.1)
    plan.layers[1].chosen_c = 0
    with pytest.raises(StructuralError):
        extract_slim(searched, plan)


def test_flops_fields_and_uniform_matching(searched):
    plan = plan_from_model(searched, 0.1)
    assert plan.true_flops <= plan.predicted_flops
    assert 0 < plan.prune_ratio < 1
    uni = match_uniform(searched, plan.predicted_flops)
    assert abs(uni.predicted_flops - plan.predicted_flops) / plan.predicted_flops < 0.25
    full = uniform_plan(searched, 1.0)
    assert full.prune_ratio == 0.0 and full.true_flops == full.predicted_flops


def test_finetune_trains_and_evaluates(searched):
    ds = make_synthetic("classify", 10, 40, image_size=6, seed=0)
    ds.normalize(*ds.channel_stats())
    ds.dtype = np.float64
    slim = extract_slim(searched, plan_from_model(searched, 0.1))
    _, m = finetune(slim, ds, np.arange(32), SearchConfig(finetune_epochs=2, batch_size=16),
                    np.arange(32, 40), ds)
    assert m["epochs"] == 2 and np.isfinite(m["train_loss"]) and m["eval_n"] == 8
