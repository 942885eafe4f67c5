import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcss import autodiff as ad
from dcss.gates import GateSample, gate_probs
from dcss.shared_conv import PrunableConv, masked_kernel
from dcss.verify import reference_conv2d


def t64(v, grad=False):
    return ad.Tensor(np.asarray(v, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def make_layer(rng, cout=12, cin=3, groups=4, k=3, stride=1):
    return PrunableConv(t64(rng.normal(size=(cout, cin, k, k)), grad=True), n_groups=groups, stride=stride)


def test_masked_kernel_zeroes_trailing_filters(rng):
    w = t64(rng.normal(size=(6, 2, 3, 3)))
    m = masked_kernel(w, 4).values
    np.testing.assert_array_equal(m[:4], w.values[:4])
    assert not m[4:].any()
    with pytest.raises(ValueError):
        masked_kernel(w, 7)


@settings(max_examples=40, deadline=None)
@given(st.integers(4, 32), st.integers(1, 8), st.integers(1, 8), st.sampled_from([1, 2]), st.integers(0, 2 ** 31))
def test_shared_equals_multipath(cout, cin, groups, stride, seed):
    rng = np.random.default_rng(seed)
    layer = PrunableConv(t64(rng.normal(size=(cout, cin, 3, 3))), n_groups=groups, stride=stride)
    x = t64(rng.normal(size=(2, cin, 5, 5)))
    sample = GateSample(t64(rng.dirichlet(np.ones(layer.candidates.K))), None, 1.0)
    a = layer.forward_shared(x, sample).values
    b = layer.forward_multipath_oracle(x, sample).values
    assert np.abs(a - b).max() <= 1e-10


def test_one_hot_candidate_keeps_leading_channels(rng):
    layer = make_layer(rng)
    x = t64(rng.normal(size=(1, 3, 5, 5)))
    plain = reference_conv2d(x.values, layer.kernel.values, 1, 1)
    for k, c in enumerate(layer.candidates.counts):
        p = np.zeros(layer.candidates.K)
        p[k] = 1.0
        out = layer.forward_shared(x, GateSample(t64(p), None, 1.0)).values
        np.testing.assert_allclose(out[:, :c], plain[:, :c], atol=1e-12)
        assert not out[:, c:].any()


def test_gate_gradients_agree_between_routes(rng):
    layer = make_layer(rng)
    layer.gate.theta.values[:] = rng.normal(size=layer.candidates.K)
    x = t64(rng.normal(size=(2, 3, 5, 5)))
    g = rng.normal(size=layer.candidates.K)
    weights = rng.normal(size=(2, 12, 5, 5))
    grads = []
    for route in (layer.forward_shared, layer.forward_multipath_oracle):
        layer.gate.theta.zero_grad()
        layer.kernel.zero_grad()
        ad.backward(ad.weighted_sum(route(x, gate_probs(layer.gate, g, 0.7)), weights))
        grads.append((layer.gate.theta.grad.copy(), layer.kernel.grad.copy()))
    np.testing.assert_allclose(grads[0][0], grads[1][0], rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(grads[0][1], grads[1][1], rtol=1e-10, atol=1e-12)


def test_conv_eval_counter(rng):
    layer = make_layer(rng)
    x = t64(rng.normal(size=(1, 3, 5, 5)))
    s = gate_probs(layer.gate, np.zeros(layer.candidates.K), 1.0)
    layer.forward_shared(x, s)
    assert layer.conv_eval_counter == 1
    layer.forward_multipath_oracle(x, s)
    assert layer.conv_eval_counter == 1 + layer.candidates.K
