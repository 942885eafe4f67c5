"""Self-checks run by ``dcss verify``.

Each suite compares an implementation with an independent route (nested-loop
convolution, the literal K-path mixture, central differences, a multiply
counter) and reports the worst error it saw.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .cost import LayerCostSpec, cost_term, expected_flops, layer_flops
from .gates import GateSample, TemperatureSchedule, gate_probs, make_candidates, sample_gumbel, temperature_at
from .models import ModelSpec, build_model, collect_cost_inputs, one_hot_full
from .shared_conv import PrunableConv


@dataclass
class SuiteResult:
    name: str
    ok: bool
    detail: str
    seconds: float = 0.0


def reference_conv2d(x, w, stride=1, padding=0):
    """Cross-correlation by explicit loops over every output element."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo), dtype=np.float64)
    for b in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[b, o, i, j] = acc
    return out


def random_conv_geometry(rng):
    """(n, cin, cout, k, stride, size) with an integer output size."""
    stride = int(rng.choice([1, 2]))
    k = int(rng.choice([1, 3]))
    size = int(rng.integers(3, 9))
    if stride == 2 and size % 2 == 0:
        size += 1
    return int(rng.integers(1, 4)), int(rng.integers(1, 9)), int(rng.integers(4, 33)), k, stride, size


def random_probs(rng, K, dtype):
    return ad.Tensor(rng.dirichlet(np.full(K, 0.7)), dtype=dtype)


def identity_error(rng, dtype):
    """Max |shared - multipath| for one random layer configuration."""
    n, cin, cout, k, stride, size = random_conv_geometry(rng)
    kernel = ad.Tensor(rng.normal(size=(cout, cin, k, k)), dtype=dtype)
    layer = PrunableConv(kernel, n_groups=int(rng.integers(1, 9)), stride=stride)
    x = ad.Tensor(rng.normal(size=(n, cin, size, size)), dtype=dtype)
    sample = GateSample(random_probs(rng, layer.candidates.K, dtype), None, 1.0)
    with ad.no_grad():
        a = layer.forward_shared(x, sample).values
        b = layer.forward_multipath_oracle(x, sample).values
    return float(np.abs(a.astype(np.float64) - b).max())


# --------------------------------------------------------------------------
# suites
# --------------------------------------------------------------------------

def suite_conv_oracle(n_cases=30, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        n, cin, cout, k, stride, size = random_conv_geometry(rng)
        cout = min(cout, 6)
        pad = k // 2
        x = rng.normal(size=(n, cin, size, size))
        w = rng.normal(size=(cout, cin, k, k))
        ref = reference_conv2d(x, w, stride, pad)
        for impl in ("im2col", "direct"):
            with ad.conv_impl(impl), ad.no_grad():
                got = ad.conv2d(ad.Tensor(x, dtype=np.float64), ad.Tensor(w, dtype=np.float64), stride, pad)
            worst = max(worst, float(np.abs(got.values - ref).max()))
    return worst <= 1e-12, f"{n_cases} geometries, max abs error {worst:.2e} (tol 1e-12)"


def suite_weight_sharing(n_cases=200, seed=0):
    rng = np.random.default_rng(seed)
    e64 = max(identity_error(rng, np.float64) for _ in range(n_cases))
    e32 = max(identity_error(rng, np.float32) for _ in range(n_cases))
    ok = e64 <= 1e-10 and e32 <= 1e-5
    return ok, f"{n_cases} configs, max error f64 {e64:.2e} (tol 1e-10), f32 {e32:.2e} (tol 1e-5)"


def _param(rng, shape, positive=False):
    v = rng.normal(size=shape)
    if positive:
        v = np.abs(v) + 0.5
    return ad.Tensor(v, requires_grad=True, dtype=np.float64)


def gradient_cases(rng):
    """(name, closure, params) for every differentiable op and the search loss."""
    cases = []
    a, b = _param(rng, (3, 4)), _param(rng, (3, 4))
    cases.append(("add", lambda: ad.sum_all(ad.mul(ad.add(a, b), a)), [a, b]))
    cases.append(("mul", lambda: ad.sum_all(ad.mul(a, b)), [a, b]))
    cases.append(("scale", lambda: ad.sum_all(ad.mul(ad.scale(a, -2.5), a)), [a]))
    wv = rng.normal(size=(3, 4))
    cases.append(("weighted_sum", lambda: ad.weighted_sum(ad.mul(a, a), wv), [a]))
    cases.append(("reshape", lambda: ad.weighted_sum(ad.reshape(ad.mul(a, a), (4, 3)), wv.reshape(4, 3)), [a]))
    pos = _param(rng, (5,), positive=True)
    w5 = rng.normal(size=5)
    cases.append(("log", lambda: ad.weighted_sum(ad.log(pos), w5), [pos]))
    v = _param(rng, (5,))
    cases.append(("softmax", lambda: ad.weighted_sum(ad.softmax(v), w5), [v]))
    cases.append(("reverse_cumsum", lambda: ad.weighted_sum(ad.mul(ad.reverse_cumsum(v), v), w5), [v]))
    w9 = rng.normal(size=9)
    cases.append(("repeat", lambda: ad.weighted_sum(ad.repeat(ad.mul(v, v), [1, 3, 2, 1, 2]), w9), [v]))
    x4 = _param(rng, (2, 3, 5, 5))
    g4 = rng.normal(size=(2, 3, 5, 5))
    cases.append(("relu", lambda: ad.weighted_sum(ad.relu(x4), g4), [x4]))
    for impl in ("im2col", "direct"):
        for stride, pad, size in ((1, 1, 5), (2, 1, 5), (2, 0, 5)):
            xc = _param(rng, (2, 3, size, size))
            kc = _param(rng, (4, 3, 3, 3))
            ho = (size + 2 * pad - 3) // stride + 1
            gc = rng.normal(size=(2, 4, ho, ho))

            def conv(xc=xc, kc=kc, stride=stride, pad=pad, gc=gc, impl=impl):
                with ad.conv_impl(impl):
                    return ad.weighted_sum(ad.conv2d(xc, kc, stride, pad), gc)

            cases.append((f"conv2d[{impl},s{stride},p{pad}]", conv, [xc, kc]))
    s3 = _param(rng, (3,))
    cases.append(("channel_scale", lambda: ad.weighted_sum(ad.channel_scale(x4, s3), g4), [x4, s3]))
    gam, bet = _param(rng, (3,)), _param(rng, (3,))
    bn = ad.BatchNormState(3, np.float64)
    cases.append(("batchnorm2d[train]", lambda: ad.weighted_sum(ad.batchnorm2d(x4, gam, bet, bn, "train"), g4),
                  [x4, gam, bet]))
    bn_eval = ad.BatchNormState(3, np.float64)
    bn_eval.running_mean = rng.normal(size=3)
    bn_eval.running_var = rng.uniform(0.5, 2.0, size=3)
    bn_eval.initialized = True
    cases.append(("batchnorm2d[eval]", lambda: ad.weighted_sum(ad.batchnorm2d(x4, gam, bet, bn_eval, "eval"), g4),
                  [x4, gam, bet]))
    g2 = rng.normal(size=(2, 3))
    cases.append(("global_avg_pool", lambda: ad.weighted_sum(ad.global_avg_pool(x4), g2), [x4]))
    xl, wl, bl = _param(rng, (4, 3)), _param(rng, (3, 5)), _param(rng, (5,))
    gl = rng.normal(size=(4, 5))
    cases.append(("linear", lambda: ad.weighted_sum(ad.linear(xl, wl, bl), gl), [xl, wl, bl]))
    labels = rng.integers(0, 5, size=4)
    logits = _param(rng, (4, 5))
    cases.append(("softmax_cross_entropy", lambda: ad.softmax_cross_entropy(logits, labels), [logits]))
    target = rng.normal(size=(4, 5))
    cases.append(("mae_loss", lambda: ad.mae_loss(logits, target), [logits]))
    cases.append(search_loss_case(rng))
    return cases


def search_loss_case(rng, lam=1.0, tau=2.0):
    """Task loss + lam*log(expected FLOPs) of a small supernet as a function of
    its gate logits and first kernel, with the Gumbel noise held fixed."""
    spec = ModelSpec(base_channels=4, image_size=5, num_classes=3, n_groups=4, dtype="float64")
    net = build_model(spec, rng=rng)
    for t in net.gates().values():
        t.values[:] = rng.normal(size=t.shape)
    x = rng.normal(size=(4, 3, 5, 5))
    y = rng.integers(0, 3, size=4)
    noise_seed = int(rng.integers(2 ** 31))

    def loss():
        out = net.forward(x, "train", np.random.default_rng(noise_seed), tau)
        specs, probs, cands, const = collect_cost_inputs(net)
        return ad.add(ad.softmax_cross_entropy(out, y), cost_term(expected_flops(specs, probs, cands, const), lam))

    params = list(net.gates().values()) + [net.prunable[0].kernel]
    return "search_loss(theta, W)", loss, params


def suite_gradients(seed=0, tol=1e-4):
    rng = np.random.default_rng(seed)
    errs = {}
    for name, f, params in gradient_cases(rng):
        errs[name] = ad.grad_check(f, params, epsilon=1e-5)
    worst = max(errs, key=errs.get)
    bad = [k for k, e in errs.items() if not e < tol]
    detail = f"{len(errs)} ops, worst {worst} rel err {errs[worst]:.2e} (tol {tol:g})"
    if bad:
        detail += f"; failing: {', '.join(bad)}"
    return not bad, detail


def suite_flops():
    spot = layer_flops(LayerCostSpec(3, 3, 16, 32, 32, 32), 32)
    mismatches = []
    for arch in ("plain_cnn6", "mini_resnet"):
        net = build_model(ModelSpec(arch=arch, base_channels=8, image_size=8))
        x = np.random.default_rng(0).normal(size=(2, 3, 8, 8)).astype(np.float32)
        with ad.no_grad(), ad.MultiplyCounter() as mc:
            net.forward(x, "train", probs=one_hot_full(net))
        specs, probs, cands, const = collect_cost_inputs(net)
        model_total = expected_flops(specs, probs, cands, const).item()
        if not (mc.per_sample == model_total == net.true_flops()):
            mismatches.append(f"{arch}: counter {mc.per_sample}, cost model {model_total}")
    ok = spot == 4718592 and not mismatches
    detail = f"spot value {spot} (expect 4718592); counter == cost model at full width"
    return ok, detail + ("" if not mismatches else "; " + "; ".join(mismatches))


def suite_gates():
    sched = TemperatureSchedule(99)
    taus = np.array([temperature_at(sched, s) for s in range(100)])
    expect = 10.0 * (0.01 ** (np.arange(100) / 99))
    t_err = float(np.abs(taus - expect).max())
    rng = np.random.default_rng(0)
    p_err = 0.0
    for _ in range(50):
        cands = make_candidates(int(rng.integers(1, 65)), int(rng.integers(1, 9)))
        theta = ad.Tensor(rng.normal(size=cands.K), dtype=np.float64)
        p = gate_probs(theta, sample_gumbel(rng, cands.K), float(rng.uniform(0.1, 10))).probs.values
        p_err = max(p_err, abs(p.sum() - 1.0))
    ok = t_err <= 1e-12 and p_err <= 1e-12 and taus[0] == 10.0 and taus[-1] == 0.1
    return ok, f"temperature trace max err {t_err:.1e}; probability sums max err {p_err:.1e}"


SUITES = {
    "conv-oracle": suite_conv_oracle,
    "weight-sharing": suite_weight_sharing,
    "gradients": suite_gradients,
    "flops": suite_flops,
    "gates": suite_gates,
}


def run_all(names=None, echo=print):
    results = []
    for name in names or SUITES:
        t0 = time.perf_counter()
        try:
            ok, detail = SUITES[name]()
        except Exception as e:  # a crashing suite is a failing suite
            ok, detail = False, f"{type(e).__name__}: {e}"
        res = SuiteResult(name, bool(ok), detail, time.perf_counter() - t0)
        results.append(res)
        if echo:
            echo(f"{'PASS' if res.ok else 'FAIL'}  {name:<15} {detail}  [{res.seconds:.1f}s]")
    return results
