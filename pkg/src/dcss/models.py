"""Desk-scale prunable networks: ``plain_cnn6`` and ``mini_resnet``.

A :class:`SuperNet` built with ``gated=True`` carries one Gumbel gate per
prunable conv and runs the shared-weight forward. The same builder with
``gated=False`` and explicit ``widths`` produces the slim, gate-free network
used after extraction, so a checkpoint's embedded :class:`ModelSpec` is enough
to rebuild either kind.
"""

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .cost import LayerCostSpec
from .gates import GateSample, gate_probs, sample_gumbel
from .shared_conv import PrunableConv

ARCHITECTURES = ("plain_cnn6", "mini_resnet")


class ConfigurationError(ValueError):
    pass


class StateError(RuntimeError):
    pass


@dataclass
class ModelSpec:
    arch: str = "plain_cnn6"
    base_channels: int = 16
    in_channels: int = 3
    image_size: int = 32
    task: str = "classify"
    num_classes: int = 10
    out_channels: int = 0
    blocks_per_stage: int = 1
    n_groups: int = 8
    gated: bool = True
    widths: list = field(default_factory=list)
    scale_before_bn: bool = False
    dtype: str = "float32"

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown ModelSpec keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _he_normal(rng, shape, fan_in, gain=2.0):
    return rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)


class ConvBN:
    """conv (no bias) -> batch norm [-> gate scale], optionally gated."""

    def __init__(self, name, cin, cout, k, hw, rng, dtype, gated=False, n_groups=8, batchnorm=True):
        self.name = name
        self.k = k
        self.padding = k // 2
        self.out_hw = hw
        self.kernel = ad.Tensor(_he_normal(rng, (cout, cin, k, k), cin * k * k, 2.0 if batchnorm else 1.0),
                                requires_grad=True, dtype=dtype)
        self.prunable = PrunableConv(self.kernel, n_groups, 1, self.padding, name=name) if gated else None
        self.batchnorm = batchnorm
        if batchnorm:
            self.gamma = ad.Tensor(np.ones(cout), requires_grad=True, dtype=dtype)
            self.beta = ad.Tensor(np.zeros(cout), requires_grad=True, dtype=dtype)
            self.bn = ad.BatchNormState(cout, dtype)
        self.last_out_shape = None

    @property
    def cin(self):
        return self.kernel.shape[1]

    @property
    def cout(self):
        return self.kernel.shape[0]

    def weights(self):
        yield f"{self.name}.weight", self.kernel
        if self.batchnorm:
            yield f"{self.name}.bn.gamma", self.gamma
            yield f"{self.name}.bn.beta", self.beta

    def buffers(self):
        if self.batchnorm:
            yield f"{self.name}.bn", self.bn

    def __call__(self, x, mode, sample=None, scale_before_bn=False):
        if self.prunable is not None:
            y = self.prunable.conv(x)
        else:
            y = ad.conv2d(x, self.kernel, 1, self.padding)
        self.last_out_shape = y.shape
        if sample is not None and scale_before_bn:
            y = self.prunable.gate_scale(y, sample)
        if self.batchnorm:
            y = ad.batchnorm2d(y, self.gamma, self.beta, self.bn, mode)
        if sample is not None and not scale_before_bn:
            y = self.prunable.gate_scale(y, sample)
        return y

    def flops(self):
        h, w = self.out_hw
        return self.k * self.k * self.cin * h * w * self.cout


class Linear:
    def __init__(self, name, fin, fout, rng, dtype):
        self.name = name
        self.weight = ad.Tensor(_he_normal(rng, (fin, fout), fin, 1.0), requires_grad=True, dtype=dtype)
        self.bias = ad.Tensor(np.zeros(fout), requires_grad=True, dtype=dtype)

    def weights(self):
        yield f"{self.name}.weight", self.weight
        yield f"{self.name}.bias", self.bias

    def buffers(self):
        return iter(())

    def __call__(self, x):
        return ad.linear(x, self.weight, self.bias)

    def flops(self):
        return self.weight.shape[0] * self.weight.shape[1]


class SuperNet:
    """Ordered layers plus disjoint registries of weights and gate logits."""

    def __init__(self, spec):
        self.spec = spec
        self.samples = {}
        self.prunable = []      # ConvBN layers whose width is searched
        self.fixed_convs = []   # ConvBN layers never pruned
        self.stem = None
        self.blocks = []
        self.head = None

    # -- registries -------------------------------------------------------
    def _modules(self):
        mods = []
        if self.spec.arch == "plain_cnn6":
            mods.extend(self.prunable)
        else:
            mods.append(self.stem)
            for blk in self.blocks:
                mods.append(blk["conv1"])
                mods.append(blk["conv2"])
                if blk["proj"] is not None:
                    mods.append(blk["proj"])
        mods.append(self.head)
        return mods

    def weights(self):
        out = {}
        for m in self._modules():
            out.update(m.weights())
        return out

    def gates(self):
        if not self.spec.gated:
            return {}
        return {f"{layer.name}.gate": layer.prunable.gate.theta for layer in self.prunable}

    def buffers(self):
        out = {}
        for m in self._modules():
            out.update(m.buffers())
        return out

    def trainables(self):
        return {**self.weights(), **self.gates()}

    @property
    def prunable_names(self):
        return [layer.name for layer in self.prunable]

    def candidates(self):
        return [layer.prunable.candidates for layer in self.prunable]

    # -- forward ----------------------------------------------------------
    def sample_gates(self, rng=None, tau=10.0, noise=True, probs=None):
        self.samples = {}
        for layer in self.prunable:
            name = layer.name
            if probs is not None and name in probs:
                p = ad.Tensor(np.asarray(probs[name]), dtype=layer.kernel.dtype.type)
                self.samples[name] = GateSample(p, np.zeros(p.shape), float("nan"))
                continue
            K = layer.prunable.candidates.K
            g = sample_gumbel(rng, K) if noise else np.zeros(K)
            self.samples[name] = gate_probs(layer.prunable.gate, g, tau)
        return self.samples

    def forward(self, x, mode="train", rng=None, tau=10.0, noise=True, probs=None):
        if not isinstance(x, ad.Tensor):
            x = ad.Tensor(x, dtype=getattr(np, self.spec.dtype))
        expect = (self.spec.in_channels, self.spec.image_size, self.spec.image_size)
        if x.shape[1:] != expect:
            raise ad.DimensionError(f"batch shape {x.shape} does not match model input {expect}")
        if self.spec.gated:
            if rng is None and noise and probs is None:
                raise ValueError("a gated forward with noise needs an rng")
            self.sample_gates(rng, tau, noise, probs)
        sbb = self.spec.scale_before_bn

        def gated(layer, h):
            s = self.samples.get(layer.name) if self.spec.gated else None
            return layer(h, mode, s, sbb)

        if self.spec.arch == "plain_cnn6":
            h = x
            for layer in self.prunable:
                h = ad.relu(gated(layer, h))
        else:
            h = ad.relu(self.stem(x, mode))
            for blk in self.blocks:
                r = ad.relu(gated(blk["conv1"], h))
                r = blk["conv2"](r, mode)
                sc = h if blk["proj"] is None else blk["proj"](h, mode)
                h = ad.relu(ad.add(r, sc))
        if self.spec.task == "classify":
            return self.head(ad.global_avg_pool(h))
        return self.head(h, mode)

    __call__ = forward

    # -- cost ---------------------------------------------------------------
    def cost_specs(self):
        """LayerCostSpec per prunable layer, using the unpruned input width."""
        full = _full_channels(self.spec)
        out = []
        for layer, (cin_full, cout_full) in zip(self.prunable, full["prunable"]):
            h, w = layer.out_hw
            out.append(LayerCostSpec(layer.k, layer.k, cin_full, h, w, cout_full))
        return out

    def constant_flops(self):
        """FLOPs of non-prunable layers at full width."""
        full = _full_channels(self.spec)
        total = 0
        for layer, (cin_full, cout_full) in zip(self.fixed_convs, full["fixed"]):
            h, w = layer.out_hw
            total += layer.k * layer.k * cin_full * h * w * cout_full
        total += full["head"]
        return total

    def true_flops(self):
        """Multiply count per sample using the actual (possibly pruned) widths."""
        return sum(m.flops() for m in self._modules())


def _full_channels(spec):
    """Unpruned (cin, cout) of each prunable and fixed conv, and head multiplies."""
    full_spec = ModelSpec(**{**asdict(spec), "widths": [], "gated": False})
    cache_key = full_spec.to_json()
    hit = _FULL_CACHE.get(cache_key)
    if hit is not None:
        return hit
    net = build_model(full_spec, rng=np.random.default_rng(0))
    res = {
        "prunable": [(l.cin, l.cout) for l in net.prunable],
        "fixed": [(l.cin, l.cout) for l in net.fixed_convs],
        "head": net.head.flops(),
    }
    _FULL_CACHE[cache_key] = res
    return res


_FULL_CACHE = {}


def _stage_widths(spec):
    b = spec.base_channels
    if spec.arch == "plain_cnn6":
        return [b, b, 2 * b, 2 * b, 4 * b, 4 * b]
    return [b * 2 ** s for s in range(3) for _ in range(spec.blocks_per_stage)]


def n_prunable(spec):
    return len(_stage_widths(spec))


def build_model(spec, n_groups=None, rng=None):
    """Instantiate a SuperNet (gated) or a slim plain network from ``spec``."""
    if spec.arch not in ARCHITECTURES:
        raise ConfigurationError(f"unknown architecture {spec.arch!r}; expected one of {ARCHITECTURES}")
    if spec.task not in ("classify", "regress"):
        raise ConfigurationError(f"unknown task {spec.task!r}")
    if n_groups is not None:
        spec.n_groups = n_groups
    if rng is None:
        rng = np.random.default_rng(0)
    dtype = getattr(np, spec.dtype)
    hw = (spec.image_size, spec.image_size)
    full = _stage_widths(spec)
    widths = list(spec.widths) or list(full)
    if len(widths) != len(full):
        raise ConfigurationError(f"{spec.arch} has {len(full)} prunable layers, widths lists {len(widths)}")
    for i, (w, f) in enumerate(zip(widths, full)):
        if not 1 <= w <= f:
            raise ConfigurationError(f"width {w} of prunable layer {i} outside [1, {f}]")
    if spec.gated and spec.widths and widths != full:
        raise ConfigurationError("a gated supernet must be built at full width")

    net = SuperNet(spec)
    kw = dict(rng=rng, dtype=dtype, n_groups=spec.n_groups)
    if spec.arch == "plain_cnn6":
        cin = spec.in_channels
        for i, w in enumerate(widths):
            net.prunable.append(ConvBN(f"layers.{i}", cin, w, 3, hw, gated=spec.gated, **kw))
            cin = w
        last = cin
    else:
        b = spec.base_channels
        net.stem = ConvBN("stem", spec.in_channels, b, 3, hw, **kw)
        net.fixed_convs.append(net.stem)
        cin = b
        for i, (inner, width) in enumerate(zip(widths, full)):
            c1 = ConvBN(f"blocks.{i}.conv1", cin, inner, 3, hw, gated=spec.gated, **kw)
            c2 = ConvBN(f"blocks.{i}.conv2", inner, width, 3, hw, **kw)
            proj = None
            if cin != width:
                proj = ConvBN(f"blocks.{i}.shortcut", cin, width, 1, hw, **kw)
                net.fixed_convs.append(proj)
            if c2.cout != (proj.cout if proj is not None else cin):
                raise ConfigurationError(f"residual add in block {i} mixes channel counts")
            net.prunable.append(c1)
            net.fixed_convs.append(c2)
            net.blocks.append({"conv1": c1, "conv2": c2, "proj": proj})
            cin = width
        last = cin
    if spec.task == "classify":
        net.head = Linear("head", last, spec.num_classes, rng, dtype)
    else:
        out_c = spec.out_channels or spec.in_channels
        net.head = ConvBN("head", last, out_c, 3, hw, rng=rng, dtype=dtype, batchnorm=False)
    wset, gset = set(map(id, net.weights().values())), set(map(id, net.gates().values()))
    assert not wset & gset
    return net


# --------------------------------------------------------------------------
# gate-level helpers shared by search and extraction
# --------------------------------------------------------------------------

def collect_cost_inputs(model):
    """(specs, probs, candidates, constant) aligned over prunable layers."""
    if not model.spec.gated:
        raise StateError("collect_cost_inputs needs a gated supernet")
    if not model.samples:
        raise StateError("collect_cost_inputs called before any forward pass")
    names = model.prunable_names
    probs = [model.samples[n].probs for n in names]
    return model.cost_specs(), probs, model.candidates(), model.constant_flops()


def one_hot_full(model):
    out = {}
    for layer in model.prunable:
        K = layer.prunable.candidates.K
        p = np.zeros(K)
        p[-1] = 1.0
        out[layer.name] = p
    return out
