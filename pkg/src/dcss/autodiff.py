"""Minimal define-by-run reverse-mode differentiation over numpy arrays.

Each differentiable op creates a :class:`Node` holding its inputs and a
backward rule. ``backward(loss)`` collects the nodes reachable from ``loss``
into a :class:`Tape` ordered by creation sequence (creation order is a valid
topological order), then visits every node exactly once in reverse.
"""

import contextlib
import itertools

import numpy as np

from . import kernels

_seq = itertools.count()
_state = {"grad_enabled": True, "dtype": np.float32, "conv_impl": "im2col"}
_counters = []


class DimensionError(ValueError):
    pass


class RankError(ValueError):
    pass


# --------------------------------------------------------------------------
# global settings
# --------------------------------------------------------------------------

def get_default_dtype():
    return _state["dtype"]


def set_default_dtype(dtype):
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise TypeError(f"unsupported element type {dtype}")
    _state["dtype"] = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = prev


def set_conv_impl(name):
    if name not in ("im2col", "direct"):
        raise ValueError(f"unknown conv implementation {name!r}")
    _state["conv_impl"] = name


@contextlib.contextmanager
def conv_impl(name):
    prev = _state["conv_impl"]
    set_conv_impl(name)
    try:
        yield
    finally:
        _state["conv_impl"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


class MultiplyCounter:
    """Counts scalar multiplies performed by conv2d and linear, per sample.

    Inside this context conv2d always runs the direct kernel, which tallies
    each multiply in its innermost loop. Linear layers add ``N*F*O``.
    """

    def __init__(self):
        self.total = 0
        self.samples = None

    def __enter__(self):
        _counters.append(self)
        return self

    def __exit__(self, *exc):
        _counters.remove(self)

    def _add(self, mults, batch):
        if self.samples is None:
            self.samples = batch
        elif self.samples != batch:
            raise ValueError("multiply counter saw inconsistent batch sizes")
        self.total += int(mults)

    @property
    def per_sample(self):
        if not self.samples:
            return 0
        if self.total % self.samples:
            raise ArithmeticError("multiply count is not divisible by batch size")
        return self.total // self.samples


# --------------------------------------------------------------------------
# Tensor and tape
# --------------------------------------------------------------------------

class Node:
    __slots__ = ("seq", "inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.seq = next(_seq)
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tensor:
    """Dense array with an optional gradient and the node that produced it."""

    def __init__(self, values, requires_grad=False, dtype=None):
        arr = np.asarray(values)
        if dtype is None:
            dtype = arr.dtype.type if arr.dtype.type in (np.float32, np.float64) else _state["dtype"]
        self.values = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def tape_id(self):
        return None if self.node is None else self.node.seq

    def numpy(self):
        return self.values

    def item(self):
        return float(self.values.reshape(()))

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype or _state["dtype"])


def _tracks(*tensors):
    return _state["grad_enabled"] and any(t.requires_grad for t in tensors)


def _record(out_values, inputs, backward_fn):
    out = Tensor(out_values, dtype=out_values.dtype.type)
    if _tracks(*inputs):
        out.requires_grad = True
        out.node = Node(inputs, out, backward_fn)
    return out


class Tape:
    """Nodes reachable from a root, in creation (topological) order."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root):
        seen = set()
        nodes = []
        stack = [root]
        while stack:
            t = stack.pop()
            node = t.node
            if node is None or node.seq in seen:
                continue
            seen.add(node.seq)
            nodes.append(node)
            stack.extend(node.inputs)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)

    def __len__(self):
        return len(self.nodes)

    def run_backward(self, root, seed):
        grads = {id(root): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t.node is None:
                    if t.grad is None:
                        t.grad = np.zeros_like(t.values)
                    t.grad += gi
                else:
                    key = id(t)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.values.size != 1 or loss.ndim > 1:
        raise RankError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            if loss.grad is None:
                loss.grad = np.zeros_like(loss.values)
            loss.grad += 1.0
        return
    Tape.from_root(loss).run_backward(loss, np.ones_like(loss.values))


# --------------------------------------------------------------------------
# ops
# --------------------------------------------------------------------------

def _check_same_shape(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _check_same_shape(a, b, "add")
    return _record(a.values + b.values, (a, b), lambda g: (g, g))


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _check_same_shape(a, b, "mul")
    av, bv = a.values, b.values
    return _record(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a, c):
    c = float(c)
    return _record(a.values * a.values.dtype.type(c), (a,), lambda g: (g * c,))


def sum_all(a):
    shape = a.shape
    return _record(np.asarray(a.values.sum(), dtype=a.dtype), (a,),
                   lambda g: (np.broadcast_to(g, shape).astype(g.dtype, copy=True),))


def weighted_sum(a, weights):
    """sum_k weights[k] * a[k] with constant ``weights``."""
    w = np.asarray(weights, dtype=a.dtype)
    if w.shape != a.shape:
        raise DimensionError(f"weighted_sum: shape mismatch {a.shape} vs {w.shape}")
    return _record(np.asarray((a.values * w).sum(), dtype=a.dtype), (a,), lambda g: (g * w,))


def reshape(a, shape):
    old = a.shape
    return _record(a.values.reshape(shape), (a,), lambda g: (g.reshape(old),))


def log(a):
    av = a.values
    return _record(np.log(av), (a,), lambda g: (g / av,))


def softmax(a):
    """Softmax over a 1-d tensor, with max subtraction."""
    if a.ndim != 1:
        raise DimensionError(f"softmax expects a vector, got shape {a.shape}")
    z = a.values - a.values.max()
    e = np.exp(z)
    p = e / e.sum()

    def back(g):
        return (p * (g - np.dot(g, p)),)

    return _record(p, (a,), back)


def reverse_cumsum(a):
    """out[k] = sum_{j >= k} a[j] for a 1-d tensor."""
    out = np.cumsum(a.values[::-1])[::-1].copy()
    return _record(out, (a,), lambda g: (np.cumsum(g),))


def repeat(a, counts):
    """Repeat element k of a 1-d tensor ``counts[k]`` times."""
    counts = np.asarray(counts, dtype=np.int64)
    if counts.shape != a.shape or np.any(counts < 1):
        raise DimensionError(f"repeat: bad counts {counts} for shape {a.shape}")
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    return _record(np.repeat(a.values, counts), (a,), lambda g: (np.add.reduceat(g, starts),))


def relu(x):
    mask = x.values > 0
    return _record(x.values * mask, (x,), lambda g: (g * mask,))


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x, kernel, stride=1, padding=0):
    """Cross-correlation of ``x[N,Cin,H,W]`` with ``kernel[Cout,Cin,h,w]``, no bias."""
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv2d: input shape {x.shape} incompatible with kernel shape {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: bad stride {stride} / padding {padding}")
    n, cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    ho = kernels.output_size(h, kh, stride, padding)
    wo = kernels.output_size(w, kw, stride, padding)
    xp = _pad(x.values, padding)
    wv = kernel.values
    if xp.dtype != wv.dtype:
        raise TypeError(f"conv2d: dtype mismatch {xp.dtype} vs {wv.dtype}")
    hp, wp = xp.shape[2], xp.shape[3]

    def crop(gxp):
        if padding:
            return gxp[:, :, padding:padding + h, padding:padding + w]
        return gxp

    if _counters or _state["conv_impl"] == "direct":
        out, mults = kernels.conv_direct_forward(xp, wv, stride)
        for c in _counters:
            c._add(mults, n)

        def back(g):
            gxp, gw = kernels.conv_direct_backward(xp, wv, np.ascontiguousarray(g), stride)
            return crop(gxp), gw

        return _record(out, (x, kernel), back)

    cols = kernels.im2col(xp, kh, kw, stride)
    wmat = wv.reshape(cout, -1)
    out = (wmat @ cols).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)

    def back(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gw = (gmat @ cols.T).reshape(wv.shape)
        gcols = wmat.T @ gmat
        gxp = kernels.col2im(gcols, n, cin, hp, wp, kh, kw, stride)
        return crop(gxp), gw

    return _record(out, (x, kernel), back)


def channel_scale(x, s):
    """out[n,c] = s[c] * x[n,c]."""
    if x.ndim != 4 or s.ndim != 1 or s.shape[0] != x.shape[1]:
        raise DimensionError(f"channel_scale: scale shape {s.shape} does not match channels of {x.shape}")
    xv, sv = x.values, s.values
    sb = sv[None, :, None, None]

    def back(g):
        return g * sb, (g * xv).sum(axis=(0, 2, 3))

    return _record(xv * sb, (x, s), back)


class BatchNormState:
    """Running statistics for one batch-norm layer."""

    def __init__(self, channels, dtype=None, momentum=0.1, eps=1e-5):
        dtype = dtype or _state["dtype"]
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.initialized = False
        self.momentum = momentum
        self.eps = eps


class UninitializedStatsError(RuntimeError):
    pass


def batchnorm2d(x, gamma, beta, state, mode="train"):
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(
            f"batchnorm2d: parameters {gamma.shape}/{beta.shape} do not match channels of {x.shape}"
        )
    xv = x.values
    gv, bv = gamma.values, beta.values
    eps = state.eps
    if mode == "train":
        mean = xv.mean(axis=(0, 2, 3))
        var = xv.var(axis=(0, 2, 3))
        m = xv.shape[0] * xv.shape[2] * xv.shape[3]
        unbiased = var * (m / max(m - 1, 1))
        mom = state.momentum
        state.running_mean = ((1 - mom) * state.running_mean + mom * mean).astype(xv.dtype)
        state.running_var = ((1 - mom) * state.running_var + mom * unbiased).astype(xv.dtype)
        state.initialized = True
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xv - mean[None, :, None, None]) * inv[None, :, None, None]
        out = xhat * gv[None, :, None, None] + bv[None, :, None, None]

        def back(g):
            gbeta = g.sum(axis=(0, 2, 3))
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
            gxhat = g * gv[None, :, None, None]
            gx = (inv[None, :, None, None] / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            )
            return gx, ggamma, gbeta

        return _record(out, (x, gamma, beta), back)
    if mode != "eval":
        raise ValueError(f"unknown batch-norm mode {mode!r}")
    if not state.initialized:
        raise UninitializedStatsError("batchnorm2d in eval mode before any running-stat update")
    inv = 1.0 / np.sqrt(state.running_var + eps)
    xhat = (xv - state.running_mean[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gv[None, :, None, None] + bv[None, :, None, None]

    def back_eval(g):
        return (g * (gv * inv)[None, :, None, None], (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

    return _record(out, (x, gamma, beta), back_eval)


def global_avg_pool(x):
    n, c, h, w = x.shape
    area = h * w

    def back(g):
        return (np.broadcast_to(g[:, :, None, None] / area, x.shape).copy(),)

    return _record(x.values.mean(axis=(2, 3)), (x,), back)


def linear(x, weight, bias=None):
    """x[N,F] @ weight[F,O] + bias[O]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: input shape {x.shape} incompatible with weight shape {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias shape {bias.shape} does not match weight shape {weight.shape}")
    xv, wv = x.values, weight.values
    out = xv @ wv
    if bias is not None:
        out = out + bias.values
    for c in _counters:
        c._add(xv.shape[0] * wv.shape[0] * wv.shape[1], xv.shape[0])

    def back(g):
        grads = (g @ wv.T, xv.T @ g)
        return grads + ((g.sum(axis=0),) if bias is not None else ())

    inputs = (x, weight) + ((bias,) if bias is not None else ())
    return _record(out, inputs, back)


def softmax_cross_entropy(logits, labels):
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"label out of range [0, {k}): min {labels.min()}, max {labels.max()}")
    z = logits.values - logits.values.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def back(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _record(np.asarray(loss, dtype=logits.dtype), (logits,), back)


def mae_loss(pred, target):
    t = np.asarray(target.values if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise DimensionError(f"mae_loss: shape mismatch {pred.shape} vs {t.shape}")
    diff = pred.values - t
    size = diff.size
    sign = np.sign(diff)
    return _record(np.asarray(np.abs(diff).mean(), dtype=pred.dtype), (pred,), lambda g: (sign * (g / size),))


# --------------------------------------------------------------------------
# finite differences
# --------------------------------------------------------------------------

def grad_check(f, params, epsilon=1e-5, floor=1e-12):
    """Max relative error between backprop gradients and central differences.

    ``f`` takes no arguments and returns a scalar Tensor built from ``params``;
    it must be deterministic. Relative error per element is
    ``|a - cd| / max(|a|, |cd|, floor)``.
    """
    for p in params:
        p.zero_grad()
    backward(f())
    analytic = [np.zeros_like(p.values) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.values.reshape(-1)
            af = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                fp = f().item()
                flat[i] = orig - epsilon
                fm = f().item()
                flat[i] = orig
                cd = (fp - fm) / (2 * epsilon)
                err = abs(af[i] - cd) / max(abs(af[i]), abs(cd), floor)
                worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst
