"""Two-stage optimization: warm-up with frozen zero gates, then alternating
weight (train split, SGD) and gate (validation split, Adam) updates."""

import csv
import io
import logging
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .cost import cost_term, expected_flops
from .gates import TemperatureSchedule, gate_probs, expected_channels, temperature_at
from .models import collect_cost_inputs

log = logging.getLogger(__name__)


class InvariantViolation(AssertionError):
    pass


class DivergenceError(FloatingPointError):
    pass


@dataclass
class SearchConfig:
    lam: float = 1.0
    warmup_epochs: int = 4
    search_epochs: int = 4
    finetune_epochs: int = 8
    batch_size: int = 32
    lr: float = 0.1
    warmup_decay_epochs: list = field(default_factory=list)
    search_decay_epochs: list = field(default_factory=list)
    finetune_decay_epochs: list = field(default_factory=list)
    search_lr_ratio: float = 0.1
    gate_lr_ratio: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    val_fraction: float = 0.1
    seed: int = 0
    n_groups: int = 8
    tau_start: float = 10.0
    tau_end: float = 0.1
    weight_steps_per_gate_step: int = 1
    warmup_noise: bool = True
    cost_uses_sampled_probs: bool = True
    scale_before_bn: bool = False
    finetune_mode: str = "inherit"
    check_invariants: bool = True

    def validate(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must be in (0, 1)")
        for name in ("warmup_epochs", "search_epochs", "finetune_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.batch_size < 1 or self.weight_steps_per_gate_step < 1:
            raise ValueError("batch_size and weight_steps_per_gate_step must be >= 1")
        if self.finetune_mode not in ("inherit", "scratch"):
            raise ValueError(f"finetune_mode must be inherit or scratch, got {self.finetune_mode!r}")
        return self


# --------------------------------------------------------------------------
# randomness
# --------------------------------------------------------------------------

def make_rng(seed, purpose):
    """Independent generator for one purpose, derived from the root seed."""
    key = zlib.crc32(purpose.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(key,)))


# --------------------------------------------------------------------------
# data split and batching
# --------------------------------------------------------------------------

def split_dataset(n_or_dataset, val_fraction, rng):
    """Disjoint, exhaustive (train_idx, val_idx) index arrays."""
    n = n_or_dataset if isinstance(n_or_dataset, (int, np.integer)) else len(n_or_dataset)
    n_val = int(round(n * val_fraction))
    if n < 2 or n_val < 1 or n_val >= n:
        raise ValueError(f"degenerate split: {n} samples with val_fraction {val_fraction}")
    perm = rng.permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


class BatchStream:
    """Endless shuffled mini-batches over a fixed index set."""

    def __init__(self, indices, batch_size, rng):
        self.indices = np.asarray(indices)
        self.batch_size = min(batch_size, len(self.indices))
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def batches_per_epoch(self):
        return max(1, len(self.indices) // self.batch_size)

    def next(self):
        if self._pos + self.batch_size > len(self._order):
            self._order = self.rng.permutation(self.indices)
            self._pos = 0
        b = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return b


# --------------------------------------------------------------------------
# optimizers
# --------------------------------------------------------------------------

@dataclass
class OptimizerState:
    kind: str
    buffers: dict = field(default_factory=dict)
    second: dict = field(default_factory=dict)
    step: int = 0


def _check_finite(name, g):
    if not np.all(np.isfinite(g)):
        raise DivergenceError(f"non-finite gradient for {name}: {np.count_nonzero(~np.isfinite(g))} bad entries")


def sgd_momentum_step(params, grads, state, lr, momentum=0.9, weight_decay=0.0):
    """v <- momentum*v + (g + wd*p);  p <- p - lr*v.  ``params`` maps name -> Tensor."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        _check_finite(name, g)
        d = g + weight_decay * p.values if weight_decay else g
        v = state.buffers.get(name)
        if v is None:
            v = np.zeros_like(p.values)
        v = momentum * v + d
        state.buffers[name] = v.astype(p.values.dtype, copy=False)
        p.values -= (lr * v).astype(p.values.dtype, copy=False)
    state.step += 1


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        _check_finite(name, g)
        m = state.buffers.get(name, np.zeros_like(p.values))
        v = state.second.get(name, np.zeros_like(p.values))
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        state.buffers[name], state.second[name] = m, v
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        p.values -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.values.dtype, copy=False)


def lr_at(initial, decay_epochs, epoch):
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return initial * 0.1 ** sum(1 for d in decay_epochs if epoch >= d)


# --------------------------------------------------------------------------
# history
# --------------------------------------------------------------------------

BASE_COLUMNS = ["epoch", "split", "task_loss", "cost_term", "expected_mflops",
                "temperature", "lr_weights", "lr_gates"]


@dataclass
class EpochRecord:
    epoch: int
    stage: str
    split: str
    task_loss: float
    cost_term: float
    expected_mflops: float
    temperature: float
    lr_weights: float
    lr_gates: float
    expected_c: list
    train_loss: float = float("nan")


@dataclass
class SearchHistory:
    layer_names: list
    records: list = field(default_factory=list)
    temperatures: list = field(default_factory=list)

    def append(self, rec):
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise InvariantViolation("epoch index must increase")
        self.records.append(rec)

    def extend(self, other):
        for r in other.records:
            self.append(r)
        self.temperatures.extend(other.temperatures)

    def columns(self):
        return BASE_COLUMNS + [f"E[c]:{n}" for n in self.layer_names]

    def rows(self):
        for r in self.records:
            yield [r.epoch, r.split, r.task_loss, r.cost_term, r.expected_mflops,
                   r.temperature, r.lr_weights, r.lr_gates] + list(r.expected_c)

    def to_csv(self, header_comment=None):
        buf = io.StringIO()
        if header_comment:
            for line in header_comment.splitlines():
                buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns())
        for row in self.rows():
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
        return buf.getvalue()


# --------------------------------------------------------------------------
# training helpers
# --------------------------------------------------------------------------

def task_loss(model, out, targets):
    if model.spec.task == "classify":
        return ad.softmax_cross_entropy(out, targets)
    return ad.mae_loss(out, targets)


def _checksum(tensors):
    c = 0
    for name in sorted(tensors):
        c = zlib.crc32(tensors[name].values.tobytes(), c)
    return c


def _zero(tensors):
    for t in tensors.values():
        t.zero_grad()


def _grads(tensors):
    return {k: t.grad for k, t in tensors.items() if t.grad is not None}


def _set_requires_grad(tensors, flag):
    for t in tensors.values():
        t.requires_grad = flag


def noise_free_state(model, tau):
    """(expected FLOPs, per-layer E[c]) from noise-free gate probabilities."""
    with ad.no_grad():
        ecs, probs = [], []
        for layer in model.prunable:
            s = gate_probs(layer.prunable.gate, np.zeros(layer.prunable.candidates.K), tau)
            probs.append(s.probs)
            ecs.append(expected_channels(s.probs, layer.prunable.candidates).item())
        total = expected_flops(model.cost_specs(), probs, model.candidates(), model.constant_flops())
    return total.item(), ecs


def _assert_finite_loss(loss, stage, epoch, step, extra=""):
    v = loss.item()
    if not np.isfinite(v):
        raise DivergenceError(f"{stage}: non-finite loss {v} at epoch {epoch} step {step}{extra}")


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------

def warmup(model, data, train_idx, cfg, history=None):
    """Train weights on the task loss only; gates stay exactly zero."""
    gates = model.gates()
    for name, t in gates.items():
        if np.any(t.values != 0):
            raise InvariantViolation(f"warm-up needs zero-initialized gates; {name} is nonzero")
    hist = SearchHistory(model.prunable_names) if history is None else history
    weights = model.weights()
    state = OptimizerState("sgd")
    stream = BatchStream(train_idx, cfg.batch_size, make_rng(cfg.seed, "warmup/shuffle"))
    noise_rng = make_rng(cfg.seed, "warmup/noise")
    tau = cfg.tau_start
    _set_requires_grad(gates, False)
    try:
        for epoch in range(cfg.warmup_epochs):
            lr = lr_at(cfg.lr, cfg.warmup_decay_epochs, epoch)
            losses = []
            for step in range(stream.batches_per_epoch()):
                idx = stream.next()
                x, y = data.batch(idx)
                _zero(weights)
                out = model.forward(x, "train", noise_rng, tau, noise=cfg.warmup_noise)
                loss = task_loss(model, out, y)
                _assert_finite_loss(loss, "warmup", epoch, step)
                ad.backward(loss)
                sgd_momentum_step(weights, _grads(weights), state, lr, cfg.momentum, cfg.weight_decay)
                losses.append(loss.item())
            mf, ecs = noise_free_state(model, tau)
            hist.append(EpochRecord(len(hist.records), "warmup", "train", float(np.mean(losses)), 0.0,
                                    mf / 1e6, tau, lr, 0.0, ecs))
    finally:
        _set_requires_grad(gates, True)
    for name, t in gates.items():
        if np.any(t.values != 0):
            raise InvariantViolation(f"gate {name} drifted during warm-up")
    return hist


def search(model, data, train_idx, val_idx, cfg, history=None):
    """Alternate SGD weight steps on the train split with Adam gate steps on
    the validation split, minimizing task loss + lam * log(expected FLOPs)."""
    train_idx, val_idx = np.asarray(train_idx), np.asarray(val_idx)
    hist = SearchHistory(model.prunable_names) if history is None else history
    weights, gates = model.weights(), model.gates()
    w_state, g_state = OptimizerState("sgd"), OptimizerState("adam")
    train_stream = BatchStream(train_idx, cfg.batch_size, make_rng(cfg.seed, "search/shuffle-train"))
    val_stream = BatchStream(val_idx, cfg.batch_size, make_rng(cfg.seed, "search/shuffle-val"))
    noise_rng = make_rng(cfg.seed, "search/noise")
    ratio = cfg.weight_steps_per_gate_step
    gate_steps_per_epoch = max(1, train_stream.batches_per_epoch() // ratio)
    total_gate_steps = gate_steps_per_epoch * cfg.search_epochs
    sched = TemperatureSchedule(max(1, total_gate_steps - 1), cfg.tau_start, cfg.tau_end)
    search_lr = cfg.lr * cfg.search_lr_ratio
    gate_step = 0
    tau = temperature_at(sched, 0)
    for epoch in range(cfg.search_epochs):
        if cfg.check_invariants and np.intersect1d(train_idx, val_idx).size:
            raise InvariantViolation("train and validation splits overlap")
        lr_w = lr_at(search_lr, cfg.search_decay_epochs, epoch)
        lr_g = lr_w * cfg.gate_lr_ratio
        train_losses, val_losses, costs = [], [], []
        for step in range(gate_steps_per_epoch):
            # (a) weights, gates frozen
            _set_requires_grad(gates, False)
            g_sum = _checksum(gates) if cfg.check_invariants else None
            for _ in range(ratio):
                x, y = data.batch(train_stream.next())
                _zero(weights)
                out = model.forward(x, "train", noise_rng, tau)
                loss = task_loss(model, out, y)
                _assert_finite_loss(loss, "search/weights", epoch, step, f" tau={tau:.4g}")
                ad.backward(loss)
                sgd_momentum_step(weights, _grads(weights), w_state, lr_w, cfg.momentum, cfg.weight_decay)
                train_losses.append(loss.item())
            _set_requires_grad(gates, True)
            if cfg.check_invariants and _checksum(gates) != g_sum:
                raise InvariantViolation("gate logits changed during a weight step")

            # (b) gates, weights frozen
            tau = temperature_at(sched, min(gate_step, sched.total_steps))
            hist.temperatures.append(tau)
            _set_requires_grad(weights, False)
            w_sum = _checksum(weights) if cfg.check_invariants else None
            x, y = data.batch(val_stream.next())
            _zero(gates)
            out = model.forward(x, "train", noise_rng, tau)
            loss = task_loss(model, out, y)
            specs, probs, cands, const = collect_cost_inputs(model)
            if not cfg.cost_uses_sampled_probs:
                probs = [gate_probs(l.prunable.gate, np.zeros(l.prunable.candidates.K), tau).probs
                         for l in model.prunable]
            c_term = cost_term(expected_flops(specs, probs, cands, const), cfg.lam)
            total = ad.add(loss, c_term)
            _assert_finite_loss(total, "search/gates", epoch, step, f" tau={tau:.4g}")
            ad.backward(total)
            adam_step(gates, _grads(gates), g_state, lr_g)
            _set_requires_grad(weights, True)
            if cfg.check_invariants and _checksum(weights) != w_sum:
                raise InvariantViolation("weights changed during a gate step")
            val_losses.append(loss.item())
            costs.append(c_term.item())
            gate_step += 1
        mf, ecs = noise_free_state(model, tau)
        hist.append(EpochRecord(len(hist.records), "search", "val", float(np.mean(val_losses)),
                                float(np.mean(costs)), mf / 1e6, tau, lr_w, lr_g, ecs,
                                train_loss=float(np.mean(train_losses))))
    return hist, {k: t.values.copy() for k, t in gates.items()}


def train_plain(model, data, train_idx, epochs, lr, decay_epochs, cfg, purpose):
    """Ordinary SGD training of a gate-free network (baseline and fine-tuning)."""
    weights = model.weights()
    state = OptimizerState("sgd")
    stream = BatchStream(train_idx, cfg.batch_size, make_rng(cfg.seed, f"{purpose}/shuffle"))
    losses = []
    for epoch in range(epochs):
        lr_e = lr_at(lr, decay_epochs, epoch)
        ep = []
        for step in range(stream.batches_per_epoch()):
            x, y = data.batch(stream.next())
            _zero(weights)
            out = model.forward(x, "train")
            loss = task_loss(model, out, y)
            _assert_finite_loss(loss, purpose, epoch, step)
            ad.backward(loss)
            sgd_momentum_step(weights, _grads(weights), state, lr_e, cfg.momentum, cfg.weight_decay)
            ep.append(loss.item())
        losses.append(float(np.mean(ep)))
    return losses


def evaluate(model, data, idx=None, batch_size=256, tau=None):
    """Mean task loss and accuracy (classification) or MAE (regression) in eval mode."""
    idx = np.arange(len(data)) if idx is None else np.asarray(idx)
    total_loss, correct, count = 0.0, 0, 0
    with ad.no_grad():
        for start in range(0, len(idx), batch_size):
            b = idx[start:start + batch_size]
            x, y = data.batch(b)
            if model.spec.gated:
                out = model.forward(x, "eval", None, tau if tau is not None else 1.0, noise=False)
            else:
                out = model.forward(x, "eval")
            total_loss += task_loss(model, out, y).item() * len(b)
            if model.spec.task == "classify":
                correct += int((out.values.argmax(axis=1) == y).sum())
            count += len(b)
    res = {"loss": total_loss / max(count, 1), "n": count}
    if model.spec.task == "classify":
        res["accuracy"] = 100.0 * correct / max(count, 1)
    else:
        res["mae"] = res["loss"]
    return res
