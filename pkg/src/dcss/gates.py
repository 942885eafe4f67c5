"""Candidate channel counts and Gumbel-Softmax gates."""

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

log = logging.getLogger(__name__)

UNIFORM_CLAMP = 1e-12


@dataclass(frozen=True)
class CandidateSet:
    counts: tuple
    full: int

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        object.__setattr__(self, "counts", counts)
        if not counts:
            raise ValueError("candidate set must not be empty")
        if counts[-1] != self.full:
            raise ValueError(f"last candidate {counts[-1]} must equal full width {self.full}")
        if counts[0] < 1 or any(b <= a for a, b in zip(counts, counts[1:])):
            raise ValueError(f"candidates must be strictly increasing positive ints, got {counts}")

    @property
    def K(self):
        return len(self.counts)

    def block_sizes(self):
        """Number of channels in each slice (c_{k-1}, c_k]."""
        prev = (0,) + self.counts[:-1]
        return np.array([c - p for c, p in zip(self.counts, prev)], dtype=np.int64)


def make_candidates(n_filters, n_groups=8):
    if n_filters < 1:
        raise ValueError(f"n_filters must be >= 1, got {n_filters}")
    if n_groups < 1:
        raise ValueError(f"n_groups must be >= 1, got {n_groups}")
    k = min(n_groups, n_filters)
    counts = sorted({-(-i * n_filters // k) for i in range(1, k + 1)})
    return CandidateSet(tuple(counts), n_filters)


class GateVector:
    """Learnable logits for one prunable layer, zero-initialized."""

    def __init__(self, K, layer_id, dtype=None):
        self.theta = ad.Tensor(np.zeros(K), requires_grad=True, dtype=dtype)
        self.layer_id = layer_id

    @property
    def K(self):
        return self.theta.shape[0]


@dataclass
class GateSample:
    probs: ad.Tensor
    noise: np.ndarray
    tau: float


def sample_gumbel(rng, K):
    u = rng.random(K)
    u = np.clip(u, UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP)
    return -np.log(-np.log(u))


def gate_probs(theta, g, tau):
    """Gumbel-Softmax probabilities softmax((theta + g) / tau), differentiable in theta."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    t = theta.theta if isinstance(theta, GateVector) else theta
    g = np.asarray(g, dtype=t.dtype)
    if g.shape != t.shape:
        raise ValueError(f"noise length {g.shape} does not match gate length {t.shape}")
    z = ad.scale(ad.add(t, ad.Tensor(g, dtype=t.dtype.type)), 1.0 / tau)
    return GateSample(ad.softmax(z), g, float(tau))


def tail_weights(probs):
    return ad.reverse_cumsum(probs)


def expand_to_channels(S, candidates):
    return ad.repeat(S, candidates.block_sizes())


def expected_channels(probs, candidates):
    return ad.weighted_sum(probs, np.asarray(candidates.counts, dtype=float))


@dataclass(frozen=True)
class TemperatureSchedule:
    total_steps: int
    tau_start: float = 10.0
    tau_end: float = 0.1

    def __post_init__(self):
        if not self.tau_start > self.tau_end > 0:
            raise ValueError("need tau_start > tau_end > 0")
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")


def temperature_at(sched, step):
    if step < 0 or step > sched.total_steps:
        log.warning("temperature step %s outside [0, %s]; clamping", step, sched.total_steps)
        step = min(max(step, 0), sched.total_steps)
    if step == 0:
        return float(sched.tau_start)
    if step == sched.total_steps:
        return float(sched.tau_end)
    frac = step / sched.total_steps
    return sched.tau_start * math.exp(frac * math.log(sched.tau_end / sched.tau_start))
