"""FLOPs accounting and the log-FLOPs regularizer."""

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .gates import expected_channels


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class LayerCostSpec:
    """Static geometry of one conv layer: kernel h x w, n input channels, H x W output."""

    h: int
    w: int
    n: int
    H: int
    W: int
    full_out: int

    def __post_init__(self):
        for k, v in asdict(self).items():
            if int(v) < 1:
                raise ValueError(f"LayerCostSpec.{k} must be positive, got {v}")

    @property
    def eta(self):
        return eta(self)


def eta(spec):
    return spec.h * spec.w * spec.n * spec.H * spec.W


def layer_flops(spec, C):
    if C < 0:
        raise ValueError(f"channel count must be nonnegative, got {C}")
    return eta(spec) * C


def expected_flops(specs, probs_per_layer, candidates_per_layer, constant=0):
    """sum_i eta_i * E[C_i] + constant, recorded on the tape.

    ``constant`` carries the cost of non-prunable layers, which enter the
    total at full width.
    """
    if not (len(specs) == len(probs_per_layer) == len(candidates_per_layer)):
        raise ConfigurationError(
            f"misaligned cost inputs: {len(specs)} specs, {len(probs_per_layer)} probs, "
            f"{len(candidates_per_layer)} candidate sets"
        )
    if not specs:
        raise ConfigurationError("expected_flops needs at least one prunable layer")
    total = None
    for spec, probs, cands in zip(specs, probs_per_layer, candidates_per_layer):
        if cands.full != spec.full_out:
            raise ConfigurationError(f"candidate width {cands.full} != layer width {spec.full_out}")
        term = ad.scale(expected_channels(probs, cands), eta(spec))
        total = term if total is None else ad.add(total, term)
    if constant:
        total = ad.add(total, ad.Tensor(np.asarray(float(constant)), dtype=total.dtype.type))
    return total


def cost_term(expected_total, lam):
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    if not expected_total.item() > 0:
        raise ValueError(f"log-FLOPs needs a positive total, got {expected_total.item()}")
    return ad.scale(ad.log(expected_total), lam)


def full_flops(specs, constant=0):
    return sum(layer_flops(s, s.full_out) for s in specs) + constant

