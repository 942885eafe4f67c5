"""Prunable convolution with weight sharing within filters.

All K candidate widths of a layer reuse the leading filters of one kernel, so
the probability-weighted mixture of K zero-padded convolutions collapses to a
single convolution followed by a per-channel scale: channels in slice
``(c_{k-1}, c_k]`` are multiplied by the tail mass ``sum_{j>=k} P(c_j)``.

``forward_multipath_oracle`` evaluates the mixture literally (K convolutions)
and exists only to test that identity.
"""

import numpy as np

from . import autodiff as ad
from .gates import GateVector, expand_to_channels, make_candidates, tail_weights


def masked_kernel(W, c_k):
    """Copy of ``W`` with filters beyond the first ``c_k`` zeroed (differentiable)."""
    cout = W.shape[0]
    if not 1 <= c_k <= cout:
        raise ValueError(f"candidate width {c_k} outside [1, {cout}]")
    mask = np.zeros(W.shape, dtype=W.dtype)
    mask[:c_k] = 1.0
    return ad.mul(W, ad.Tensor(mask, dtype=W.dtype.type))


class PrunableConv:
    """A bias-free convolution whose output width is searched over a CandidateSet."""

    def __init__(self, kernel, n_groups=8, stride=1, padding=None, name="conv", candidates=None):
        self.kernel = kernel
        cout = kernel.shape[0]
        self.candidates = candidates or make_candidates(cout, n_groups)
        if self.candidates.full != cout:
            raise ValueError(f"candidates cover {self.candidates.full} channels, kernel has {cout}")
        self.gate = GateVector(self.candidates.K, name, dtype=kernel.dtype.type)
        self.stride = stride
        self.padding = kernel.shape[2] // 2 if padding is None else padding
        self.name = name
        self.conv_eval_counter = 0

    def conv(self, x):
        self.conv_eval_counter += 1
        return ad.conv2d(x, self.kernel, self.stride, self.padding)

    def channel_weights(self, sample):
        return expand_to_channels(tail_weights(sample.probs), self.candidates)

    def gate_scale(self, y, sample):
        return ad.channel_scale(y, self.channel_weights(sample))

    def forward_shared(self, x, sample):
        return self.gate_scale(self.conv(x), sample)

    def forward_multipath_oracle(self, x, sample):
        out = None
        for k, c_k in enumerate(self.candidates.counts):
            self.conv_eval_counter += 1
            y_k = ad.conv2d(x, masked_kernel(self.kernel, c_k), self.stride, self.padding)
            p_k = _pick(sample.probs, k)
            term = ad.channel_scale(y_k, ad.repeat(p_k, [y_k.shape[1]]))
            out = term if out is None else ad.add(out, term)
        return out


def forward_shared(layer, x, sample):
    return layer.forward_shared(x, sample)


def forward_multipath_oracle(layer, x, sample):
    return layer.forward_multipath_oracle(x, sample)


def _pick(v, k):
    onehot = np.zeros(v.shape, dtype=v.dtype)
    onehot[k] = 1.0
    return ad.reshape(ad.weighted_sum(v, onehot), (1,))
