"""Turn optimized gates into a slim network and fine-tune it."""

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .gates import expected_channels, gate_probs
from .models import build_model
from .search import evaluate, train_plain


class StructuralError(ValueError):
    pass


@dataclass
class LayerPlan:
    name: str
    expected_c: float
    chosen_c: int
    full: int


@dataclass
class SlimPlan:
    layers: list
    predicted_flops: float = 0.0
    true_flops: int = 0
    prune_ratio: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def widths(self):
        return [l.chosen_c for l in self.layers]

    def to_dict(self):
        d = {
            "layers": [asdict(l) for l in self.layers],
            "predicted_flops": self.predicted_flops,
            "true_flops": self.true_flops,
            "prune_ratio": self.prune_ratio,
        }
        d.update(self.meta)
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        layers = [LayerPlan(**l) for l in d.pop("layers")]
        core = {k: d.pop(k) for k in ("predicted_flops", "true_flops", "prune_ratio") if k in d}
        return cls(layers, meta=d, **core)


def round_half_up(x):
    return int(math.floor(x + 0.5))


def derive_plan(gates, candidates_per_layer, tau_final, names=None, model=None):
    """Noise-free expected channel count per layer, rounded half up into [1, full].

    ``gates`` is a sequence of logit vectors (arrays or Tensors) aligned with
    ``candidates_per_layer``. Passing ``model`` fills in the FLOPs fields.
    """
    if len(gates) != len(candidates_per_layer):
        raise StructuralError(f"{len(gates)} gate vectors for {len(candidates_per_layer)} layers")
    names = names or [f"layer{i}" for i in range(len(gates))]
    layers = []
    with ad.no_grad():
        for name, theta, cands in zip(names, gates, candidates_per_layer):
            t = theta if isinstance(theta, ad.Tensor) else ad.Tensor(np.asarray(theta, dtype=np.float64))
            probs = gate_probs(t, np.zeros(cands.K), tau_final).probs
            e = expected_channels(probs, cands).item()
            chosen = min(max(round_half_up(e), 1), cands.full)
            layers.append(LayerPlan(name, e, chosen, cands.full))
    plan = SlimPlan(layers)
    if model is not None:
        fill_flops(plan, model)
    return plan


def plan_from_model(model, tau_final):
    gates = [layer.prunable.gate.theta for layer in model.prunable]
    return derive_plan(gates, model.candidates(), tau_final, model.prunable_names, model)


def predicted_flops(model, widths):
    """Cost-model FLOPs: linear per layer with unpruned input widths."""
    return sum(s.eta * c for s, c in zip(model.cost_specs(), widths)) + model.constant_flops()


def slim_spec(model, widths):
    return replace(model.spec, gated=False, widths=[int(w) for w in widths])


def true_flops(slim):
    return int(slim.true_flops())


def unpruned_flops(model):
    return true_flops(build_model(slim_spec(model, [c.full for c in model.candidates()])))


def fill_flops(plan, model):
    plan.predicted_flops = float(predicted_flops(model, plan.widths))
    plan.true_flops = true_flops(build_model(slim_spec(model, plan.widths)))
    plan.prune_ratio = 1.0 - plan.true_flops / unpruned_flops(model)
    return plan


def uniform_plan(model, ratio):
    """One global keep ratio for every prunable layer."""
    layers = []
    for name, cands in zip(model.prunable_names, model.candidates()):
        c = min(max(round_half_up(ratio * cands.full), 1), cands.full)
        layers.append(LayerPlan(name, ratio * cands.full, c, cands.full))
    return fill_flops(SlimPlan(layers, meta={"uniform_keep_ratio": ratio}), model)


def match_uniform(model, target_predicted, steps=1000):
    """Uniform plan whose predicted FLOPs are closest to ``target_predicted``."""
    best, best_err = None, math.inf
    seen = set()
    for r in np.linspace(0.0, 1.0, steps + 1):
        widths = tuple(min(max(round_half_up(r * c.full), 1), c.full) for c in model.candidates())
        if widths in seen:
            continue
        seen.add(widths)
        err = abs(predicted_flops(model, widths) - target_predicted)
        if err < best_err:
            best, best_err = float(r), err
    return uniform_plan(model, best)


def extract_slim(supernet, plan, inherit=True, rng=None):
    """Gate-free network keeping the first ``chosen_c`` filters of each prunable conv.

    Consumers of a pruned tensor keep the matching leading input slices, so
    every parameter of the slim network is a leading-prefix slice of its
    supernet counterpart.
    """
    names = supernet.prunable_names
    if len(plan.layers) != len(names):
        raise StructuralError(f"plan has {len(plan.layers)} layers, supernet has {len(names)} prunable layers")
    for lp, name, cands in zip(plan.layers, names, supernet.candidates()):
        if lp.name != name:
            raise StructuralError(f"plan layer {lp.name} does not match supernet layer {name}")
        if not 1 <= lp.chosen_c <= cands.full:
            raise StructuralError(f"layer {name}: chosen width {lp.chosen_c} outside [1, {cands.full}]")
    slim = build_model(slim_spec(supernet, plan.widths), rng=rng if rng is not None else np.random.default_rng(0))
    if not inherit:
        return slim
    src_w = supernet.weights()
    for name, t in slim.weights().items():
        s = src_w[name].values
        if any(a > b for a, b in zip(t.shape, s.shape)):
            raise StructuralError(f"{name}: slim shape {t.shape} exceeds supernet shape {s.shape}")
        t.values = np.ascontiguousarray(s[tuple(slice(0, d) for d in t.shape)])
    src_b = supernet.buffers()
    for name, bn in slim.buffers().items():
        sb = src_b[name]
        c = bn.running_mean.shape[0]
        bn.running_mean = sb.running_mean[:c].copy()
        bn.running_var = sb.running_var[:c].copy()
        bn.initialized = sb.initialized
    return slim


def finetune(slim, data, train_idx, cfg, eval_idx=None, eval_data=None):
    """Train the slim network with the full training schedule; returns metrics."""
    losses = train_plain(slim, data, train_idx, cfg.finetune_epochs, cfg.lr, cfg.finetune_decay_epochs,
                         cfg, "finetune")
    metrics = {"train_loss": losses[-1] if losses else float("nan"), "epochs": cfg.finetune_epochs}
    if eval_data is not None:
        metrics.update({f"eval_{k}": v for k, v in evaluate(slim, eval_data, eval_idx).items()})
    return slim, metrics
