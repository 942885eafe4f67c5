"""End-to-end experiment: baseline, warm-up, search, extraction, fine-tuning, evaluation.

Every artifact written to the output directory carries the config hash and
seed. Stage checkpoints embed the run state needed to continue (history and
baseline metrics), so resuming from ``warmup.ckpt`` or ``search.ckpt`` gives
the same artifacts as an uninterrupted run.
"""

import contextlib
import csv
import io
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .data import load_binary_dataset, make_synthetic
from .extraction import SlimPlan, extract_slim, finetune, plan_from_model, unpruned_flops
from .models import build_model
from .search import EpochRecord, SearchHistory, evaluate, make_rng, search, split_dataset, train_plain, warmup

log = logging.getLogger(__name__)

STAGES = ("data", "baseline", "warmup", "search", "extract", "finetune", "eval")
RESUMABLE = ("warmup", "search")


class StageFailure(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


class ResumeError(ValueError):
    pass


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------

@dataclass
class RunData:
    train: object           # Dataset used for weights, gates and fine-tuning
    test: object            # held-out Dataset for the final metrics
    train_idx: np.ndarray   # weight split inside ``train``
    val_idx: np.ndarray     # gate split inside ``train``
    mean: np.ndarray
    std: np.ndarray

    @property
    def pool_idx(self):
        return np.arange(len(self.train))


def load_data(cfg):
    """Training pool, test set and the weight/gate split, normalized with
    per-channel statistics of the training pool."""
    if cfg.data_path:
        pool = load_binary_dataset(cfg.data_path)
        if cfg.test_data_path:
            test = load_binary_dataset(cfg.test_data_path)
        else:
            n = len(pool)
            perm = make_rng(cfg.seed, "test-split").permutation(n)
            n_test = max(1, int(round(n * cfg.test_fraction)))
            test, pool = pool.subset(np.sort(perm[:n_test])), pool.subset(np.sort(perm[n_test:]))
    else:
        seed = int(make_rng(cfg.seed, "data").integers(2 ** 32))
        full = make_synthetic(cfg.task, cfg.num_classes, cfg.synthetic_train + cfg.synthetic_test,
                              image_size=cfg.image_size, channels=cfg.in_channels,
                              noise=cfg.synthetic_noise, seed=seed)
        pool = full.subset(np.arange(cfg.synthetic_train))
        test = full.subset(np.arange(cfg.synthetic_train, len(full)))
    if pool.shape != (cfg.in_channels, cfg.image_size, cfg.image_size):
        raise ValueError(f"data shape {pool.shape} does not match config "
                         f"({cfg.in_channels}, {cfg.image_size}, {cfg.image_size})")
    if pool.task == "classify" and pool.num_classes > cfg.num_classes:
        raise ValueError(f"data has {pool.num_classes} classes, config allows {cfg.num_classes}")
    mean, std = pool.channel_stats()
    for ds in (pool, test):
        ds.normalize(mean, std)
        ds.dtype = np.dtype(cfg.dtype).type
    tr, va = split_dataset(len(pool), cfg.val_fraction, make_rng(cfg.seed, "split"))
    return RunData(pool, test, tr, va, mean, std)


# --------------------------------------------------------------------------
# run state carried through checkpoints
# --------------------------------------------------------------------------

def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, (np.floating, np.integer)):
        return _clean(v.item())
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    return v


def history_to_dict(hist):
    return _clean({"layer_names": hist.layer_names, "records": [asdict(r) for r in hist.records],
                   "temperatures": hist.temperatures})


def history_from_dict(d):
    recs = []
    for r in d["records"]:
        r = {k: (float("nan") if v is None else v) for k, v in r.items()}
        recs.append(EpochRecord(**r))
    return SearchHistory(list(d["layer_names"]), recs, list(d["temperatures"]))


@dataclass
class RunState:
    cfg: object
    history: SearchHistory = None
    baseline: dict = None
    model: object = None
    plan: SlimPlan = None
    slim: object = None
    finetune_metrics: dict = None
    slim_metrics: dict = None
    artifacts: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    @property
    def tag(self):
        return {"config_hash": self.cfg.hash(), "seed": self.cfg.seed}

    def checkpoint_meta(self, stage):
        meta = dict(self.tag, stage=stage, baseline=self.baseline)
        if self.history is not None:
            meta["history"] = history_to_dict(self.history)
        return _clean(meta)


def _path(cfg, name):
    return os.path.join(cfg.out_dir, name)


def _write_text(state, key, name, text):
    path = _path(state.cfg, name)
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    state.artifacts[key] = path
    return path


def _dump_json(obj):
    return json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n"


def _save_ckpt(state, key, model, stage):
    path = _path(state.cfg, f"{key}.ckpt")
    save_checkpoint(path, model, state.checkpoint_meta(stage))
    state.artifacts[f"{key}_checkpoint"] = path


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------

def stage_baseline(state, data):
    cfg = state.cfg
    if not cfg.train_baseline:
        state.baseline = None
        return
    spec = cfg.model_spec()
    spec.gated = False
    net = build_model(spec, rng=make_rng(cfg.seed, "baseline/init"))
    scfg = cfg.search_config()
    train_plain(net, data.train, data.pool_idx, cfg.finetune_epochs, cfg.lr, cfg.finetune_decay_epochs,
                scfg, "baseline")
    m = evaluate(net, data.test)
    m["true_flops"] = int(net.true_flops())
    state.baseline = m
    _save_ckpt(state, "baseline", net, "baseline")


def stage_warmup(state, data):
    cfg = state.cfg
    state.model = build_model(cfg.model_spec(), rng=make_rng(cfg.seed, "init"))
    state.history = warmup(state.model, data.train, data.train_idx, cfg.search_config())
    _save_ckpt(state, "warmup", state.model, "warmup")
    write_history(state)


def stage_search(state, data):
    cfg = state.cfg
    state.history, gates = search(state.model, data.train, data.train_idx, data.val_idx,
                                  cfg.search_config(), history=state.history)
    _save_ckpt(state, "search", state.model, "search")
    write_history(state)
    doc = dict(state.tag, tau_final=cfg.tau_end,
               gates={k: v.astype(np.float64).tolist() for k, v in gates.items()})
    _write_text(state, "gates", "gates.json", _dump_json(doc))


def stage_extract(state, data=None):
    state.plan = plan_from_model(state.model, state.cfg.tau_end)
    state.plan.meta.update(state.tag)
    _write_text(state, "plan", "plan.json", state.plan.to_json() + "\n")


def stage_finetune(state, data):
    cfg = state.cfg
    slim = extract_slim(state.model, state.plan, inherit=cfg.finetune_mode == "inherit",
                        rng=make_rng(cfg.seed, "finetune/init"))
    state.slim, state.finetune_metrics = finetune(slim, data.train, data.pool_idx, cfg.search_config())
    _save_ckpt(state, "slim", state.slim, "finetune")


def stage_eval(state, data):
    m = evaluate(state.slim, data.test)
    m["true_flops"] = int(state.slim.true_flops())
    state.slim_metrics = m


STAGE_FUNCS = {"baseline": stage_baseline, "warmup": stage_warmup, "search": stage_search,
               "extract": stage_extract, "finetune": stage_finetune, "eval": stage_eval}


def write_history(state):
    hdr = f"config_hash={state.cfg.hash()}\nseed={state.cfg.seed}"
    _write_text(state, "history", "history.csv", state.history.to_csv(header_comment=hdr))


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

def build_report(state, data, wall_time):
    cfg, plan = state.cfg, state.plan
    last = state.history.records[-1] if state.history and state.history.records else None
    return _clean({
        **state.tag,
        "status": "ok",
        "config": cfg.echo(),
        "normalization": {"mean": data.mean.tolist(), "std": data.std.tolist()},
        "baseline": state.baseline,
        "slim": state.slim_metrics,
        "finetune": state.finetune_metrics,
        "plan": {"widths": plan.widths, "full_widths": [l.full for l in plan.layers],
                 "expected_c": [l.expected_c for l in plan.layers]},
        "predicted_flops": plan.predicted_flops,
        "true_flops": plan.true_flops,
        "unpruned_flops": unpruned_flops(state.model),
        "prune_ratio": plan.prune_ratio,
        "final_expected_mflops": None if last is None else last.expected_mflops,
        "wall_time_s": wall_time,
    })


def flatten(obj, prefix=""):
    """Nested dict/list -> ordered (dotted key, value) pairs."""
    if isinstance(obj, dict):
        for k in sorted(obj):
            yield from flatten(obj[k], f"{prefix}{k}.")
    elif isinstance(obj, list) and any(isinstance(v, (dict, list)) for v in obj):
        for i, v in enumerate(obj):
            yield from flatten(v, f"{prefix}{i}.")
    elif isinstance(obj, list):
        yield prefix[:-1], " ".join(repr(v) if isinstance(v, float) else str(v) for v in obj)
    else:
        yield prefix[:-1], obj


def report_csv(report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["key", "value"])
    for k, v in flatten(report):
        w.writerow([k, "" if v is None else (repr(v) if isinstance(v, float) else v)])
    return buf.getvalue()


def write_report(state, report, name="report"):
    _write_text(state, "report", f"{name}.json", _dump_json(report))
    if state.cfg.report_format == "csv":
        _write_text(state, "report_csv", f"{name}.csv", report_csv(report))


# --------------------------------------------------------------------------
# driver
# --------------------------------------------------------------------------

@dataclass
class PipelineResult:
    status: int
    artifacts: dict
    report: dict = None
    failed_stage: str = None
    error: str = None


@contextlib.contextmanager
def numeric_context(cfg):
    with ad.default_dtype(cfg.dtype), ad.conv_impl(cfg.conv_impl):
        yield


def resume_state(cfg, path, strict=True):
    """RunState positioned after the stage stored in checkpoint ``path``.

    ``strict`` requires the checkpoint to come from the same config and seed;
    the standalone ``search`` command relaxes it so one warm-up can feed
    searches with different cost weights.
    """
    model, meta = load_checkpoint(path)
    stage = meta.get("stage")
    if stage not in RESUMABLE:
        raise ResumeError(f"{path}: cannot resume from stage {stage!r}; expected one of {RESUMABLE}")
    if strict and (meta.get("config_hash") != cfg.hash() or meta.get("seed") != cfg.seed):
        raise ResumeError(f"{path}: checkpoint was written with config {meta.get('config_hash')} "
                          f"seed {meta.get('seed')}, current run is {cfg.hash()} seed {cfg.seed}")
    state = RunState(cfg, model=model, baseline=meta.get("baseline"))
    if "history" in meta:
        state.history = history_from_dict(meta["history"])
    return state, stage


def run_pipeline(cfg, resume_from=None):
    """Run every stage; returns a :class:`PipelineResult` with status 0 on success.

    A failing stage stops the run, leaves earlier artifacts in place, writes
    ``failure.json`` naming the stage, and yields a nonzero status.
    """
    os.makedirs(cfg.out_dir, exist_ok=True)
    stale = _path(cfg, "failure.json")
    if os.path.exists(stale):
        os.remove(stale)
    t0 = time.perf_counter()
    stage = "data"
    state = RunState(cfg)
    try:
        with numeric_context(cfg):
            data = load_data(cfg)
            todo = list(STAGES[1:])
            if resume_from:
                stage = "resume"
                state, done = resume_state(cfg, resume_from)
                todo = todo[todo.index(done) + 1:]
                write_history(state)
            for stage in todo:
                ts = time.perf_counter()
                log.info("stage %s", stage)
                STAGE_FUNCS[stage](state, data)
                state.timings[stage] = time.perf_counter() - ts
            stage = "report"
            wall = {"total": time.perf_counter() - t0, **state.timings}
            report = build_report(state, data, wall)
            write_report(state, report)
    except Exception as e:  # any stage failure is reported, never swallowed silently
        failure = StageFailure(stage, e)
        log.error("%s", failure)
        doc = dict(state.tag, status="failed", stage=stage, error=f"{type(e).__name__}: {e}")
        _write_text(state, "failure", "failure.json", _dump_json(doc))
        return PipelineResult(1, state.artifacts, failed_stage=stage, error=str(failure))
    return PipelineResult(0, state.artifacts, report)
