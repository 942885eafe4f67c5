import json
from dataclasses import replace

import numpy as np
import pytest

from dcss.config import ExperimentConfig
from dcss.data import make_synthetic, write_binary_dataset
from dcss.pipeline import load_data, run_pipeline

TINY = ExperimentConfig(warmup_epochs=1, search_epochs=1, finetune_epochs=1, synthetic_train=120,
                        synthetic_test=40, image_size=6, base_channels=4)


def read(d, name):
    return (d / name).read_bytes()


def test_resume_reproduces_uninterrupted_run(tmp_path):
    full = tmp_path / "full"
    assert run_pipeline(replace(TINY, out_dir=str(full))).status == 0
    for stage in ("warmup", "search"):
        d = tmp_path / f"from_{stage}"
        res = run_pipeline(replace(TINY, out_dir=str(d)), resume_from=str(full / f"{stage}.ckpt"))
        assert res.status == 0
        for name in ("slim.ckpt", "plan.json", "history.csv"):
            assert read(d, name) == read(full, name), name
        a, b = (json.loads(read(x, "report.json")) for x in (full, d))
        a.pop("wall_time_s"), b.pop("wall_time_s")
        assert a == b


def test_resume_rejects_a_different_config(tmp_path):
    run_pipeline(replace(TINY, out_dir=str(tmp_path / "a")))
    res = run_pipeline(replace(TINY, lam=2.0, out_dir=str(tmp_path / "b")),
                       resume_from=str(tmp_path / "a" / "warmup.ckpt"))
    assert res.status == 1 and res.failed_stage == "resume"


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # divergence is forced on purpose
def test_failure_names_stage_and_keeps_partial_artifacts(tmp_path):
    cfg = replace(TINY, out_dir=str(tmp_path), lr=1e30, train_baseline=False)
    res = run_pipeline(cfg)
    assert res.status == 1 and res.failed_stage == "warmup"
    doc = json.loads(read(tmp_path, "failure.json"))
    assert doc["stage"] == "warmup" and doc["seed"] == cfg.seed and "Divergence" in doc["error"]


def test_missing_data_file_fails_in_data_stage(tmp_path):
    res = run_pipeline(replace(TINY, out_dir=str(tmp_path), data_path=str(tmp_path / "nope.bin")))
    assert res.status == 1 and res.failed_stage == "data"


def test_binary_data_with_test_fraction(tmp_path):
    ds = make_synthetic("classify", 10, 50, image_size=6, seed=0)
    write_binary_dataset(tmp_path / "d.bin", ds)
    cfg = replace(TINY, data_path=str(tmp_path / "d.bin"), test_fraction=0.2)
    data = load_data(cfg)
    assert len(data.train) == 40 and len(data.test) == 10
    np.testing.assert_allclose(data.train.images.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    assert np.intersect1d(data.train_idx, data.val_idx).size == 0


def test_regression_pipeline_reports_mae(tmp_path):
    cfg = replace(TINY, task="regress", out_dir=str(tmp_path), train_baseline=False)
    res = run_pipeline(cfg)
    assert res.status == 0
    assert "mae" in res.report["slim"] and res.report["baseline"] is None


def test_report_contents(tmp_path):
    res = run_pipeline(replace(TINY, out_dir=str(tmp_path)))
    rep = res.report
    for key in ("baseline", "slim", "predicted_flops", "true_flops", "prune_ratio", "wall_time_s", "config",
                "seed", "config_hash", "normalization"):
        assert key in rep
    assert rep["true_flops"] <= rep["predicted_flops"]
    assert rep["slim"]["true_flops"] == rep["true_flops"]
    assert len(rep["normalization"]["mean"]) == 3


@pytest.mark.slow
def test_larger_lambda_gives_fewer_predicted_flops(tmp_path):
    base = replace(TINY, warmup_epochs=1, search_epochs=3, finetune_epochs=0, train_baseline=False,
                   gate_lr_ratio=1.0, synthetic_train=200)
    med = {}
    for lam in (0.5, 1.5):
        vals = []
        for seed in (0, 1, 2):
            res = run_pipeline(replace(base, lam=lam, seed=seed, out_dir=str(tmp_path / f"{lam}_{seed}")))
            assert res.status == 0
            vals.append(res.report["predicted_flops"])
        med[lam] = np.median(vals)
    assert med[1.5] < med[0.5]
