import json
import os

import numpy as np
import pytest

from semidet.cli import main
from semidet.config import ConfigError, ExperimentConfig
from semidet.checkpoint import load_checkpoint
from semidet.data import DatasetManifest


def _tree_bytes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in sorted(files):
            p = os.path.join(dirpath, name)
            with open(p, "rb") as f:
                out[os.path.relpath(p, root)] = f.read()
    return out


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("clids"))
    rc = main([
        "generate", "--out", out, "--n", "14", "--n-test", "4",
        "--seed", "3", "--labeled-frac", "0.25",
    ])
    assert rc == 0
    return out


# ---------------------------------------------------------------- generate


def test_generate_manifest_counts(tmp_path):
    out = str(tmp_path / "ds")
    rc = main(["generate", "--out", out, "--n", "10", "--seed", "7"])
    assert rc == 0
    m = DatasetManifest.load(os.path.join(out, "manifest.json"))
    assert len(m.images) == 10


def test_generate_labeled_fraction(tmp_path):
    out = str(tmp_path / "ds")
    rc = main([
        "generate", "--out", out, "--n", "20", "--seed", "7",
        "--labeled-frac", "0.1",
    ])
    assert rc == 0
    m = DatasetManifest.load(os.path.join(out, "manifest.json"))
    assert len(m.labeled_ids) == 2


def test_generate_rerun_identical_tree(tmp_path):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    args = ["--n", "6", "--n-test", "2", "--seed", "5", "--labeled-frac", "0.5"]
    assert main(["generate", "--out", a] + args) == 0
    assert main(["generate", "--out", b] + args) == 0
    assert _tree_bytes(a) == _tree_bytes(b)


# -------------------------------------------------------------------- train


def _train_args(dataset, out, **extra):
    args = [
        "train", "--dataset", dataset, "--out", out,
        "--iterations", "6", "--burn-in", "2", "--batch-size", "2",
        "--eval-interval", "3", "--warmup-iters", "2", "--seed", "9",
    ]
    for k, v in extra.items():
        flag = "--" + k.replace("_", "-")
        if v is True:
            args.append(flag)
        else:
            args.extend([flag, *map(str, v if isinstance(v, (list, tuple)) else [v])])
    return args


def test_train_supervised_only_equals_lambda_zero(dataset, tmp_path):
    out_a, out_b = str(tmp_path / "a"), str(tmp_path / "b")
    assert main(_train_args(dataset, out_a, supervised_only=True)) == 0
    assert main(_train_args(dataset, out_b, **{"lambda": 0})) == 0
    pa, _ = load_checkpoint(os.path.join(out_a, "student_final.ckpt"))
    pb, _ = load_checkpoint(os.path.join(out_b, "student_final.ckpt"))
    for (na, va), (nb, vb) in zip(pa, pb):
        assert na == nb and va.tobytes() == vb.tobytes()


def test_train_sigma_sweep_emits_metric_files(dataset, tmp_path):
    out = str(tmp_path / "sweep")
    rc = main(_train_args(dataset, out, sigma=[0.4, 0.5, 0.55, 0.6]))
    assert rc == 0
    for s in ("0.4", "0.5", "0.55", "0.6"):
        assert os.path.exists(os.path.join(out, f"sigma{s}", "metrics.csv"))


def test_train_mu_sweep_emits_metric_files(dataset, tmp_path):
    out = str(tmp_path / "musweep")
    rc = main(_train_args(dataset, out, mu=[0.04, 0.05, 0.06]))
    assert rc == 0
    for m in ("0.04", "0.05", "0.06"):
        assert os.path.exists(os.path.join(out, f"mu{m}", "metrics.csv"))


def test_train_ablation_flags_accepted(dataset, tmp_path):
    out = str(tmp_path / "abl")
    rc = main(_train_args(dataset, out, no_adso=True, no_fusion_box=True,
                          no_dex=True))
    assert rc == 0
    cfg = ExperimentConfig.load(os.path.join(out, "config.txt"))
    assert cfg.adso is False and cfg.fusion_box is False and cfg.dex is False


def test_train_rerun_byte_identical_csv(dataset, tmp_path):
    out_a, out_b = str(tmp_path / "d1"), str(tmp_path / "d2")
    assert main(_train_args(dataset, out_a)) == 0
    assert main(_train_args(dataset, out_b)) == 0
    with open(os.path.join(out_a, "metrics.csv"), "rb") as f:
        a = f.read()
    with open(os.path.join(out_b, "metrics.csv"), "rb") as f:
        b = f.read()
    assert a == b


def test_train_invalid_config_fails_before_compute(dataset, tmp_path, capsys):
    rc = main(_train_args(dataset, str(tmp_path / "bad"), sigma=[1.5]))
    assert rc != 0
    err = capsys.readouterr().err
    assert err.startswith("error: config:")
    assert not os.path.exists(tmp_path / "bad")


def test_train_missing_dataset_fails(tmp_path, capsys):
    rc = main(_train_args(str(tmp_path / "nope"), str(tmp_path / "run")))
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_config_file_with_cli_override(dataset, tmp_path):
    cfg_path = tmp_path / "exp.cfg"
    base = ExperimentConfig(dataset_dir=dataset, out_dir=str(tmp_path / "file_run"),
                            iterations=4, burn_in=1, batch_size=2, eval_interval=4,
                            warmup_iters=1, seed=2, sigma=0.45)
    base.save(cfg_path)
    rc = main(["train", "--config", str(cfg_path), "--sigma", "0.6"])
    assert rc == 0
    echoed = ExperimentConfig.load(tmp_path / "file_run" / "config.txt")
    assert echoed.sigma == 0.6  # CLI wins
    assert echoed.iterations == 4  # file value preserved


def test_env_var_output_root(dataset, tmp_path, monkeypatch):
    monkeypatch.setenv("SEMIDET_OUT_ROOT", str(tmp_path / "root"))
    rc = main(_train_args(dataset, "relrun"))
    assert rc == 0
    assert os.path.exists(tmp_path / "root" / "relrun" / "metrics.csv")


# --------------------------------------------------------------------- eval


def test_eval_same_checkpoint_twice_identical(dataset, tmp_path):
    out = str(tmp_path / "run")
    assert main(_train_args(dataset, out)) == 0
    ckpt = os.path.join(out, "teacher_final.ckpt")
    r1, r2 = str(tmp_path / "r1.json"), str(tmp_path / "r2.json")
    assert main(["eval", "--checkpoint", ckpt, "--dataset", dataset, "--out", r1]) == 0
    assert main(["eval", "--checkpoint", ckpt, "--dataset", dataset, "--out", r2]) == 0
    with open(r1, "rb") as f:
        a = f.read()
    with open(r2, "rb") as f:
        b = f.read()
    assert a == b


def test_eval_single_iou_reports_ap50_alone(dataset, tmp_path):
    out = str(tmp_path / "run2")
    assert main(_train_args(dataset, out)) == 0
    ckpt = os.path.join(out, "student_final.ckpt")
    rpt = str(tmp_path / "single.json")
    assert main(["eval", "--checkpoint", ckpt, "--dataset", dataset,
                 "--out", rpt, "--iou", "0.5"]) == 0
    with open(rpt) as f:
        d = json.load(f)
    assert d["iou_thresholds"] == [0.5]
    assert list(d["ap_per_threshold"]) == ["0.50"]
    assert d["ap50"] is not None and d["ap75"] is None


def test_eval_report_schema(dataset, tmp_path):
    out = str(tmp_path / "run3")
    assert main(_train_args(dataset, out)) == 0
    rpt = str(tmp_path / "full.json")
    assert main(["eval", "--checkpoint", os.path.join(out, "teacher_final.ckpt"),
                 "--dataset", dataset, "--out", rpt]) == 0
    with open(rpt) as f:
        d = json.load(f)
    assert d["version"] == 1
    assert isinstance(d["iou_thresholds"], list) and len(d["iou_thresholds"]) == 10
    assert isinstance(d["ap_per_threshold"], dict)
    assert set(d["ap_per_threshold"]) == {f"{t:.2f}" for t in np.arange(0.5, 1.0, 0.05).round(2)}
    for v in d["ap_per_threshold"].values():
        assert 0.0 <= v <= 1.0
    assert isinstance(d["map"], float)
    assert all(len(c) == 101 for c in d["pr_curves"].values())
    assert isinstance(d["num_images"], int) and isinstance(d["num_gt"], int)


def test_eval_missing_checkpoint_errors(dataset, tmp_path, capsys):
    rc = main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt"),
               "--dataset", dataset, "--out", str(tmp_path / "r.json")])
    assert rc == 1
    assert capsys.readouterr().err.startswith("error: checkpoint:")


# ------------------------------------------------------------------- report


def test_report_renders_figures(dataset, tmp_path):
    out = str(tmp_path / "runrep")
    assert main(_train_args(dataset, out)) == 0
    rc = main(["report", "--run", out])
    assert rc == 0
    for name in ("loss_curves.png", "ap_curves.png", "pseudo_stats.png",
                 "pr_curves.png"):
        assert os.path.exists(os.path.join(out, name)), name


def test_report_missing_run_errors(tmp_path, capsys):
    rc = main(["report", "--run", str(tmp_path / "absent")])
    assert rc == 1
    assert capsys.readouterr().err.startswith("error: report:")


# ------------------------------------------------------------------- config


def test_config_roundtrip_lossless():
    cfg = ExperimentConfig(sigma=0.55, mu=0.04, anchor_scales=(8.0, 16.0),
                           adso=False, milestones=(0.6, 0.8), seed=123)
    again = ExperimentConfig.from_text(cfg.to_text())
    assert again == cfg
    assert ExperimentConfig.from_text(again.to_text()) == again


def test_config_validation_errors():
    with pytest.raises(ConfigError):
        ExperimentConfig(sigma=0.0).validate()
    with pytest.raises(ConfigError):
        ExperimentConfig(mu=-1.0).validate()
    with pytest.raises(ConfigError):
        ExperimentConfig(r_i=1.0).validate()
    with pytest.raises(ConfigError):
        ExperimentConfig(precision="float16").validate()
    with pytest.raises(ConfigError):
        ExperimentConfig(ema_alpha=1.5).validate()


def test_config_rejects_unknown_key():
    with pytest.raises(ConfigError, match="unknown key"):
        ExperimentConfig.from_text("bogus = 1\n")


def test_config_rejects_bad_boolean():
    with pytest.raises(ConfigError, match="boolean"):
        ExperimentConfig.from_text("adso = maybe\n")
