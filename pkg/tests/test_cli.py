import json

import pytest

from snl.cli import build_parser, load_grid, main
from snl.data import synth_dataset
from snl.errors import ConfigError


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    root = base / "data"
    synth_dataset(root, num_classes=2, per_class=8, seed=0, image_size=64, test_normal=4, test_anomalous=4)
    out = base / "run"
    code = main(
        ["--log-level", "WARNING", "train", "--toy", "--data-root", str(root), "--output-dir", str(out),
         "--epochs", "1", "--num-centers", "5", "--no-loss-inter"]
    )
    assert code == 0
    return root, out


def test_flags_mirror_config_fields():
    args = build_parser().parse_args(["train", "--lambda2", "0.5", "--no-cram-enabled", "--topology", "fd"])
    assert args.lambda2 == 0.5 and args.cram_enabled is False and args.topology == "fd"
    assert args.lr is None  # untouched fields fall through to file/env/defaults


def test_train_outputs(trained):
    _, out = trained
    assert (out / "checkpoint.pt").is_file()
    assert (out / "runs.jsonl").is_file()


def test_eval_is_deterministic(trained, tmp_path, capsys):
    _, out = trained
    ck = str(out / "checkpoint.pt")
    assert main(["eval", "--checkpoint", ck, "--out", str(tmp_path / "a.csv"), "--heatmaps", str(tmp_path / "h")]) == 0
    assert main(["eval", "--checkpoint", ck, "--out", str(tmp_path / "b.csv")]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert [line.split(",")[0] for line in lines] == ["category", "class_00", "class_01", "mean"]
    assert len(list((tmp_path / "h").rglob("*.png"))) == 16
    summary = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert summary["categories"] == 2


def test_eval_topology_mismatch(trained):
    _, out = trained
    assert main(["eval", "--checkpoint", str(out / "checkpoint.pt"), "--topology", "fd"]) == 2
    assert main(["eval", "--checkpoint", str(out / "checkpoint.pt"), "--backbone", "wideresnet50"]) == 2


def test_probe_report(trained, tmp_path):
    _, out = trained
    report = tmp_path / "probe.json"
    code = main(["probe", "--checkpoint", str(out / "checkpoint.pt"), "--pair", "class_00:class_01", "--out", str(report)])
    assert code == 0
    rep = json.loads(report.read_text())
    assert rep["pairs"] == [["class_00", "class_01"]]
    assert sum(rep["normal_hist"]) == rep["n_normal"] == 4
    assert sum(rep["probe_hist"]) == rep["n_probe"] == 4
    assert 0.0 <= rep["auroc"] <= 1.0


def test_probe_same_category_rejected(trained):
    _, out = trained
    assert main(["probe", "--checkpoint", str(out / "checkpoint.pt"), "--pair", "class_00:class_00"]) == 2


def test_heatmaps(trained, tmp_path):
    _, out = trained
    assert main(["heatmaps", "--checkpoint", str(out / "checkpoint.pt"), "--out", str(tmp_path)]) == 0
    assert len(list(tmp_path.rglob("*.png"))) == 16


def test_config_error_exit_code(tmp_path):
    assert main(["train", "--toy", "--output-dir", str(tmp_path), "--no-loss-cd", "--no-loss-sd",
                 "--no-loss-intra", "--no-loss-inter"]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("unknown: 1\n")
    assert main(["train", "--config", str(bad)]) == 2


def test_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("SNL_BATCH_SIZE", "1")
    assert main(["train", "--toy", "--output-dir", str(tmp_path)]) == 2  # inter-affinity needs batch >= 2


def test_divergence_exit_code(trained, tmp_path, monkeypatch):
    import snl.trainer as trainer

    real = trainer.total_loss

    def poisoned(*args, **kwargs):
        bundle = real(*args, **kwargs)
        bundle.total = bundle.total * float("nan")
        return bundle

    monkeypatch.setattr(trainer, "total_loss", poisoned)
    root, _ = trained
    assert main(["train", "--toy", "--data-root", str(root), "--output-dir", str(tmp_path), "--epochs", "1"]) == 3


def test_grid_sources(tmp_path):
    assert len(load_grid("losses")) == 6 and len(load_grid("centers")) == 4
    path = tmp_path / "g.yaml"
    path.write_text("- {num_centers: 10}\n- {cram_enabled: false}\n")
    assert load_grid(str(path)) == [{"num_centers": 10}, {"cram_enabled": False}]
    with pytest.raises(ConfigError):
        load_grid("nonexistent")


def test_ablate_empty_grid(tmp_path):
    grid = tmp_path / "g.json"
    grid.write_text("[]")
    assert main(["ablate", "--toy", "--output-dir", str(tmp_path), "--grid", str(grid)]) == 0


def test_convert_visa_missing_split(tmp_path):
    assert main(["convert-visa", str(tmp_path), str(tmp_path / "out")]) == 2
