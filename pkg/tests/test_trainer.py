import csv
import json
import logging
import statistics

import numpy as np
import pytest
import torch

import snl.trainer as trainer
from snl.config import TrainConfig
from snl.data import synth_dataset
from snl.errors import ConfigError, DivergenceError
from snl.evaluate import evaluate
from snl.metrics import mean_row
from snl.model import load_checkpoint
from snl.trainer import CENTERS_GRID, LOSS_GRID, ablate, check_grid, manifests, model_from_config, train


@pytest.fixture(scope="module")
def tiny_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    synth_dataset(root, num_classes=2, per_class=8, seed=0, image_size=64, test_normal=4, test_anomalous=4)
    return root


def tiny_cfg(root, out, **kw):
    base = dict(data_root=str(root), output_dir=str(out), epochs=2, num_centers=5, synth_classes=2)
    base.update(kw)
    return TrainConfig.toy(**base)


def test_training_is_bit_reproducible(tiny_root, tmp_path):
    a, _ = train(tiny_cfg(tiny_root, tmp_path / "a"))
    b, _ = train(tiny_cfg(tiny_root, tmp_path / "b"))
    assert a.history == b.history
    assert a.config_hash == b.config_hash


def test_artifacts_written(tiny_root, tmp_path):
    record, _ = train(tiny_cfg(tiny_root, tmp_path))
    assert (tmp_path / "checkpoint.pt").is_file()
    assert (tmp_path / "config.yaml").is_file()
    events = [json.loads(line) for line in (tmp_path / "runs.jsonl").read_text().splitlines()]
    assert [e["epoch"] for e in events] == [1, 2]
    assert all(e["config_hash"] == record.config_hash for e in events)
    assert set(record.history[0]) >= {"cd", "sd", "intra", "inter", "total", "epoch"}


def test_loss_trends_down(tiny_root, tmp_path):
    record, _ = train(tiny_cfg(tiny_root, tmp_path, epochs=3))
    assert record.history[-1]["total"] < record.history[0]["total"]


def test_disabled_terms_are_exact_zero(tiny_root, tmp_path):
    record, _ = train(tiny_cfg(tiny_root, tmp_path, loss_sd=False, loss_inter=False, epochs=1))
    assert record.history[0]["sd"] == 0.0 and record.history[0]["inter"] == 0.0
    assert record.history[0]["intra"] > 0


def test_disabled_term_has_no_gradient(tiny_root):
    cfg = tiny_cfg(tiny_root, "unused", cram_enabled=False)
    model = model_from_config(cfg).train()
    images = torch.stack([trainer.AnomalyDataset(manifests(cfg)[0], 64)[i]["image"] for i in range(4)])
    pyr_t, pyr_s = model(images)

    def grads(terms):
        model.zero_grad(set_to_none=True)
        trainer.total_loss(pyr_t, pyr_s, trainer.cyclic_pairing(4), terms=terms).total.backward(retain_graph=True)
        return [p.grad.clone() for p in model.student_parameters()]

    for a, b in zip(grads(("cd", "sd")), grads(("cd",))):
        assert not torch.equal(a, b)
    only_cd = grads(("cd",))
    for a, b in zip(only_cd, grads(("cd",))):
        assert torch.equal(a, b)


def test_all_terms_off_is_config_error(tiny_root, tmp_path):
    cfg = tiny_cfg(tiny_root, tmp_path, loss_cd=False, loss_sd=False, loss_intra=False, loss_inter=False)
    with pytest.raises(ConfigError):
        train(cfg)


def test_divergence_dumps_batch(tiny_root, tmp_path, monkeypatch):
    real = trainer.total_loss

    def poisoned(*args, **kwargs):
        bundle = real(*args, **kwargs)
        bundle.total = bundle.total * float("nan")
        return bundle

    monkeypatch.setattr(trainer, "total_loss", poisoned)
    with pytest.raises(DivergenceError) as info:
        train(tiny_cfg(tiny_root, tmp_path))
    dump = torch.load(info.value.dump_path, weights_only=False)
    assert dump["batch"]["image"].shape[1:] == (3, 64, 64)


def test_checkpoint_evaluates_like_memory_model(tiny_root, tmp_path):
    cfg = tiny_cfg(tiny_root, tmp_path)
    _, model = train(cfg)
    test = manifests(cfg)[1]
    restored, archive = load_checkpoint(tmp_path / "checkpoint.pt")
    assert archive["config_hash"] == cfg.hash()
    assert evaluate(model, test, cfg) == evaluate(restored, test, cfg)


def test_untrained_student_is_uninformative(tmp_path):
    # Monte-Carlo band for a random student on the standard synthetic set
    cfg = TrainConfig.toy(data_root=str(tmp_path / "synth"), output_dir=str(tmp_path))
    model = model_from_config(cfg)
    test = manifests(cfg)[1]
    with torch.no_grad():
        model(torch.zeros(2, 3, 64, 64))  # CRAM center init only
    rows = evaluate(model, test, cfg)
    assert 0.35 <= mean_row(rows).image_auroc <= 0.65


def test_grids():
    assert len(LOSS_GRID) == 6
    assert LOSS_GRID[0] == {"loss_sd": False, "loss_intra": False, "loss_inter": False, "cram_enabled": False}
    assert LOSS_GRID[-1] == {}
    assert [c.get("num_centers") for c in CENTERS_GRID] == [None, 25, 50, 75]
    assert CENTERS_GRID[0] == {"cram_enabled": False}
    with pytest.raises(ConfigError):
        check_grid([{"lr": 0.1}])


def test_empty_grid_is_noop(tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        assert ablate(TrainConfig.toy(output_dir=str(tmp_path)), []) == []
    assert "empty ablation grid" in caplog.text
    assert not (tmp_path / "ablation.csv").exists()


def test_ablation_table(tiny_root, tmp_path):
    base = tiny_cfg(tiny_root, tmp_path, epochs=1, loss_intra=False, loss_inter=False)
    records = ablate(base, [{"cram_enabled": False}, {"num_centers": 3}])
    with (tmp_path / "ablation.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(records) == len(rows) == 2
    assert [r["cram"] for r in rows] == ["0", "1"]
    assert [r["num_centers"] for r in rows] == ["0", "3"]
    assert all(0.0 <= float(r["image_auroc"]) <= 1.0 for r in rows)
    assert np.isfinite([r.metrics["pixel_auroc"] for r in records]).all()


# -- desk-scale runs (shared with the acceptance suite) ---------------------


@pytest.mark.slow
def test_toy_run_halves_loss(desk_runs):
    run = desk_runs.get("full", 0)
    assert run["seconds"] < 600
    assert run["history"][-1]["total"] < 0.5 * run["initial"]["total"]


@pytest.mark.slow
def test_full_model_probe_beats_baseline_on_reference_seed(desk_runs):
    assert desk_runs.get("full", 0)["probe"] > desk_runs.get("cd", 0)["probe"]


@pytest.mark.slow
def test_affinity_terms_do_not_hurt_probe(desk_runs):
    full = statistics.median(desk_runs.get("full", s)["probe"] for s in (0, 1, 2))
    ablated = statistics.median(desk_runs.get("no-affinity", s)["probe"] for s in (0, 1, 2))
    assert full >= ablated
