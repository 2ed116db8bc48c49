"""Training loop, run records and the ablation grid."""

from __future__ import annotations

import csv
import json
import logging
import random
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
from torch.utils.data import DataLoader

from snl.config import TrainConfig, dump_config
from snl.data import AnomalyDataset, DatasetManifest, load_manifest, synth_dataset
from snl.errors import ConfigError, DivergenceError
from snl.evaluate import evaluate
from snl.losses import cyclic_pairing, total_loss
from snl.metrics import CategoryResult, mean_row, write_metrics_csv
from snl.model import TeacherStudentModel, build_model, save_checkpoint

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.pt"


@dataclass
class RunRecord:
    config_hash: str
    history: list[dict[str, float]] = field(default_factory=list)
    initial: dict[str, float] | None = None  # losses of the first step, before any update
    metrics: dict[str, Any] | None = None
    checkpoint: str = ""
    wall_clock: float = 0.0
    config: dict[str, Any] = field(default_factory=dict)


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def dataset_root(cfg: TrainConfig) -> Path:
    """Resolve the dataset root, generating the procedural dataset if needed."""
    if cfg.layout == "synthetic":
        root = Path(cfg.data_root) if cfg.data_root else Path(cfg.output_dir) / "synthetic"
        if not root.exists():
            synth_dataset(
                root,
                num_classes=cfg.synth_classes,
                per_class=cfg.synth_per_class,
                seed=cfg.synth_seed,
                image_size=cfg.image_size,
                test_normal=cfg.synth_test_normal,
                test_anomalous=cfg.synth_test_anomalous,
            )
        return root
    return Path(cfg.data_root)


def manifests(cfg: TrainConfig) -> tuple[DatasetManifest, DatasetManifest]:
    root = dataset_root(cfg)
    return load_manifest(root, cfg.layout, "train"), load_manifest(root, cfg.layout, "test")


def model_from_config(cfg: TrainConfig) -> TeacherStudentModel:
    return build_model(
        topology=cfg.topology,
        backbone=cfg.backbone,
        input_size=cfg.image_size,
        num_centers=cfg.num_centers,
        cram_enabled=cfg.cram_enabled,
        seed=cfg.seed,
        teacher_seed=cfg.teacher_seed,
        pretrained=cfg.pretrained,
    )


def _worker_init(worker_id: int) -> None:
    # per-worker stream derived from the loader's base seed
    seed = torch.initial_seed() % 2**32
    np.random.seed(seed)
    random.seed(seed)


def train_loader(manifest: DatasetManifest, cfg: TrainConfig) -> DataLoader:
    dataset = AnomalyDataset(manifest, cfg.image_size, on_corrupt=cfg.on_corrupt, cache=cfg.num_workers == 0)
    generator = torch.Generator().manual_seed(cfg.seed)
    return DataLoader(
        dataset,
        batch_size=cfg.batch_size,
        shuffle=True,
        drop_last=len(dataset) >= cfg.batch_size,
        num_workers=cfg.num_workers,
        generator=generator,
        worker_init_fn=_worker_init,
    )


def _dump_batch(out_dir: Path, epoch: int, step: int, batch: dict, bundle) -> Path:
    path = out_dir / f"divergence_e{epoch}_s{step}.pt"
    torch.save({"batch": batch, "losses": {k: float(v) for k, v in bundle.as_dict().items()}}, path)
    return path


def train(
    cfg: TrainConfig,
    model: TeacherStudentModel | None = None,
    train_manifest: DatasetManifest | None = None,
) -> tuple[RunRecord, TeacherStudentModel]:
    """Optimize student (and CRAM) parameters against the structural objective.

    Writes ``checkpoint.pt`` after every epoch and appends per-epoch records to
    ``runs.jsonl`` in ``cfg.output_dir``.

    Raises:
        ConfigError: invalid configuration.
        DivergenceError: a non-finite loss; the offending batch is saved.
    """
    cfg.validate()
    t0 = time.perf_counter()
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out_dir / "config.yaml")
    seed_everything(cfg.seed)

    if train_manifest is None:
        train_manifest = manifests(cfg)[0]
    if model is None:
        model = model_from_config(cfg)
    loader = train_loader(train_manifest, cfg)
    optimizer = torch.optim.Adam(model.student_parameters(), lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2))

    record = RunRecord(config_hash=cfg.hash(), config=cfg.to_dict())
    ckpt = out_dir / CHECKPOINT_NAME
    log_path = out_dir / "runs.jsonl"
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        sums: dict[str, float] = {}
        n_batches = 0
        for step, batch in enumerate(loader):
            images = batch["image"]
            pyr_t, pyr_s = model(images)
            pairing = cyclic_pairing(images.shape[0]) if images.shape[0] > 1 else None
            bundle = total_loss(
                pyr_t,
                pyr_s,
                pairing,
                cfg.lambda1,
                cfg.lambda2,
                cfg.lambda3,
                terms=cfg.loss_terms,
                affinity_mode=cfg.affinity_mode,
                affinity_normalize=cfg.affinity_normalize,
            )
            if not torch.isfinite(bundle.total):
                dump = _dump_batch(out_dir, epoch, step, batch, bundle)
                raise DivergenceError(f"non-finite loss at epoch {epoch} step {step}; batch saved to {dump}", dump)
            if record.initial is None:
                record.initial = bundle.as_dict()
            optimizer.zero_grad(set_to_none=True)
            bundle.total.backward()
            optimizer.step()
            for k, v in bundle.as_dict().items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        means = {k: v / max(n_batches, 1) for k, v in sums.items()}
        means["epoch"] = epoch
        record.history.append(means)
        save_checkpoint(ckpt, model, record.config_hash, extra={"config": cfg.to_dict(), "epoch": epoch})
        with log_path.open("a") as fh:
            fh.write(json.dumps({"event": "epoch", "config_hash": record.config_hash, **means}) + "\n")
        logger.info("epoch %d: %s", epoch, " ".join(f"{k}={v:.4g}" for k, v in means.items() if k != "epoch"))

    record.checkpoint = str(ckpt)
    record.wall_clock = time.perf_counter() - t0
    return record, model


def metrics_dict(rows: Sequence[CategoryResult]) -> dict[str, Any]:
    mean = mean_row(list(rows))
    return {
        "image_auroc": mean.image_auroc,
        "pixel_auroc": mean.pixel_auroc,
        "per_category": {r.category: [r.image_auroc, r.pixel_auroc] for r in rows},
    }


def run_experiment(cfg: TrainConfig) -> tuple[RunRecord, TeacherStudentModel]:
    """Train, evaluate on the test split, write ``metrics.csv`` and the run record."""
    train_manifest, test_manifest = manifests(cfg)
    record, model = train(cfg, train_manifest=train_manifest)
    t0 = time.perf_counter()
    rows = evaluate(model, test_manifest, cfg)
    write_metrics_csv(Path(cfg.output_dir) / "metrics.csv", rows)
    record.metrics = metrics_dict(rows)
    record.wall_clock += time.perf_counter() - t0
    with (Path(cfg.output_dir) / "runs.jsonl").open("a") as fh:
        fh.write(json.dumps({"event": "run", **asdict(record)}) + "\n")
    return record, model


# --------------------------------------------------------------------------
# ablations

ABLATION_KEYS = {"loss_cd", "loss_sd", "loss_intra", "loss_inter", "cram_enabled", "num_centers"}

LOSS_GRID = [
    {"loss_sd": False, "loss_intra": False, "loss_inter": False, "cram_enabled": False},
    {"loss_intra": False, "loss_inter": False, "cram_enabled": False},
    {"loss_inter": False, "cram_enabled": False},
    {"cram_enabled": False},
    {"loss_intra": False, "loss_inter": False},
    {},
]

CENTERS_GRID = [
    {"cram_enabled": False},
    {"num_centers": 25},
    {"num_centers": 50},
    {"num_centers": 75},
]

GRIDS = {"losses": LOSS_GRID, "centers": CENTERS_GRID}

ABLATION_COLUMNS = ["cd", "sd", "intra", "inter", "cram", "num_centers", "image_auroc", "pixel_auroc", "config_hash"]


def check_grid(grid: Sequence[dict]) -> None:
    for cell in grid:
        bad = set(cell) - ABLATION_KEYS
        if bad:
            raise ConfigError(f"ablation grid may only vary {sorted(ABLATION_KEYS)}, got {sorted(bad)}")


def ablate(base: TrainConfig, grid: Sequence[dict], out_csv=None) -> list[RunRecord]:
    """One training + evaluation run per grid cell; writes a table of mean AUROCs."""
    if not grid:
        logger.warning("empty ablation grid; nothing to run")
        return []
    check_grid(grid)
    records, rows = [], []
    for i, cell in enumerate(grid):
        cfg = base.replace(**cell, output_dir=str(Path(base.output_dir) / f"cell_{i:02d}")).validate()
        if cfg.layout == "synthetic" and not cfg.data_root:
            cfg = cfg.replace(data_root=str(Path(base.output_dir) / "synthetic"))
        record, _ = run_experiment(cfg)
        records.append(record)
        rows.append(
            [
                int(cfg.loss_cd),
                int(cfg.loss_sd),
                int(cfg.loss_intra),
                int(cfg.loss_inter),
                int(cfg.cram_enabled),
                cfg.num_centers if cfg.cram_enabled else 0,
                record.metrics["image_auroc"],
                record.metrics["pixel_auroc"],
                record.config_hash,
            ]
        )
    out_csv = Path(out_csv) if out_csv else Path(base.output_dir) / "ablation.csv"
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with out_csv.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ABLATION_COLUMNS)
        writer.writerows(rows)
    return records

