"""Inference over a test manifest: per-category AUROC, heatmaps and probes."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image
from torch.utils.data import DataLoader

from snl.config import TrainConfig
from snl.data import AnomalyDataset, DatasetManifest, Sample, cutpaste_probe, mixup_probe
from snl.errors import UndefinedMetricError, UsageError
from snl.metrics import BinnedROC, CategoryResult, auroc
from snl.model import TeacherStudentModel
from snl.scoring import anomaly_map, image_score

logger = logging.getLogger(__name__)


@dataclass
class ScoredImages:
    """Per-image scores and maps for a test split, in manifest order."""

    paths: list[str]
    categories: list[str]
    labels: np.ndarray
    scores: np.ndarray
    maps: np.ndarray
    masks: np.ndarray


@torch.no_grad()
def score_batch(model: TeacherStudentModel, images: torch.Tensor, cfg: TrainConfig):
    """Anomaly maps ``(B, S, S)`` and image scores ``(B,)`` for one batch."""
    model.eval()
    pyr_t, pyr_s = model(images)
    amap = anomaly_map(
        pyr_t,
        pyr_s,
        images.shape[-2:],
        smoothing=cfg.smoothing_sigma,
        affinity_mode=cfg.affinity_mode,
        use_affinity=cfg.score_affinity,
    )
    return amap.s_al, image_score(amap)


def score_images(model: TeacherStudentModel, manifest: DatasetManifest, cfg: TrainConfig) -> ScoredImages:
    dataset = AnomalyDataset(manifest, cfg.image_size, on_corrupt=cfg.on_corrupt)
    loader = DataLoader(dataset, batch_size=cfg.batch_size, shuffle=False, num_workers=cfg.num_workers)
    maps, scores, masks, labels, cats = [], [], [], [], []
    for batch in loader:
        s_al, s_ad = score_batch(model, batch["image"], cfg)
        maps.append(s_al.float().numpy())
        scores.append(s_ad.double().numpy())
        masks.append(batch["mask"].numpy().astype(bool))
        labels.append(np.asarray(batch["label"]))
        cats.extend(batch["category"])
    return ScoredImages(
        paths=[e.path for e in dataset.entries],
        categories=cats,
        labels=np.concatenate(labels),
        scores=np.concatenate(scores),
        maps=np.concatenate(maps),
        masks=np.concatenate(masks),
    )


def _check_informative(values: np.ndarray, what: str, category: str) -> None:
    if np.ptp(values) == 0:
        raise UndefinedMetricError(f"{category}: constant {what} scores give no ranking")


def _pixel_auroc(maps: np.ndarray, masks: np.ndarray, method: str) -> float:
    if method == "exact":
        return auroc(maps.ravel(), masks.ravel())
    lo, hi = float(maps.min()), float(maps.max())
    acc = BinnedROC(lo, hi)
    for m, g in zip(maps, masks):
        acc.update(m.ravel(), g.ravel())
    return acc.auroc()


def report(scored: ScoredImages, cfg: TrainConfig) -> list[CategoryResult]:
    """Per-category image and pixel AUROC.

    Categories without anomalous test images are skipped with a warning.
    ``pixel_pool="global"`` pools pixels over all categories instead and
    reports that value on every row.
    """
    rows = []
    cats = np.asarray(scored.categories)
    map_min, map_max = float(scored.maps.min()), float(scored.maps.max())
    global_px = None
    if cfg.pixel_pool == "global":
        _check_informative(scored.maps, "pixel", "all")
        global_px = _pixel_auroc(scored.maps, scored.masks, cfg.pixel_auroc)
    for cat in sorted(set(scored.categories)):
        sel = cats == cat
        labels = scored.labels[sel]
        n_anom = int(labels.sum())
        if n_anom == 0:
            logger.warning("category %s has no anomalous test images; skipped", cat)
            continue
        _check_informative(scored.scores[sel], "image", cat)
        img_auc = auroc(scored.scores[sel], labels)
        if global_px is None:
            _check_informative(scored.maps[sel], "pixel", cat)
            px_auc = _pixel_auroc(scored.maps[sel], scored.masks[sel], cfg.pixel_auroc)
        else:
            px_auc = global_px
        rows.append(CategoryResult(cat, img_auc, px_auc, int(sel.sum()), n_anom, map_min, map_max))
    if not rows:
        raise UndefinedMetricError("no category has anomalous test images")
    return rows


def evaluate(model: TeacherStudentModel, manifest: DatasetManifest, cfg: TrainConfig) -> list[CategoryResult]:
    return report(score_images(model, manifest, cfg), cfg)


def write_heatmaps(scored: ScoredImages, out_dir) -> tuple[float, float]:
    """8-bit grayscale PNGs, min-max normalized over the whole split.

    Returns the normalization bounds.
    """
    out_dir = Path(out_dir)
    lo, hi = float(scored.maps.min()), float(scored.maps.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    for path, cat, m in zip(scored.paths, scored.categories, scored.maps):
        p = Path(path)
        target = out_dir / cat / p.parent.name / f"{p.stem}.png"
        target.parent.mkdir(parents=True, exist_ok=True)
        img = np.clip(np.rint((m - lo) * scale), 0, 255).astype(np.uint8)
        Image.fromarray(img, mode="L").save(target)
    return lo, hi


# --------------------------------------------------------------------------
# cross-class probes


@torch.no_grad()
def _scores_of(model, images: list[torch.Tensor], cfg: TrainConfig) -> np.ndarray:
    out = []
    for i in range(0, len(images), cfg.batch_size):
        _, s = score_batch(model, torch.stack(images[i : i + cfg.batch_size]), cfg)
        out.append(s.double().numpy())
    return np.concatenate(out) if out else np.zeros(0)


def build_probes(
    dataset: AnomalyDataset,
    kind: str,
    pairs: Sequence[tuple[str, str]],
    seed: int = 0,
    mix: float = 0.5,
) -> tuple[list[Sample], list[Sample]]:
    """Normal reference images and probe images for category pairs ``(src, dst)``.

    Each normal test image of ``dst`` yields one probe: a cutpaste of a
    ``src`` patch onto it, or its mixup with a ``src`` image.
    """
    if kind not in ("cutpaste", "mixup"):
        raise UsageError(f"probe must be 'cutpaste' or 'mixup', got {kind!r}")
    if not pairs:
        raise UsageError("probe needs at least one category pair")
    normals: dict[str, list[Sample]] = {}
    for i, e in enumerate(dataset.entries):
        if e.label == 0:
            normals.setdefault(e.category, []).append(dataset.sample(i))
    rng = np.random.default_rng(seed)
    probes = []
    for src, dst in pairs:
        if src == dst:
            raise UsageError(f"probe pair ({src}, {dst}) uses a single category")
        if src not in normals or dst not in normals:
            raise UsageError(f"no normal test images for pair ({src}, {dst})")
        for j, target in enumerate(normals[dst]):
            donor = normals[src][int(rng.integers(len(normals[src])))]
            if kind == "cutpaste":
                probes.append(cutpaste_probe(donor, target, seed=int(rng.integers(2**31))))
            else:
                probes.append(mixup_probe(target, donor, mix))
    dsts = sorted({d for _, d in pairs})
    reference = [s for d in dsts for s in normals[d]]
    return reference, probes


def probe(
    model: TeacherStudentModel,
    manifest: DatasetManifest,
    cfg: TrainConfig,
    kind: str = "cutpaste",
    pairs: Sequence[tuple[str, str]] | None = None,
    seed: int = 0,
    bins: int = 20,
) -> dict:
    """Score normal vs probe images; report AUROC(normal vs probe) and histograms.

    ``pairs=None`` uses every ordered pair of distinct categories.
    """
    if pairs is None:
        cats = manifest.categories
        pairs = [(a, b) for a in cats for b in cats if a != b]
    dataset = AnomalyDataset(manifest, cfg.image_size, on_corrupt=cfg.on_corrupt)
    reference, probes = build_probes(dataset, kind, pairs, seed)
    normal_scores = _scores_of(model, [s.image for s in reference], cfg)
    probe_scores = _scores_of(model, [s.image for s in probes], cfg)
    scores = np.concatenate([normal_scores, probe_scores])
    labels = np.r_[np.zeros(len(normal_scores)), np.ones(len(probe_scores))]
    edges = np.histogram_bin_edges(scores, bins=bins)
    return {
        "probe": kind,
        "pairs": [list(p) for p in pairs],
        "auroc": auroc(scores, labels),
        "n_normal": len(normal_scores),
        "n_probe": len(probe_scores),
        "bin_edges": edges.tolist(),
        "normal_hist": np.histogram(normal_scores, edges)[0].tolist(),
        "probe_hist": np.histogram(probe_scores, edges)[0].tolist(),
        "normal_mean": float(normal_scores.mean()),
        "probe_mean": float(probe_scores.mean()),
    }


def write_probe_report(rep: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(rep, indent=2))
