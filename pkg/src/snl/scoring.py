"""Pixel- and image-level anomaly scores from teacher/student discrepancies."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torchvision.transforms.functional import gaussian_blur

from snl.errors import UsageError
from snl.losses import _check_pyramids, affinity_difference, affinity_matrix, channel_distance_map


@dataclass
class AnomalyMap:
    """Batched anomaly maps, each ``(B, H, W)``; ``s_al == m_fea + m_aff``."""

    s_al: torch.Tensor
    m_fea: torch.Tensor
    m_aff: torch.Tensor


def _check_out_hw(pyr: Sequence[torch.Tensor], out_hw: tuple[int, int]) -> tuple[int, int]:
    out_h, out_w = int(out_hw[0]), int(out_hw[1])
    for k, f in enumerate(pyr):
        h, w = f.shape[-2:]
        if out_h < h or out_w < w:
            raise UsageError(f"output size {(out_h, out_w)} is smaller than block {k} resolution {(h, w)}")
    return out_h, out_w


def upsample(m: torch.Tensor, out_hw: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of ``(B, h, w)`` maps to ``out_hw`` (corners not aligned)."""
    if tuple(m.shape[-2:]) == tuple(out_hw):
        return m
    return F.interpolate(m[:, None], size=out_hw, mode="bilinear", align_corners=False)[:, 0]


def feature_anomaly_map(pyr_t, pyr_s, out_hw) -> torch.Tensor:
    """Sum over blocks of the upsampled cosine-distance maps."""
    _check_pyramids(pyr_t, pyr_s)
    out_hw = _check_out_hw(pyr_t, out_hw)
    return sum(upsample(channel_distance_map(t, s), out_hw) for t, s in zip(pyr_t, pyr_s))


def affinity_error(a_s: torch.Tensor, a_t: torch.Tensor, mode: str = "abs") -> torch.Tensor:
    if a_s.shape != a_t.shape:
        raise UsageError(f"affinity shape mismatch {tuple(a_s.shape)} vs {tuple(a_t.shape)}")
    return affinity_difference(a_s, a_t, mode)


def affinity_anomaly_map(pyr_t, pyr_s, out_hw, mode: str = "abs") -> torch.Tensor:
    """Per-location mean affinity error, reshaped per block, upsampled and summed."""
    _check_pyramids(pyr_t, pyr_s)
    out_hw = _check_out_hw(pyr_t, out_hw)
    total = 0.0
    for t, s in zip(pyr_t, pyr_s):
        b, _, h, w = t.shape
        err = affinity_error(affinity_matrix(s), affinity_matrix(t), mode)
        total = total + upsample(err.mean(dim=-1).view(b, h, w), out_hw)
    return total


def gaussian_smooth(m: torch.Tensor, sigma: float | None) -> torch.Tensor:
    """Gaussian blur of ``(B, H, W)`` maps; ``sigma`` of None or 0 is a no-op."""
    if not sigma:
        return m
    radius = int(4.0 * sigma + 0.5)
    return gaussian_blur(m[:, None], kernel_size=2 * radius + 1, sigma=float(sigma))[:, 0]


def anomaly_map(
    pyr_t,
    pyr_s,
    out_hw,
    smoothing: float | None = None,
    affinity_mode: str = "abs",
    use_affinity: bool = True,
) -> AnomalyMap:
    """Combined feature-distance and affinity-error anomaly map.

    Smoothing is linear, so it is applied to both components and the sum stays
    exact.  ``use_affinity=False`` gives the plain feature-distance score.
    """
    m_fea = gaussian_smooth(feature_anomaly_map(pyr_t, pyr_s, out_hw), smoothing)
    if use_affinity:
        m_aff = gaussian_smooth(affinity_anomaly_map(pyr_t, pyr_s, out_hw, affinity_mode), smoothing)
    else:
        m_aff = torch.zeros_like(m_fea)
    return AnomalyMap(s_al=m_fea + m_aff, m_fea=m_fea, m_aff=m_aff)


def image_score(amap: AnomalyMap | torch.Tensor) -> torch.Tensor:
    """Maximum of each map; returns ``(B,)``."""
    s = amap.s_al if isinstance(amap, AnomalyMap) else amap
    if s.numel() == 0:
        raise UsageError("empty anomaly map")
    return s.flatten(-2).amax(dim=-1)

