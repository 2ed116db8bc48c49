"""Structural distillation losses between teacher and student feature pyramids.

All kernels take batched feature tensors of shape ``(B, D, H, W)`` (a pyramid is
a sequence of those, one per block), are differentiable, and reduce over the
batch with a mean so that the loss weights do not depend on the batch size.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from snl.errors import UsageError

logger = logging.getLogger(__name__)

EPS = 1e-8

LOSS_TERMS = ("cd", "sd", "intra", "inter")

Pyramid = Sequence[torch.Tensor]


def _check_pyramids(pyr_t: Pyramid, pyr_s: Pyramid) -> None:
    if len(pyr_t) != len(pyr_s):
        raise UsageError(f"pyramid length mismatch: teacher {len(pyr_t)} vs student {len(pyr_s)}")
    if len(pyr_t) == 0:
        raise UsageError("empty feature pyramid")
    for k, (t, s) in enumerate(zip(pyr_t, pyr_s)):
        if t.shape != s.shape:
            raise UsageError(f"block {k}: teacher shape {tuple(t.shape)} != student shape {tuple(s.shape)}")


def channel_distance_map(f_t: torch.Tensor, f_s: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Cosine distance ``1 - cos`` along the channel axis.

    Args:
        f_t: teacher features ``(..., D, H, W)``.
        f_s: student features of the same shape.
        eps: floor on the product of norms.

    Returns:
        Distance map of shape ``(..., H, W)`` with values in ``[0, 2]``.
    """
    if f_t.shape != f_s.shape:
        raise UsageError(f"shape mismatch {tuple(f_t.shape)} vs {tuple(f_s.shape)}")
    dot = (f_t * f_s).sum(dim=-3)
    norms = f_t.norm(dim=-3) * f_s.norm(dim=-3)
    return 1.0 - dot / norms.clamp_min(eps)


def channel_distillation_loss(pyr_t: Pyramid, pyr_s: Pyramid) -> torch.Tensor:
    _check_pyramids(pyr_t, pyr_s)
    per_sample = sum(channel_distance_map(t, s).flatten(1).mean(dim=1) for t, s in zip(pyr_t, pyr_s))
    return per_sample.mean()


def spatial_softmax(f: torch.Tensor) -> torch.Tensor:
    """Softmax of each channel over all of its spatial locations."""
    flat = f.flatten(-2)
    return torch.softmax(flat, dim=-1).view_as(f)


def _spatial_log_softmax(f: torch.Tensor) -> torch.Tensor:
    return torch.log_softmax(f.flatten(-2), dim=-1)


def spatial_distillation_loss(pyr_t: Pyramid, pyr_s: Pyramid) -> torch.Tensor:
    """KL(teacher || student) of the per-channel spatial distributions.

    Summed over channels and blocks, averaged over the batch.
    """
    _check_pyramids(pyr_t, pyr_s)
    total = 0.0
    for t, s in zip(pyr_t, pyr_s):
        log_p = _spatial_log_softmax(t)
        log_q = _spatial_log_softmax(s)
        kl = (log_p.exp() * (log_p - log_q)).sum(dim=-1)  # (B, D)
        total = total + kl.sum(dim=1)
    return total.mean()


def _locations(f: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    # (B, D, H, W) -> (B, D, HW) with unit-norm columns
    return F.normalize(f.flatten(-2), p=2, dim=-2, eps=eps)


def affinity_matrix(f: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Gram matrix of L2-normalized location vectors.

    Args:
        f: features ``(..., D, H, W)``.

    Returns:
        ``(..., H*W, H*W)`` matrix; entry ``(i, j)`` is the cosine similarity
        between locations ``i`` and ``j`` (row-major flattening of ``(H, W)``).
    """
    r = _locations(f, eps)
    return r.transpose(-1, -2) @ r


def cross_affinity_matrix(f: torch.Tensor, f_partner: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    return _locations(f, eps).transpose(-1, -2) @ _locations(f_partner, eps)


def affinity_difference(a_s: torch.Tensor, a_t: torch.Tensor, mode: str = "abs") -> torch.Tensor:
    """Entrywise discrepancy between two affinity matrices.

    ``"abs"`` is the magnitude of each scalar difference; ``"squared"`` its square.
    """
    diff = a_s - a_t
    if mode == "abs":
        return diff.abs()
    if mode == "squared":
        return diff.square()
    raise UsageError(f"unknown affinity difference mode {mode!r}")


def _reduce_affinity(err: torch.Tensor, normalize: bool) -> torch.Tensor:
    # err: (B, HW, HW) -> (B,)
    return err.mean(dim=(-2, -1)) if normalize else err.sum(dim=(-2, -1))


def intra_affinity_loss(
    pyr_t: Pyramid,
    pyr_s: Pyramid,
    mode: str = "abs",
    normalize: bool = False,
) -> torch.Tensor:
    """Discrepancy of within-sample affinity matrices, summed over blocks.

    Args:
        mode: ``"abs"`` or ``"squared"`` entrywise difference.
        normalize: divide each block's sum by ``(H*W)**2``.
    """
    _check_pyramids(pyr_t, pyr_s)
    total = 0.0
    for t, s in zip(pyr_t, pyr_s):
        err = affinity_difference(affinity_matrix(s), affinity_matrix(t), mode)
        total = total + _reduce_affinity(err, normalize)
    return total.mean()


def cyclic_pairing(batch_size: int, device=None) -> torch.Tensor:
    """Partner of sample ``i`` is sample ``(i + 1) % batch_size``."""
    return torch.roll(torch.arange(batch_size, device=device), -1)


def check_pairing(pairing: torch.Tensor, batch_size: int) -> torch.Tensor:
    pairing = torch.as_tensor(pairing, dtype=torch.long)
    if pairing.shape != (batch_size,):
        raise UsageError(f"pairing must have shape ({batch_size},), got {tuple(pairing.shape)}")
    if ((pairing < 0) | (pairing >= batch_size)).any():
        raise UsageError("pairing index out of range")
    if (pairing == torch.arange(batch_size)).any():
        raise UsageError("pairing maps a sample to itself; partners must be distinct")
    return pairing


def inter_affinity_loss(
    pyr_t: Pyramid,
    pyr_s: Pyramid,
    pairing: torch.Tensor | None = None,
    mode: str = "abs",
    normalize: bool = False,
) -> torch.Tensor:
    """Discrepancy of cross-sample affinity matrices.

    Each sample ``i`` is compared against ``pairing[i]`` in both networks.
    A cyclic shift of the batch is used when ``pairing`` is None.
    """
    _check_pyramids(pyr_t, pyr_s)
    batch = pyr_s[0].shape[0]
    if batch < 2:
        logger.warning("inter-affinity loss needs a batch of at least 2; returning 0")
        return pyr_s[0].sum() * 0.0
    if pairing is None:
        pairing = cyclic_pairing(batch)
    pairing = check_pairing(pairing, batch).to(pyr_s[0].device)

    total = 0.0
    for t, s in zip(pyr_t, pyr_s):
        a_s = cross_affinity_matrix(s, s[pairing])
        a_t = cross_affinity_matrix(t, t[pairing])
        total = total + _reduce_affinity(affinity_difference(a_s, a_t, mode), normalize)
    return total.mean()


@dataclass
class LossBundle:
    """Loss components and their weighted total.

    ``total == cd + lambda1 * sd + lambda2 * intra + lambda3 * inter``.
    Disabled terms are exactly zero.
    """

    cd: torch.Tensor
    sd: torch.Tensor
    intra: torch.Tensor
    inter: torch.Tensor
    total: torch.Tensor
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0

    def as_dict(self) -> dict[str, float]:
        return {
            "cd": float(self.cd.detach()),
            "sd": float(self.sd.detach()),
            "intra": float(self.intra.detach()),
            "inter": float(self.inter.detach()),
            "total": float(self.total.detach()),
        }


def total_loss(
    pyr_t: Pyramid,
    pyr_s: Pyramid,
    pairing: torch.Tensor | None = None,
    lambda1: float = 1.0,
    lambda2: float = 1.0,
    lambda3: float = 1.0,
    terms: Sequence[str] = LOSS_TERMS,
    affinity_mode: str = "abs",
    affinity_normalize: bool = False,
) -> LossBundle:
    """Weighted structural distillation objective.

    Args:
        pairing: partner indices for the inter-affinity term (cyclic if None).
        lambda1, lambda2, lambda3: weights of the spatial, intra-affinity and
            inter-affinity terms.
        terms: subset of ``("cd", "sd", "intra", "inter")`` to evaluate; the
            others are reported as exact zeros and contribute no gradient.
    """
    if min(lambda1, lambda2, lambda3) < 0:
        raise UsageError("loss weights must be non-negative")
    unknown = set(terms) - set(LOSS_TERMS)
    if unknown:
        raise UsageError(f"unknown loss terms {sorted(unknown)}")
    if not terms:
        raise UsageError("at least one loss term must be enabled")
    _check_pyramids(pyr_t, pyr_s)
    zero = torch.zeros((), dtype=pyr_s[0].dtype, device=pyr_s[0].device)

    cd = channel_distillation_loss(pyr_t, pyr_s) if "cd" in terms else zero
    sd = spatial_distillation_loss(pyr_t, pyr_s) if "sd" in terms else zero
    intra = (
        intra_affinity_loss(pyr_t, pyr_s, affinity_mode, affinity_normalize) if "intra" in terms else zero
    )
    inter = (
        inter_affinity_loss(pyr_t, pyr_s, pairing, affinity_mode, affinity_normalize)
        if "inter" in terms
        else zero
    )
    total = cd + lambda1 * sd + lambda2 * intra + lambda3 * inter
    return LossBundle(cd, sd, intra, inter, total, lambda1, lambda2, lambda3)
