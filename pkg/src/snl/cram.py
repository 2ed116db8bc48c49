"""Central residual aggregation: learnable normality centers with soft assignment.

For a feature vector ``f`` at one location and centers ``c_1..c_N`` the module
emits ``sum_n a_n (f - c_n)`` with ``a = softmax_n(-alpha * ||f - c_n||^2)``.
"""

from __future__ import annotations

import torch
from torch import nn

from snl.errors import UsageError


def residuals(f: torch.Tensor, centers: torch.Tensor) -> torch.Tensor:
    """Residuals of every location against every center.

    Args:
        f: features ``(B, D, H, W)``.
        centers: ``(D, N)``.

    Returns:
        ``(B, N, D, H, W)`` with ``out[:, n] = f - centers[:, n]``.
    """
    if f.shape[1] != centers.shape[0]:
        raise UsageError(f"feature dim {f.shape[1]} != center dim {centers.shape[0]}")
    c = centers.t()[None, :, :, None, None]
    return f[:, None] - c


def soft_assign(r: torch.Tensor, alpha: torch.Tensor | float) -> torch.Tensor:
    """Softmax over centers of ``-alpha * ||r_n||^2``; returns ``(B, N, H, W)``."""
    sq = r.square().sum(dim=2)
    return torch.softmax(-alpha * sq, dim=1)


def aggregate(weights: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
    """Weighted sum of residuals over centers; returns ``(B, D, H, W)``."""
    return (weights[:, :, None] * r).sum(dim=1)


def cram_forward(f: torch.Tensor, centers: torch.Tensor, alpha: torch.Tensor | float) -> torch.Tensor:
    """Literal composition residuals -> soft_assign -> aggregate.

    Materializes the ``(B, N, D, H, W)`` residual field; :class:`CRAM` uses an
    algebraically identical form that does not.
    """
    r = residuals(f, centers)
    return aggregate(soft_assign(r, alpha), r)


class CRAM(nn.Module):
    """Shape-preserving residual aggregation layer placed after a student block.

    Centers are drawn lazily on the first forward pass from a zero-mean
    Gaussian scaled to the standard deviation of that batch's features.
    The sharpness ``alpha`` is learned as ``log_alpha`` so it stays positive.
    """

    def __init__(
        self,
        dim: int,
        num_centers: int = 50,
        alpha: float = 1.0,
        centers: torch.Tensor | None = None,
    ):
        super().__init__()
        if num_centers < 1:
            raise UsageError("num_centers must be >= 1")
        if alpha <= 0:
            raise UsageError("alpha must be positive")
        self.dim = dim
        self.num_centers = num_centers
        if centers is not None and tuple(centers.shape) != (dim, num_centers):
            raise UsageError(f"centers must have shape ({dim}, {num_centers})")
        # explicit centers keep their dtype
        init = torch.zeros(dim, num_centers) if centers is None else centers.detach().clone()
        self.centers = nn.Parameter(init)
        self.log_alpha = nn.Parameter(torch.tensor(float(alpha), dtype=init.dtype).log())
        self.register_buffer("initialized", torch.tensor(centers is not None))

    @property
    def alpha(self) -> torch.Tensor:
        return self.log_alpha.exp()

    @torch.no_grad()
    def init_centers(self, f: torch.Tensor) -> None:
        std = f.detach().std().clamp_min(1e-6)
        self.centers.copy_(torch.randn_like(self.centers) * std)
        self.initialized.fill_(True)

    def assignments(self, f: torch.Tensor) -> torch.Tensor:
        """Soft assignment weights ``(B, N, H, W)``."""
        c = self.centers
        f_sq = f.square().sum(dim=1, keepdim=True)
        c_sq = c.square().sum(dim=0)[None, :, None, None]
        cross = torch.einsum("bdhw,dn->bnhw", f, c)
        sq = (f_sq - 2.0 * cross + c_sq).clamp_min(0.0)
        return torch.softmax(-self.alpha * sq, dim=1)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        if f.shape[1] != self.dim:
            raise UsageError(f"expected {self.dim} channels, got {f.shape[1]}")
        if not bool(self.initialized):
            self.init_centers(f)
        a = self.assignments(f)
        # sum_n a_n (f - c_n) = f - sum_n a_n c_n, since the weights sum to one
        return f - torch.einsum("bnhw,dn->bdhw", a, self.centers)

    def extra_repr(self) -> str:
        return f"dim={self.dim}, num_centers={self.num_centers}"
