"""EDGE objective: bidirectional contrastive loss plus pairwise diversity.

All functions are differentiable torch expressions; gradients come from
autograd.  Embeddings are L2-normalized row-wise before any similarity is
taken, so every loss is invariant to positive rescaling of its raw inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, ValidationError

DEFAULT_TAU = 0.5
DEFAULT_LAMBDA_C = 1.0
DEFAULT_LAMBDA_D = 1.0


@dataclass
class EmbeddingBatch:
    """Row-normalized image vectors ``z_vec`` and text vectors ``y_vec``."""

    z_vec: torch.Tensor
    y_vec: torch.Tensor

    def __post_init__(self):
        if self.z_vec.dim() != 2 or self.y_vec.dim() != 2:
            raise ValidationError("embeddings must be 2-D (N, d)")
        if self.z_vec.shape[0] != self.y_vec.shape[0]:
            raise ValidationError("image and text batches differ in size")
        if self.z_vec.shape[0] < 1:
            raise ValidationError("empty embedding batch")
        with torch.no_grad():
            for name, v in (("z_vec", self.z_vec), ("y_vec", self.y_vec)):
                if not torch.isfinite(v).all():
                    raise ValidationError(f"{name} has non-finite entries")
                norms = v.norm(dim=1)
                tol = 1e-6 if v.dtype == torch.float64 else 1e-4
                if (norms - 1).abs().max() > tol:
                    raise ValidationError(f"{name} rows are not unit-norm")

    @classmethod
    def from_raw(cls, z_raw: torch.Tensor, y_raw: torch.Tensor) -> "EmbeddingBatch":
        return cls(F.normalize(z_raw, dim=1), F.normalize(y_raw, dim=1))

    @property
    def n(self) -> int:
        return self.z_vec.shape[0]


@dataclass
class LossBreakdown:
    l_i2t: torch.Tensor
    l_t2i: torch.Tensor
    l_c: torch.Tensor
    l_d: torch.Tensor
    l_edge: torch.Tensor
    tau: float
    lambda_c: float
    lambda_d: float

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("l_i2t", "l_t2i", "l_c", "l_d", "l_edge")}


def similarity_matrix(batch: EmbeddingBatch, tau: float = DEFAULT_TAU) -> torch.Tensor:
    """``S[i, j] = z_i . y_j / tau``."""
    if tau <= 0:
        raise ValidationError(f"tau must be positive, got {tau}")
    if batch.z_vec.shape[1] != batch.y_vec.shape[1]:
        raise ConfigurationError(
            f"embedding dims differ: {batch.z_vec.shape[1]} vs {batch.y_vec.shape[1]}"
        )
    return batch.z_vec @ batch.y_vec.T / tau


def _mean_neg_log_softmax_diag(s: torch.Tensor) -> torch.Tensor:
    # row-wise: -log(exp(s_ii) / sum_j exp(s_ij)), with the row max subtracted
    m = s.max(dim=1, keepdim=True).values.detach()
    lse = (s - m).exp().sum(dim=1).log() + m.squeeze(1)
    return (lse - s.diagonal()).mean()


def contrastive_loss(
    batch: EmbeddingBatch, tau: float = DEFAULT_TAU, lambda_c: float = DEFAULT_LAMBDA_C
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Returns ``(l_i2t, l_t2i, lambda_c * l_i2t + l_t2i)``.

    Image-to-text normalizes over the row of ``S`` (text candidates for one
    image), text-to-image over the column.
    """
    s = similarity_matrix(batch, tau)
    l_i2t = _mean_neg_log_softmax_diag(s)
    l_t2i = _mean_neg_log_softmax_diag(s.T)
    return l_i2t, l_t2i, lambda_c * l_i2t + l_t2i


def diversity_loss(batch: EmbeddingBatch) -> torch.Tensor:
    """Mean cosine similarity over unordered pairs of concatenated ``[z_i; y_i]``."""
    n = batch.n
    if n < 2:
        raise ValidationError("diversity loss needs at least two pairs")
    c = F.normalize(torch.cat([batch.z_vec, batch.y_vec], dim=1), dim=1)
    gram = c @ c.T
    upper = torch.triu(torch.ones(n, n, dtype=torch.bool), diagonal=1)
    return gram[upper].sum() * (2.0 / (n * (n - 1)))


def edge_loss(
    batch: EmbeddingBatch,
    tau: float = DEFAULT_TAU,
    lambda_c: float = DEFAULT_LAMBDA_C,
    lambda_d: float = DEFAULT_LAMBDA_D,
) -> LossBreakdown:
    l_i2t, l_t2i, l_c = contrastive_loss(batch, tau, lambda_c)
    l_d = diversity_loss(batch)
    return LossBreakdown(l_i2t, l_t2i, l_c, l_d, l_c + lambda_d * l_d, tau, lambda_c, lambda_d)
