"""Curvature of the cross-entropy loss with respect to the logits."""
from dataclasses import dataclass

import torch

from adcore.params import DTYPE


@dataclass(frozen=True)
class LogitCurvature:
    """
    Per-sample B = ∂²L/∂z² = diag(p) − p pᵀ with two square-root factors.

    ``sqrt`` is the symmetric PSD root (sqrt @ sqrt == B). ``factor`` has
    columns √p_c'·(e_c' − p), so ``factor @ factor.T == B`` as well; it is
    the per-class decomposition used for δ vectors.
    """

    probabilities: torch.Tensor  # (N, C)
    hessian: torch.Tensor  # (N, C, C)
    sqrt: torch.Tensor  # (N, C, C)
    factor: torch.Tensor  # (N, C, C)

    def apply(self, outputs):
        """B_i · u_i for a batch of output-space vectors."""
        return torch.einsum('nij,nj->ni', self.hessian, outputs)


def logit_curvature(logits):
    logits = torch.as_tensor(logits, dtype=DTYPE).detach()
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    p = torch.softmax(logits, dim=1)
    hessian = torch.diag_embed(p) - p.unsqueeze(2) * p.unsqueeze(1)
    hessian = 0.5 * (hessian + hessian.transpose(1, 2))

    eigenvalues, eigenvectors = torch.linalg.eigh(hessian)
    # B is PSD; negative eigenvalues are rounding noise
    eigenvalues = torch.clamp(eigenvalues, min=0.0)
    sqrt = eigenvectors @ torch.diag_embed(torch.sqrt(eigenvalues)) @ eigenvectors.transpose(1, 2)

    num_classes = p.shape[1]
    identity = torch.eye(num_classes, dtype=DTYPE).unsqueeze(0)
    factor = (identity - p.unsqueeze(2)) * torch.sqrt(p).unsqueeze(1)
    return LogitCurvature(probabilities=p, hessian=hessian, sqrt=sqrt, factor=factor)
