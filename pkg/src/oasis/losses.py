"""Training objective: point sampling, cross-entropy, dice and the evidential
(Dirichlet) loss, plus their weighted combination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .types import IdMask, InvalidInputError, id_mask_to_onehot

UNCERTAIN_FRACTION = 0.75


@dataclass
class LossConfig:
    lambda_edl: float = 0.01
    anneal_iters: int | None = None  # None: 10% of the training run
    num_points_pretrain: int = 8192
    num_points_main: int = 12544
    dice_smooth: float = 1.0

    def __post_init__(self):
        if self.lambda_edl < 0:
            raise InvalidInputError("lambda_edl must be nonnegative")
        if self.num_points_pretrain <= 0 or self.num_points_main <= 0:
            raise InvalidInputError("point counts must be positive")
        if self.anneal_iters is not None and self.anneal_iters < 0:
            raise InvalidInputError("anneal_iters must be nonnegative")

    def resolved_anneal(self, total_iters: int) -> int:
        if self.anneal_iters is not None:
            return self.anneal_iters
        return max(1, int(round(0.1 * total_iters)))


def uncertain_point_indices(probs: torch.Tensor, n_points: int,
                            generator: torch.Generator | None = None) -> torch.Tensor:
    """Flat pixel indices: 75% lowest top-1/top-2 margin, the rest uniform.

    ``probs`` is [K, H, W]. Ties in margin are broken randomly, so uniform
    predictions reduce to plain random sampling. Indices are unique.
    """
    K = probs.shape[0]
    n_pix = probs.shape[-1] * probs.shape[-2]
    if n_points > n_pix:
        raise InvalidInputError(f"cannot sample {n_points} points from {n_pix} pixels")
    if n_points <= 0:
        raise InvalidInputError("n_points must be positive")
    with torch.no_grad():
        flat = probs.detach().reshape(K, n_pix)
        top = torch.topk(flat, k=min(2, K), dim=0).values
        margin = top[0] - top[1] if K > 1 else torch.zeros(n_pix)
        perm = torch.randperm(n_pix, generator=generator)
        order = perm[torch.argsort(margin[perm], stable=True)]
        n_unc = int(round(UNCERTAIN_FRACTION * n_points))
        rest = order[n_unc:]
        pick = rest[torch.randperm(rest.numel(), generator=generator)[:n_points - n_unc]]
        return torch.cat([order[:n_unc], pick])


def sample_points(probs, target: IdMask, n_points: int, seed: int = 0,
                  object_ids=None) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Return (indices [P], gathered probs [K, P], one-hot targets [K, P])."""
    p = probs if isinstance(probs, torch.Tensor) else torch.as_tensor(np.asarray(probs))
    gen = torch.Generator().manual_seed(seed)
    idx = uncertain_point_indices(p, n_points, gen)
    onehot = torch.from_numpy(id_mask_to_onehot(target, object_ids)).to(p.dtype)
    if onehot.shape != p.shape:
        raise InvalidInputError(f"target one-hot {tuple(onehot.shape)} does not match {tuple(p.shape)}")
    K = p.shape[0]
    return idx, p.reshape(K, -1)[:, idx], onehot.reshape(K, -1)[:, idx]


def ce_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean negative log true-class probability; class axis is -2."""
    p_true = (pred * target).sum(dim=-2)
    return -torch.log(p_true.clamp_min(1e-12)).mean()


def dice_loss(pred: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """Soft dice over points, averaged over classes (and batch)."""
    inter = (pred * target).sum(dim=-1)
    denom = pred.sum(dim=-1) + target.sum(dim=-1)
    return 1 - ((2 * inter + smooth) / (denom + smooth)).mean()


def dirichlet_alpha(raw_logits: torch.Tensor) -> torch.Tensor:
    """alpha = 1 + softplus(raw)."""
    return 1 + F.softplus(raw_logits)


def dirichlet_kl_uniform(alpha: torch.Tensor) -> torch.Tensor:
    """KL(Dir(alpha) || Dir(1)) per point; class axis is -2."""
    K = alpha.shape[-2]
    S = alpha.sum(dim=-2)
    kl = (torch.lgamma(S) - torch.lgamma(torch.tensor(float(K), dtype=alpha.dtype))
          - torch.lgamma(alpha).sum(dim=-2)
          + ((alpha - 1) * (torch.digamma(alpha) - torch.digamma(S).unsqueeze(-2))).sum(dim=-2))
    # nonnegative in exact arithmetic; drop rounding noise
    return kl.clamp_min(0)


def edl_terms(alpha: torch.Tensor, target: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-point (digamma term, KL term) for concentrations ``alpha``."""
    S = alpha.sum(dim=-2, keepdim=True)
    first = (target * (torch.digamma(S) - torch.digamma(alpha))).sum(dim=-2)
    alpha_tilde = target + (1 - target) * alpha
    return first, dirichlet_kl_uniform(alpha_tilde)


def kl_weight(iteration: int, anneal_iters: int) -> float:
    if anneal_iters <= 0:
        return 1.0
    return min(1.0, iteration / anneal_iters)


def edl_loss(raw_logits: torch.Tensor, target: torch.Tensor, iteration: int,
             cfg: LossConfig = LossConfig(), total_iters: int = 1) -> torch.Tensor:
    """Evidential loss: digamma term plus annealed KL, averaged over points."""
    if not torch.all(torch.isfinite(raw_logits)):
        raise InvalidInputError("raw logits must be finite")
    first, kl = edl_terms(dirichlet_alpha(raw_logits), target)
    w = kl_weight(iteration, cfg.resolved_anneal(total_iters))
    return (first + w * kl).mean()


def total_mask_loss(pred: torch.Tensor, raw_logits: torch.Tensor, target: torch.Tensor,
                    iteration: int, cfg: LossConfig = LossConfig(),
                    total_iters: int = 1) -> tuple[torch.Tensor, dict]:
    """CE + Dice + lambda * EDL on sampled points, with a per-term breakdown."""
    ce = ce_loss(pred, target)
    dice = dice_loss(pred, target, cfg.dice_smooth)
    if cfg.lambda_edl > 0:
        edl = edl_loss(raw_logits, target, iteration, cfg, total_iters)
    else:
        edl = torch.zeros((), dtype=ce.dtype)
    total = ce + dice + cfg.lambda_edl * edl
    parts = {"ce": ce.item(), "dice": dice.item(), "edl": edl.item(),
             "kl_weight": kl_weight(iteration, cfg.resolved_anneal(total_iters)),
             "total": total.item()}
    return total, parts
