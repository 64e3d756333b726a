"""Segmentation, reconstruction, weak-label and cross-pseudo-supervision losses.

Segmentation tensors are ``(N, K, H, W)`` with one sigmoid channel per
foreground class; a pixel whose channels are all below 0.5 is background.
"""

import torch

from .errors import MissingStopGradient, ShapeMismatch

DICE_EPS = 1e-6


def _same_shape(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeMismatch(f"{what}: {tuple(a.shape)} vs {tuple(b.shape)}")


def dice_loss_per_sample(pred, gt, eps=DICE_EPS):
    """Soft Dice loss of every sample, averaged over classes -> ``(N,)``."""
    _same_shape(pred, gt, "dice_loss")
    dims = tuple(range(2, pred.dim()))
    inter = (pred * gt).sum(dim=dims)
    denom = (pred * pred).sum(dim=dims) + (gt * gt).sum(dim=dims)
    per_class = 1.0 - (2.0 * inter + eps) / (denom + eps)
    return per_class.mean(dim=1)


def dice_loss(pred, gt, eps=DICE_EPS):
    return dice_loss_per_sample(pred, gt, eps).mean()


def reconstruction_loss(x, x_hat):
    _same_shape(x, x_hat, "reconstruction_loss")
    return (x - x_hat).abs().mean()


def weak_loss(c_hat, c):
    """Mean absolute error between predicted and true presence vectors."""
    c = torch.as_tensor(c, dtype=c_hat.dtype)
    _same_shape(c_hat, c, "weak_loss")
    return (c_hat - c).abs().mean()


def harden(probs, threshold=0.5):
    """Multi-label sigmoid map -> one-hot foreground map (background = zero vector).

    A pixel takes the class of its most probable channel when that
    probability reaches ``threshold``; otherwise it is background.
    """
    best, idx = probs.max(dim=1, keepdim=True)
    onehot = torch.zeros_like(probs).scatter_(1, idx, 1.0)
    return onehot * (best >= threshold).to(probs.dtype)


def cps_loss_per_sample(pseudo, pred):
    _same_shape(pseudo, pred, "cps_loss")
    if pseudo.requires_grad:
        raise MissingStopGradient("pseudo label must be detached before cps_loss")
    return dice_loss_per_sample(pred, harden(pseudo))


def cps_loss(pseudo, pred):
    """Dice of ``pred`` against the hardened, detached ``pseudo`` prediction."""
    return cps_loss_per_sample(pseudo, pred).mean()


def labels_to_onehot(mask, num_classes):
    """Integer mask ``(N, H, W)`` with 0 = background -> ``(N, K, H, W)`` floats."""
    mask = torch.as_tensor(mask).long()
    classes = torch.arange(1, num_classes + 1, device=mask.device).view(1, -1, 1, 1)
    return (mask.unsqueeze(1) == classes).float()
