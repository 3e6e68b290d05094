"""Training objectives: L1 reconstruction, perceptual distance over a frozen
feature pyramid, least-squares adversarial terms, and the weighted stage
totals. Expectations are realized as arithmetic means over batch and
elements.
"""

from dataclasses import dataclass

import torch
from torch import nn

from .errors import DimensionError


@dataclass(frozen=True)
class LossWeights:
    rec: float = 1.0
    per: float = 1.0
    adv: float = 0.01


def _check_shapes(pred, target):
    if pred.shape != target.shape:
        raise DimensionError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")


def l1_loss(pred, target):
    """Mean absolute difference over every element."""
    _check_shapes(pred, target)
    return (pred - target).abs().mean()


class FeaturePyramid(nn.Module):
    """Frozen five-stage convolutional pyramid used by the perceptual loss.

    One stage per resolution level (H down to H/16). Desk/test mode uses
    seeded random weights — a fixed random projection is still a valid
    perceptual signal and keeps everything hermetic; production weights can
    be loaded from a file instead. Parameters never train, but gradients
    flow through to the compared images.
    """

    STAGE_CHANNELS = (16, 32, 64, 64, 64)

    def __init__(self, seed=0, stage_channels=STAGE_CHANNELS):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        stages = []
        in_ch = 3
        for i, out_ch in enumerate(stage_channels):
            conv = nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=1 if i == 0 else 2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(
                    torch.randn(conv.weight.shape, generator=gen) * (in_ch * 9) ** -0.5
                )
                conv.bias.zero_()
            stages.append(nn.Sequential(conv, nn.ReLU()))
            in_ch = out_ch
        self.stages = nn.ModuleList(stages)
        self.requires_grad_(False)
        self.eval()

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats

    def save_weights(self, path):
        torch.save(self.state_dict(), path)

    @classmethod
    def from_file(cls, path, stage_channels=STAGE_CHANNELS):
        fx = cls(stage_channels=stage_channels)
        fx.load_state_dict(torch.load(path, weights_only=True))
        fx.requires_grad_(False)
        return fx


class IdentityExtractor(nn.Module):
    """Single-stage extractor returning its input; oracle-test plumbing."""

    def forward(self, x):
        return [x]


def perceptual_loss(pred, target, fx):
    """Sum over stages of the per-element-normalized squared feature distance."""
    _check_shapes(pred, target)
    total = None
    for fp, ft in zip(fx(pred), fx(target)):
        stage = ((ft - fp) ** 2).mean()
        total = stage if total is None else total + stage
    return total


def adversarial_losses(d_real_scores, d_fake_scores):
    """Least-squares GAN pair.

    d_loss = mean((d_real - 1)^2) + mean(d_fake^2) pushes real patches to 1
    and fakes to 0; g_loss = mean((d_fake - 1)^2) pushes fakes to 1.
    """
    g_loss = ((d_fake_scores - 1.0) ** 2).mean()
    d_loss = ((d_real_scores - 1.0) ** 2).mean() + (d_fake_scores**2).mean()
    return g_loss, d_loss


def stage1_total(pred, target, fx, weights=LossWeights()):
    return weights.rec * l1_loss(pred, target) + weights.per * perceptual_loss(pred, target, fx)


def stage2_total(pred, target, fx, g_adv, weights=LossWeights()):
    return stage1_total(pred, target, fx, weights) + weights.adv * g_adv
