"""Neural blocks: the attention autoencoder, the semantic decoder with
spatially adaptive normalization, the 70x70 patch discriminator, and the
pluggable segmenter implementations.

All generators squash their output to [0, 1] with a sigmoid; feature-map
normalization is instance-style with eps = 1e-5. The autoencoder downsamples
exactly twice, so bottleneck features live at H/4 x W/4.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ContractError, DimensionError, ParameterError
from .espa import ExternalSpatialAttention

NORM_EPS = 1e-5


@dataclass
class AutoencoderConfig:
    image_size: int = 256
    base_channels: int = 64
    bottleneck_channels: int = 256
    dilation_rates: tuple = (2, 4, 8, 16)
    activation: str = "relu"  # "gelu" keeps the net smooth for gradient checks
    use_espa: bool = True
    espa_d_k: int | None = None  # default: min(h, w) at the bottleneck
    espa_d_v: int | None = None
    espa_double_norm: bool = False

    def validate(self):
        if self.image_size % 4:
            raise ParameterError(f"image_size must be divisible by 4, got {self.image_size}")
        if self.base_channels < 1 or self.bottleneck_channels < 1:
            raise ParameterError("channel counts must be positive")
        if self.activation not in ("relu", "gelu"):
            raise ParameterError(f"unsupported activation {self.activation!r}")


@dataclass
class SemanticDecoderConfig:
    num_classes: int = 4
    bottleneck_channels: int = 256
    block_widths: tuple = ()  # derived from bottleneck when empty
    spade_hidden: int = 64

    def widths(self):
        if self.block_widths:
            return tuple(self.block_widths)
        c = self.bottleneck_channels
        return (max(c // 2, 8), max(c // 4, 8), max(c // 8, 8))


@dataclass
class DiscriminatorConfig:
    base_channels: int = 64


def _conv_block(in_ch, out_ch, kernel=3, stride=1, dilation=1, activation="relu"):
    pad = dilation * (kernel - 1) // 2
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=pad, dilation=dilation),
        nn.InstanceNorm2d(out_ch, eps=NORM_EPS, affine=True),
        nn.GELU() if activation == "gelu" else nn.ReLU(inplace=True),
    )


class ESPAAutoencoder(nn.Module):
    """Stage-1 generator: encoder, two-branch bottleneck, decoder.

    forward(masked_image, mask) -> (coarse image in [0, 1], fused bottleneck
    features). The mask channel is concatenated to the encoder input; the
    bottleneck runs a dilated-convolution stack in parallel with the external
    spatial attention branch and fuses them by element-wise sum. The fused
    features are what the semantic decoder later conditions on.
    """

    def __init__(self, cfg=None):
        super().__init__()
        cfg = cfg or AutoencoderConfig()
        cfg.validate()
        self.cfg = cfg
        b, c = cfg.base_channels, cfg.bottleneck_channels
        h = cfg.image_size // 4
        act = cfg.activation
        self.encoder = nn.Sequential(
            _conv_block(4, b, kernel=5, activation=act),
            _conv_block(b, 2 * b, kernel=4, stride=2, activation=act),
            _conv_block(2 * b, c, kernel=4, stride=2, activation=act),
        )
        self.dilated = nn.Sequential(
            *[_conv_block(c, c, kernel=3, dilation=r, activation=act) for r in cfg.dilation_rates]
        )
        self.decoder = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            _conv_block(c, 2 * b, activation=act),
            nn.Upsample(scale_factor=2, mode="nearest"),
            _conv_block(2 * b, b, activation=act),
            nn.Conv2d(b, 3, kernel_size=3, padding=1),
        )
        # built after the shared trunk so a with/without-attention pair under
        # one seed starts from identical trunk weights
        self.espa = None
        if cfg.use_espa:
            self.espa = ExternalSpatialAttention(
                c, h, h, d_k=cfg.espa_d_k, d_v=cfg.espa_d_v, activation=act,
                double_norm=cfg.espa_double_norm,
            )
            # zero-init the branch's last layer: the fused sum starts as the
            # plain dilated path (no init noise) while upstream attention
            # parameters still receive full-magnitude gradients
            nn.init.zeros_(self.espa.value_op.fc2.weight)
            nn.init.zeros_(self.espa.value_op.fc2.bias)

    def forward(self, image_in, mask):
        if image_in.shape[-2:] != mask.shape[-2:]:
            raise DimensionError(
                f"image/mask spatial mismatch: {image_in.shape[-2:]} vs {mask.shape[-2:]}"
            )
        s = self.cfg.image_size
        if image_in.shape[-2:] != (s, s):
            raise DimensionError(f"expected {s}x{s} input, got {tuple(image_in.shape[-2:])}")
        f_in = self.encoder(torch.cat([image_in, mask], dim=1))
        f_c = self.dilated(f_in)
        if self.espa is not None:
            f_c = f_c + self.espa(f_in, image_in, mask)
        coarse = torch.sigmoid(self.decoder(f_c))
        return coarse, f_c


class SPADELayer(nn.Module):
    """Spatially adaptive normalization.

    The input is normalized per channel over its spatial positions, then
    modulated elementwise as gamma(s) * x_hat + beta(s), where gamma/beta
    come from a small two-layer convolutional head over the one-hot semantic
    map (resized to the layer's resolution). The gamma head's bias starts at
    1 so the layer is near plain normalization at init.
    """

    def __init__(self, channels, num_classes, hidden=64):
        super().__init__()
        self.shared = nn.Sequential(
            nn.Conv2d(num_classes, hidden, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
        )
        self.gamma = nn.Conv2d(hidden, channels, kernel_size=3, padding=1)
        self.beta = nn.Conv2d(hidden, channels, kernel_size=3, padding=1)
        nn.init.zeros_(self.gamma.weight)
        nn.init.ones_(self.gamma.bias)
        nn.init.zeros_(self.beta.weight)
        nn.init.zeros_(self.beta.bias)

    def forward(self, x, semantic_onehot):
        if semantic_onehot.shape[-2:] != x.shape[-2:]:
            semantic_onehot = F.interpolate(semantic_onehot, size=x.shape[-2:], mode="nearest")
        mean = x.mean(dim=(-2, -1), keepdim=True)
        var = x.var(dim=(-2, -1), keepdim=True, unbiased=False)
        x_hat = (x - mean) / torch.sqrt(var + NORM_EPS)
        actv = self.shared(semantic_onehot)
        return self.gamma(actv) * x_hat + self.beta(actv)


class SPADEResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, num_classes, hidden=64):
        super().__init__()
        self.norm1 = SPADELayer(in_ch, num_classes, hidden)
        self.conv1 = nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1)
        self.norm2 = SPADELayer(out_ch, num_classes, hidden)
        self.conv2 = nn.Conv2d(out_ch, out_ch, kernel_size=3, padding=1)
        self.skip = None
        if in_ch != out_ch:
            self.norm_s = SPADELayer(in_ch, num_classes, hidden)
            self.skip = nn.Conv2d(in_ch, out_ch, kernel_size=1)

    def forward(self, x, onehot):
        y = self.conv1(F.relu(self.norm1(x, onehot)))
        y = self.conv2(F.relu(self.norm2(y, onehot)))
        s = self.skip(self.norm_s(x, onehot)) if self.skip is not None else x
        return y + s


class SemanticDecoder(nn.Module):
    """Stage-2 generator: SPADE residual blocks interleaved with 2x upsampling.

    Consumes bottleneck features at H/4 and the full-resolution one-hot
    semantic map; every normalization is modulated by the map resized to its
    own resolution. Restores the full H x W resolution (two upsamplings).
    """

    def __init__(self, cfg=None):
        super().__init__()
        cfg = cfg or SemanticDecoderConfig()
        self.cfg = cfg
        widths = cfg.widths()
        if len(widths) < 2:
            raise ParameterError("semantic decoder needs at least 2 blocks to upsample 4x")
        chans = [cfg.bottleneck_channels] + list(widths)
        self.blocks = nn.ModuleList(
            SPADEResBlock(chans[i], chans[i + 1], cfg.num_classes, cfg.spade_hidden)
            for i in range(len(widths))
        )
        self.head = nn.Conv2d(chans[-1], 3, kernel_size=3, padding=1)

    def forward(self, f_c, semantic_onehot):
        if semantic_onehot.shape[1] != self.cfg.num_classes:
            raise ParameterError(
                f"semantic map has {semantic_onehot.shape[1]} classes, "
                f"decoder configured for {self.cfg.num_classes}"
            )
        x = f_c
        for i, block in enumerate(self.blocks):
            x = block(x, semantic_onehot)
            if i < 2:  # two upsamplings restore the full resolution
                x = F.interpolate(x, scale_factor=2, mode="nearest")
        return torch.sigmoid(self.head(x))


class PatchDiscriminator(nn.Module):
    """70x70 patch discriminator: C64-C128-C256 stride 2, C512-C1 stride 1,
    kernel 4 throughout. Every output unit scores one 70x70 input patch;
    a 256x256 image yields a 30x30 score map. Scores are unbounded reals.

    No activation normalization: feature-map statistics would couple every
    score to the whole image and break exact patch locality.
    """

    def __init__(self, cfg=None):
        super().__init__()
        cfg = cfg or DiscriminatorConfig()
        self.cfg = cfg
        b = cfg.base_channels
        layers = [
            nn.Conv2d(3, b, kernel_size=4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        ]
        for mult_in, mult_out, stride in ((1, 2, 2), (2, 4, 2), (4, 8, 1)):
            layers += [
                nn.Conv2d(b * mult_in, b * mult_out, kernel_size=4, stride=stride, padding=1),
                nn.LeakyReLU(0.2, inplace=True),
            ]
        layers.append(nn.Conv2d(b * 8, 1, kernel_size=4, stride=1, padding=1))
        self.body = nn.Sequential(*layers)

    def forward(self, image):
        return self.body(image)


class TinySegmenter(nn.Module):
    """Small encoder-decoder with skip connections; softmax class probabilities.

    Desk-scale stand-in for a large pretrained segmentation network, trained
    separately on the labeled set.
    """

    def __init__(self, num_classes, base_channels=16):
        super().__init__()
        b = base_channels
        self.num_classes = num_classes
        self.enc1 = _conv_block(3, b, kernel=3)
        self.enc2 = _conv_block(b, 2 * b, kernel=4, stride=2)
        self.enc3 = _conv_block(2 * b, 4 * b, kernel=4, stride=2)
        self.dec2 = _conv_block(4 * b, 2 * b)
        self.dec1 = _conv_block(2 * b, b)
        self.head = nn.Conv2d(b, num_classes, kernel_size=3, padding=1)

    def logits(self, image):
        e1 = self.enc1(image)
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)
        d2 = self.dec2(F.interpolate(e3, scale_factor=2, mode="nearest")) + e2
        d1 = self.dec1(F.interpolate(d2, scale_factor=2, mode="nearest")) + e1
        return self.head(d1)

    def forward(self, image):
        return torch.softmax(self.logits(image), dim=1)


class NeuralSegmenter:
    """Adapter exposing a torch segmentation module as a numpy-level callable."""

    def __init__(self, module):
        self.module = module
        self.num_classes = module.num_classes

    def __call__(self, image, key=None):
        self.module.eval()
        with torch.no_grad():
            t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None]
            probs = self.module(t)[0]
        return probs.numpy()


class FileBackedSegmenter:
    """Reads precomputed label maps for datasets that ship ground truth.

    The caller must supply the sample's key; the probabilities are the
    one-hot expansion of the stored labels.
    """

    def __init__(self, labels_dir, num_classes):
        from pathlib import Path

        self.labels_dir = Path(labels_dir)
        self.num_classes = num_classes

    def __call__(self, image, key=None):
        from .imaging import load_labels_png, one_hot

        if key is None:
            raise ContractError("file-backed segmenter needs the sample key")
        labels = load_labels_png(self.labels_dir / f"{key}.png", self.num_classes)
        return one_hot(labels, self.num_classes)


def segment(image, segmenter, key=None):
    """Run a segmenter and binarize its probability maps to hard labels.

    Ties resolve to the lowest class id. Probability columns must sum to 1
    within 1e-4 or the segmenter violated its contract.
    """
    probs = np.asarray(segmenter(image, key=key), dtype=np.float64)
    if probs.ndim != 3 or probs.shape[-2:] != image.shape[-2:]:
        raise ContractError(
            f"segmenter returned shape {probs.shape} for image {image.shape}"
        )
    sums = probs.sum(axis=0)
    if np.abs(sums - 1.0).max() > 1e-4:
        worst = float(np.abs(sums - 1.0).max())
        raise ContractError(f"probability maps do not sum to 1 (max deviation {worst:.2e})")
    # np.argmax returns the first (lowest) index on ties
    return probs.argmax(axis=0)[None].astype(np.int64)
