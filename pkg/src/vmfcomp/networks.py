"""Encoder, reconstructor, segmentation head and weak-label classifier.

All blocks use channel-first batched tensors ``(N, C, H, W)``.
"""

import math
import warnings
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from .errors import ShapeMismatch


@dataclass
class ArchitectureConfig:
    input_size: tuple = (64, 64)
    feature_stride: int = 2
    feature_channels: int = 64
    num_kernels: int = 12
    num_classes: int = 3
    classifier_hidden: int = 16
    unet_widths: tuple = (32, 64, 128)
    head_width: int = 64
    classifier_channels: tuple = (16, 32, 64, 64, 64)

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.unet_widths = tuple(int(v) for v in self.unet_widths)
        self.classifier_channels = tuple(int(v) for v in self.classifier_channels)
        s = self.feature_stride
        if s < 1 or s & (s - 1):
            raise ValueError(f"feature_stride must be a power of 2, got {s}")
        for name in ("feature_channels", "num_kernels", "num_classes", "classifier_hidden",
                     "head_width"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if int(math.log2(s)) > self.num_downsamples:
            raise ValueError("feature_stride exceeds the U-Net depth")
        if len(self.classifier_channels) != 5:
            raise ValueError("classifier needs exactly 5 conv widths")
        factor = 2 ** self.num_downsamples
        for v in self.input_size:
            if v <= 0 or v % factor:
                raise ShapeMismatch(f"input size {self.input_size} not divisible by {factor}")
        if self.feature_channels < self.num_kernels:
            warnings.warn("feature_channels < num_kernels: kernels cannot be mutually orthogonal")

    @property
    def num_downsamples(self):
        return len(self.unet_widths) - 1

    @property
    def feature_size(self):
        return tuple(v // self.feature_stride for v in self.input_size)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _check_shape(x, expected, what):
    if tuple(x.shape[1:]) != tuple(expected):
        raise ShapeMismatch(f"{what} expects (N, {', '.join(map(str, expected))}), got {tuple(x.shape)}")


class DoubleConv(nn.Sequential):
    def __init__(self, cin, cout, final_relu=True):
        layers = [
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1),
            nn.BatchNorm2d(cout),
        ]
        if final_relu:
            layers.append(nn.ReLU(inplace=True))
        super().__init__(*layers)


class Up(nn.Module):
    """Transposed-conv upsampling, skip concatenation, double conv."""

    def __init__(self, cin, cskip, cout, final_relu=True):
        super().__init__()
        self.up = nn.ConvTranspose2d(cin, cskip, 2, stride=2)
        self.conv = DoubleConv(2 * cskip, cout, final_relu)

    def forward(self, x, skip):
        return self.conv(torch.cat([self.up(x), skip], dim=1))


class Encoder(nn.Module):
    """U-Net truncated before its last upsampling stages (output stride ``s``).

    The last block stops at batch norm: a trailing ReLU would leave all-zero
    feature vectors that cannot be put on the unit sphere.
    """

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        w = cfg.unet_widths
        self.inc = DoubleConv(1, w[0])
        self.downs = nn.ModuleList(DoubleConv(w[k - 1], w[k]) for k in range(1, len(w)))
        n_up = cfg.num_downsamples - int(math.log2(cfg.feature_stride))
        ups = []
        cin = w[-1]
        for i in range(n_up):
            level = len(w) - 2 - i
            last = i == n_up - 1
            cout = cfg.feature_channels if last else w[level]
            ups.append(Up(cin, w[level], cout, final_relu=not last))
            cin = cout
        self.ups = nn.ModuleList(ups)
        self.proj = nn.Conv2d(w[-1], cfg.feature_channels, 1) if n_up == 0 else None

    def forward_with_skips(self, x):
        _check_shape(x, (1, *self.cfg.input_size), "encoder")
        skips = [self.inc(x)]
        for down in self.downs:
            skips.append(down(nn.functional.max_pool2d(skips[-1], 2)))
        h = skips[-1]
        for i, up in enumerate(self.ups):
            h = up(h, skips[-2 - i])
        if self.proj is not None:
            h = self.proj(h)
        return h, skips

    def forward(self, x):
        return self.forward_with_skips(x)[0]


class UNetTail(nn.Module):
    """The stages dropped from the encoder: last upsamplings and the output conv."""

    def __init__(self, cfg):
        super().__init__()
        w = cfg.unet_widths
        n_tail = int(math.log2(cfg.feature_stride))
        ups = []
        cin = cfg.feature_channels
        for i in range(n_tail):
            level = n_tail - 1 - i
            ups.append(Up(cin, w[level], w[level]))
            cin = w[level]
        self.ups = nn.ModuleList(ups)
        self.out = nn.Conv2d(cin, 1, 1)

    def forward(self, h, skips):
        n = len(self.ups)
        for i, up in enumerate(self.ups):
            h = up(h, skips[n - 1 - i])
        return self.out(h)


class UNetAutoencoder(nn.Module):
    """Full U-Net used for reconstruction pre-training of the encoder."""

    def __init__(self, cfg):
        super().__init__()
        self.encoder = Encoder(cfg)
        self.tail = UNetTail(cfg)

    def forward(self, x):
        h, skips = self.encoder.forward_with_skips(x)
        return self.tail(h, skips)


class UpsamplingHead(nn.Module):
    """Double conv, ``log2(s)`` x (transposed conv + double conv), 1x1 output conv."""

    def __init__(self, cin, cout, cfg):
        super().__init__()
        self.cfg = cfg
        self.cin = cin
        hw = cfg.head_width
        layers = [DoubleConv(cin, hw)]
        for _ in range(int(math.log2(cfg.feature_stride))):
            layers += [nn.ConvTranspose2d(hw, hw, 2, stride=2), DoubleConv(hw, hw)]
        layers.append(nn.Conv2d(hw, cout, 1))
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        _check_shape(x, (self.cin, *self.cfg.feature_size), type(self).__name__)
        return self.body(x)


class Reconstructor(UpsamplingHead):
    """Linear-output image decoder from recomposed features."""

    def __init__(self, cfg):
        super().__init__(cfg.feature_channels, 1, cfg)


class SegmentationHead(UpsamplingHead):
    def __init__(self, cfg, in_channels=None):
        super().__init__(in_channels or cfg.num_kernels, cfg.num_classes, cfg)

    def forward(self, x):
        return torch.sigmoid(super().forward(x))


class WeakClassifier(nn.Module):
    """Five stride-2 CONV-BN-LeakyReLU layers, then FC -> hidden -> outputs, sigmoid."""

    def __init__(self, in_channels, in_size, num_outputs, cfg):
        super().__init__()
        self.in_channels = in_channels
        self.in_size = tuple(in_size)
        layers = []
        cin = in_channels
        size = list(self.in_size)
        for cout in cfg.classifier_channels:
            layers += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.BatchNorm2d(cout),
                       nn.LeakyReLU(0.2, inplace=True)]
            cin = cout
            size = [v // 2 for v in size]
        if min(size) < 1:
            raise ShapeMismatch(f"classifier input {self.in_size} too small for 5 stride-2 layers")
        self.features = nn.Sequential(*layers)
        self.fc = nn.Sequential(
            nn.Flatten(),
            nn.Linear(cin * size[0] * size[1], cfg.classifier_hidden),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Linear(cfg.classifier_hidden, num_outputs),
        )

    def forward(self, x):
        _check_shape(x, (self.in_channels, *self.in_size), "classifier")
        return torch.sigmoid(self.fc(self.features(x)))


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())
