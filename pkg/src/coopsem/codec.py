"""Learned transceiver: semantic encoders, JSC encoders and JSC decoders.

Layer widths follow the Co-SC parameter table: the JSC encoder maps F -> 2B -> 2B,
the cooperative decoder maps N x 2B -> 16B -> F -> NF (for N = 2) and the
separate decoder maps 2B -> 8B -> F -> F.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F_

from .channel import normalize_power
from .errors import ShapeError

LEAKY_SLOPE = 0.01
KERNEL = 5
# conv output channels per input user; with a 2B-long axis this gives the
# tabulated widths 16B (two users, cooperative) and 8B (separate)
CHANNELS_PER_USER = 4


class ToyBackbone(nn.Module):
    """Four 3x3 conv blocks followed by global average pooling."""

    def __init__(self, feature_dim: int = 64, in_channels: int = 3, width: int = 32):
        super().__init__()
        chans = [in_channels, width, 2 * width, 2 * width, feature_dim]
        layers = []
        for i in range(4):
            layers += [
                nn.Conv2d(chans[i], chans[i + 1], 3, padding=1, bias=False),
                nn.BatchNorm2d(chans[i + 1]),
                nn.ReLU(inplace=True),
            ]
            if i < 3:
                layers.append(nn.MaxPool2d(2))
        self.body = nn.Sequential(*layers)
        self.feature_dim = feature_dim

    def forward(self, x):
        return self.body(x).mean(dim=(2, 3))


class ResNet50Backbone(nn.Module):
    """ResNet-50 trunk with the classification head removed (F = 2048)."""

    def __init__(self, pretrained: bool = False):
        super().__init__()
        from torchvision.models import ResNet50_Weights, resnet50

        net = resnet50(weights=ResNet50_Weights.DEFAULT if pretrained else None)
        net.fc = nn.Identity()
        self.net = net
        self.feature_dim = 2048

    def forward(self, x):
        return self.net(x)


class SemanticEncoder(nn.Module):
    def __init__(self, backbone: nn.Module, in_channels: int = 3):
        super().__init__()
        self.backbone = backbone
        self.in_channels = in_channels

    @property
    def feature_dim(self) -> int:
        return self.backbone.feature_dim

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim == 3:
            return self.forward(images.unsqueeze(0)).squeeze(0)
        if images.ndim != 4 or images.shape[1] != self.in_channels:
            raise ShapeError(f"expected (k, {self.in_channels}, H, W) images, got {tuple(images.shape)}")
        return self.backbone(images)


def build_semantic_encoder(kind: str, feature_dim: int) -> SemanticEncoder:
    if kind == "toy":
        return SemanticEncoder(ToyBackbone(feature_dim))
    if kind == "resnet50":
        if feature_dim != 2048:
            raise ShapeError("ResNet-50 backbone produces 2048-dim features")
        return SemanticEncoder(ResNet50Backbone())
    raise ValueError(f"unknown backbone {kind!r}")


class JSCEncoder(nn.Module):
    """Feature -> 2B channel symbols, power-normalized per block."""

    def __init__(self, feature_dim: int, n_symbols: int, power: float = 1.0):
        super().__init__()
        self.feature_dim = feature_dim
        self.n_symbols = n_symbols
        self.power = power
        self.fc1 = nn.Linear(feature_dim, 2 * n_symbols)
        self.bn1 = nn.BatchNorm1d(2 * n_symbols)
        self.fc2 = nn.Linear(2 * n_symbols, 2 * n_symbols)

    def raw(self, g: torch.Tensor) -> torch.Tensor:
        if g.shape[-1] != self.feature_dim:
            raise ShapeError(f"expected {self.feature_dim}-dim features, got {g.shape[-1]}")
        squeeze = g.ndim == 1
        if squeeze:
            g = g.unsqueeze(0)
        h = F_.leaky_relu(self.bn1(self.fc1(g)), LEAKY_SLOPE)
        out = self.fc2(h)
        return out.squeeze(0) if squeeze else out

    def forward(self, g: torch.Tensor) -> torch.Tensor:
        return normalize_power(self.raw(g), self.power)


class CoopJSCDecoder(nn.Module):
    """Jointly maps all users' detected symbols (N, 2B) to concatenated features (N*F)."""

    def __init__(self, n_users: int, n_symbols: int, feature_dim: int):
        super().__init__()
        self.n_users = n_users
        self.n_symbols = n_symbols
        self.feature_dim = feature_dim
        conv_out = CHANNELS_PER_USER * n_users
        self.conv = nn.Conv1d(n_users, conv_out, KERNEL, padding=KERNEL // 2)
        self.conv_width = conv_out * 2 * n_symbols
        self.fc1 = nn.Linear(self.conv_width, feature_dim)
        self.bn1 = nn.BatchNorm1d(feature_dim)
        self.fc2 = nn.Linear(feature_dim, n_users * feature_dim)

    def forward(self, x_hat: torch.Tensor) -> torch.Tensor:
        if x_hat.shape[-2:] != (self.n_users, 2 * self.n_symbols):
            raise ShapeError(
                f"expected detected symbols (..., {self.n_users}, {2 * self.n_symbols}), got {tuple(x_hat.shape)}")
        squeeze = x_hat.ndim == 2
        if squeeze:
            x_hat = x_hat.unsqueeze(0)
        h = self.conv(x_hat).flatten(1)
        h = F_.leaky_relu(self.bn1(self.fc1(h)), LEAKY_SLOPE)
        out = F_.leaky_relu(self.fc2(h), LEAKY_SLOPE)
        return out.squeeze(0) if squeeze else out

    def split(self, g_hat: torch.Tensor) -> torch.Tensor:
        """Reshape (..., N*F) into per-user features (..., N, F)."""
        return g_hat.unflatten(-1, (self.n_users, self.feature_dim))


class SeparateJSCDecoder(nn.Module):
    """Per-user decoder (2B -> F) used by the non-cooperative baseline."""

    def __init__(self, n_symbols: int, feature_dim: int):
        super().__init__()
        self.n_symbols = n_symbols
        self.feature_dim = feature_dim
        self.conv = nn.Conv1d(1, CHANNELS_PER_USER, KERNEL, padding=KERNEL // 2)
        self.conv_width = CHANNELS_PER_USER * 2 * n_symbols
        self.fc1 = nn.Linear(self.conv_width, feature_dim)
        self.bn1 = nn.BatchNorm1d(feature_dim)
        self.fc2 = nn.Linear(feature_dim, feature_dim)

    def forward(self, x_hat: torch.Tensor) -> torch.Tensor:
        if x_hat.shape[-1] != 2 * self.n_symbols:
            raise ShapeError(f"expected {2 * self.n_symbols} detected symbols, got {x_hat.shape[-1]}")
        lead = x_hat.shape[:-1]
        h = x_hat.reshape(-1, 1, 2 * self.n_symbols)
        h = self.conv(h).flatten(1)
        h = F_.leaky_relu(self.bn1(self.fc1(h)), LEAKY_SLOPE)
        out = F_.leaky_relu(self.fc2(h), LEAKY_SLOPE)
        return out.reshape(*lead, self.feature_dim)
