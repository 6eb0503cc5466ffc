"""Segmentation networks, softmax confidence and pseudo-label generation."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import N_CLASSES
from .errors import NonFinite, ShapeMismatch

CHECKPOINT_VERSION = 1
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class ModelConfig:
    architecture: str = "deeplabv3plus"  # or "small_unet"
    encoder: str = "resnet50"  # or "tiny"
    n_classes: int = N_CLASSES
    pretrained_encoder: bool = False
    input_size: tuple[int, int] = (512, 512)
    width: int = 16  # base channel count of the small networks
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        self.input_size = tuple(self.input_size)
        self.mean = tuple(self.mean)
        self.std = tuple(self.std)
        if self.architecture not in ("deeplabv3plus", "small_unet"):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.encoder not in ("resnet50", "tiny"):
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.n_classes != N_CLASSES:
            raise ValueError(f"n_classes must equal the taxonomy size {N_CLASSES}")


def _conv_bn(cin, cout, k=3, dilation=1, separable=False):
    pad = dilation * (k // 2)
    if separable and k > 1:
        conv = [nn.Conv2d(cin, cin, k, padding=pad, dilation=dilation, groups=cin, bias=False),
                nn.Conv2d(cin, cout, 1, bias=False)]
    else:
        conv = [nn.Conv2d(cin, cout, k, padding=pad, dilation=dilation, bias=False)]
    return nn.Sequential(*conv, nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class ASPP(nn.Module):
    def __init__(self, cin, cout=256, rates=(6, 12, 18)):
        super().__init__()
        self.branches = nn.ModuleList(
            [_conv_bn(cin, cout, 1)] + [_conv_bn(cin, cout, 3, dilation=r, separable=True) for r in rates]
        )
        self.pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(cin, cout, 1, bias=False), nn.ReLU(inplace=True))
        self.project = nn.Sequential(_conv_bn(cout * (len(rates) + 2), cout, 1), nn.Dropout(0.1))

    def forward(self, x):
        feats = [b(x) for b in self.branches]
        pooled = F.interpolate(self.pool(x), size=x.shape[2:], mode="bilinear", align_corners=False)
        return self.project(torch.cat(feats + [pooled], dim=1))


class TinyEncoder(nn.Module):
    """Small strided conv stack exposing a stride-4 low-level and a stride-16 high-level map."""

    def __init__(self, width=16):
        super().__init__()
        w = width
        self.stem = nn.Sequential(_conv_bn(3, w), nn.MaxPool2d(2), _conv_bn(w, 2 * w), nn.MaxPool2d(2))
        self.deep = nn.Sequential(_conv_bn(2 * w, 4 * w), nn.MaxPool2d(2), _conv_bn(4 * w, 8 * w), nn.MaxPool2d(2))
        self.low_channels, self.high_channels = 2 * w, 8 * w

    def forward(self, x):
        low = self.stem(x)
        return low, self.deep(low)


class ResNet50Encoder(nn.Module):
    def __init__(self, pretrained=False):
        super().__init__()
        from torchvision.models import resnet50

        weights = None
        if pretrained:
            from torchvision.models import ResNet50_Weights

            cache = os.environ.get("FRACTOSEG_CACHE")
            if cache:
                os.environ.setdefault("TORCH_HOME", cache)
            weights = ResNet50_Weights.IMAGENET1K_V1
        net = resnet50(weights=weights, replace_stride_with_dilation=[False, False, True])
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1, self.layer2, self.layer3, self.layer4 = net.layer1, net.layer2, net.layer3, net.layer4
        self.low_channels, self.high_channels = 256, 2048

    def forward(self, x):
        low = self.layer1(self.stem(x))
        return low, self.layer4(self.layer3(self.layer2(low)))


class DeepLabV3Plus(nn.Module):
    """Encoder + ASPP + light decoder fusing stride-4 features; output at input resolution."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.encoder == "resnet50":
            self.encoder = ResNet50Encoder(cfg.pretrained_encoder)
            aspp_ch, low_ch, dec_ch = 256, 48, 256
        else:
            self.encoder = TinyEncoder(cfg.width)
            aspp_ch, low_ch, dec_ch = 4 * cfg.width, cfg.width, 4 * cfg.width
        self.aspp = ASPP(self.encoder.high_channels, aspp_ch)
        self.low_proj = _conv_bn(self.encoder.low_channels, low_ch, 1)
        self.decoder = nn.Sequential(
            _conv_bn(aspp_ch + low_ch, dec_ch, 3, separable=True),
            _conv_bn(dec_ch, dec_ch, 3, separable=True),
        )
        self.head = nn.Conv2d(dec_ch, cfg.n_classes, 1)

    def forward(self, x):
        size = x.shape[2:]
        low, high = self.encoder(x)
        high = F.interpolate(self.aspp(high), size=low.shape[2:], mode="bilinear", align_corners=False)
        out = self.head(self.decoder(torch.cat([high, self.low_proj(low)], dim=1)))
        return F.interpolate(out, size=size, mode="bilinear", align_corners=False)


def _double_conv(cin, cout):
    return nn.Sequential(_conv_bn(cin, cout), _conv_bn(cout, cout))


class SmallUNet(nn.Module):
    """Three-level U-Net for desk-scale runs."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.width
        self.enc1, self.enc2, self.enc3 = _double_conv(3, w), _double_conv(w, 2 * w), _double_conv(2 * w, 4 * w)
        self.up2 = nn.ConvTranspose2d(4 * w, 2 * w, 2, stride=2)
        self.dec2 = _double_conv(4 * w, 2 * w)
        self.up1 = nn.ConvTranspose2d(2 * w, w, 2, stride=2)
        self.dec1 = _double_conv(2 * w, w)
        self.head = nn.Conv2d(w, cfg.n_classes, 1)

    def forward(self, x):
        a = self.enc1(x)
        b = self.enc2(F.max_pool2d(a, 2))
        c = self.enc3(F.max_pool2d(b, 2))
        d = self.dec2(torch.cat([self.up2(c), b], dim=1))
        e = self.dec1(torch.cat([self.up1(d), a], dim=1))
        return self.head(e)


def build_model(cfg: ModelConfig) -> nn.Module:
    if cfg.architecture == "deeplabv3plus":
        return DeepLabV3Plus(cfg)
    return SmallUNet(cfg)


def to_tensor(images: np.ndarray, cfg: ModelConfig) -> torch.Tensor:
    """uint8 BxHxWx3 (or HxWx3) to normalized float32 Bx3xHxW."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ShapeMismatch(f"expected BxHxWx3 images, got {arr.shape}")
    x = torch.from_numpy(np.ascontiguousarray(arr)).float().div_(255.0)
    mean = torch.tensor(cfg.mean).view(1, 1, 1, 3)
    std = torch.tensor(cfg.std).view(1, 1, 1, 3)
    return ((x - mean) / std).permute(0, 3, 1, 2).contiguous()


@torch.no_grad()
def forward(model: nn.Module, images: np.ndarray, cfg: ModelConfig, batch_size: int = 8) -> np.ndarray:
    """Eval-mode logits as a BxHxWxC float32 array."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if tuple(arr.shape[1:3]) != tuple(cfg.input_size):
        raise ShapeMismatch(f"inputs must be {cfg.input_size}, got {arr.shape[1:3]}")
    was_training = model.training
    model.eval()
    device = next(model.parameters()).device
    outs = []
    for i in range(0, len(arr), batch_size):
        z = model(to_tensor(arr[i:i + batch_size], cfg).to(device))
        outs.append(z.permute(0, 2, 3, 1).cpu().numpy())
    model.train(was_training)
    return np.concatenate(outs, axis=0)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax over the class axis."""
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NonFinite("logits contain non-finite values")
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class PseudoLabel:
    labels: np.ndarray
    confidence: np.ndarray
    valid: np.ndarray


def pseudo_label(z: np.ndarray, tau: float = 0.8) -> PseudoLabel:
    """Argmax labels plus a validity map marking pixels with max softmax >= tau."""
    p = softmax(z)
    conf = p.max(axis=-1)
    return PseudoLabel(p.argmax(axis=-1).astype(np.uint8), conf, conf >= tau)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, model: nn.Module, cfg: ModelConfig, epoch: int, extra: dict | None = None,
                    state_dict: dict | None = None) -> None:
    """Write ``{format_version, model_config, state_dict, epoch, ...extra}`` with torch.save."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": asdict(cfg),
        "state_dict": state_dict if state_dict is not None else model.state_dict(),
        "epoch": int(epoch),
    }
    payload.update(extra or {})
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[nn.Module, ModelConfig, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version", 0)
    if version > CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint format {version} is newer than supported {CHECKPOINT_VERSION}")
    cfg = ModelConfig(**payload["model_config"])
    model = build_model(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, cfg, payload
