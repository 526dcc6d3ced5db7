"""Encoders, 128-d projection heads and the segmentation decoder."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .jigsaw import N_PATCHES

EMBED_DIM = 128
NORM_EPS = 1e-12

ARCHITECTURES = ("tiny_cnn", "reference_resnet50")


@dataclass(frozen=True)
class EncoderConfig:
    architecture: str = "tiny_cnn"
    perceptual_tap_layer: Optional[int] = None  # flattened leaf index; None = default
    feature_dim: int = 128
    image_input_size: int = 96
    patch_input_size: int = 32
    pretrained_weights: Optional[str] = None

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")


def encoder_config(architecture: str = "tiny_cnn", **overrides) -> EncoderConfig:
    """Config with per-architecture defaults filled in."""
    if architecture == "tiny_cnn":
        base = dict(feature_dim=128, image_input_size=96, patch_input_size=32)
    elif architecture == "reference_resnet50":
        base = dict(
            feature_dim=2048,
            image_input_size=224,
            patch_input_size=64,
            perceptual_tap_layer=40,
        )
    else:
        raise ValueError(f"unknown architecture {architecture!r}")
    base.update(overrides)
    return EncoderConfig(architecture=architecture, **base)


class TinyCNN(nn.Module):
    """Four stride-2 conv stages (16/32/64/128) with global average pooling.

    The perceptual tap is the stage-3 feature map; feature_dim is 128.
    CPU-trainable stand-in that keeps the full interface of the big backbone.
    """

    stage_channels = (16, 32, 64, 128)
    feature_dim = 128

    def __init__(self):
        super().__init__()
        chans = (3,) + self.stage_channels
        self.stages = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1),
                nn.BatchNorm2d(chans[i + 1]),
                nn.ReLU(inplace=True),
            )
            for i in range(4)
        )

    def forward_stages(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (pooled features [B, 128], tap feature map [B, 64, h, w])."""
        feats = self.forward_stages(x)
        pooled = F.adaptive_avg_pool2d(feats[-1], 1).flatten(1)
        return pooled, feats[2]


def _leaf_modules(module: nn.Module) -> list[nn.Module]:
    return [m for m in module.modules() if len(list(m.children())) == 0]


class ResNet50Encoder(nn.Module):
    """Reference backbone; the perceptual tap hooks a flattened leaf-module index."""

    feature_dim = 2048

    def __init__(self, tap_layer: int = 40, weights_path: Optional[str] = None):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        if weights_path is not None:
            try:
                state = torch.load(weights_path, map_location="cpu", weights_only=True)
            except Exception as exc:
                raise RuntimeError(f"could not load encoder weights from {weights_path}: {exc}")
            missing, unexpected = net.load_state_dict(state, strict=False)
            if missing or unexpected:
                raise RuntimeError(
                    f"weight file {weights_path} does not match the backbone "
                    f"(missing {len(missing)}, unexpected {len(unexpected)} keys)"
                )
        net.fc = nn.Identity()
        self.net = net
        leaves = _leaf_modules(net)
        if not 0 <= tap_layer < len(leaves):
            raise ValueError(f"tap layer {tap_layer} out of range (0..{len(leaves) - 1})")
        self.tap_layer = tap_layer
        self._tap_value: Optional[torch.Tensor] = None
        leaves[tap_layer].register_forward_hook(self._capture)

    def _capture(self, module, inputs, output):
        self._tap_value = output

    def forward_stages(self, x: torch.Tensor) -> list[torch.Tensor]:
        n = self.net
        s0 = n.relu(n.bn1(n.conv1(x)))
        s1 = n.layer1(n.maxpool(s0))
        s2 = n.layer2(s1)
        s3 = n.layer3(s2)
        s4 = n.layer4(s3)
        return [s0, s1, s2, s3, s4]

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        self._tap_value = None
        pooled = self.net(x)
        tap = self._tap_value
        assert tap is not None, "tap hook did not fire"
        return pooled, tap


def build_encoder(cfg: EncoderConfig) -> nn.Module:
    if cfg.architecture == "tiny_cnn":
        return TinyCNN()
    tap = cfg.perceptual_tap_layer if cfg.perceptual_tap_layer is not None else 40
    return ResNet50Encoder(tap_layer=tap, weights_path=cfg.pretrained_weights)


def project_normalize(features: torch.Tensor, head: nn.Linear) -> torch.Tensor:
    """Linear projection to 128-d followed by L2 normalization (eps-guarded)."""
    if features.shape[-1] != head.in_features:
        raise ValueError(
            f"feature width {features.shape[-1]} does not match head input {head.in_features}"
        )
    z = head(features)
    return z / (z.norm(dim=-1, keepdim=True) + NORM_EPS)


def pool_tap(tap: torch.Tensor) -> torch.Tensor:
    """Global average pool a spatial tap map to a [.., C] vector."""
    return tap.mean(dim=(-2, -1))


class PretextModel(nn.Module):
    """Encoder plus the independent image head f and patch head g."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = build_encoder(cfg)
        self.head_f = nn.Linear(cfg.feature_dim, EMBED_DIM)
        self.head_g = nn.Linear(N_PATCHES * cfg.feature_dim, EMBED_DIM)

    def encode_image(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """x: [B,3,H,W] -> (unit embeddings [B,128], pooled tap [B,C])."""
        feats, tap = self.encoder(x)
        return project_normalize(feats, self.head_f), pool_tap(tap)

    def encode_patches(self, patches: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """patches: [B,36,3,p,p] -> (unit embeddings [B,128], pooled taps [B,36,C])."""
        if patches.shape[1] != N_PATCHES:
            raise ValueError(f"expected {N_PATCHES} patches per sample, got {patches.shape[1]}")
        b = patches.shape[0]
        flat = patches.reshape(b * N_PATCHES, *patches.shape[2:])
        feats, tap = self.encoder(flat)
        concat = feats.reshape(b, N_PATCHES * feats.shape[-1])
        taps = pool_tap(tap).reshape(b, N_PATCHES, -1)
        return project_normalize(concat, self.head_g), taps


def encode_patches_concat(model: PretextModel, patches: torch.Tensor) -> torch.Tensor:
    """Concatenated per-patch feature vector [B, 36*feature_dim], in patch order."""
    if patches.shape[1] != N_PATCHES:
        raise ValueError(f"expected {N_PATCHES} patches per sample, got {patches.shape[1]}")
    b = patches.shape[0]
    flat = patches.reshape(b * N_PATCHES, *patches.shape[2:])
    feats, _ = model.encoder(flat)
    return feats.reshape(b, N_PATCHES * feats.shape[-1])


class _DecoderBlock(nn.Module):
    def __init__(self, in_ch: int, skip_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(in_ch + skip_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor, skip: Optional[torch.Tensor]) -> torch.Tensor:
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        if skip is not None:
            x = torch.cat([x, skip], dim=1)
        return self.conv(x)


class SegmentationModel(nn.Module):
    """Encoder + U-shaped decoder with skip connections; 2-class pixel logits."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = build_encoder(cfg)
        if cfg.architecture == "tiny_cnn":
            enc_ch = list(TinyCNN.stage_channels)  # strides 2,4,8,16
            dec_ch = [64, 32, 16, 16]
        else:
            enc_ch = [64, 256, 512, 1024, 2048]  # strides 2,4,8,16,32
            dec_ch = [256, 128, 64, 32, 16]
        blocks = []
        in_ch = enc_ch[-1]
        skips = enc_ch[:-1][::-1] + [0]
        for skip_ch, out_ch in zip(skips, dec_ch):
            blocks.append(_DecoderBlock(in_ch, skip_ch, out_ch))
            in_ch = out_ch
        self.decoder = nn.ModuleList(blocks)
        self.classifier = nn.Conv2d(dec_ch[-1], 2, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = self.encoder.forward_stages(x)
        out = feats[-1]
        skips = feats[:-1][::-1] + [None]
        for block, skip in zip(self.decoder, skips):
            out = block(out, skip)
        return self.classifier(out)

    @torch.no_grad()
    def predict_masks(self, x: torch.Tensor) -> torch.Tensor:
        """Argmax masks [B,H,W] with values in {0,1}."""
        was_training = self.training
        self.eval()
        logits = self.forward(x)
        if was_training:
            self.train()
        return logits.argmax(dim=1).to(torch.uint8)
