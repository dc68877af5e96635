"""Multi-task network: 3D transformer backbone, clinical fusion, 14 heads."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .clinical import FEATURE_DIM, TARGET_DIM

NUM_OUTPUTS = TARGET_DIM  # global + 13 sub-scores


class ModelConfigError(ValueError):
    """A backbone/modality configuration violates a divisibility constraint."""


@dataclass
class BackboneConfig:
    kind: str = "vit"  # vit | swin | none
    input_shape: Tuple[int, int, int] = (64, 64, 64)
    patch_size: int = 16
    embed_dim: int = 64
    depth: int = 4  # vit: total blocks; swin: blocks per stage
    num_heads: int = 4
    window_size: int = 4  # swin only
    num_stages: int = 2  # swin only
    mlp_ratio: float = 2.0
    pooling: str = "mean"  # mean | cls_token

    def __post_init__(self) -> None:
        if self.kind not in ("vit", "swin", "none"):
            raise ModelConfigError(f"unknown backbone kind {self.kind!r}")
        if self.kind == "none":
            return
        for axis, extent in enumerate(self.input_shape):
            if extent % self.patch_size != 0:
                raise ModelConfigError(
                    f"input_shape[{axis}]={extent} not divisible by "
                    f"patch_size={self.patch_size}"
                )
        if self.embed_dim % self.num_heads != 0:
            raise ModelConfigError(
                f"embed_dim={self.embed_dim} not divisible by num_heads={self.num_heads}"
            )
        if self.kind == "swin":
            grid = [s // self.patch_size for s in self.input_shape]
            for stage in range(self.num_stages):
                for axis, extent in enumerate(grid):
                    if extent % self.window_size != 0:
                        raise ModelConfigError(
                            f"stage {stage}: token grid axis {axis} ({extent}) not "
                            f"divisible by window_size={self.window_size}"
                        )
                grid = [g // 2 for g in grid]

    @property
    def token_grid(self) -> Tuple[int, int, int]:
        return tuple(s // self.patch_size for s in self.input_shape)

    @property
    def output_dim(self) -> int:
        if self.kind == "swin":
            return self.embed_dim * 2 ** (self.num_stages - 1)
        return self.embed_dim


@dataclass
class ModalityConfig:
    use_mri: bool = True
    use_clinical: bool = True

    def __post_init__(self) -> None:
        if not (self.use_mri or self.use_clinical):
            raise ModelConfigError("at least one modality must be enabled")


class TransformerBlock(nn.Module):
    """Pre-norm attention + MLP with residual connections."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, num_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        x = x + self.mlp(self.norm2(x))
        return x


class PatchEmbed3D(nn.Module):
    def __init__(self, patch_size: int, embed_dim: int):
        super().__init__()
        self.proj = nn.Conv3d(1, embed_dim, kernel_size=patch_size, stride=patch_size)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # (B, X, Y, Z) -> (B, tokens, C)
        x = self.proj(x.unsqueeze(1))
        return x.flatten(2).transpose(1, 2)


class ViT3D(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        self.patch_embed = PatchEmbed3D(config.patch_size, config.embed_dim)
        num_tokens = int(np.prod(config.token_grid))
        self.use_cls = config.pooling == "cls_token"
        if self.use_cls:
            self.cls_token = nn.Parameter(torch.zeros(1, 1, config.embed_dim))
            num_tokens += 1
        self.pos_embed = nn.Parameter(torch.zeros(1, num_tokens, config.embed_dim) )
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(config.embed_dim, config.num_heads, config.mlp_ratio)
            for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(config.embed_dim)

    @property
    def num_tokens(self) -> int:
        return int(np.prod(self.config.token_grid))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        tokens = self.patch_embed(x)
        if self.use_cls:
            cls = self.cls_token.expand(tokens.shape[0], -1, -1)
            tokens = torch.cat([cls, tokens], dim=1)
        tokens = tokens + self.pos_embed
        for block in self.blocks:
            tokens = block(tokens)
        tokens = self.norm(tokens)
        if self.use_cls:
            return tokens[:, 0]
        return tokens.mean(dim=1)


def _window_partition(x: torch.Tensor, w: int) -> torch.Tensor:
    # (B, X, Y, Z, C) -> (B * windows, w^3, C)
    b, gx, gy, gz, c = x.shape
    x = x.view(b, gx // w, w, gy // w, w, gz // w, w, c)
    x = x.permute(0, 1, 3, 5, 2, 4, 6, 7).contiguous()
    return x.view(-1, w * w * w, c)


def _window_reverse(x: torch.Tensor, w: int, grid: Tuple[int, int, int]) -> torch.Tensor:
    gx, gy, gz = grid
    b = x.shape[0] // (gx // w * gy // w * gz // w)
    x = x.view(b, gx // w, gy // w, gz // w, w, w, w, -1)
    x = x.permute(0, 1, 4, 2, 5, 3, 6, 7).contiguous()
    return x.view(b, gx, gy, gz, -1)


def _shift_attention_mask(grid: Tuple[int, int, int], w: int, shift: int) -> torch.Tensor:
    """Mask preventing attention across wrapped boundaries after cyclic shift."""
    region = torch.zeros(grid)
    count = 0
    slices = [slice(0, -w), slice(-w, -shift), slice(-shift, None)]
    for sx in slices:
        for sy in slices:
            for sz in slices:
                region[sx, sy, sz] = count
                count += 1
    windows = _window_partition(region.unsqueeze(0).unsqueeze(-1), w).squeeze(-1)
    diff = windows.unsqueeze(1) - windows.unsqueeze(2)
    return diff.ne(0) * -100.0


class WindowAttentionBlock(nn.Module):
    def __init__(self, dim, num_heads, mlp_ratio, window_size, shift, grid):
        super().__init__()
        self.window_size = window_size
        self.shift = shift
        self.grid = grid
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, num_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        if shift > 0:
            mask = _shift_attention_mask(grid, window_size, shift)
            self.register_buffer("attn_mask", mask, persistent=False)
        else:
            self.attn_mask = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, gx, gy, gz, C)
        b = x.shape[0]
        shortcut = x
        h = self.norm1(x)
        if self.shift > 0:
            h = torch.roll(h, shifts=(-self.shift,) * 3, dims=(1, 2, 3))
        windows = _window_partition(h, self.window_size)
        mask = None
        if self.attn_mask is not None:
            # windows are stacked batch-major; expand per batch then per head
            mask = self.attn_mask.repeat(b, 1, 1)
            mask = mask.repeat_interleave(self.attn.num_heads, dim=0)
        attended = self.attn(windows, windows, windows, need_weights=False, attn_mask=mask)[0]
        h = _window_reverse(attended, self.window_size, self.grid)
        if self.shift > 0:
            h = torch.roll(h, shifts=(self.shift,) * 3, dims=(1, 2, 3))
        x = shortcut + h
        x = x + self.mlp(self.norm2(x))
        return x


class PatchMerging3D(nn.Module):
    """Halve the token grid per axis; double the channel width."""

    def __init__(self, dim: int):
        super().__init__()
        self.reduction = nn.Linear(8 * dim, 2 * dim, bias=False)
        self.norm = nn.LayerNorm(8 * dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, gx, gy, gz, c = x.shape
        x = x.view(b, gx // 2, 2, gy // 2, 2, gz // 2, 2, c)
        x = x.permute(0, 1, 3, 5, 2, 4, 6, 7).reshape(b, gx // 2, gy // 2, gz // 2, 8 * c)
        return self.reduction(self.norm(x))


class Swin3D(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        self.patch_embed = PatchEmbed3D(config.patch_size, config.embed_dim)
        grid = config.token_grid
        dim = config.embed_dim
        shift = config.window_size // 2
        self.stages = nn.ModuleList()
        self.mergers = nn.ModuleList()
        self.stage_grids = []
        for stage in range(config.num_stages):
            blocks = nn.ModuleList(
                WindowAttentionBlock(
                    dim,
                    config.num_heads,
                    config.mlp_ratio,
                    config.window_size,
                    shift if i % 2 == 1 else 0,
                    grid,
                )
                for i in range(config.depth)
            )
            self.stages.append(blocks)
            self.stage_grids.append(grid)
            if stage < config.num_stages - 1:
                self.mergers.append(PatchMerging3D(dim))
                grid = tuple(g // 2 for g in grid)
                dim *= 2
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        tokens = self.patch_embed(x)
        gx, gy, gz = self.config.token_grid
        h = tokens.view(-1, gx, gy, gz, self.config.embed_dim)
        for stage, blocks in enumerate(self.stages):
            for block in blocks:
                h = block(h)
            if stage < len(self.mergers):
                h = self.mergers[stage](h)
        h = self.norm(h)
        return h.flatten(1, 3).mean(dim=1)


class MtlModel(nn.Module):
    """Backbone + clinical encoder + shared trunk + 14 regression heads."""

    def __init__(
        self,
        backbone_config: BackboneConfig,
        modality: ModalityConfig,
        trunk_width: int = 64,
    ):
        super().__init__()
        self.backbone_config = backbone_config
        self.modality = modality
        self.trunk_width = trunk_width
        fused_dim = 0
        self.backbone: Optional[nn.Module] = None
        if modality.use_mri:
            if backbone_config.kind == "none":
                raise ModelConfigError("use_mri=True requires a vit or swin backbone")
            self.backbone = (
                ViT3D(backbone_config) if backbone_config.kind == "vit" else Swin3D(backbone_config)
            )
            fused_dim += backbone_config.output_dim
        self.clinical_encoder: Optional[nn.Module] = None
        if modality.use_clinical:
            self.clinical_encoder = nn.Linear(FEATURE_DIM, backbone_config.embed_dim)
            fused_dim += backbone_config.embed_dim
        self.trunk = nn.Sequential(nn.Linear(fused_dim, trunk_width), nn.ReLU())
        self.heads = nn.ModuleList(nn.Linear(trunk_width, 1) for _ in range(NUM_OUTPUTS))

    @property
    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def embed_mri(self, volumes: torch.Tensor) -> torch.Tensor:
        if self.backbone is None:
            raise ModelConfigError("model has no MRI backbone")
        expected = self.backbone_config.input_shape
        if tuple(volumes.shape[1:]) != expected:
            raise ValueError(
                f"volume batch shape {tuple(volumes.shape[1:])} != configured {expected}"
            )
        return self.backbone(volumes)

    def forward(
        self,
        volumes: Optional[torch.Tensor] = None,
        clinical: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        parts = []
        if self.modality.use_mri:
            if volumes is None:
                raise ValueError("use_mri=True but no volume batch given")
            parts.append(self.embed_mri(volumes))
        if self.modality.use_clinical:
            if clinical is None:
                raise ValueError("use_clinical=True but no clinical batch given")
            parts.append(self.clinical_encoder(clinical))
        fused = torch.cat(parts, dim=1)
        shared = self.trunk(fused)
        out = torch.cat([head(shared) for head in self.heads], dim=1)
        if not torch.isfinite(out).all():
            for name, param in self.named_parameters():
                if not torch.isfinite(param).all():
                    raise FloatingPointError(f"non-finite parameter at {name}")
            raise FloatingPointError("non-finite model output with finite parameters")
        return out


def build_model(
    backbone: BackboneConfig,
    modality: ModalityConfig,
    trunk_width: int = 64,
    seed: int = 0,
) -> MtlModel:
    """Deterministic construction: same seed, same initial parameters."""
    torch.manual_seed(seed)
    return MtlModel(backbone, modality, trunk_width=trunk_width)


def config_hash(backbone: BackboneConfig, modality: ModalityConfig, trunk_width: int) -> str:
    payload = json.dumps(
        {"backbone": asdict(backbone), "modality": asdict(modality), "trunk_width": trunk_width},
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()


def save_checkpoint(model: MtlModel, path: Path | str) -> None:
    torch.save(
        {
            "backbone": asdict(model.backbone_config),
            "modality": asdict(model.modality),
            "trunk_width": model.trunk_width,
            "config_hash": config_hash(
                model.backbone_config, model.modality, model.trunk_width
            ),
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_checkpoint(path: Path | str) -> MtlModel:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    backbone = BackboneConfig(**payload["backbone"])
    modality = ModalityConfig(**payload["modality"])
    expected = config_hash(backbone, modality, payload["trunk_width"])
    if expected != payload["config_hash"]:
        raise ModelConfigError(f"checkpoint config hash mismatch in {path}")
    model = MtlModel(backbone, modality, trunk_width=payload["trunk_width"])
    model.load_state_dict(payload["state_dict"])
    return model
