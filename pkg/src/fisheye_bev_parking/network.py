"""Fisheye cross-view transformer: backbone stub, projection embeddings, BEV attention."""

from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from einops import rearrange
from torch import Tensor, nn

from .bev import bev_cell_centers
from .camera import CAMERA_NAMES, CameraCalibration, build_projection_encoding
from .config import EndpointConfig, ModelConfig
from .errors import ShapeError
from .heads import DetectionHead, SegmentationHead
from .layers import ResidualBlock, activation, norm2d
from .tensor import masked_softmax

BevHook = Callable[[Tensor], Tensor]


@dataclass(frozen=True, slots=True)
class EncodingBatch:
    """Projection encodings for a batch, one entry per endpoint.

    ``rays[i]`` is ``(B, N, h_i, w_i, 3)``, ``valid[i]`` is ``(B, N, h_i, w_i)`` and
    ``camera_index`` is ``(B, N)``.
    """

    rays: tuple[Tensor, ...]
    valid: tuple[Tensor, ...]
    camera_index: Tensor

    def permute_cameras(self, order: Sequence[int]) -> EncodingBatch:
        idx = list(order)
        return EncodingBatch(
            rays=tuple(r[:, idx] for r in self.rays),
            valid=tuple(v[:, idx] for v in self.valid),
            camera_index=self.camera_index[:, idx],
        )


def encode_rigs(
    rigs: Sequence[Sequence[CameraCalibration]],
    cfg: ModelConfig,
    dtype: torch.dtype = torch.float32,
) -> EncodingBatch:
    """Projection encodings for each sample's rig on the cropped, resized input geometry."""
    rays: list[list[np.ndarray]] = [[] for _ in cfg.endpoint_shapes]
    valid: list[list[np.ndarray]] = [[] for _ in cfg.endpoint_shapes]
    index: list[list[int]] = []
    for rig in rigs:
        index.append([calib.index for calib in rig])
        for level, shape in enumerate(cfg.endpoint_shapes):
            encs = [
                build_projection_encoding(calib, shape, cfg.crop_top, cfg.input_size)
                for calib in rig
            ]
            rays[level].append(np.stack([e.rays for e in encs]))
            valid[level].append(np.stack([e.valid for e in encs]))
    return EncodingBatch(
        rays=tuple(torch.from_numpy(np.stack(r)).to(dtype) for r in rays),
        valid=tuple(torch.from_numpy(np.stack(v)) for v in valid),
        camera_index=torch.tensor(index, dtype=torch.long),
    )


def prepare_images(images: Tensor, crop_top: int, input_size: tuple[int, int]) -> Tensor:
    """Crop ``crop_top`` rows off ``(B, N, 3, H, W)`` native images and resize to ``input_size``."""
    b, n = images.shape[:2]
    cropped = images[..., crop_top:, :]
    width, height = input_size
    if cropped.shape[-2:] == (height, width):
        return cropped
    flat = rearrange(cropped, "b n c h w -> (b n) c h w")
    resized = F.interpolate(flat, size=(height, width), mode="bilinear", align_corners=False)
    return rearrange(resized, "(b n) c h w -> b n c h w", b=b, n=n)


class BackboneStub(nn.Module):
    """Stem conv and stride-2 stages, tapped at the two endpoint strides."""

    def __init__(
        self,
        stem_channels: int,
        endpoints: tuple[EndpointConfig, EndpointConfig],
        act: str = "relu",
    ) -> None:
        super().__init__()
        self.register_buffer("mean", torch.full((1, 3, 1, 1), 0.5), persistent=False)
        self.register_buffer("std", torch.full((1, 3, 1, 1), 0.25), persistent=False)
        self.stem = nn.Sequential(
            nn.Conv2d(3, stem_channels, 3, padding=1),
            norm2d(stem_channels),
            activation(act),
        )
        first, second = endpoints
        self.first_taps = int(math.log2(first.stride))
        stages: list[nn.Module] = []
        channels = stem_channels
        for k in range(int(math.log2(second.stride))):
            out = first.channels if k < self.first_taps else second.channels
            stages.append(
                nn.Sequential(
                    nn.Conv2d(channels, out, kernel_size=2, stride=2),
                    norm2d(out),
                    activation(act),
                )
            )
            channels = out
        self.stages = nn.ModuleList(stages)
        self.taps = nn.ModuleList(
            [
                nn.Conv2d(first.channels, first.channels, 1),
                nn.Conv2d(second.channels, second.channels, 1),
            ]
        )

    def forward(self, images: Tensor) -> tuple[Tensor, Tensor]:
        x = self.stem((images - self.mean) / self.std)
        tapped: list[Tensor] = []
        for k, stage in enumerate(self.stages, start=1):
            x = stage(x)
            if k == self.first_taps:
                tapped.append(self.taps[0](x))
        tapped.append(self.taps[1](x))
        return tapped[0], tapped[1]


class PositionalEmbedding(nn.Module):
    """Pointwise MLP on ``[ray, one-hot(camera)]``."""

    def __init__(self, dim: int, hidden: int, act: str = "relu") -> None:
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(3 + len(CAMERA_NAMES), hidden),
            activation(act),
            nn.Linear(hidden, dim),
        )

    def forward(self, rays: Tensor, camera_index: Tensor) -> Tensor:
        """``rays (B, N, h, w, 3)``, ``camera_index (B, N)`` → ``(B, N, h, w, dim)``."""
        one_hot = F.one_hot(camera_index, len(CAMERA_NAMES)).to(rays.dtype)
        one_hot = one_hot[:, :, None, None, :].expand(*rays.shape[:-1], len(CAMERA_NAMES))
        return self.mlp(torch.cat([rays, one_hot], dim=-1))


class MapEmbedding(nn.Module):
    """Learned query per BEV cell, initialised from an MLP of the cell-centre coordinates."""

    def __init__(
        self, dim: int, rows: int, extent_m: float, hidden: int, act: str = "relu"
    ) -> None:
        super().__init__()
        grid = bev_cell_centers(rows, extent_m).to(torch.get_default_dtype())
        self.register_buffer("grid", grid, persistent=False)
        init = nn.Sequential(nn.Linear(2, hidden), activation(act), nn.Linear(hidden, dim))
        with torch.no_grad():
            values = init(self.grid / (extent_m / 2.0))
        self.learned = nn.Parameter(rearrange(values, "h w d -> d h w").contiguous())

    def forward(self) -> Tensor:
        return self.learned


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: int,
    mask: Tensor | None = None,
) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention; ``mask (B, K)`` is true for keys that may be attended.

    Returns the ``(B, Q, C)`` output and the ``(B, heads, Q, K)`` weights.
    """
    if q.shape[-1] % heads:
        raise ShapeError(f"{q.shape[-1]} channels do not split into {heads} heads")
    q = rearrange(q, "b q (m d) -> b m q d", m=heads)
    k = rearrange(k, "b k (m d) -> b m k d", m=heads)
    v = rearrange(v, "b k (m d) -> b m k d", m=heads)
    dot = torch.einsum("b m q d, b m k d -> b m q k", q, k) * q.shape[-1] ** -0.5
    weights = masked_softmax(dot, None if mask is None else mask[:, None, None, :])
    out = torch.einsum("b m q k, b m k d -> b m q d", weights, v)
    return rearrange(out, "b m q d -> b q (m d)"), weights


class CrossViewAttention(nn.Module):
    """BEV queries attending over every camera's cells of one endpoint."""

    def __init__(
        self,
        feat_channels: int,
        dim: int,
        heads: int,
        head_channels: int,
        hidden: int,
        mlp_ratio: int = 2,
        act: str = "relu",
    ) -> None:
        super().__init__()
        self.heads = heads
        self.positional = PositionalEmbedding(dim, hidden, act)
        self.feature_proj = nn.Sequential(
            norm2d(feat_channels), activation(act), nn.Conv2d(feat_channels, dim, 1, bias=False)
        )
        self.feature_linear = nn.Sequential(
            norm2d(feat_channels), activation(act), nn.Conv2d(feat_channels, dim, 1, bias=False)
        )
        inner = heads * head_channels
        self.to_q = nn.Sequential(nn.LayerNorm(dim), nn.Linear(dim, inner))
        self.to_k = nn.Sequential(nn.LayerNorm(dim), nn.Linear(dim, inner))
        self.to_v = nn.Sequential(nn.LayerNorm(dim), nn.Linear(dim, inner))
        self.proj = nn.Linear(inner, dim)
        self.prenorm = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), activation(act), nn.Linear(mlp_ratio * dim, dim)
        )
        self.postnorm = nn.LayerNorm(dim)

    def forward(
        self,
        query: Tensor,
        features: Tensor,
        rays: Tensor,
        valid: Tensor,
        camera_index: Tensor,
    ) -> Tensor:
        """``query (B, C, R, R)``, ``features (B, N, Cf, h, w)`` → ``(B, C, R, R)``."""
        b, n = features.shape[:2]
        if rays.shape[:4] != (b, n, *features.shape[-2:]):
            raise ShapeError(
                f"encoding {tuple(rays.shape[:4])} does not match features {tuple(features.shape)}"
            )
        rows, cols = query.shape[-2:]
        flat = rearrange(features, "b n c h w -> (b n) c h w")
        key_feat = rearrange(self.feature_proj(flat), "(b n) d h w -> b (n h w) d", b=b, n=n)
        val = rearrange(self.feature_linear(flat), "(b n) d h w -> b (n h w) d", b=b, n=n)
        pos = rearrange(self.positional(rays, camera_index), "b n h w d -> b (n h w) d")

        q = rearrange(query, "b d h w -> b (h w) d")
        attended, _ = multi_head_attention(
            self.to_q(q),
            self.to_k(pos + key_feat),
            self.to_v(val),
            self.heads,
            mask=rearrange(valid, "b n h w -> b (n h w)"),
        )
        z = self.proj(attended) + q
        z = self.prenorm(z)
        z = z + self.mlp(z)
        z = self.postnorm(z)
        return rearrange(z, "b (h w) d -> b d h w", h=rows, w=cols)


class Bottleneck(nn.Sequential):
    def __init__(self, channels: int, act: str = "relu") -> None:
        super().__init__(ResidualBlock(channels, act), ResidualBlock(channels, act))


@dataclass(frozen=True, slots=True)
class NetworkOutput:
    bev: Tensor
    segmentation: Tensor | None
    detection: Tensor | None


class ParkingPerceptionNet(nn.Module):
    """Backbone stub, two cross-view attention levels, bottleneck and task heads."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.cfg = cfg
        dim = cfg.bev_channels
        act = cfg.activation
        endpoints = cfg.endpoint_configs
        self.backbone = BackboneStub(cfg.stem_channels, endpoints, act)
        self.map_embedding = MapEmbedding(
            dim, cfg.bev.rows, cfg.bev.extent_m, cfg.embedding_hidden, act
        )
        att = cfg.attention
        # coarse endpoint first, the fine endpoint refines it
        self.levels = nn.ModuleList(
            [
                CrossViewAttention(
                    feat_channels=ep.channels,
                    dim=dim,
                    heads=att.heads,
                    head_channels=att.head_channels,
                    hidden=cfg.embedding_hidden,
                    mlp_ratio=att.mlp_ratio,
                    act=act,
                )
                for ep in (endpoints[1], endpoints[0])
            ]
        )
        self.bottleneck = Bottleneck(dim, act)
        self.segmentation = (
            SegmentationHead(dim, cfg.seg_channels, act) if cfg.uses_segmentation else None
        )
        self.detection = (
            DetectionHead(dim, cfg.detection_blocks, act) if cfg.uses_detection else None
        )

    def extract_features(self, images: Tensor) -> tuple[Tensor, Tensor]:
        """``(B, N, 3, H, W)`` input images → per-endpoint ``(B, N, C, h, w)`` features."""
        b, n = images.shape[:2]
        fine, coarse = self.backbone(rearrange(images, "b n c h w -> (b n) c h w"))
        return (
            rearrange(fine, "(b n) c h w -> b n c h w", b=b, n=n),
            rearrange(coarse, "(b n) c h w -> b n c h w", b=b, n=n),
        )

    def project_to_bev(
        self,
        features: tuple[Tensor, Tensor],
        encoding: EncodingBatch,
        bev_hook: BevHook | None = None,
    ) -> Tensor:
        b = features[0].shape[0]
        embedding = self.map_embedding()[None].expand(b, -1, -1, -1)
        x = embedding
        for k, level in enumerate(self.levels):
            ep = 1 - k
            query = embedding if k == 0 else x + embedding
            x = level(
                query, features[ep], encoding.rays[ep], encoding.valid[ep], encoding.camera_index
            )
        bev = self.bottleneck(x)
        return bev if bev_hook is None else bev_hook(bev)

    def run_heads(self, bev: Tensor) -> tuple[Tensor | None, Tensor | None]:
        seg = self.segmentation(bev) if self.segmentation is not None else None
        det = self.detection(bev) if self.detection is not None else None
        return seg, det

    def forward(
        self,
        images: Tensor,
        encoding: EncodingBatch,
        bev_hook: BevHook | None = None,
    ) -> NetworkOutput:
        features = self.extract_features(images)
        bev = self.project_to_bev(features, encoding, bev_hook)
        seg, det = self.run_heads(bev)
        return NetworkOutput(bev=bev, segmentation=seg, detection=det)


def build_model(
    cfg: ModelConfig, seed: int, dtype: torch.dtype = torch.float32
) -> ParkingPerceptionNet:
    """Construct the network with parameters drawn from ``seed`` only."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ParkingPerceptionNet(cfg)
    return model.to(dtype)
