"""Low-level-aware spatial branch.

A contiguous run of frames is mosaicked into a fragment clip: each frame
is divided into grid_f x grid_f regions and one patch is cropped per
region at a seeded offset, the same offset in every sampled frame. The
clip feeds a pluggable spatio-temporal backbone, then a two-layer 1x1x1
3D-conv head, then a row-major flatten.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ValidationError


@dataclass(frozen=True)
class FragmentSpec:
    grid_f: int = 7
    patch: int = 32
    frames_out: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.grid_f < 1 or self.patch < 1:
            raise ValidationError("grid_f and patch must be >= 1")
        if self.frames_out < 1:
            raise ValidationError("frames_out must be >= 1")

    @property
    def side(self) -> int:
        return self.grid_f * self.patch


def video_seed(base_seed: int, video_id: str) -> int:
    """Stable per-video sampling seed."""
    digest = hashlib.blake2b(f"{base_seed}:{video_id}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def _region_bounds(extent: int, cells: int) -> list[tuple[int, int]]:
    return [(extent * i // cells, extent * (i + 1) // cells) for i in range(cells)]


def sample_fragments(frames: np.ndarray, spec: FragmentSpec) -> np.ndarray:
    """Crop-and-splice a fragment clip [frames_out, side, side, 3].

    Pure pixel copying: no interpolation anywhere. Offsets are drawn once
    (temporal start first, then region offsets row-major) so the crop
    positions are identical across the sampled frames.
    """
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise ValidationError(f"frames must be [T, H, W, 3], got {frames.shape}")
    t_total, h, w = frames.shape[:3]
    if h < spec.patch or w < spec.patch:
        raise ValidationError(f"frame {h}x{w} smaller than patch {spec.patch}")

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(spec.seed)))

    if spec.frames_out > t_total:
        warnings.warn(
            f"fragment sampling wants {spec.frames_out} frames, clip has {t_total}; "
            "repeating the last frame",
            stacklevel=2,
        )
        pad = np.repeat(frames[-1:], spec.frames_out - t_total, axis=0)
        frames = np.concatenate([frames, pad], axis=0)
        t_total = spec.frames_out
    start = int(rng.integers(0, t_total - spec.frames_out + 1))
    clip = frames[start:start + spec.frames_out]

    rows = _region_bounds(h, spec.grid_f)
    cols = _region_bounds(w, spec.grid_f)
    out = np.empty((spec.frames_out, spec.side, spec.side, 3), dtype=frames.dtype)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            # keep the patch inside the frame even when a region is
            # narrower than the patch
            lo_y = min(r0, h - spec.patch)
            hi_y = max(lo_y, min(r1, h) - spec.patch)
            lo_x = min(c0, w - spec.patch)
            hi_x = max(lo_x, min(c1, w) - spec.patch)
            y = int(rng.integers(lo_y, hi_y + 1))
            x = int(rng.integers(lo_x, hi_x + 1))
            out[:, i * spec.patch:(i + 1) * spec.patch, j * spec.patch:(j + 1) * spec.patch] = \
                clip[:, y:y + spec.patch, x:x + spec.patch]
    return out


class StubBackbone(nn.Module):
    """Frozen seeded linear projection onto [64, T', 7, 7], T' = max(1, F//2)."""

    out_channels = 64

    def __init__(self, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        weight = torch.empty(self.out_channels, 3).uniform_(-1.0, 1.0, generator=gen)
        bias = torch.empty(self.out_channels).uniform_(-0.1, 0.1, generator=gen)
        self.register_buffer("weight", weight)
        self.register_buffer("bias", bias)

    @staticmethod
    def t_out(frames_in: int) -> int:
        return max(1, frames_in // 2)

    def forward(self, clip: torch.Tensor) -> torch.Tensor:
        # clip: [B, 3, F, H, W]
        with torch.no_grad():
            pooled = torch.nn.functional.adaptive_avg_pool3d(
                clip, (self.t_out(clip.shape[2]), 7, 7))
            out = torch.einsum("oc,bcthw->bothw", self.weight.to(pooled.dtype), pooled)
            out = out + self.bias.to(pooled.dtype).view(1, -1, 1, 1, 1)
        return out


class TinyBackbone(nn.Module):
    """Small trainable 3D-conv stack with the same [64, T', 7, 7] contract.

    224 -> 56 -> 14 -> 7 spatially; temporal length halves once (ceil).
    Biases start at zero, so an all-zero clip maps to an all-zero output.
    """

    out_channels = 64

    def __init__(self, seed: int = 0):
        super().__init__()
        self.conv1 = nn.Conv3d(3, 12, kernel_size=(1, 5, 5), stride=(1, 4, 4), padding=(0, 2, 2))
        self.conv2 = nn.Conv3d(12, 24, kernel_size=(3, 5, 5), stride=(2, 4, 4), padding=(1, 2, 2))
        self.conv3 = nn.Conv3d(24, 64, kernel_size=(1, 3, 3), stride=(1, 2, 2), padding=(0, 1, 1))
        self.act = nn.GELU()
        gen = torch.Generator().manual_seed((seed * 0x9E3779B1 + 11) % (2**63))
        with torch.no_grad():
            for conv in (self.conv1, self.conv2, self.conv3):
                fan_in = conv.in_channels * int(np.prod(conv.kernel_size))
                bound = 1.0 / fan_in ** 0.5
                conv.weight.uniform_(-bound, bound, generator=gen)
                conv.bias.zero_()

    @staticmethod
    def t_out(frames_in: int) -> int:
        return (frames_in - 1) // 2 + 1

    def forward(self, clip: torch.Tensor) -> torch.Tensor:
        x = self.act(self.conv1(clip))
        x = self.act(self.conv2(x))
        return self.conv3(x)


class ExternalBackbone(nn.Module):
    """Adapter around user-supplied TorchScript weights."""

    def __init__(self, weights_path: str, frames_in: int):
        super().__init__()
        self.module = torch.jit.load(weights_path, map_location="cpu")
        with torch.no_grad():
            probe = self.module(torch.zeros(1, 3, frames_in, 224, 224))
        if probe.dim() != 5:
            raise ValidationError(
                f"external backbone must return [B, C, T', H', W'], got {tuple(probe.shape)}")
        self.out_channels = int(probe.shape[1])
        self._t_out = int(probe.shape[2])

    def t_out(self, frames_in: int) -> int:
        return self._t_out

    def forward(self, clip: torch.Tensor) -> torch.Tensor:
        return self.module(clip)


def build_backbone(kind: str, seed: int = 0, weights_path: str = "",
                   frames_in: int = 16) -> nn.Module:
    if kind == "stub":
        return StubBackbone(seed=seed)
    if kind == "tiny":
        return TinyBackbone(seed=seed)
    if kind == "external":
        if not weights_path:
            raise ValidationError("spatial.backbone=external requires spatial.weights_path")
        return ExternalBackbone(weights_path, frames_in)
    raise ValidationError(f"unknown backbone {kind!r}")


def backbone_features(clip: torch.Tensor, backbone: nn.Module) -> torch.Tensor:
    """Run the backbone and enforce the [B, C, T', H', W'] shape contract."""
    out = backbone(clip)
    if out.dim() != 5 or out.shape[0] != clip.shape[0]:
        raise ValidationError(
            f"backbone output violates contract: got {tuple(out.shape)} for batch {clip.shape[0]}")
    if not torch.isfinite(out).all():
        raise ValidationError("backbone produced non-finite values")
    return out


class ConvHead(nn.Module):
    """Two pointwise 3D convolutions, C -> C/2 -> 1, GELU between."""

    def __init__(self, in_channels: int = 64, seed: int = 0):
        super().__init__()
        mid = max(1, in_channels // 2)
        self.conv1 = nn.Conv3d(in_channels, mid, kernel_size=1)
        self.conv2 = nn.Conv3d(mid, 1, kernel_size=1)
        self.act = nn.GELU()
        gen = torch.Generator().manual_seed((seed * 0x9E3779B1 + 23) % (2**63))
        with torch.no_grad():
            for conv in (self.conv1, self.conv2):
                bound = 1.0 / conv.in_channels ** 0.5
                conv.weight.uniform_(-bound, bound, generator=gen)
                conv.bias.zero_()

    def forward(self, m_f: torch.Tensor) -> torch.Tensor:
        return self.conv2(self.act(self.conv1(m_f)))


def flatten_features(m_final: torch.Tensor) -> torch.Tensor:
    """Row-major flatten; batched inputs keep their leading dimension."""
    if m_final.dim() == 5:
        return m_final.reshape(m_final.shape[0], -1)
    return m_final.reshape(-1)


def fragment_cache_meta(spec: FragmentSpec, version: str, source: str) -> dict:
    # fragments do not depend on the prompt bank; digest stays empty
    return {
        "prompt_digest": "",
        "extractor_version": version,
        "kind": "fragment",
        "grid_f": spec.grid_f,
        "patch": spec.patch,
        "frames_out": spec.frames_out,
        "seed": spec.seed,
        "source": source,
    }
