"""Semantic feature extractor.

Slides 224x224 windows over each frame, scores every window against all
prompts, stitches the per-position score vectors into an [m, n, r] map,
pools it (avg then max, concatenated avg-first), stacks frames into a
[2r, T] video map, and reduces the temporal axis with a small shared MLP.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import round_half_up
from .encoder import BLOCK, EncoderHandle, semantic_scores
from .prompts import PromptBank, render_prompts


@dataclass(frozen=True)
class BlockGrid:
    rows: int
    cols: int
    positions: tuple[tuple[int, int], ...]  # (top, left), row-major
    block: int = BLOCK


def _axis_offsets(extent: int, count: int) -> list[int]:
    span = extent - BLOCK
    if count == 1:
        # single window sits centered
        return [round_half_up(span / 2)]
    return [round_half_up(span * i / (count - 1)) for i in range(count)]


def plan_block_grid(height: int, width: int, m: int, n: int) -> BlockGrid:
    """Evenly spread m x n window positions; windows never exceed bounds."""
    if m < 1 or n < 1:
        raise ValueError("grid counts must be >= 1")
    if height < BLOCK or width < BLOCK:
        raise ValueError(
            f"frame {height}x{width} smaller than {BLOCK}; upscale before planning"
        )
    tops = _axis_offsets(height, m)
    lefts = _axis_offsets(width, n)
    positions = tuple((t, l) for t in tops for l in lefts)
    return BlockGrid(rows=m, cols=n, positions=positions)


def bilinear_resize(frame: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centered bilinear resize of an [H, W, C] array."""
    in_h, in_w = frame.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return frame
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (in_w / out_w) - 0.5
    ys = np.clip(ys, 0.0, in_h - 1)
    xs = np.clip(xs, 0.0, in_w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = frame[y0][:, x0] * (1 - wx) + frame[y0][:, x1] * wx
    bot = frame[y1][:, x0] * (1 - wx) + frame[y1][:, x1] * wx
    out = top * (1 - wy) + bot * wy
    return out.astype(frame.dtype, copy=False)


def ensure_min_side(frame: np.ndarray, min_side: int = BLOCK) -> np.ndarray:
    """Upscale (aspect preserved) so the short side is at least min_side."""
    h, w = frame.shape[:2]
    short = min(h, w)
    if short >= min_side:
        return frame
    scale = min_side / short
    if h <= w:
        out_h = min_side
        out_w = max(min_side, round_half_up(w * scale))
    else:
        out_w = min_side
        out_h = max(min_side, round_half_up(h * scale))
    return bilinear_resize(frame, out_h, out_w)


def extract_frame_semantics(frame: np.ndarray, grid: BlockGrid, encoder: EncoderHandle,
                            text_embeddings: np.ndarray) -> np.ndarray:
    """Score every grid window against all prompts -> [m, n, r] map.

    Placement follows the window's relative position, so map[i, j] is
    exactly the standalone score vector of block (i, j).
    """
    h, w = frame.shape[:2]
    for top, left in grid.positions:
        if top + grid.block > h or left + grid.block > w:
            raise ValueError(f"grid position ({top}, {left}) exceeds frame {h}x{w}")
    r = text_embeddings.shape[0]
    values = np.empty((grid.rows, grid.cols, r), dtype=np.float64)
    for idx, (top, left) in enumerate(grid.positions):
        i, j = divmod(idx, grid.cols)
        block = frame[top:top + grid.block, left:left + grid.block]
        emb = encoder.embed_image(block)
        values[i, j] = semantic_scores(emb, text_embeddings, encoder.logit_scale)
    return values


def pool_frame(frame_map: np.ndarray) -> np.ndarray:
    """Global average and max over window positions, concatenated avg-first."""
    if frame_map.ndim != 3:
        raise ValueError(f"frame map must be [m, n, r], got {frame_map.shape}")
    flat = frame_map.reshape(-1, frame_map.shape[2])
    # row-major summation keeps the reduction order fixed
    avg = flat.mean(axis=0)
    mx = flat.max(axis=0)
    return np.concatenate([avg, mx], axis=0)


def stack_video(pooled: list[np.ndarray]) -> np.ndarray:
    """Column-stack per-frame vectors into a [2r, T] video map."""
    if not pooled:
        raise ValueError("stack_video needs at least one frame vector")
    width = pooled[0].shape[0]
    for t, vec in enumerate(pooled):
        if vec.shape != (width,):
            raise ValueError(f"frame vector {t} has shape {vec.shape}, expected ({width},)")
    return np.stack(pooled, axis=1)


def video_semantic_map(frames: np.ndarray, grid_mn: tuple[int, int], encoder: EncoderHandle,
                       bank: PromptBank, template: str = "<d>",
                       text_embeddings: np.ndarray | None = None) -> np.ndarray:
    """Full per-video SFE pass: frames [T, H, W, 3] -> map [2r, T].

    All frames of a sequence share one size, so the grid is planned once.
    Pass text_embeddings to amortize prompt encoding across videos.
    """
    texts = text_embeddings if text_embeddings is not None \
        else encoder.embed_texts(render_prompts(bank, template))
    pooled = []
    grid = None
    for frame in frames:
        scaled = ensure_min_side(frame)
        if grid is None:
            grid = plan_block_grid(scaled.shape[0], scaled.shape[1], *grid_mn)
        fmap = extract_frame_semantics(scaled, grid, encoder, texts)
        pooled.append(pool_frame(fmap))
    return stack_video(pooled)


def resample_time(x: torch.Tensor, t_fix: int) -> torch.Tensor:
    """Linear interpolation of [..., C, T] along T to t_fix columns."""
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    if x.size(-1) == 1:
        out = x.expand(*x.shape[:-1], t_fix).contiguous()
    else:
        out = torch.nn.functional.interpolate(x, size=t_fix, mode="linear", align_corners=True)
    return out.squeeze(0) if squeeze else out


def init_linear(layer: nn.Linear, seed: int, salt: int) -> None:
    """Uniform fan-in init from a private generator; zero biases."""
    gen = torch.Generator().manual_seed((seed * 0x9E3779B1 + salt) % (2**63))
    bound = 1.0 / float(layer.in_features) ** 0.5
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=gen)
        layer.bias.zero_()


class TemporalHead(nn.Module):
    """Two shared FC layers over the (resampled) temporal axis, GELU between.

    Input [2r, T] or [B, 2r, T]; each of the 2r channels runs through the
    same T_fix -> hidden -> 1 map, yielding a 2r-vector per sample.
    """

    def __init__(self, t_fix: int = 32, hidden: int = 64, seed: int = 0):
        super().__init__()
        self.t_fix = t_fix
        self.fc1 = nn.Linear(t_fix, hidden)
        self.fc2 = nn.Linear(hidden, 1)
        self.act = nn.GELU()
        init_linear(self.fc1, seed, 1)
        init_linear(self.fc2, seed, 2)

    def forward(self, m_s: torch.Tensor) -> torch.Tensor:
        squeeze = m_s.dim() == 2
        x = resample_time(m_s, self.t_fix)
        if squeeze:
            x = x.unsqueeze(0)
        out = self.fc2(self.act(self.fc1(x))).squeeze(-1)
        return out.squeeze(0) if squeeze else out


def semantic_cache_meta(bank: PromptBank, grid_mn: tuple[int, int], frame_mode,
                        encoder_sig: str, version: str, source: str) -> dict:
    return {
        "prompt_digest": bank.digest,
        "extractor_version": version,
        "kind": "semantic",
        "grid": f"{grid_mn[0]}x{grid_mn[1]}",
        "frames": str(frame_mode),
        "encoder": encoder_sig,
        "source": source,
    }
