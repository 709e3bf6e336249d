"""Controlled distortions and prompt-response measurement.

Level conventions: negative attenuates, positive enhances, zero is the
bit-exact identity. The closed-form transforms below are chosen so the
probed attribute moves monotonically with the level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .encoder import EncoderHandle
from .errors import ValidationError
from .prompts import PromptBank, render_prompts
from .semantic import ensure_min_side, extract_frame_semantics, plan_block_grid

KINDS = ("brightness", "contrast", "noise", "colorfulness")


@dataclass(frozen=True)
class DistortionSpec:
    kind: str
    level: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown distortion kind {self.kind!r}")
        if not -1.0 <= self.level <= 1.0:
            raise ValidationError(f"distortion level must lie in [-1, 1], got {self.level}")


def _gaussian_kernel(sigma: float) -> np.ndarray:
    half = max(1, int(math.ceil(3.0 * sigma)))
    xs = np.arange(-half, half + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    return kernel / kernel.sum()


def _blur(frame: np.ndarray, radius: float) -> np.ndarray:
    # "radius" is the Gaussian standard deviation in pixels
    kernel = _gaussian_kernel(radius)
    half = len(kernel) // 2
    out = np.asarray(frame, dtype=np.float64)
    for axis in (0, 1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (half, half)
        padded = np.pad(out, pad, mode="reflect")
        acc = np.zeros_like(out)
        for k, weight in enumerate(kernel):
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(k, k + out.shape[axis])
            acc += weight * padded[tuple(sl)]
        out = acc
    return out.astype(frame.dtype, copy=False)


def apply_distortion(frame: np.ndarray, spec: DistortionSpec, seed: int = 0) -> np.ndarray:
    """Distort one [H, W, 3] frame in [0, 1]; pure in (frame, spec, seed)."""
    frame = np.asarray(frame)
    if spec.level == 0.0:
        return frame.copy()
    level = spec.level
    if spec.kind == "brightness":
        return np.clip(frame + 0.5 * level, 0.0, 1.0).astype(frame.dtype)
    if spec.kind == "contrast":
        return np.clip(0.5 + (1.0 + level) * (frame - 0.5), 0.0, 1.0).astype(frame.dtype)
    if spec.kind == "noise":
        if level > 0:
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
            noisy = frame + rng.normal(0.0, 0.2 * level, size=frame.shape)
            return np.clip(noisy, 0.0, 1.0).astype(frame.dtype)
        return np.clip(_blur(frame, radius=4.0 * abs(level)), 0.0, 1.0).astype(frame.dtype)
    # colorfulness: scale per-pixel chroma about the pixel's gray value
    gray = frame.mean(axis=-1, keepdims=True)
    return np.clip(gray + (1.0 + level) * (frame - gray), 0.0, 1.0).astype(frame.dtype)


@dataclass
class ResponseCurve:
    description: str
    kind: str
    levels: list[float]
    responses: list[float]

    def rows(self) -> list[dict]:
        return [{"description": self.description, "kind": self.kind,
                 "level": lvl, "response": resp}
                for lvl, resp in zip(self.levels, self.responses)]


def response_curve(frames: np.ndarray, description: str, kind: str,
                   levels: Sequence[float], encoder: EncoderHandle, bank: PromptBank,
                   grid_mn: tuple[int, int] = (3, 3), template: str = "<d>",
                   seed: int = 0) -> ResponseCurve:
    """Mean semantic response of one description across distortion levels.

    For each level every frame is distorted, scored over the window grid,
    and the description's channel is averaged over all blocks and frames.
    """
    levels = [float(v) for v in levels]
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValidationError("levels must be strictly increasing")
    channel = bank.channel_of(description)
    texts = encoder.embed_texts(render_prompts(bank, template))
    responses = []
    for level in levels:
        spec = DistortionSpec(kind=kind, level=level)
        total = 0.0
        count = 0
        grid = None
        for frame in frames:
            distorted = ensure_min_side(apply_distortion(frame, spec, seed=seed))
            if grid is None:
                grid = plan_block_grid(distorted.shape[0], distorted.shape[1], *grid_mn)
            fmap = extract_frame_semantics(distorted, grid, encoder, texts)
            total += float(fmap[:, :, channel].sum())
            count += fmap.shape[0] * fmap.shape[1]
        responses.append(total / count)
    return ResponseCurve(description=description, kind=kind, levels=levels,
                         responses=responses)


def prompt_comparison(banks: Sequence[tuple[str, PromptBank]],
                      run_bank: Callable[[PromptBank], dict]) -> list[dict]:
    """Side-by-side metric rows for several candidate banks.

    run_bank(bank) -> {"srocc": .., "plcc": .., "krocc": ..} typically
    wraps feature extraction + the split protocol with fixed seeds, so
    identical banks yield identical rows.
    """
    rows = []
    for label, bank in banks:
        metrics = run_bank(bank)
        rows.append({"bank": label, "r": bank.r, **metrics})
    return rows
