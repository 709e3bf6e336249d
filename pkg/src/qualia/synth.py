"""Procedural clip generator for harnesses and smoke tests.

Each clip is a textured gradient with a controlled mean brightness; the
MOS label is a monotone function of that brightness plus seeded noise,
so a working pipeline can overfit it quickly.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def make_clip(rng: np.random.Generator, brightness: float, frames: int,
              height: int, width: int) -> np.ndarray:
    yy = np.linspace(-0.5, 0.5, height, dtype=np.float32)[:, None, None]
    xx = np.linspace(-0.5, 0.5, width, dtype=np.float32)[None, :, None]
    tilt = rng.uniform(-0.25, 0.25, size=(2,)).astype(np.float32)
    base = brightness + tilt[0] * yy + tilt[1] * xx
    clip = np.empty((frames, height, width, 3), dtype=np.float32)
    for t in range(frames):
        texture = rng.normal(0.0, 0.03, size=(height, width, 3)).astype(np.float32)
        shift = 0.02 * np.sin(2 * np.pi * t / max(frames, 1))
        clip[t] = np.clip(base + shift + texture, 0.0, 1.0)
    return clip


def write_clip(clip: np.ndarray, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(clip):
        img = Image.fromarray((frame * 255.0 + 0.5).astype(np.uint8), mode="RGB")
        img.save(directory / f"frame_{t:04d}.png")


def make_synthetic_dataset(root: str | Path, n_clips: int = 24, frames: int = 8,
                           height: int = 224, width: int = 224, seed: int = 7,
                           mos_noise: float = 0.5) -> Path:
    """Write clips + manifest under root; returns the manifest path.

    MOS = 20 + 60 * brightness + noise, so brightness order is (almost
    surely) MOS order.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    levels = np.linspace(0.15, 0.85, n_clips)
    lines = ["video_id,path,mos"]
    for i, brightness in enumerate(levels):
        vid = f"clip{i:03d}"
        clip = make_clip(rng, float(brightness), frames, height, width)
        write_clip(clip, root / vid)
        mos = 20.0 + 60.0 * float(brightness) + float(rng.normal(0.0, mos_noise))
        lines.append(f"{vid},{vid},{mos:.4f}")
    manifest = root / "manifest.csv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest
