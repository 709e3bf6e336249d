"""Dataset ingestion and the binary feature cache.

Videos arrive either as directories of numbered image files (the
hermetic path) or as container files decoded by an external `ffmpeg`
with pinned flags. Frames are normalized to float32 RGB in [0, 1] at
decode time; any encoder-specific normalization happens downstream.

Cache format (little-endian throughout):

    magic  b"CLFC"
    u8     format version (currently 1)
    u8     tensor rank
    u32*r  dimensions
    f32*   row-major payload
    u32    length of UTF-8 JSON meta block
    bytes  meta JSON

The meta block carries at minimum ``prompt_digest`` and
``extractor_version`` so stale caches can be rejected by consumers.
"""

from __future__ import annotations

import json
import math
import os
import re
import shutil
import struct
import subprocess
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import CacheError, DecodeError, ManifestError

CACHE_MAGIC = b"CLFC"
CACHE_VERSION = 1

_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


@dataclass(frozen=True)
class ManifestEntry:
    video_id: str
    path: str
    mos: float


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    source: str = ""

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


@dataclass
class FrameSequence:
    """Decoded frames, shape [T, H, W, 3] float32 in [0, 1]."""

    frames: np.ndarray
    timestamps: np.ndarray
    source_id: str

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise DecodeError(f"frames must be [T, H, W, 3], got {self.frames.shape}")
        if len(self.frames) < 1:
            raise DecodeError("frame sequence is empty")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    def select(self, indices: np.ndarray) -> "FrameSequence":
        return FrameSequence(self.frames[indices], self.timestamps[indices], self.source_id)


def round_half_up(x: float) -> int:
    """Deterministic rounding: half-way cases go toward +inf."""
    return int(math.floor(x + 0.5))


def load_manifest(path: str | Path, check_paths: bool = True) -> DatasetManifest:
    """Parse a `video_id,path,mos` CSV into a validated manifest.

    Relative video paths are resolved against the manifest's directory.
    Parsing is total: either a fully valid manifest comes back or a
    ManifestError naming the offending line.
    """
    p = Path(path)
    if not p.is_file():
        raise ManifestError(f"manifest not found: {p}")
    text = p.read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ManifestError(f"{p}: empty manifest")
    header = lines[0].strip()
    if header != "video_id,path,mos":
        raise ManifestError(f"{p}: expected header 'video_id,path,mos', got {header!r}")

    entries: list[ManifestEntry] = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if line.strip() == "":
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise ManifestError(f"{p}: malformed row at line {lineno}: {line!r}")
        video_id, rel, mos_raw = (part.strip() for part in parts)
        if not video_id:
            raise ManifestError(f"{p}: empty video_id at line {lineno}")
        if video_id in seen:
            raise ManifestError(
                f"{p}: duplicate video_id {video_id!r} at lines {seen[video_id]} and {lineno}"
            )
        seen[video_id] = lineno
        try:
            mos = float(mos_raw)
        except ValueError:
            raise ManifestError(f"{p}: non-numeric mos at line {lineno}: {mos_raw!r}") from None
        if not math.isfinite(mos):
            raise ManifestError(f"{p}: non-finite mos at line {lineno}")
        resolved = Path(rel)
        if not resolved.is_absolute():
            resolved = p.parent / resolved
        if check_paths and not (resolved.is_file() or resolved.is_dir()):
            raise ManifestError(f"{p}: line {lineno}: video path does not exist: {resolved}")
        entries.append(ManifestEntry(video_id=video_id, path=str(resolved), mos=mos))
    return DatasetManifest(entries=tuple(entries), source=str(p))


def uniform_indices(total: int, count: int) -> np.ndarray:
    """Indices round(k*(total-1)/(count-1)), k = 0..count-1; middle frame for count=1."""
    if total < 1 or count < 1:
        raise DecodeError("uniform_indices needs total >= 1 and count >= 1")
    if count == 1:
        return np.array([(total - 1) // 2], dtype=np.int64)
    if count > total:
        raise DecodeError(f"cannot pick {count} distinct frames from {total}")
    step = (total - 1) / (count - 1)
    return np.array([round_half_up(k * step) for k in range(count)], dtype=np.int64)


def _natural_key(name: str) -> tuple:
    return tuple(int(tok) if tok.isdigit() else tok for tok in re.split(r"(\d+)", name))


def _load_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        rgb = img.convert("RGB")
        return np.asarray(rgb, dtype=np.float32) / 255.0


def _decode_directory(path: Path) -> FrameSequence:
    files = sorted(
        (f for f in path.iterdir() if f.suffix.lower() in _IMAGE_SUFFIXES),
        key=lambda f: _natural_key(f.name),
    )
    if not files:
        raise DecodeError(f"no image frames found in {path}")
    frames = []
    shape = None
    for f in files:
        arr = _load_image(f)
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise DecodeError(f"{path}: frame {f.name} has shape {arr.shape}, expected {shape}")
        frames.append(arr)
    stack = np.stack(frames, axis=0)
    return FrameSequence(stack, np.arange(len(stack), dtype=np.float64), str(path))


def _decode_container(path: Path) -> FrameSequence:
    ffmpeg = shutil.which("ffmpeg")
    if ffmpeg is None:
        raise DecodeError(
            f"cannot decode {path}: ffmpeg not found on PATH; "
            "supply a directory of numbered image frames instead"
        )
    with tempfile.TemporaryDirectory(prefix="qualia_decode_") as tmp:
        out_pattern = os.path.join(tmp, "frame_%08d.png")
        cmd = [ffmpeg, "-nostdin", "-v", "error", "-i", str(path),
               "-vsync", "passthrough", "-pix_fmt", "rgb24", out_pattern]
        proc = subprocess.run(cmd, capture_output=True, text=True)
        if proc.returncode != 0:
            raise DecodeError(f"ffmpeg failed on {path}: {proc.stderr.strip()[:500]}")
        seq = _decode_directory(Path(tmp))
        return FrameSequence(seq.frames, seq.timestamps, str(path))


def decode_frames(video_ref: str | Path, temporal_spec: str | int = "all") -> FrameSequence:
    """Decode a video into frames.

    temporal_spec is "all" or an integer N for uniform subsampling at
    indices round(k*(T-1)/(N-1)). N larger than the clip degrades to
    "all" with a warning.
    """
    path = Path(video_ref)
    if path.is_dir():
        seq = _decode_directory(path)
    elif path.is_file():
        seq = _decode_container(path)
    else:
        raise DecodeError(f"video not found: {path}")

    if temporal_spec == "all":
        return seq
    count = int(temporal_spec)
    if count < 1:
        raise DecodeError("uniform frame count must be >= 1")
    if count > len(seq):
        warnings.warn(
            f"{seq.source_id}: requested {count} frames but only {len(seq)} decoded; using all",
            stacklevel=2,
        )
        return seq
    return seq.select(uniform_indices(len(seq), count))


@dataclass
class FeatureCache:
    """A float32 tensor plus its provenance meta."""

    shape: tuple[int, ...]
    data: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def tensor(self) -> np.ndarray:
        return self.data.reshape(self.shape)


def write_cache(tensor: np.ndarray, path: str | Path, meta: dict | None = None) -> None:
    """Serialize a tensor to the cache format, atomically (temp + rename)."""
    arr = np.ascontiguousarray(tensor, dtype=np.float32)
    if arr.ndim < 1:
        raise CacheError("cache tensors must have rank >= 1")
    if arr.ndim > 255:
        raise CacheError("cache tensors must have rank <= 255")
    p = Path(path)
    if not p.parent.is_dir():
        raise CacheError(f"cache target directory does not exist: {p.parent}")
    meta = dict(meta or {})
    meta.setdefault("prompt_digest", "")
    meta.setdefault("extractor_version", "")
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")

    fd, tmp_name = tempfile.mkstemp(prefix=p.name + ".", suffix=".tmp", dir=p.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(CACHE_MAGIC)
            fh.write(struct.pack("<BB", CACHE_VERSION, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4", copy=False).tobytes(order="C"))
            fh.write(struct.pack("<I", len(meta_bytes)))
            fh.write(meta_bytes)
        os.replace(tmp_name, p)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def read_cache_meta(path: str | Path) -> dict | None:
    """Meta block of a cache file without loading the payload; None if unreadable."""
    p = Path(path)
    try:
        with open(p, "rb") as fh:
            head = fh.read(6)
            if len(head) < 6 or head[:4] != CACHE_MAGIC or head[4] != CACHE_VERSION:
                return None
            rank = head[5]
            dims_raw = fh.read(4 * rank)
            if len(dims_raw) < 4 * rank:
                return None
            shape = struct.unpack(f"<{rank}I", dims_raw)
            fh.seek(4 * int(np.prod(shape, dtype=np.int64)), os.SEEK_CUR)
            len_raw = fh.read(4)
            if len(len_raw) < 4:
                return None
            (meta_len,) = struct.unpack("<I", len_raw)
            meta_raw = fh.read(meta_len)
            if len(meta_raw) < meta_len:
                return None
            return json.loads(meta_raw.decode("utf-8"))
    except (OSError, json.JSONDecodeError, UnicodeDecodeError):
        return None


def read_cache(path: str | Path, expect_prompt_digest: str | None = None) -> FeatureCache:
    """Read a cache file back; optionally enforce the producing prompt digest."""
    p = Path(path)
    if not p.is_file():
        raise CacheError(f"cache file not found: {p}")
    blob = p.read_bytes()
    if len(blob) < 6 or blob[:4] != CACHE_MAGIC:
        raise CacheError(f"{p}: bad magic (not a feature cache)")
    version, rank = struct.unpack_from("<BB", blob, 4)
    if version != CACHE_VERSION:
        raise CacheError(f"{p}: unsupported cache version {version} (expected {CACHE_VERSION})")
    offset = 6
    if len(blob) < offset + 4 * rank:
        raise CacheError(f"{p}: truncated header")
    shape = struct.unpack_from(f"<{rank}I", blob, offset)
    offset += 4 * rank
    if any(dim == 0 for dim in shape):
        raise CacheError(f"{p}: zero-sized dimension in shape {shape}")
    count = int(np.prod(shape, dtype=np.int64))
    payload_len = 4 * count
    if len(blob) < offset + payload_len + 4:
        raise CacheError(f"{p}: payload shorter than shape {shape} requires")
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).copy()
    offset += payload_len
    (meta_len,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    if len(blob) < offset + meta_len:
        raise CacheError(f"{p}: truncated meta block")
    try:
        meta = json.loads(blob[offset:offset + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CacheError(f"{p}: unreadable meta block: {exc}") from None
    cache = FeatureCache(shape=tuple(int(d) for d in shape), data=data, meta=meta)
    if expect_prompt_digest is not None and meta.get("prompt_digest") != expect_prompt_digest:
        raise CacheError(
            f"{p}: prompt digest mismatch: cache has {meta.get('prompt_digest')!r}, "
            f"expected {expect_prompt_digest!r}"
        )
    return cache
