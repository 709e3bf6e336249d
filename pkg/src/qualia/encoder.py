"""Vision-language encoder abstraction.

Produces unit-norm image/text embeddings and softmax semantic scores.
Two backends: `mock` (seeded keyed hash of the raw input bytes; hermetic
and deterministic) and `pretrained` (ONNX image/text encoders plus a BPE
vocabulary, loaded lazily so the toolkit runs without them).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EncoderError

BLOCK = 224


@dataclass
class EncoderHandle:
    """A ready-to-call encoder; image_dim == text_dim by construction."""

    image_dim: int
    text_dim: int
    logit_scale: float
    backend: str
    _impl: object

    def __post_init__(self):
        if self.image_dim != self.text_dim:
            raise EncoderError("image and text embedding dimensions must match")
        if self.logit_scale <= 0:
            raise EncoderError("logit_scale must be > 0")

    def embed_image(self, block: np.ndarray) -> np.ndarray:
        """Embed one 224x224x3 raster with values in [0, 1]; unit-norm output."""
        arr = np.asarray(block)
        if arr.shape != (BLOCK, BLOCK, 3):
            raise EncoderError(f"image block must be {BLOCK}x{BLOCK}x3, got {arr.shape}")
        if arr.size and (float(arr.min()) < 0.0 or float(arr.max()) > 1.0):
            raise EncoderError("image block values must lie in [0, 1]")
        return self._impl.embed_image(np.ascontiguousarray(arr, dtype=np.float32))

    def embed_images(self, blocks: Sequence[np.ndarray]) -> np.ndarray:
        """Batch helper; must agree with per-block calls to within 1e-5."""
        return np.stack([self.embed_image(b) for b in blocks], axis=0)

    def embed_texts(self, prompts: Sequence[str]) -> np.ndarray:
        if len(prompts) == 0:
            raise EncoderError("embed_texts needs at least one prompt")
        for i, text in enumerate(prompts):
            if not isinstance(text, str) or text == "":
                raise EncoderError(f"prompt {i} is empty")
        return np.stack([self._impl.embed_text(t) for t in prompts], axis=0)


def semantic_scores(img: np.ndarray, texts: np.ndarray, logit_scale: float) -> np.ndarray:
    """softmax(logit_scale * cos(img, text_k)) over the prompt axis.

    Embeddings are assumed unit-norm, so the cosine is a dot product.
    Computed in float64 with the max subtracted for stability.
    """
    img = np.asarray(img, dtype=np.float64)
    texts = np.asarray(texts, dtype=np.float64)
    if texts.ndim != 2 or img.ndim != 1 or texts.shape[1] != img.shape[0]:
        raise EncoderError(
            f"dimension mismatch: image {img.shape} vs texts {texts.shape}"
        )
    logits = logit_scale * (texts @ img)
    logits -= logits.max()
    weights = np.exp(logits)
    return weights / weights.sum()


def _normalize(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise EncoderError("degenerate zero embedding")
    return (vec / norm).astype(np.float64)


class _MockBackend:
    """Hash-seeded embeddings: a pure function of (seed, input bytes)."""

    def __init__(self, seed: int, dim: int):
        if dim < 2:
            raise EncoderError("mock embedding dim must be >= 2")
        self.seed = int(seed)
        self.dim = int(dim)
        self._key = self.seed.to_bytes(8, "little", signed=True)

    def _vector_for(self, payload: bytes, domain: bytes) -> np.ndarray:
        digest = hashlib.blake2b(payload, key=self._key, person=domain, digest_size=32).digest()
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(
            int.from_bytes(digest, "little"))))
        return _normalize(rng.standard_normal(self.dim))

    def embed_image(self, block: np.ndarray) -> np.ndarray:
        return self._vector_for(block.tobytes(order="C"), b"qimg")

    def embed_text(self, text: str) -> np.ndarray:
        return self._vector_for(text.encode("utf-8"), b"qtxt")


def build_mock_encoder(seed: int = 0, dim: int = 64, logit_scale: float = 100.0) -> EncoderHandle:
    impl = _MockBackend(seed=seed, dim=dim)
    return EncoderHandle(image_dim=dim, text_dim=dim, logit_scale=logit_scale,
                         backend="mock", _impl=impl)


def build_pretrained_encoder(image_model: str, text_model: str, vocab: str,
                             logit_scale: float = 100.0) -> EncoderHandle:
    from .clip_onnx import OnnxClipBackend

    impl = OnnxClipBackend(image_model=image_model, text_model=text_model, vocab=vocab)
    return EncoderHandle(image_dim=impl.dim, text_dim=impl.dim, logit_scale=logit_scale,
                         backend="pretrained", _impl=impl)


def build_encoder(cfg) -> EncoderHandle:
    """Construct the encoder named by `encoder.*` config keys."""
    backend = cfg.get("encoder.backend")
    scale = cfg.get("encoder.logit_scale")
    if backend == "mock":
        return build_mock_encoder(seed=cfg.get("encoder.mock_seed"),
                                  dim=cfg.get("encoder.mock_dim"), logit_scale=scale)
    if backend == "pretrained":
        return build_pretrained_encoder(image_model=cfg.get("encoder.image_model"),
                                        text_model=cfg.get("encoder.text_model"),
                                        vocab=cfg.get("encoder.vocab"), logit_scale=scale)
    raise EncoderError(f"unknown encoder backend {backend!r}")


def encoder_signature(cfg) -> str:
    """Stable identity string for cache invalidation."""
    backend = cfg.get("encoder.backend")
    if backend == "mock":
        parts = [backend, str(cfg.get("encoder.mock_seed")), str(cfg.get("encoder.mock_dim"))]
    else:
        parts = [backend, cfg.get("encoder.image_model"), cfg.get("encoder.text_model"),
                 cfg.get("encoder.vocab")]
    parts.append(repr(cfg.get("encoder.logit_scale")))
    parts.append(cfg.get("prompts.template"))
    return "|".join(parts)
