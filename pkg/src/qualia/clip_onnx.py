"""Optional pretrained backend: ONNX image/text encoders + BPE tokenizer.

Requires `onnxruntime` (extra: qualia[onnx]) plus exported encoder files
and the standard gzip BPE vocabulary. Everything here is import-lazy so
the rest of the toolkit stays hermetic without those assets.
"""

from __future__ import annotations

import gzip
import html
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import EncoderError

# Channel statistics the pretrained image tower was trained with.
_IMAGE_MEAN = np.array([0.48145466, 0.4578275, 0.40821073], dtype=np.float32)
_IMAGE_STD = np.array([0.26862954, 0.26130258, 0.27577711], dtype=np.float32)

_CONTEXT_LENGTH = 77


@lru_cache(maxsize=1)
def _bytes_to_unicode() -> dict[int, str]:
    """Reversible byte <-> printable-unicode map used by the BPE vocab."""
    bs = list(range(ord("!"), ord("~") + 1)) + list(range(ord("\xa1"), ord("\xac") + 1)) \
        + list(range(ord("\xae"), ord("\xff") + 1))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, [chr(c) for c in cs]))


def _get_pairs(word: tuple[str, ...]) -> set[tuple[str, str]]:
    return {(word[i], word[i + 1]) for i in range(len(word) - 1)}


class BpeTokenizer:
    """Byte-pair tokenizer driven by a merge-ranked vocabulary file."""

    def __init__(self, vocab_path: str | Path):
        p = Path(vocab_path)
        if not p.is_file():
            raise EncoderError(f"vocabulary file not found: {p}")
        if p.suffix == ".gz":
            merges_text = gzip.open(p, "rt", encoding="utf-8").read()
        else:
            merges_text = p.read_text(encoding="utf-8")
        merge_lines = merges_text.split("\n")
        merge_lines = merge_lines[1:49152 - 256 - 2 + 1]
        merges = [tuple(line.split()) for line in merge_lines if line.strip()]
        byte_encoder = _bytes_to_unicode()
        vocab = list(byte_encoder.values())
        vocab = vocab + [v + "</w>" for v in vocab]
        for merge in merges:
            vocab.append("".join(merge))
        vocab.extend(["<|startoftext|>", "<|endoftext|>"])
        self.byte_encoder = byte_encoder
        self.encoder = {token: i for i, token in enumerate(vocab)}
        self.bpe_ranks = {merge: i for i, merge in enumerate(merges)}
        self.start_token = self.encoder["<|startoftext|>"]
        self.end_token = self.encoder["<|endoftext|>"]
        self._cache: dict[str, list[str]] = {}
        try:
            import regex

            self._pattern = regex.compile(
                r"""<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|"""
                r"""[\p{L}]+|[\p{N}]|[^\s\p{L}\p{N}]+""",
                regex.IGNORECASE,
            )
        except ImportError:
            import re

            # ASCII fallback: adequate for the plain lowercase adjectives
            # this toolkit renders as prompts.
            self._pattern = re.compile(
                r"""<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|"""
                r"""[a-zA-Z]+|[0-9]|[^\sa-zA-Z0-9]+""",
                re.IGNORECASE,
            )

    def _bpe(self, token: str) -> list[str]:
        if token in self._cache:
            return self._cache[token]
        word = tuple(token[:-1]) + (token[-1] + "</w>",)
        pairs = _get_pairs(word)
        if not pairs:
            return [token + "</w>"]
        while True:
            bigram = min(pairs, key=lambda pair: self.bpe_ranks.get(pair, float("inf")))
            if bigram not in self.bpe_ranks:
                break
            first, second = bigram
            new_word: list[str] = []
            i = 0
            while i < len(word):
                try:
                    j = word.index(first, i)
                except ValueError:
                    new_word.extend(word[i:])
                    break
                new_word.extend(word[i:j])
                i = j
                if i < len(word) - 1 and word[i] == first and word[i + 1] == second:
                    new_word.append(first + second)
                    i += 2
                else:
                    new_word.append(word[i])
                    i += 1
            word = tuple(new_word)
            if len(word) == 1:
                break
            pairs = _get_pairs(word)
        pieces = list(word)
        self._cache[token] = pieces
        return pieces

    def encode(self, text: str) -> list[int]:
        cleaned = html.unescape(html.unescape(text)).strip().lower()
        cleaned = " ".join(cleaned.split())
        ids: list[int] = []
        for token in self._pattern.findall(cleaned):
            token_bytes = "".join(self.byte_encoder[b] for b in token.encode("utf-8"))
            ids.extend(self.encoder[piece] for piece in self._bpe(token_bytes))
        return ids

    def context(self, text: str) -> np.ndarray:
        """Fixed-width token row: start, tokens, end, zero padding."""
        ids = [self.start_token] + self.encode(text) + [self.end_token]
        if len(ids) > _CONTEXT_LENGTH:
            ids = ids[:_CONTEXT_LENGTH - 1] + [self.end_token]
        row = np.zeros((_CONTEXT_LENGTH,), dtype=np.int64)
        row[:len(ids)] = ids
        return row


class OnnxClipBackend:
    def __init__(self, image_model: str, text_model: str, vocab: str):
        try:
            import onnxruntime
        except ImportError:
            raise EncoderError(
                "the pretrained encoder backend needs onnxruntime; "
                "install the qualia[onnx] extra"
            ) from None
        for name, path in (("image", image_model), ("text", text_model)):
            if not path or not Path(path).is_file():
                raise EncoderError(f"pretrained {name} model file not found: {path!r}")
        opts = onnxruntime.SessionOptions()
        opts.log_severity_level = 3
        self._image = onnxruntime.InferenceSession(image_model, sess_options=opts,
                                                   providers=["CPUExecutionProvider"])
        self._text = onnxruntime.InferenceSession(text_model, sess_options=opts,
                                                  providers=["CPUExecutionProvider"])
        self._tokenizer = BpeTokenizer(vocab)
        self.dim = int(self._image.get_outputs()[0].shape[-1])
        text_dim = int(self._text.get_outputs()[0].shape[-1])
        if text_dim != self.dim:
            raise EncoderError(
                f"image/text embedding dims disagree: {self.dim} vs {text_dim}")

    def embed_image(self, block: np.ndarray) -> np.ndarray:
        # [H, W, 3] in [0, 1] -> normalized [1, 3, H, W]
        chw = ((block - _IMAGE_MEAN) / _IMAGE_STD).transpose(2, 0, 1)[None]
        name = self._image.get_inputs()[0].name
        (out,) = self._image.run(None, {name: chw.astype(np.float32)})
        vec = np.asarray(out[0], dtype=np.float64)
        return vec / np.linalg.norm(vec)

    def embed_text(self, text: str) -> np.ndarray:
        tokens = self._tokenizer.context(text)[None]
        name = self._text.get_inputs()[0].name
        (out,) = self._text.run(None, {name: tokens})
        vec = np.asarray(out[0], dtype=np.float64)
        return vec / np.linalg.norm(vec)
