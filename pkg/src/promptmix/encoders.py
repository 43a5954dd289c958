"""Frozen, seeded toy encoders: tokenizer, embedding table, text and image maps.

These stand in for a large pre-trained two-tower model behind the smallest
interface that keeps the rest of the system honest: the text encoder is
differentiable with respect to its *input embeddings* (so gradients reach
the learnable context tokens) while its own weights are frozen, and the
image encoder is a frozen linear map. Both L2-normalize their outputs, so
downstream cosine scoring lives on the unit sphere.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import InvalidInputError, ShapeError

_FNV_OFFSET = 2166136261
_FNV_PRIME = 16777619
_TOKEN_RE = re.compile(r"[a-z0-9]+")


def fnv1a_32(data: bytes) -> int:
    """32-bit FNV-1a; the fixed hash behind string -> token id."""
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & 0xFFFFFFFF
    return h


class Tokenizer:
    """Lowercase, split on whitespace/punctuation, FNV-1a each word mod V."""

    def __init__(self, vocab_size: int = 4096):
        if vocab_size < 1:
            raise InvalidInputError(f"vocab_size must be >= 1, got {vocab_size}")
        self.vocab_size = vocab_size

    def words(self, text: str) -> list[str]:
        return _TOKEN_RE.findall(text.lower())

    def tokenize(self, text: str) -> list[int]:
        return [fnv1a_32(w.encode("utf-8")) % self.vocab_size for w in self.words(text)]


class EmbeddingTable:
    """V x d_emb frozen token embeddings, reproducible from (seed, V, d_emb)."""

    def __init__(self, vocab_size: int, embed_dim: int, seed: int):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        rows = rng.normal(0.0, 1.0 / np.sqrt(embed_dim), size=(vocab_size, embed_dim))
        rows.flags.writeable = False
        self.rows = rows
        self.vocab_size = vocab_size
        self.embed_dim = embed_dim
        self._tensor = ad.constant(rows, name="embedding_table")
        self._tensor.data.flags.writeable = False

    def lookup(self, ids: list[int]) -> ad.Tensor:
        """Copied rows for the given ids; frozen (never receives gradients)."""
        return ad.take_rows(self._tensor, ids)

    def checksum(self) -> str:
        return hashlib.sha256(self.rows.tobytes()).hexdigest()


class TextEncoder:
    """Mean-pool token embeddings, apply a frozen projection, L2-normalize.

    Pooling is order-free, a deliberate simplification of real sequence
    encoders: template wording matters only through token content here.
    """

    def __init__(self, embed_dim: int, feature_dim: int, seed: int):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
        proj = rng.normal(0.0, 1.0 / np.sqrt(embed_dim), size=(embed_dim, feature_dim))
        proj.flags.writeable = False
        self.embed_dim = embed_dim
        self.feature_dim = feature_dim
        self.projection = proj
        self._proj_tensor = ad.constant(proj, name="text_projection")
        self._proj_tensor.data.flags.writeable = False

    def encode(self, embedding_sequence) -> ad.Tensor:
        """Unit-norm feature for a T x d_emb embedding sequence.

        Gradients flow to the sequence only; the projection is frozen.
        """
        seq = ad.as_tensor(embedding_sequence)
        if seq.data.ndim != 2 or seq.data.shape[0] == 0:
            raise InvalidInputError(f"text encoder needs a non-empty sequence, got shape {seq.data.shape}")
        if seq.data.shape[1] != self.embed_dim:
            raise ShapeError(f"embedding width {seq.data.shape[1]} != {self.embed_dim}")
        pooled = ad.mean_rows(seq)
        return ad.l2_normalize(ad.matmul(pooled, self._proj_tensor))

    def checksum(self) -> str:
        return hashlib.sha256(self.projection.tobytes()).hexdigest()


class ImageEncoder:
    """Frozen seeded linear map followed by L2 normalization; no parameters train."""

    def __init__(self, input_dim: int, feature_dim: int, seed: int):
        if input_dim < feature_dim:
            raise InvalidInputError(
                f"input_dim {input_dim} < feature_dim {feature_dim}: the map cannot cover feature space"
            )
        rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
        weight = rng.normal(0.0, 1.0 / np.sqrt(input_dim), size=(input_dim, feature_dim))
        weight.flags.writeable = False
        self.input_dim = input_dim
        self.feature_dim = feature_dim
        self.weight = weight
        self._pinv: np.ndarray | None = None

    def encode(self, raw) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.float64)
        if raw.shape != (self.input_dim,):
            raise ShapeError(f"image input shape {raw.shape} != ({self.input_dim},)")
        feature = raw @ self.weight
        norm = np.linalg.norm(feature)
        if norm <= 1e-12:
            raise InvalidInputError("image maps to a zero feature")
        return feature / norm

    def preimage(self, feature) -> np.ndarray:
        """A raw vector that encodes to ``normalize(feature)``.

        Uses the pseudo-inverse of the frozen map (computed once); exact on
        feature space because the map has full column rank.
        """
        feature = np.asarray(feature, dtype=np.float64)
        if feature.shape != (self.feature_dim,):
            raise ShapeError(f"feature shape {feature.shape} != ({self.feature_dim},)")
        if self._pinv is None:
            self._pinv = np.linalg.pinv(self.weight)
        return feature @ self._pinv

    def checksum(self) -> str:
        return hashlib.sha256(self.weight.tobytes()).hexdigest()


@dataclass(frozen=True)
class EncoderSpec:
    """Everything needed to rebuild the frozen encoder stack bit-for-bit."""

    seed: int = 0
    vocab_size: int = 4096
    embed_dim: int = 32
    feature_dim: int = 64
    input_dim: int = 96

    def build(self) -> "EncoderBundle":
        return EncoderBundle(self)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "vocab_size": self.vocab_size,
            "embed_dim": self.embed_dim,
            "feature_dim": self.feature_dim,
            "input_dim": self.input_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderSpec":
        return cls(**d)


class EncoderBundle:
    """Tokenizer + embeddings + both encoders built from one spec."""

    def __init__(self, spec: EncoderSpec):
        self.spec = spec
        self.tokenizer = Tokenizer(spec.vocab_size)
        self.embeddings = EmbeddingTable(spec.vocab_size, spec.embed_dim, spec.seed)
        self.text = TextEncoder(spec.embed_dim, spec.feature_dim, spec.seed)
        self.image = ImageEncoder(spec.input_dim, spec.feature_dim, spec.seed)

    def encode_string(self, text: str) -> ad.Tensor:
        """Tokenize, embed and encode a full string; frozen end to end."""
        ids = self.tokenizer.tokenize(text)
        if not ids:
            raise InvalidInputError(f"text tokenizes to nothing: {text!r}")
        return self.text.encode(self.embeddings.lookup(ids))
