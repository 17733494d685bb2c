"""Frame features: text/image encoder pairs, frame fusion, uniform resampling.

Also provides a seeded synthetic encoder pair with a controllable modality gap
(a constant offset between the image and text embedding of the same concept),
which stands in for a CLIP-style encoder in desk-scale experiments.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Hashable, Sequence

import numpy as np

from . import container
from .data import Tideo, TextualFrame
from .errors import DimensionMismatch, EmptyVocabulary, EncoderFailure

MODALITIES = ("text", "image", "projected")
UNIT_TOL = 1e-6


def l2_normalize(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=axis, keepdims=True)
    return x / np.where(norm == 0, 1.0, norm)


@dataclass(frozen=True)
class FrameFeature:
    vector: np.ndarray
    modality: str
    norm_flag: bool = True

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.norm_flag and abs(np.linalg.norm(self.vector) - 1.0) > UNIT_TOL:
            raise ValueError("norm_flag set on a non-unit vector")

    @property
    def dimension(self) -> int:
        return int(self.vector.shape[0])


@dataclass(frozen=True)
class SequenceRepresentation:
    """Ordered frame features of one modality, stored as an (n, d) matrix."""

    vectors: np.ndarray
    modality: str
    normalized: bool = True

    def __post_init__(self):
        if self.vectors.ndim != 2:
            raise ValueError("vectors must be (n, d)")
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")

    def __len__(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def dimension(self) -> int:
        return int(self.vectors.shape[1])

    @property
    def frames(self) -> list[FrameFeature]:
        return [FrameFeature(v, self.modality, self.normalized) for v in self.vectors]

    @classmethod
    def from_frames(cls, frames: Sequence[FrameFeature]) -> "SequenceRepresentation":
        mods = {f.modality for f in frames}
        dims = {f.dimension for f in frames}
        if len(mods) != 1 or len(dims) != 1:
            raise ValueError("frames must share modality and dimension")
        return cls(np.stack([f.vector for f in frames]), mods.pop(), all(f.norm_flag for f in frames))


@dataclass
class EncoderPair:
    """Aligned text and image encoders emitting d-dimensional vectors.

    ``text_encoder`` maps a string to a vector; ``image_encoder`` maps a raw
    frame (whatever the adapter understands) to a vector.  Text encodings are
    memoized since the text encoder is required to be deterministic.
    """

    text_encoder: Callable[[str], np.ndarray]
    image_encoder: Callable[[Any], np.ndarray]
    dimension: int
    descriptor: str
    _cache: dict = field(default_factory=dict, repr=False)

    def encode_text(self, text: str) -> np.ndarray:
        hit = self._cache.get(text)
        if hit is not None:
            return hit
        try:
            vec = np.asarray(self.text_encoder(text), dtype=np.float64)
        except Exception as exc:  # adapter errors surface with context
            raise EncoderFailure(f"text encoder failed on {text[:40]!r}: {exc}") from exc
        if vec.shape != (self.dimension,):
            raise DimensionMismatch(self.dimension, int(vec.shape[-1]) if vec.ndim else 0)
        vec = l2_normalize(vec)
        vec.setflags(write=False)
        self._cache[text] = vec
        return vec

    def encode_image(self, raw: Any) -> np.ndarray:
        try:
            vec = np.asarray(self.image_encoder(raw), dtype=np.float64)
        except Exception as exc:
            raise EncoderFailure(f"image encoder failed on {str(raw)[:40]!r}: {exc}") from exc
        if vec.shape != (self.dimension,):
            raise DimensionMismatch(self.dimension, int(vec.shape[-1]) if vec.ndim else 0)
        return l2_normalize(vec)


def fuse(features: np.ndarray) -> np.ndarray:
    """Average-pool unit-normalized constituent features and re-normalize."""
    return l2_normalize(l2_normalize(features).mean(axis=0))


def encode_textual_frame(frame: TextualFrame, pair: EncoderPair) -> FrameFeature:
    parts = [pair.encode_text(frame.caption)] + [pair.encode_text(o) for o in frame.object_captions]
    return FrameFeature(fuse(np.stack(parts)), "text", True)


def uniform_indices(n: int, target: int) -> list[int]:
    """Evenly spaced frame indices over [0, n-1], positions rounded half-down.

    Position i is ``i * (n - 1) / (target - 1)``; a single target frame takes
    index 0.  Computed in integers so ties are exact.
    """
    if n < 1 or target < 1:
        raise ValueError("n and target must be >= 1")
    if target == 1:
        return [0]
    den = target - 1
    # ceil(p - 1/2) with p = i*(n-1)/den, i.e. ceil((2i(n-1) - den) / (2 den))
    return [-((den - 2 * i * (n - 1)) // (2 * den)) for i in range(target)]


def encode_tideo(tideo: Tideo, pair: EncoderPair, target_frames: int = 10) -> SequenceRepresentation:
    idx = uniform_indices(tideo.n_frames, target_frames)
    fused = {i: encode_textual_frame(tideo.frames[i], pair).vector for i in set(idx)}
    return SequenceRepresentation(np.stack([fused[i] for i in idx]), "text", True)


def encode_video_features(features: np.ndarray, target_frames: int = 10,
                          dimension: int | None = None) -> SequenceRepresentation:
    """Resample pre-extracted per-frame image features and unit-normalize them."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError("features must be (n, d)")
    if dimension is not None and features.shape[1] != dimension:
        raise DimensionMismatch(dimension, features.shape[1])
    idx = uniform_indices(features.shape[0], target_frames)
    return SequenceRepresentation(l2_normalize(features[idx]), "image", True)


def resample(seq: SequenceRepresentation, target_frames: int) -> SequenceRepresentation:
    idx = uniform_indices(len(seq), target_frames)
    return SequenceRepresentation(seq.vectors[idx], seq.modality, seq.normalized)


# -- synthetic encoder -----------------------------------------------------

_WORD = re.compile(r"[a-z0-9]+")


def _seeded_gaussian(d: int, *key: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(list(key)))
    return rng.standard_normal(d) / np.sqrt(d)


def _string_seed(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


@dataclass(frozen=True)
class SyntheticFrame:
    """Raw frame for the synthetic image encoder: a concept and an instance id."""

    concept: str
    instance: int = 0


@dataclass(frozen=True)
class SyntheticEncoderSpec:
    concept_vocabulary: tuple[str, ...]
    dimension: int = 64
    gap_offset: tuple[float, ...] | None = None
    noise_scale: float = 0.0
    rng_seed: int = 0

    def gap_vector(self) -> np.ndarray:
        if self.gap_offset is None:
            return np.zeros(self.dimension)
        g = np.asarray(self.gap_offset, dtype=np.float64)
        if g.shape != (self.dimension,):
            raise DimensionMismatch(self.dimension, g.shape[0])
        return g

    def descriptor(self) -> str:
        body = json.dumps({"v": list(self.concept_vocabulary), "d": self.dimension,
                           "g": list(map(float, self.gap_vector())), "s": self.noise_scale,
                           "r": self.rng_seed}, sort_keys=True)
        return "synthetic:" + hashlib.sha256(body.encode()).hexdigest()[:16]


def random_gap(dimension: int, magnitude: float, seed: int) -> tuple[float, ...]:
    """A gap offset of the given norm in a seeded random direction."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dimension)
    return tuple(float(x) for x in magnitude * v / np.linalg.norm(v))


class SyntheticWorld:
    """Concept embeddings behind make_synthetic_pair, kept for introspection."""

    def __init__(self, spec: SyntheticEncoderSpec):
        vocab = [c.lower() for c in spec.concept_vocabulary]
        if not vocab:
            raise EmptyVocabulary("concept vocabulary is empty")
        if len(set(vocab)) != len(vocab) or any(not _WORD.fullmatch(c) for c in vocab):
            raise ValueError("concepts must be distinct single lowercase words")
        self.spec = spec
        self.vocab = vocab
        self.index = {c: k for k, c in enumerate(vocab)}
        d = spec.dimension
        self.base = np.stack([_seeded_gaussian(d, spec.rng_seed, k) for k in range(len(vocab))])
        self.gap = spec.gap_vector()
        self.text_matrix = l2_normalize(self.base)
        self._check()

    def _check(self) -> None:
        t = self.text_matrix
        cos = t @ t.T
        np.fill_diagonal(cos, 0.0)
        if len(self.vocab) > 1 and np.max(np.abs(cos)) > 1 - 1e-9:
            raise ValueError("concept embeddings are collinear")
        clean = l2_normalize(self.base + self.gap)
        nearest = np.argmax(clean @ t.T, axis=1)
        if np.any(nearest != np.arange(len(self.vocab))):
            raise ValueError("gap offset breaks concept separation: noise-free image features "
                             "do not retrieve their own text embedding")

    def concept_of(self, text: str) -> str | None:
        for w in _WORD.findall(text.lower()):
            if w in self.index:
                return w
        return None

    def text(self, text: str) -> np.ndarray:
        c = self.concept_of(text)
        if c is None:
            return l2_normalize(_seeded_gaussian(self.spec.dimension, self.spec.rng_seed, 1,
                                                 _string_seed(text)))
        return self.text_matrix[self.index[c]].copy()

    def image(self, raw: Any) -> np.ndarray:
        if isinstance(raw, SyntheticFrame):
            label, instance = raw.concept, raw.instance
        else:
            label, instance = str(raw), 0
        c = self.concept_of(label)
        d = self.spec.dimension
        if c is None:
            base = _seeded_gaussian(d, self.spec.rng_seed, 1, _string_seed(label))
            key = _string_seed(label)
        else:
            base = self.base[self.index[c]]
            key = self.index[c]
        vec = base + self.gap
        if self.spec.noise_scale > 0:
            vec = vec + self.spec.noise_scale * _seeded_gaussian(d, self.spec.rng_seed, 2, key, instance)
        return l2_normalize(vec)


def make_synthetic_pair(spec: SyntheticEncoderSpec) -> EncoderPair:
    world = SyntheticWorld(spec)
    pair = EncoderPair(world.text, world.image, spec.dimension, spec.descriptor())
    pair.world = world  # type: ignore[attr-defined]
    return pair


# -- feature cache ---------------------------------------------------------


def content_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class FeatureCache:
    """Write-once store of text features keyed by (encoder descriptor, content hash).

    Persisted as a feature container (float32 rows) plus a JSON index mapping
    content hash to row.
    """

    def __init__(self, descriptor: str, dimension: int):
        self.descriptor = descriptor
        self.dimension = dimension
        self.rows: list[np.ndarray] = []
        self.index: dict[str, int] = {}

    def get_or_encode(self, text: str, pair: EncoderPair) -> np.ndarray:
        if pair.descriptor != self.descriptor:
            raise ValueError("encoder descriptor does not match cache")
        key = content_hash(text)
        if key not in self.index:
            self.index[key] = len(self.rows)
            self.rows.append(pair.encode_text(text))
        return self.rows[self.index[key]]

    def save(self, path) -> None:
        path = Path(path)
        rows = np.stack(self.rows) if self.rows else np.zeros((0, self.dimension))
        container.save_features(path, rows, self.descriptor)
        path.with_suffix(".index.json").write_text(
            json.dumps(self.index, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "FeatureCache":
        path = Path(path)
        meta, rows = container.load_features(path)
        cache = cls(meta["encoder_descriptor"], meta["dimension"])
        cache.rows = [r.astype(np.float64) for r in rows]
        cache.index = json.loads(path.with_suffix(".index.json").read_text(encoding="utf-8"))
        return cache
