"""Training-free projection of image features into text-feature space.

An image feature is replaced by a softmax-weighted mixture of text-feature
anchors from a support memory::

    w_i = exp(m_i . f / tau) / sum_k exp(m_k . f / tau)
    f_projected = sum_i w_i m_i

The output is a convex combination of anchors and is left unnormalized.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import container
from .data import normalize_option
from .encoders import EncoderPair, FrameFeature, SequenceRepresentation, l2_normalize
from .errors import DimensionMismatch, EmptyCaptionStream, NonPositiveTemperature

DEFAULT_TEMPERATURE = 0.01


@dataclass(frozen=True)
class SupportMemory:
    anchors: np.ndarray
    temperature: float = DEFAULT_TEMPERATURE
    provenance: tuple[str, ...] = ()
    normalized: bool = True
    descriptor: str = ""

    def __post_init__(self):
        if self.anchors.ndim != 2 or self.anchors.shape[0] < 1:
            raise ValueError("memory needs at least one anchor row")
        if self.temperature <= 0:
            raise NonPositiveTemperature(f"temperature must be > 0, got {self.temperature}")
        if self.provenance and len(self.provenance) != self.anchors.shape[0]:
            raise ValueError("provenance length differs from anchor count")
        if self.normalized and np.any(np.abs(np.linalg.norm(self.anchors, axis=1) - 1) > 1e-6):
            raise ValueError("normalized memory has non-unit anchors")

    @property
    def size(self) -> int:
        return int(self.anchors.shape[0])

    @property
    def dimension(self) -> int:
        return int(self.anchors.shape[1])

    def with_temperature(self, temperature: float) -> "SupportMemory":
        return SupportMemory(self.anchors, temperature, self.provenance, self.normalized, self.descriptor)

    def save(self, path) -> None:
        """Feature container (temperature in header) plus a ``provenance.jsonl`` sidecar."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        container.save_features(path, self.anchors, self.descriptor,
                                {"temperature": self.temperature, "normalized": self.normalized})
        with open(provenance_path(path), "w", encoding="utf-8") as fh:
            for text in self.provenance:
                fh.write(json.dumps({"caption": text}, ensure_ascii=False) + "\n")

    @classmethod
    def load(cls, path) -> "SupportMemory":
        path = Path(path)
        meta, rows = container.load_features(path)
        prov_file = provenance_path(path)
        prov = ()
        if prov_file.exists():
            with open(prov_file, encoding="utf-8") as fh:
                prov = tuple(json.loads(line)["caption"] for line in fh if line.strip())
        anchors = rows.astype(np.float64)
        normalized = bool(meta.get("normalized", True))
        if normalized:
            # float32 storage loses a little unit-norm precision
            anchors = l2_normalize(anchors)
        return cls(anchors, float(meta["temperature"]), prov, normalized, meta["encoder_descriptor"])


def provenance_path(path: Path) -> Path:
    return path.parent / "provenance.jsonl"


def _reservoir(items: Iterable[str], k: int, seed: int) -> list[str]:
    """Algorithm R over a deduplicated stream; returns survivors in stream order."""
    rng = np.random.default_rng(seed)
    seen: set[str] = set()
    reservoir: list[tuple[int, str]] = []
    t = 0
    for text in items:
        key = normalize_option(text)
        if not key or key in seen:
            continue
        seen.add(key)
        if len(reservoir) < k:
            reservoir.append((t, text))
        else:
            j = int(rng.integers(t + 1))
            if j < k:
                reservoir[j] = (t, text)
        t += 1
    return [text for _, text in sorted(reservoir)]


def build_memory(captions: Iterable[str], pair: EncoderPair, max_size: int,
                 temperature: float = DEFAULT_TEMPERATURE, seed: int = 0) -> SupportMemory:
    """Encode up to ``max_size`` distinct captions as memory anchors."""
    if max_size < 1:
        raise ValueError("max_size must be >= 1")
    kept = _reservoir(captions, max_size, seed)
    if not kept:
        raise EmptyCaptionStream("no non-empty captions to build a memory from")
    anchors = np.stack([pair.encode_text(c) for c in kept])
    return SupportMemory(l2_normalize(anchors), temperature, tuple(kept), True, pair.descriptor)


# -- projection ------------------------------------------------------------


def _check(query: np.ndarray, memory: SupportMemory) -> np.ndarray:
    query = np.asarray(query, dtype=np.float64)
    if query.shape[-1] != memory.dimension:
        raise DimensionMismatch(memory.dimension, query.shape[-1])
    if memory.temperature <= 0:
        raise NonPositiveTemperature(str(memory.temperature))
    return query


def softmax_weights(query: np.ndarray, memory: SupportMemory, normalize_query: bool = True,
                    top_k: int | None = None) -> np.ndarray:
    """Mixture weights for one query (d,) or a batch (n, d).

    With ``top_k`` set, only the k most similar anchors get weight (approximate
    path); otherwise every anchor participates.
    """
    query = _check(query, memory)
    if normalize_query:
        query = l2_normalize(query)
    logits = query @ memory.anchors.T / memory.temperature
    if top_k is not None and top_k < memory.size:
        cut = np.partition(logits, -top_k, axis=-1)[..., -top_k, None]
        logits = np.where(logits >= cut, logits, -np.inf)
    logits = logits - logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=-1, keepdims=True)


def project_vectors(vectors: np.ndarray, memory: SupportMemory, normalize_query: bool = True,
                    post_normalize: bool = False, top_k: int | None = None) -> np.ndarray:
    out = softmax_weights(vectors, memory, normalize_query, top_k) @ memory.anchors
    return l2_normalize(out) if post_normalize else out


def project(f_v: FrameFeature | np.ndarray, memory: SupportMemory, *, normalize_query: bool = True,
            post_normalize: bool = False, top_k: int | None = None) -> FrameFeature:
    vec = f_v.vector if isinstance(f_v, FrameFeature) else f_v
    out = project_vectors(vec, memory, normalize_query, post_normalize, top_k)
    return FrameFeature(out, "projected", post_normalize)


def project_sequence(v: SequenceRepresentation, memory: SupportMemory, *, normalize_query: bool = True,
                     post_normalize: bool = False, top_k: int | None = None) -> SequenceRepresentation:
    if v.modality != "image":
        raise ValueError(f"expected an image-modality sequence, got {v.modality!r}")
    out = project_vectors(v.vectors, memory, normalize_query, post_normalize, top_k)
    return SequenceRepresentation(out, "projected", post_normalize)


def projection_diagnostics(f_v: FrameFeature | np.ndarray, memory: SupportMemory,
                           top_k: int) -> list[tuple[str, float]]:
    """Top-k anchors by weight, ties broken by anchor index."""
    if not 1 <= top_k <= memory.size:
        raise ValueError(f"top_k must be in [1, {memory.size}]")
    vec = f_v.vector if isinstance(f_v, FrameFeature) else f_v
    w = softmax_weights(vec, memory)
    order = np.lexsort((np.arange(memory.size), -w))[:top_k]
    names: Sequence[str] = memory.provenance or [f"anchor[{i}]" for i in range(memory.size)]
    return [(names[i], float(w[i])) for i in order]
