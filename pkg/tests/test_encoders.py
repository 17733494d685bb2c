import math
from fractions import Fraction

import numpy as np
import pytest

from topa.data import TextualFrame, validate_tideo
from topa.encoders import (
    EncoderPair,
    FeatureCache,
    SyntheticEncoderSpec,
    SyntheticFrame,
    encode_textual_frame,
    encode_tideo,
    encode_video_features,
    fuse,
    make_synthetic_pair,
    random_gap,
    uniform_indices,
)
from topa.errors import DimensionMismatch, EmptyVocabulary, EncoderFailure

VOCAB = ("apple", "banana", "chair", "dog", "kettle", "lamp")


def table_pair(table: dict[str, np.ndarray], dim: int = 2) -> EncoderPair:
    return EncoderPair(lambda s: table[s], lambda r: table[r], dim, "table")


def sampling_oracle(n: int, target: int) -> list[int]:
    """Evenly spaced real positions, rounded half-down, in exact arithmetic."""
    if target == 1:
        return [0]
    out = []
    for i in range(target):
        p = Fraction(i * (n - 1), target - 1)
        out.append(math.ceil(p - Fraction(1, 2)))
    return out


# -- fusion --------------------------------------------------------------------

def test_caption_only_frame():
    pair = table_pair({"a cat": np.array([3.0, 4.0])})
    f = encode_textual_frame(TextualFrame("a cat", ()), pair)
    assert np.allclose(f.vector, [0.6, 0.8])
    assert f.modality == "text"


def test_identical_constituents_are_idempotent():
    v = np.array([0.6, 0.8])
    pair = table_pair({"x": v, "y": 2 * v})
    assert np.allclose(encode_textual_frame(TextualFrame("x", ("y",)), pair).vector, v)


def test_orthonormal_constituents():
    pair = table_pair({"a": np.array([1.0, 0.0]), "b": np.array([0.0, 1.0])})
    f = encode_textual_frame(TextualFrame("a", ("b",)), pair)
    assert np.allclose(f.vector, np.array([1.0, 1.0]) / math.sqrt(2), atol=1e-12)


def test_fusion_ignores_object_order():
    rng = np.random.default_rng(0)
    vecs = rng.standard_normal((4, 8))
    assert np.allclose(fuse(vecs), fuse(vecs[[0, 3, 1, 2]]), atol=1e-12)


def test_encoder_failure_carries_excerpt():
    def broken(_):
        raise RuntimeError("boom")
    pair = EncoderPair(broken, broken, 2, "broken")
    with pytest.raises(EncoderFailure, match="a very long caption"):
        pair.encode_text("a very long caption")


def test_wrong_dimension():
    pair = table_pair({"a": np.ones(3)})
    with pytest.raises(DimensionMismatch):
        pair.encode_text("a")


# -- resampling --------------------------------------------------------------------

@pytest.mark.parametrize("n,target,expected", [
    (10, 10, list(range(10))),
    (5, 10, [0, 0, 1, 1, 2, 2, 3, 3, 4, 4]),
    (15, 10, [0, 2, 3, 5, 6, 8, 9, 11, 12, 14]),
    (20, 10, [0, 2, 4, 6, 8, 11, 13, 15, 17, 19]),
    (7, 1, [0]),
])
def test_uniform_indices_table(n, target, expected):
    assert uniform_indices(n, target) == expected


@pytest.mark.parametrize("n", range(1, 31))
@pytest.mark.parametrize("target", [1, 2, 3, 5, 8, 10, 16])
def test_uniform_indices_match_oracle(n, target):
    idx = uniform_indices(n, target)
    assert idx == sampling_oracle(n, target)
    assert idx[0] == 0 and idx[-1] == (n - 1 if target > 1 else 0)
    assert all(a <= b for a, b in zip(idx, idx[1:]))


def test_subsampling_is_strictly_increasing():
    idx = uniform_indices(15, 10)
    assert all(a < b for a, b in zip(idx, idx[1:]))
    assert idx[0] == 0 and idx[-1] == 14


def test_video_features_identity_and_dimension():
    rng = np.random.default_rng(1)
    feats = rng.standard_normal((10, 6))
    seq = encode_video_features(feats, 10, 6)
    assert seq.modality == "image"
    assert np.allclose(seq.vectors, feats / np.linalg.norm(feats, axis=1, keepdims=True))
    with pytest.raises(DimensionMismatch):
        encode_video_features(feats, 10, 7)


def test_video_features_twenty_to_ten():
    feats = np.eye(20)
    seq = encode_video_features(feats, 10)
    picked = [int(np.argmax(v)) for v in seq.vectors]
    assert picked == sampling_oracle(20, 10)


def test_encode_tideo_preserves_order():
    pair = make_synthetic_pair(SyntheticEncoderSpec(VOCAB, 16))
    rec = {"id": "t", "source_tag": "video_title",
           "condition": {"source_tag": "video_title", "seed_text": "s"},
           "frames": [{"caption": f"the {c}", "object_captions": []} for c in VOCAB[:5]]}
    tideo = validate_tideo(rec)
    seq = encode_tideo(tideo, pair, 5)
    for v, c in zip(seq.vectors, VOCAB[:5]):
        assert np.allclose(v, pair.encode_text(c))
    assert np.allclose(np.linalg.norm(encode_tideo(tideo, pair, 10).vectors, axis=1), 1, atol=1e-6)


# -- synthetic pair ----------------------------------------------------------------

def test_gap_free_pair_is_identity():
    pair = make_synthetic_pair(SyntheticEncoderSpec(VOCAB, 16))
    for c in VOCAB:
        assert np.array_equal(pair.encode_text(c), pair.encode_image(SyntheticFrame(c)))


def test_gap_cosines_measured():
    spec = SyntheticEncoderSpec(VOCAB, 16, random_gap(16, 0.5, 3))
    pair = make_synthetic_pair(spec)
    base = pair.world.base
    for k, c in enumerate(VOCAB):
        # oracle: direct computation from the stored base vectors
        t = base[k] / np.linalg.norm(base[k])
        i = base[k] + np.asarray(spec.gap_offset)
        i = i / np.linalg.norm(i)
        assert pair.encode_text(c) @ pair.encode_image(SyntheticFrame(c)) == pytest.approx(t @ i, abs=1e-12)


def test_same_spec_same_encoders():
    spec = SyntheticEncoderSpec(VOCAB, 16, random_gap(16, 0.5, 3), 0.1, 7)
    a, b = make_synthetic_pair(spec), make_synthetic_pair(spec)
    assert a.descriptor == b.descriptor
    assert np.array_equal(a.encode_text("a dog barks"), b.encode_text("a dog barks"))
    assert np.array_equal(a.encode_image(SyntheticFrame("lamp", 4)), b.encode_image(SyntheticFrame("lamp", 4)))


def test_first_concept_word_wins_and_unknowns_hash():
    pair = make_synthetic_pair(SyntheticEncoderSpec(VOCAB, 16))
    assert np.array_equal(pair.encode_text("a dog near a lamp"), pair.encode_text("dog"))
    u1, u2 = pair.encode_text("quantum"), pair.encode_text("quantum")
    assert np.array_equal(u1, u2)
    assert abs(np.linalg.norm(u1) - 1) < 1e-9


def test_noise_free_images_retrieve_their_concept():
    pair = make_synthetic_pair(SyntheticEncoderSpec(VOCAB, 16, random_gap(16, 0.8, 1)))
    texts = np.stack([pair.encode_text(c) for c in VOCAB])
    for k, c in enumerate(VOCAB):
        assert int(np.argmax(texts @ pair.encode_image(SyntheticFrame(c)))) == k


def test_gap_that_breaks_retrieval_rejected():
    with pytest.raises(ValueError):
        make_synthetic_pair(SyntheticEncoderSpec(VOCAB, 16, random_gap(16, 50.0, 1)))


def test_empty_vocabulary():
    with pytest.raises(EmptyVocabulary):
        make_synthetic_pair(SyntheticEncoderSpec((), 16))


def test_feature_cache_round_trip(tmp_path):
    pair = make_synthetic_pair(SyntheticEncoderSpec(VOCAB, 16))
    cache = FeatureCache(pair.descriptor, 16)
    for text in ("the dog", "a kettle", "the dog"):
        cache.get_or_encode(text, pair)
    assert len(cache.rows) == 2
    cache.save(tmp_path / "c.topa")
    back = FeatureCache.load(tmp_path / "c.topa")
    assert back.index == cache.index
    assert np.allclose(np.stack(back.rows), np.stack(cache.rows), atol=1e-6)
