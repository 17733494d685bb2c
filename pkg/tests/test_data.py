import json
import random

import pytest
from hypothesis import given, settings, strategies as st

from topa.data import (
    CorpusStats,
    corpus_stats,
    infer_question_type,
    read_shard,
    tideo_to_record,
    annotation_to_record,
    validate_annotation,
    validate_tideo,
    write_shard,
)
from topa.errors import (
    AnswerOutOfRange,
    DuplicateOptions,
    EmptyCaption,
    FrameCountOutOfRange,
    IdMismatch,
    MalformedRecord,
)


def raw_tideo(n=5, tid="t1", **extra):
    rec = {
        "id": tid,
        "source_tag": "video_title",
        "condition": {"source_tag": "video_title", "seed_text": "how to fix a bike"},
        "frames": [{"caption": f"frame {i}", "object_captions": [f"object {i}"]} for i in range(n)],
    }
    rec.update(extra)
    return rec


def raw_annotation(tid="t1", options=("A", "B", "C", "D", "E"), answer_index=4, question="What is shown?"):
    return {"tideo_id": tid, "dense_description": "A bike gets fixed.",
            "qa": [{"question": question, "options": list(options), "answer_index": answer_index}]}


def test_four_frames_rejected():
    with pytest.raises(FrameCountOutOfRange):
        validate_tideo(raw_tideo(4))


def test_sixteen_frames_rejected():
    with pytest.raises(FrameCountOutOfRange):
        validate_tideo(raw_tideo(16))


def test_five_frames_accepted():
    t = validate_tideo(raw_tideo(5))
    assert t.n_frames == 5
    assert [f.caption for f in t.frames] == [f"frame {i}" for i in range(5)]


def test_empty_caption_reports_frame():
    rec = raw_tideo(15)
    rec["frames"][7]["caption"] = "   "
    with pytest.raises(EmptyCaption) as info:
        validate_tideo(rec)
    assert info.value.frame == 7


def test_empty_object_caption():
    rec = raw_tideo(6)
    rec["frames"][2]["object_captions"] = ["ok", ""]
    with pytest.raises(EmptyCaption) as info:
        validate_tideo(rec)
    assert (info.value.frame, info.value.object_index) == (2, 1)


@pytest.mark.parametrize("path", ["id", "condition", "frames"])
def test_missing_field_has_path(path):
    rec = raw_tideo(5)
    del rec[path]
    with pytest.raises(MalformedRecord) as info:
        validate_tideo(rec)
    assert info.value.path == path


def test_missing_nested_caption_path():
    rec = raw_tideo(5)
    del rec["frames"][3]["caption"]
    with pytest.raises(MalformedRecord) as info:
        validate_tideo(rec)
    assert info.value.path == "frames[3].caption"


def test_answer_boundary_valid():
    t = validate_tideo(raw_tideo())
    a = validate_annotation(raw_annotation(answer_index=4), t)
    assert a.qa_items[0].answer == "E"


def test_answer_out_of_range():
    t = validate_tideo(raw_tideo())
    with pytest.raises(AnswerOutOfRange):
        validate_annotation(raw_annotation(answer_index=5), t)


def test_duplicate_options_after_normalization():
    t = validate_tideo(raw_tideo())
    with pytest.raises(DuplicateOptions):
        validate_annotation(raw_annotation(options=("open door", "Open Door "), answer_index=0), t)


def test_id_mismatch():
    t = validate_tideo(raw_tideo())
    with pytest.raises(IdMismatch):
        validate_annotation(raw_annotation(tid="other"), t)


@pytest.mark.parametrize("question,expected", [
    ("What is the man holding?", "what"),
    ("why does she leave", "why"),
    ("How many cups are there?", "how"),
    ("Which tool is used?", "other"),
    ("", "other"),
])
def test_question_type_inference(question, expected):
    assert infer_question_type(question) == expected


def test_question_type_inferred_when_absent():
    t = validate_tideo(raw_tideo())
    a = validate_annotation(raw_annotation(question="Why is the bike broken?"), t)
    assert a.qa_items[0].question_type == "why"


def test_round_trip_preserves_unknown_fields():
    rec = raw_tideo(6, vendor_score=0.9)
    rec["frames"][0]["timestamp"] = 1.5
    t = validate_tideo(rec)
    out = tideo_to_record(t)
    assert out["vendor_score"] == 0.9
    assert out["frames"][0]["timestamp"] == 1.5
    assert validate_tideo(json.loads(json.dumps(out))) == t


def test_shard_round_trip(tmp_path):
    pairs = []
    for k in range(3):
        t = validate_tideo(raw_tideo(5 + k, tid=f"t{k}"))
        a = validate_annotation(raw_annotation(tid=f"t{k}"), t)
        pairs.append((t, a))
    write_shard(tmp_path, pairs)
    assert read_shard(tmp_path) == pairs


def test_stats_mean():
    ts = [validate_tideo(raw_tideo(5, "a")), validate_tideo(raw_tideo(9, "b"))]
    s = corpus_stats(ts)
    assert s.mean_frames_per_tideo == 7.0
    assert s.frame_count_total == 14


def test_stats_empty_corpus():
    s = corpus_stats([])
    assert s.tideo_count == 0
    assert s.mean_frames_per_tideo == 0.0
    assert s.mean_defined is False


frame_counts = st.lists(st.integers(5, 15), min_size=0, max_size=12)


@settings(max_examples=50, deadline=None)
@given(frame_counts, st.randoms(use_true_random=False))
def test_stats_order_independent_and_mergeable(counts, rnd):
    corpus = []
    for i, n in enumerate(counts):
        t = validate_tideo(raw_tideo(n, f"t{i}"))
        corpus.append((t, validate_annotation(raw_annotation(tid=f"t{i}"), t)))
    shuffled = corpus[:]
    rnd.shuffle(shuffled)
    a, b = corpus_stats(corpus), corpus_stats(shuffled)
    assert a.to_dict() == b.to_dict()
    cut = len(corpus) // 2
    merged = corpus_stats(corpus[:cut]).merge(corpus_stats(corpus[cut:]))
    assert merged.to_dict() == a.to_dict()
    if a.tideo_count:
        assert abs(a.mean_frames_per_tideo - a.frame_count_total / a.tideo_count) < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.lists(st.text(min_size=1, max_size=12).filter(lambda s: s.strip()), min_size=2, max_size=5),
       st.data())
def test_answer_always_addresses_unique_option(options, data):
    t = validate_tideo(raw_tideo())
    idx = data.draw(st.integers(0, len(options) - 1))
    try:
        a = validate_annotation(raw_annotation(options=options, answer_index=idx), t)
    except DuplicateOptions:
        return
    norm = [" ".join(o.strip().lower().split()) for o in a.qa_items[0].options]
    assert norm.count(norm[a.qa_items[0].answer_index]) == 1
