"""Tideo corpus schema: textual videos, their annotations, JSONL I/O and statistics.

A *Tideo* is a textual video: an ordered list of 5-15 textual frames, each a
frame caption plus zero or more object captions.  Annotations carry a dense
description of the whole Tideo and multi-choice QA items.  A corpus shard is a
pair of JSON Lines files, ``tideos.jsonl`` and ``annotations.jsonl``, joined on
``tideo_id``.
"""

from __future__ import annotations

import json
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

from .errors import (
    AnswerOutOfRange,
    DuplicateOptions,
    EmptyCaption,
    FrameCountOutOfRange,
    IdMismatch,
    MalformedRecord,
)

MIN_FRAMES = 5
MAX_FRAMES = 15

SOURCE_TAGS = ("video_title", "video_caption", "ego_scenario", "object_lexicon", "synthetic_fixture")
QUESTION_TYPES = ("what", "why", "how", "other")

TIDEOS_FILE = "tideos.jsonl"
ANNOTATIONS_FILE = "annotations.jsonl"


@dataclass(frozen=True)
class TextualFrame:
    caption: str
    object_captions: tuple[str, ...] = ()
    extra: Mapping[str, Any] = field(default_factory=dict, compare=True)


@dataclass(frozen=True)
class ConditionRecord:
    """Provenance of a generation prompt: which source and which seed phrase."""

    source_tag: str
    seed_text: str

    def __post_init__(self):
        if self.source_tag not in SOURCE_TAGS:
            raise ValueError(f"unknown source_tag {self.source_tag!r}")
        if not self.seed_text.strip():
            raise ValueError("seed_text must be non-empty")


@dataclass(frozen=True)
class Tideo:
    id: str
    frames: tuple[TextualFrame, ...]
    condition: ConditionRecord
    source_tag: str
    extra: Mapping[str, Any] = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class QAItem:
    question: str
    options: tuple[str, ...]
    answer_index: int
    question_type: str = "other"
    extra: Mapping[str, Any] = field(default_factory=dict)

    @property
    def answer(self) -> str:
        return self.options[self.answer_index]


@dataclass(frozen=True)
class TideoAnnotation:
    tideo_id: str
    dense_description: str
    qa_items: tuple[QAItem, ...]
    extra: Mapping[str, Any] = field(default_factory=dict)


def normalize_option(text: str) -> str:
    return " ".join(text.strip().lower().split())


def infer_question_type(question: str) -> str:
    """Classify a question by its leading interrogative word."""
    words = question.strip().lower().split()
    if not words:
        return "other"
    head = words[0].strip("?,.:;!\"'")
    return head if head in ("what", "why", "how") else "other"


# -- validation ------------------------------------------------------------


def _require(raw: Mapping, key: str, kind: type | tuple, path: str):
    if not isinstance(raw, Mapping) or key not in raw:
        raise MalformedRecord(f"{path}.{key}" if path else key)
    value = raw[key]
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise MalformedRecord(f"{path}.{key}" if path else key, "wrong type")
    return value


def _extra(raw: Mapping, known: Iterable[str]) -> dict:
    known = set(known)
    return {k: v for k, v in raw.items() if k not in known}


def validate_tideo(raw: Mapping[str, Any]) -> Tideo:
    """Build a Tideo from a parsed record, enforcing every schema invariant.

    Frames are never truncated: a record with too few or too many frames is
    rejected with FrameCountOutOfRange.
    """
    if not isinstance(raw, Mapping):
        raise MalformedRecord("<root>", "record is not an object")
    tid = _require(raw, "id", str, "")
    source_tag = _require(raw, "source_tag", str, "")
    if source_tag not in SOURCE_TAGS:
        raise MalformedRecord("source_tag", f"unknown source tag {source_tag!r}")
    cond_raw = _require(raw, "condition", Mapping, "")
    cond_tag = _require(cond_raw, "source_tag", str, "condition")
    seed = _require(cond_raw, "seed_text", str, "condition")
    if cond_tag not in SOURCE_TAGS:
        raise MalformedRecord("condition.source_tag", f"unknown source tag {cond_tag!r}")
    if not seed.strip():
        raise MalformedRecord("condition.seed_text", "empty seed text")
    frames_raw = _require(raw, "frames", list, "")

    n = len(frames_raw)
    if n < MIN_FRAMES or n > MAX_FRAMES:
        raise FrameCountOutOfRange(n, MIN_FRAMES, MAX_FRAMES)

    frames = []
    for i, fr in enumerate(frames_raw):
        path = f"frames[{i}]"
        if not isinstance(fr, Mapping):
            raise MalformedRecord(path, "frame is not an object")
        caption = _require(fr, "caption", str, path)
        if not caption.strip():
            raise EmptyCaption(i)
        objects = fr.get("object_captions", [])
        if not isinstance(objects, list):
            raise MalformedRecord(f"{path}.object_captions", "wrong type")
        for j, obj in enumerate(objects):
            if not isinstance(obj, str):
                raise MalformedRecord(f"{path}.object_captions[{j}]", "wrong type")
            if not obj.strip():
                raise EmptyCaption(i, j)
        frames.append(TextualFrame(caption, tuple(objects), _extra(fr, ("caption", "object_captions"))))

    return Tideo(
        id=tid,
        frames=tuple(frames),
        condition=ConditionRecord(cond_tag, seed),
        source_tag=source_tag,
        extra=_extra(raw, ("id", "source_tag", "condition", "frames")),
    )


def validate_qa(raw: Mapping[str, Any], path: str = "qa[0]") -> QAItem:
    question = _require(raw, "question", str, path)
    options = _require(raw, "options", list, path)
    answer_index = _require(raw, "answer_index", int, path)
    if not 2 <= len(options) <= 5:
        raise MalformedRecord(f"{path}.options", f"{len(options)} options, expected 2-5")
    seen = set()
    for j, opt in enumerate(options):
        if not isinstance(opt, str) or not opt.strip():
            raise MalformedRecord(f"{path}.options[{j}]", "empty or non-string option")
        key = normalize_option(opt)
        if key in seen:
            raise DuplicateOptions(opt)
        seen.add(key)
    if not 0 <= answer_index < len(options):
        raise AnswerOutOfRange(answer_index, len(options))
    qtype = raw.get("question_type")
    if qtype is None:
        qtype = infer_question_type(question)
    elif qtype not in QUESTION_TYPES:
        raise MalformedRecord(f"{path}.question_type", f"unknown question type {qtype!r}")
    return QAItem(question, tuple(options), answer_index, qtype,
                  _extra(raw, ("question", "options", "answer_index", "question_type")))


def validate_annotation(raw: Mapping[str, Any], tideo: Tideo) -> TideoAnnotation:
    if not isinstance(raw, Mapping):
        raise MalformedRecord("<root>", "record is not an object")
    tid = _require(raw, "tideo_id", str, "")
    if tid != tideo.id:
        raise IdMismatch(tideo.id, tid)
    desc = _require(raw, "dense_description", str, "")
    if not desc.strip():
        raise MalformedRecord("dense_description", "empty dense description")
    qa_raw = _require(raw, "qa", list, "")
    items = tuple(validate_qa(q, f"qa[{k}]") for k, q in enumerate(qa_raw))
    return TideoAnnotation(tid, desc, items, _extra(raw, ("tideo_id", "dense_description", "qa")))


# -- serialization ---------------------------------------------------------


def tideo_to_record(t: Tideo) -> dict:
    rec = dict(t.extra)
    rec.update({
        "id": t.id,
        "source_tag": t.source_tag,
        "condition": {"source_tag": t.condition.source_tag, "seed_text": t.condition.seed_text},
        "frames": [
            {**dict(f.extra), "caption": f.caption, "object_captions": list(f.object_captions)}
            for f in t.frames
        ],
    })
    return rec


def qa_to_record(q: QAItem) -> dict:
    rec = dict(q.extra)
    rec.update({"question": q.question, "options": list(q.options),
                "answer_index": q.answer_index, "question_type": q.question_type})
    return rec


def annotation_to_record(a: TideoAnnotation) -> dict:
    rec = dict(a.extra)
    rec.update({"tideo_id": a.tideo_id, "dense_description": a.dense_description,
                "qa": [qa_to_record(q) for q in a.qa_items]})
    return rec


def dumps_line(record: Mapping) -> str:
    return json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n"


def iter_jsonl(path: str | os.PathLike) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)


def write_shard(directory: str | os.PathLike,
                pairs: Iterable[tuple[Tideo, TideoAnnotation]]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / TIDEOS_FILE, "w", encoding="utf-8") as ft, \
            open(directory / ANNOTATIONS_FILE, "w", encoding="utf-8") as fa:
        for t, a in pairs:
            ft.write(dumps_line(tideo_to_record(t)))
            fa.write(dumps_line(annotation_to_record(a)))
    return directory


def read_shard(directory: str | os.PathLike) -> list[tuple[Tideo, TideoAnnotation]]:
    """Load and re-validate a shard. Annotations are joined on tideo_id."""
    directory = Path(directory)
    tideos = [validate_tideo(r) for r in iter_jsonl(directory / TIDEOS_FILE)]
    by_id = {t.id: t for t in tideos}
    anns = {}
    ann_path = directory / ANNOTATIONS_FILE
    if ann_path.exists():
        for r in iter_jsonl(ann_path):
            tid = r.get("tideo_id")
            if tid not in by_id:
                raise MalformedRecord("tideo_id", f"annotation for unknown tideo {tid!r}")
            anns[tid] = validate_annotation(r, by_id[tid])
    return [(t, anns.get(t.id)) for t in tideos]


# -- statistics ------------------------------------------------------------


@dataclass
class CorpusStats:
    tideo_count: int = 0
    frame_count_total: int = 0
    qa_count: int = 0
    question_type_histogram: dict = field(default_factory=lambda: {k: 0 for k in QUESTION_TYPES})
    condition_histogram: dict = field(default_factory=dict)

    @property
    def mean_defined(self) -> bool:
        return self.tideo_count > 0

    @property
    def mean_frames_per_tideo(self) -> float:
        # reported as 0.0 for an empty corpus; check mean_defined
        return self.frame_count_total / self.tideo_count if self.tideo_count else 0.0

    def add(self, tideo: Tideo, annotation: TideoAnnotation | None = None) -> None:
        self.tideo_count += 1
        self.frame_count_total += tideo.n_frames
        self.condition_histogram[tideo.source_tag] = self.condition_histogram.get(tideo.source_tag, 0) + 1
        if annotation is not None:
            self.qa_count += len(annotation.qa_items)
            for q in annotation.qa_items:
                self.question_type_histogram[q.question_type] += 1

    def merge(self, other: "CorpusStats") -> "CorpusStats":
        qt = Counter(self.question_type_histogram) + Counter(other.question_type_histogram)
        ch = Counter(self.condition_histogram) + Counter(other.condition_histogram)
        return CorpusStats(
            self.tideo_count + other.tideo_count,
            self.frame_count_total + other.frame_count_total,
            self.qa_count + other.qa_count,
            {k: qt.get(k, 0) for k in QUESTION_TYPES},
            dict(sorted(ch.items())),
        )

    def to_dict(self) -> dict:
        return {
            "tideo_count": self.tideo_count,
            "frame_count_total": self.frame_count_total,
            "mean_frames_per_tideo": self.mean_frames_per_tideo,
            "mean_defined": self.mean_defined,
            "qa_count": self.qa_count,
            "question_type_histogram": dict(self.question_type_histogram),
            "condition_histogram": dict(sorted(self.condition_histogram.items())),
        }


def corpus_stats(corpus: Iterable[Tideo | tuple[Tideo, TideoAnnotation | None]]) -> CorpusStats:
    """Single-pass statistics over a validated corpus stream."""
    stats = CorpusStats()
    for item in corpus:
        if isinstance(item, Tideo):
            stats.add(item)
        else:
            stats.add(*item)
    stats.condition_histogram = dict(sorted(stats.condition_histogram.items()))
    return stats
