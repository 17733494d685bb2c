"""Synthetic worlds for desk-scale experiments.

A world is a vocabulary of concepts plus a synthetic encoder pair.  Tideos are
sequences of scenes, each scene showing one concept for a few frames.  QA
items are fully determined by frame content:

* ``content``  - which object appears in the video (one option is present).
* ``temporal`` - which object appears at the end (the first-frame object is
  always among the distractors, so a single first frame is misleading).

The same scenes render to image features through the synthetic image encoder,
giving zero-shot benchmarks with a controllable modality gap.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .aligner import AlignmentExample, make_example, sample_tasks
from .data import ConditionRecord, QAItem, TextualFrame, Tideo, TideoAnnotation
from .encoders import (
    EncoderPair,
    SequenceRepresentation,
    SyntheticEncoderSpec,
    SyntheticFrame,
    make_synthetic_pair,
    random_gap,
    uniform_indices,
)
from .prompts import Tokenizer, render_text, split_words

CONCEPTS = (
    "apple", "banana", "bicycle", "book", "bottle", "bowl", "bucket", "cake", "camera", "candle",
    "carrot", "chair", "clock", "cup", "dog", "door", "drum", "fan", "fork", "guitar",
    "hammer", "hat", "helmet", "kettle", "key", "kite", "knife", "ladder", "lamp", "laptop",
    "lemon", "mirror", "mug", "notebook", "onion", "orange", "oven", "pan", "pencil", "phone",
    "piano", "pillow", "plate", "rope", "saw", "scissors", "shoe", "spoon", "towel", "umbrella",
)

ACTIONS = (
    "a person picks up the {c}", "someone looks at the {c}", "a hand moves the {c}",
    "the camera shows the {c}", "a person holds the {c}", "someone places the {c} down",
)
CLOSEUPS = ("the {c} in close view", "a clear view of the {c}")
BACKGROUND = ("a wooden table", "a bright window", "a tiled floor", "a white wall")

CONTENT_QUESTION = "What object appears in the video"
TEMPORAL_QUESTION = "What object appears at the end of the video"


@dataclass(frozen=True)
class WorldConfig:
    n_concepts: int = 50
    dimension: int = 64
    gap_magnitude: float = 1.5
    noise_scale: float = 0.1
    seed: int = 0

    def encoder_spec(self) -> SyntheticEncoderSpec:
        gap = random_gap(self.dimension, self.gap_magnitude, self.seed + 101) if self.gap_magnitude else None
        return SyntheticEncoderSpec(CONCEPTS[:self.n_concepts], self.dimension, gap,
                                    self.noise_scale, self.seed)


def make_world(config: WorldConfig = WorldConfig()) -> EncoderPair:
    if config.n_concepts > len(CONCEPTS):
        raise ValueError(f"at most {len(CONCEPTS)} built-in concepts")
    return make_synthetic_pair(config.encoder_spec())


def _scenes(rng: np.random.Generator, concepts: Sequence[str], n_frames: int, n_scenes: int) -> list[str]:
    chosen = rng.choice(len(concepts), size=n_scenes, replace=False)
    cuts = np.sort(rng.choice(np.arange(1, n_frames), size=n_scenes - 1, replace=False))
    bounds = [0, *cuts.tolist(), n_frames]
    frames = []
    for k in range(n_scenes):
        frames += [concepts[chosen[k]]] * (bounds[k + 1] - bounds[k])
    return frames


def _frame(rng: np.random.Generator, concept: str) -> TextualFrame:
    caption = ACTIONS[rng.integers(len(ACTIONS))].format(c=concept)
    objects = [CLOSEUPS[rng.integers(len(CLOSEUPS))].format(c=concept)]
    if rng.random() < 0.5:
        objects.append(BACKGROUND[rng.integers(len(BACKGROUND))])
    return TextualFrame(caption, tuple(objects))


def _options(rng: np.random.Generator, answer: str, forced: Sequence[str], pool: Sequence[str],
             n_options: int) -> tuple[tuple[str, ...], int]:
    distractors = [c for c in dict.fromkeys(forced) if c != answer][:n_options - 1]
    rest = [c for c in pool if c != answer and c not in distractors]
    extra = rng.choice(len(rest), size=n_options - 1 - len(distractors), replace=False)
    distractors += [rest[i] for i in extra]
    opts = [answer] + distractors
    perm = rng.permutation(n_options)
    opts = [opts[i] for i in perm]
    return tuple(opts), int(np.argwhere(perm == 0)[0, 0])


def frame_concepts(tideo: Tideo) -> list[str]:
    return list(tideo.extra.get("concepts", ()))


def make_tideo(rng: np.random.Generator, concepts: Sequence[str], ident: str, kinds: Sequence[str],
               n_options: int = 4, frame_range: tuple[int, int] = (5, 15),
               scene_range: tuple[int, int] = (2, 4)) -> tuple[Tideo, TideoAnnotation]:
    n_frames = int(rng.integers(frame_range[0], frame_range[1] + 1))
    n_scenes = int(rng.integers(scene_range[0], min(scene_range[1], n_frames) + 1))
    labels = _scenes(rng, concepts, n_frames, n_scenes)
    frames = tuple(_frame(rng, c) for c in labels)
    present = list(dict.fromkeys(labels))
    absent = [c for c in concepts if c not in present]
    qa = []
    for kind in kinds:
        if kind == "content":
            answer = present[int(rng.integers(len(present)))]
            opts, idx = _options(rng, answer, [], absent, n_options)
            qa.append(QAItem(CONTENT_QUESTION, opts, idx, "what"))
        elif kind == "temporal":
            answer = labels[-1]
            opts, idx = _options(rng, answer, [labels[0]] + present, concepts, n_options)
            qa.append(QAItem(TEMPORAL_QUESTION, opts, idx, "what"))
        else:
            raise ValueError(f"unknown question kind {kind!r}")
    description = "The video shows " + ", then ".join(f"the {c}" for c in present) + "."
    tideo = Tideo(ident, frames, ConditionRecord("synthetic_fixture", " ".join(present)),
                  "synthetic_fixture", {"concepts": labels})
    return tideo, TideoAnnotation(ident, description, tuple(qa))


def make_corpus(n: int, seed: int, kinds: Sequence[str] = ("content",), n_concepts: int = 50,
                n_options: int = 4, prefix: str = "syn") -> list[tuple[Tideo, TideoAnnotation]]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    concepts = CONCEPTS[:n_concepts]
    return [make_tideo(rng, concepts, f"{prefix}-{seed}-{i:05d}", kinds, n_options) for i in range(n)]


def corpus_texts(corpus) -> list[str]:
    out = []
    for t, a in corpus:
        out += [f.caption for f in t.frames]
        out += [o for f in t.frames for o in f.object_captions]
        out.append(a.dense_description)
        for q in a.qa_items:
            out.append(q.question)
            out += list(q.options)
    return out


def make_tokenizer(n_concepts: int = 50) -> Tokenizer:
    texts = [CONTENT_QUESTION, TEMPORAL_QUESTION, "The video shows the x, then the y."]
    texts += list(CONCEPTS[:n_concepts]) + list(ACTIONS) + list(CLOSEUPS) + list(BACKGROUND)
    return Tokenizer.build(t.replace("{c}", "") for t in texts)


def textual_examples(corpus, tokenizer: Tokenizer, target_frames: int, seed: int,
                     ratio: Sequence[float] = (1, 1, 2), copies: int = 1) -> list[AlignmentExample]:
    """Prompts whose feature block is the frame concepts as word tokens.

    This is the language-only data used to give the tiny backbone its language
    competence before it is frozen.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 12]))
    out = []
    for _ in range(copies):
        tasks = sample_tasks(len(corpus), ratio, rng)
        for (t, a), task in zip(corpus, tasks):
            labels = frame_concepts(t)
            idx = uniform_indices(len(labels), target_frames)
            slot = [tokenizer.ids[labels[i]] for i in idx]
            qa = a.qa_items[int(rng.integers(len(a.qa_items)))]
            out.append(make_example(task, tokenizer, None, question=qa.question, options=qa.options,
                                    answer_index=qa.answer_index, answer=qa.answer,
                                    description=a.dense_description, slot_tokens=slot))
    return out


def image_features(tideo: Tideo, pair: EncoderPair) -> SequenceRepresentation:
    """Render every frame of a synthetic Tideo through the image encoder (full length)."""
    labels = frame_concepts(tideo)
    base = int.from_bytes(hashlib.sha256(tideo.id.encode("utf-8")).digest()[:6], "little") * 64
    vecs = np.stack([pair.encode_image(SyntheticFrame(c, base + i)) for i, c in enumerate(labels)])
    return SequenceRepresentation(vecs, "image", True)


def language_backbone(n_concepts: int, n_examples: int, epochs: int, seed: int = 0, width: int = 96,
                      n_layers: int = 3, n_heads: int = 4, lr: float = 3e-3, dtype: str = "float32",
                      kinds: Sequence[str] = ("content", "temporal")):
    """A tiny backbone with language competence over the synthetic vocabulary, frozen.

    The language corpus is drawn from its own seed stream, disjoint from the
    alignment corpus and the benchmarks.
    """
    from .aligner import pretrain_backbone
    from .backbone import BackboneConfig, TinyBackbone

    tokenizer = make_tokenizer(n_concepts)
    corpus = make_corpus(n_examples, seed + 1_000_003, kinds, n_concepts, prefix="lm")
    backbone = TinyBackbone(BackboneConfig(len(tokenizer), width, n_layers, n_heads, seed=seed, dtype=dtype),
                            tokenizer)
    examples = textual_examples(corpus, tokenizer, 10, seed)
    losses = pretrain_backbone(backbone, examples, epochs, lr=lr, seed=seed)
    return backbone, losses


def benchmark_records(corpus, pair: EncoderPair) -> tuple[dict[str, list[dict]], dict[str, SequenceRepresentation]]:
    """Benchmark rows grouped by question kind, plus image features per video id.

    Rows follow the benchmark layout ``{id, feature_file, question, options,
    answer_index}`` and carry the dense description for finetuning.
    """
    kinds = {CONTENT_QUESTION: "content", TEMPORAL_QUESTION: "temporal"}
    rows: dict[str, list[dict]] = {}
    feats = {}
    for t, a in corpus:
        feats[t.id] = image_features(t, pair)
        for q in a.qa_items:
            kind = kinds.get(q.question, "other")
            rows.setdefault(kind, []).append({
                "id": f"{t.id}:{kind}", "feature_file": f"features/{t.id}.topa", "question": q.question,
                "options": list(q.options), "answer_index": q.answer_index,
                "description": a.dense_description})
    return rows, feats


def eval_items(rows: Sequence[dict], feats: dict[str, SequenceRepresentation]):
    from .evaluation import EvalItem

    return [EvalItem(r["question"], tuple(r["options"]), feats[r["id"].rsplit(":", 1)[0]],
                     r["answer_index"], r["id"]) for r in rows]
