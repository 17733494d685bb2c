"""Evaluation harness: multi-choice QA (selection / logits / blind), captioning, ablations."""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np
import torch

from . import container
from .aligner import AlignmentExample, Checkpoint, assemble, example_losses, fingerprint, make_example
from .backbone import TinyBackbone, TrainableParams
from .encoders import SequenceRepresentation, encode_video_features, resample
from .errors import EmptyOption, MissingMemory
from .memory import SupportMemory, project_sequence
from .prompts import EOS, LETTERS, Tokenizer

MODES = ("selection", "logits")
LOGITS_SCORE = "mean_token_logprob"


class FeatureFile:
    """Lazily loaded per-video feature file; counts bytes actually read."""

    bytes_read: int = 0

    def __init__(self, path, dimension: int | None = None):
        self.path = Path(path)
        self.dimension = dimension

    def load(self) -> SequenceRepresentation:
        blob = self.path.read_bytes()
        FeatureFile.bytes_read += len(blob)
        meta, arrays = container.decode(blob)
        return encode_video_features(arrays["rows"], len(arrays["rows"]), self.dimension)


@dataclass
class EvalItem:
    question: str
    options: tuple[str, ...]
    features: SequenceRepresentation | FeatureFile | None = None
    answer_index: int | None = None
    id: str = ""

    def __post_init__(self):
        if len(self.options) < 2:
            raise ValueError("an eval item needs at least two options")
        if self.answer_index is not None and not 0 <= self.answer_index < len(self.options):
            raise ValueError("answer_index out of range")

    def load_features(self) -> SequenceRepresentation | None:
        if isinstance(self.features, FeatureFile):
            return self.features.load()
        return self.features


@dataclass
class Model:
    """A frozen backbone plus trained parameters: everything inference needs."""

    backbone: Any
    params: TrainableParams | None
    tokenizer: Tokenizer

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint, backbone: TinyBackbone,
                        tokenizer: Tokenizer | None = None) -> "Model":
        return cls(backbone, checkpoint.to_params(backbone), tokenizer or backbone.tokenizer)


# -- option-letter parsing -------------------------------------------------

_PAREN = re.compile(r"\(\s*([A-Za-z])\s*\)")
_FIRST_ALPHA = re.compile(r"[A-Za-z]+")


def parse_option_letter(completion: str, n_options: int) -> int | None:
    """Accepts "(X)" anywhere, else "X)", "X." or a bare letter as the first word."""
    valid = LETTERS[:n_options]
    m = _PAREN.search(completion)
    if m:
        letter = m.group(1).upper()
        return valid.index(letter) if letter in valid else None
    m = _FIRST_ALPHA.search(completion)
    if m and len(m.group(0)) == 1 and m.group(0) in valid:
        rest = completion[m.end():].lstrip()
        if not rest or rest[0] in ").:,":
            return valid.index(m.group(0))
    return None


# -- scoring primitives ------------------------------------------------------


def _features_for(item: EvalItem, blind: bool):
    return None if blind else item.load_features()


@torch.no_grad()
def option_scores(model: Model, question: str, options: Sequence[str],
                  features: SequenceRepresentation | None, blind: bool = False) -> np.ndarray:
    """Mean log-probability of each option's tokens after the open-QA context.

    Options are scored in separate sequences, never shown to one another.
    """
    examples = []
    for opt in options:
        ids = model.tokenizer.encode(opt)
        if not ids:
            raise EmptyOption(f"option {opt!r} has no tokens")
        ex = make_example("open_qa", model.tokenizer, features, question=question, with_target=False)
        ex.target_tokens = ids
        examples.append(ex)
    return -example_losses(examples, model.backbone, model.params, blind=blind).numpy()


@torch.no_grad()
def greedy_generate(model: Model, example: AlignmentExample, max_new_tokens: int = 16,
                    blind: bool = False) -> list[int]:
    out: list[int] = []
    for _ in range(max_new_tokens):
        ex = AlignmentExample(example.features, example.pre_tokens, example.post_tokens + out, [],
                              example.task, example.slot_tokens)
        embeds, _ = assemble([ex], model.backbone, model.params, blind)
        logits = model.backbone(embeds, model.params) if model.params is not None else model.backbone(embeds)
        nxt = int(torch.argmax(logits[0, -1]))
        if nxt == EOS:
            break
        out.append(nxt)
    return out


# -- multi-choice modes --------------------------------------------------------


@dataclass
class Prediction:
    index: int
    mode: str
    scores: list[float] | None = None
    completion: str | None = None
    fallback: bool = False


def eval_logits(item: EvalItem, model: Model, blind: bool = False) -> Prediction:
    scores = option_scores(model, item.question, item.options, _features_for(item, blind), blind)
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    return Prediction(int(np.argmax(scores)), "logits", scores.tolist())


def eval_selection(item: EvalItem, model: Model, blind: bool = False, max_new_tokens: int = 12) -> Prediction:
    feats = _features_for(item, blind)
    ex = make_example("multi_choice", model.tokenizer, feats, question=item.question,
                      options=item.options, with_target=False)
    completion = model.tokenizer.decode(greedy_generate(model, ex, max_new_tokens, blind))
    idx = parse_option_letter(completion, len(item.options))
    if idx is not None:
        return Prediction(idx, "selection", completion=completion)
    scores = option_scores(model, item.question, item.options, feats, blind)
    return Prediction(int(np.argmax(scores)), "selection", scores.tolist(), completion, fallback=True)


def eval_blind(item: EvalItem, model: Model, mode: str = "selection") -> Prediction:
    """Same as the chosen mode, with the feature block left out of the prompt."""
    if mode == "logits":
        return eval_logits(item, model, blind=True)
    return eval_selection(item, model, blind=True)


# -- benchmark runs ------------------------------------------------------------


@dataclass
class EvalResult:
    items: list[dict]
    mode: str
    frames: int
    projection: bool
    blind: bool
    config: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.items)

    @property
    def labeled(self) -> list[dict]:
        return [r for r in self.items if r.get("answer_index") is not None]

    @property
    def accuracy(self) -> float | None:
        lab = self.labeled
        if not lab:
            return None
        return sum(r["predicted_index"] == r["answer_index"] for r in lab) / len(lab)

    @property
    def fallback_rate(self) -> float:
        return sum(r.get("fallback", False) for r in self.items) / self.n if self.n else 0.0

    def summary(self) -> dict:
        return {"config": self.config, "fingerprint": fingerprint(self.config), "mode": self.mode,
                "score": LOGITS_SCORE if self.mode == "logits" else "letter_parse",
                "frames": self.frames, "projection": self.projection, "blind": self.blind,
                "accuracy": self.accuracy, "accuracy_defined": self.accuracy is not None,
                "n": self.n, "fallback_rate": self.fallback_rate}

    def write(self, directory, name: str = "eval") -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f"{name}.json").write_text(
            json.dumps(self.summary(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
        with open(directory / f"{name}.items.jsonl", "w", encoding="utf-8") as fh:
            for r in self.items:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
        return directory / f"{name}.json"


def prepare_features(feats: SequenceRepresentation | None, frames: int, projection: bool,
                     memory: SupportMemory | None) -> SequenceRepresentation | None:
    if feats is None:
        return None
    feats = resample(feats, frames)
    if projection and feats.modality == "image":
        feats = project_sequence(feats, memory)
    return feats


def run_benchmark(items: Iterable[EvalItem], model: Model, mode: str = "logits", projection: bool = True,
                  memory: SupportMemory | None = None, frames: int = 10, blind: bool = False,
                  config: dict | None = None) -> EvalResult:
    """Evaluate a dataset under one (mode, projection, frames, blind) setting."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if projection and memory is None and not blind:
        raise MissingMemory("projection=on needs a support memory")
    cfg = {"mode": mode, "projection": projection, "frames": frames, "blind": blind,
           "memory_temperature": memory.temperature if memory is not None else None,
           "memory_size": memory.size if memory is not None else None, **(config or {})}
    rows = []
    for item in items:
        feats = None if blind else prepare_features(item.load_features(), frames, projection, memory)
        probe = EvalItem(item.question, item.options, feats, item.answer_index, item.id)
        pred = eval_logits(probe, model, blind) if mode == "logits" else eval_selection(probe, model, blind)
        rows.append({"id": item.id, "predicted_index": pred.index, "answer_index": item.answer_index,
                     "mode": mode, "scores": pred.scores, "completion": pred.completion,
                     "fallback": pred.fallback})
    return EvalResult(rows, mode, frames, projection, blind, cfg)


def load_benchmark(path, dimension: int | None = None) -> list[EvalItem]:
    """Read ``{id, feature_file, question, options, answer_index?}`` JSON Lines."""
    path = Path(path)
    items = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            r = json.loads(line)
            ff = r.get("feature_file")
            feats = FeatureFile(path.parent / ff, dimension) if ff else None
            items.append(EvalItem(r["question"], tuple(r["options"]), feats, r.get("answer_index"),
                                  str(r.get("id", len(items)))))
    return items


# -- captioning ------------------------------------------------------------------


def _ngrams(words: Sequence[str], n: int) -> Counter:
    return Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


def _caption_words(text: str) -> list[str]:
    return re.findall(r"\w+", text.lower())


def cider_d(candidates: Sequence[str], references: Sequence[Sequence[str]], n: int = 4,
            sigma: float = 6.0) -> tuple[float, list[float]]:
    """CIDEr-D consensus score (n-grams 1..4, idf over references, length penalty, clipping)."""
    if len(candidates) != len(references):
        raise ValueError("one reference list per candidate")
    if not candidates:
        return 0.0, []
    ref_words = [[_caption_words(r) for r in refs] for refs in references]
    cand_words = [_caption_words(c) for c in candidates]
    n_images = len(candidates)
    df = [Counter() for _ in range(n)]
    for refs in ref_words:
        for k in range(n):
            seen = set()
            for r in refs:
                seen.update(_ngrams(r, k + 1))
            df[k].update(seen)
    log_n = math.log(float(n_images))

    def vec(words, k):
        counts = _ngrams(words, k + 1)
        v = {g: tf * (log_n - math.log(max(1.0, df[k][g]))) for g, tf in counts.items()}
        norm = math.sqrt(sum(x * x for x in v.values()))
        return v, norm, counts

    scores = []
    for cw, refs in zip(cand_words, ref_words):
        total = 0.0
        for k in range(n):
            vc, nc, cc = vec(cw, k)
            acc = 0.0
            for rw in refs:
                vr, nr, _ = vec(rw, k)
                dot = sum(min(vc[g], vr[g]) * vr[g] for g in vc if g in vr)
                if nc and nr:
                    acc += dot / (nc * nr) * math.exp(-((len(cw) - len(rw)) ** 2) / (2 * sigma ** 2))
            total += acc / len(refs)
        scores.append(10.0 * total / n)
    return float(np.mean(scores)), scores


def eval_captioning(dataset: Sequence[tuple[SequenceRepresentation, Sequence[str]]], model: Model,
                    frames: int = 10, projection: bool = False, memory: SupportMemory | None = None,
                    scorer: Callable = cider_d, max_new_tokens: int = 40) -> tuple[list[str], float]:
    captions = []
    for feats, refs in dataset:
        if not refs:
            raise ValueError("each item needs at least one reference")
        feats = prepare_features(feats, frames, projection, memory)
        ex = make_example("summarization", model.tokenizer, feats, with_target=False)
        captions.append(model.tokenizer.decode(greedy_generate(model, ex, max_new_tokens)))
    score, _ = scorer(captions, [list(r) for _, r in dataset])
    return captions, score
