"""Text-only pre-alignment: rendering examples, the LM loss, training and finetuning.

Only the projection layer and the adapter parameters are optimized; the
backbone's base weights stay frozen and are hash-checked around every run.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import container
from .backbone import TinyBackbone, TrainableParams, make_trainable
from .data import QAItem, Tideo, TideoAnnotation
from .encoders import EncoderPair, SequenceRepresentation, encode_tideo, resample
from .errors import DivergenceDetected, MissingAnnotationField, NonFiniteLoss
from .prompts import BOS, EOS, LETTERS, TASKS, Tokenizer, render_text

log = logging.getLogger(__name__)


@dataclass
class AlignmentExample:
    """One training/inference instance.

    The backbone sees ``pre_tokens``, then the feature block (projected
    ``features``, or embedded ``slot_tokens`` for text-only language
    pretraining, or nothing in blind mode), then ``post_tokens`` (the
    condition tokens), then ``target_tokens``.  Loss covers targets only.
    """

    features: SequenceRepresentation | None
    pre_tokens: list[int]
    post_tokens: list[int]
    target_tokens: list[int]
    task: str
    slot_tokens: list[int] | None = None
    target_text: str = ""

    @property
    def prefix_tokens(self) -> list[int]:
        return self.pre_tokens + self.post_tokens

    @property
    def n_slot(self) -> int:
        if self.slot_tokens is not None:
            return len(self.slot_tokens)
        return 0 if self.features is None else len(self.features)


def make_example(task: str, tokenizer: Tokenizer, features: SequenceRepresentation | None = None, *,
                 question: str = "", options: Sequence[str] = (), answer_index: int | None = None,
                 answer: str = "", description: str = "", slot_tokens: list[int] | None = None,
                 with_target: bool = True) -> AlignmentExample:
    pre, post, target = render_text(task, question=question, options=options,
                                    answer_index=answer_index, answer=answer, description=description)
    target_ids = tokenizer.encode(target) + [EOS] if with_target else []
    return AlignmentExample(features, [BOS] + tokenizer.encode(pre), tokenizer.encode(post),
                            target_ids, task, slot_tokens, target if with_target else "")


def render_example(tideo: Tideo | None, annotation: TideoAnnotation, task: str, pair: EncoderPair | None,
                   target_frames: int, tokenizer: Tokenizer, qa_index: int = 0,
                   features: SequenceRepresentation | None = None) -> AlignmentExample:
    """Render one of the three alignment tasks for a Tideo (or for given features)."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    if tideo is not None and annotation.tideo_id != tideo.id:
        raise MissingAnnotationField("annotation does not belong to this tideo")
    if features is None:
        features = encode_tideo(tideo, pair, target_frames)
    if task == "summarization":
        if not annotation.dense_description.strip():
            raise MissingAnnotationField("dense_description")
        return make_example(task, tokenizer, features, description=annotation.dense_description)
    if not annotation.qa_items or qa_index >= len(annotation.qa_items):
        raise MissingAnnotationField("qa")
    qa = annotation.qa_items[qa_index]
    if not qa.question.strip():
        raise MissingAnnotationField("question")
    if task == "open_qa":
        return make_example(task, tokenizer, features, question=qa.question, answer=qa.answer)
    return make_example(task, tokenizer, features, question=qa.question, options=qa.options,
                        answer_index=qa.answer_index)


# -- loss ------------------------------------------------------------------


def assemble(examples: Sequence[AlignmentExample], backbone, params: TrainableParams | None,
             blind: bool = False):
    """Build a right-padded embedding batch and next-token labels (-100 = no loss)."""
    seqs, labels = [], []
    for ex in examples:
        parts = [backbone.embed(torch.tensor(ex.pre_tokens, dtype=torch.long))]
        if not blind:
            if ex.slot_tokens is not None:
                parts.append(backbone.embed(torch.tensor(ex.slot_tokens, dtype=torch.long)))
            elif ex.features is not None:
                parts.append(params.project(torch.as_tensor(ex.features.vectors, dtype=backbone.dtype)))
        parts.append(backbone.embed(torch.tensor(ex.post_tokens + ex.target_tokens, dtype=torch.long)))
        emb = torch.cat(parts)
        n_ctx = emb.shape[0] - len(ex.target_tokens)
        lab = torch.full((emb.shape[0],), -100, dtype=torch.long)
        if ex.target_tokens:
            # position p predicts token p+1
            lab[n_ctx - 1:emb.shape[0] - 1] = torch.tensor(ex.target_tokens, dtype=torch.long)
        seqs.append(emb)
        labels.append(lab)
    n = max(s.shape[0] for s in seqs)
    width = seqs[0].shape[1]
    batch = torch.zeros(len(seqs), n, width, dtype=seqs[0].dtype)
    lab_batch = torch.full((len(seqs), n), -100, dtype=torch.long)
    for i, (s, l) in enumerate(zip(seqs, labels)):
        batch[i, :s.shape[0]] = s
        lab_batch[i, :l.shape[0]] = l
    return batch, lab_batch


def token_logprobs(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """log p(label) at each position; zero where the label is masked."""
    logp = F.log_softmax(logits, dim=-1)
    safe = labels.clamp(min=0)
    picked = logp.gather(-1, safe.unsqueeze(-1)).squeeze(-1)
    return torch.where(labels >= 0, picked, torch.zeros_like(picked))


def example_losses(examples: Sequence[AlignmentExample], backbone, params: TrainableParams | None,
                   blind: bool = False) -> torch.Tensor:
    """Per-example mean negative log-likelihood of the target tokens."""
    embeds, labels = assemble(examples, backbone, params, blind)
    logits = backbone(embeds, params) if params is not None else backbone(embeds)
    lp = token_logprobs(logits, labels)
    mask = labels >= 0
    if not torch.all(torch.isfinite(lp[mask])):
        bad = torch.nonzero(~torch.isfinite(lp) & mask)[0]
        raise NonFiniteLoss(int(bad[1]))
    return -(lp.sum(1) / mask.sum(1).clamp(min=1))


def batch_loss(examples: Sequence[AlignmentExample], backbone, params: TrainableParams | None,
               blind: bool = False) -> torch.Tensor:
    return example_losses(examples, backbone, params, blind).mean()


def lm_loss(example: AlignmentExample, backbone, params: TrainableParams
            ) -> tuple[float, dict[str, np.ndarray]]:
    """Loss of one example and its gradients w.r.t. the trainable parameters."""
    params.zero_grad(set_to_none=True)
    loss = batch_loss([example], backbone, params)
    loss.backward()
    grads = {name: (p.grad.detach().numpy().copy() if p.grad is not None else np.zeros(tuple(p.shape)))
             for name, p in params.named_parameters()}
    params.zero_grad(set_to_none=True)
    return float(loss.detach()), grads


# -- configuration and checkpoints ------------------------------------------


@dataclass(frozen=True)
class TrainerConfig:
    target_frames: int = 10
    task_ratio: tuple[float, float, float] = (1.0, 1.0, 2.0)
    base_lr: float = 5e-3
    weight_decay: float = 0.1
    warmup_epochs: float = 1.0
    batch_size: int = 8
    grad_accum: int = 1
    epochs: int = 20
    seed: int = 0
    adapter_length: int = 50
    adapter_layers: int | None = None
    deterministic: bool = True

    def __post_init__(self):
        if len(self.task_ratio) != 3 or any(r <= 0 for r in self.task_ratio):
            raise ValueError("task ratio needs three positive components")

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.grad_accum

    @property
    def learning_rate(self) -> float:
        return self.base_lr * self.effective_batch / 256

    def to_dict(self) -> dict:
        d = asdict(self)
        d["task_ratio"] = list(self.task_ratio)
        return d

    def fingerprint(self) -> str:
        return fingerprint(self.to_dict())


def fingerprint(obj) -> str:
    return hashlib.sha256(container.canonical_json(obj).encode("utf-8")).hexdigest()[:16]


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    config_fingerprint: str
    backbone_descriptor: str
    step: int = 0
    meta: dict = field(default_factory=dict)

    def header(self) -> dict:
        return {"config_fingerprint": self.config_fingerprint,
                "backbone_descriptor": self.backbone_descriptor,
                "step": self.step, **self.meta}

    def save(self, path) -> None:
        container.save(path, self.header(), dict(sorted(self.arrays.items())))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        meta, arrays = container.load(path)
        fp = meta.pop("config_fingerprint")
        desc = meta.pop("backbone_descriptor")
        step = meta.pop("step")
        return cls(arrays, fp, desc, step, meta)

    def to_params(self, backbone: TinyBackbone) -> TrainableParams:
        params = make_trainable(backbone, self.meta["feature_dim"], self.meta["adapter_length"],
                                self.meta.get("adapter_layers"))
        params.load_arrays(self.arrays)
        return params


def checkpoint_of(params: TrainableParams, config: TrainerConfig, backbone: TinyBackbone, step: int,
                  encoder_descriptor: str = "", stage: str = "pretrain") -> Checkpoint:
    meta = {"feature_dim": params.feature_dim, "adapter_length": config.adapter_length,
            "adapter_layers": config.adapter_layers, "encoder_descriptor": encoder_descriptor,
            "stage": stage}
    return Checkpoint(params.named_arrays(), config.fingerprint(), backbone.descriptor(), step, meta)


# -- schedule and task sampling ----------------------------------------------


def lr_at(step: int, total: int, warmup: int, peak: float) -> float:
    """Linear warmup, then half-cycle cosine decay to zero."""
    if warmup > 0 and step < warmup:
        return peak * (step + 1) / warmup
    if total <= warmup:
        return peak
    progress = (step - warmup) / (total - warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))


def sample_tasks(n: int, ratio: Sequence[float], rng: np.random.Generator | int) -> list[str]:
    """Per-example categorical task draw in proportion to ``ratio``."""
    rng = np.random.default_rng(rng) if isinstance(rng, (int, np.integer)) else rng
    p = np.asarray(ratio, dtype=float)
    idx = rng.choice(len(TASKS), size=n, p=p / p.sum())
    return [TASKS[i] for i in idx]


@dataclass
class TrainingSource:
    """Features plus the annotation they are trained against."""

    features: SequenceRepresentation
    annotation: TideoAnnotation


def _example_for(source: TrainingSource, task: str, tokenizer: Tokenizer,
                 rng: np.random.Generator) -> AlignmentExample:
    qa_index = int(rng.integers(len(source.annotation.qa_items))) if source.annotation.qa_items else 0
    return render_example(None, source.annotation, task, None, len(source.features), tokenizer,
                          qa_index, features=source.features)


def _set_determinism(config: TrainerConfig) -> None:
    if config.deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def _fit(sources: Sequence[TrainingSource], params: TrainableParams, config: TrainerConfig,
         backbone: TinyBackbone, tokenizer: Tokenizer, tasks_ratio: Sequence[float],
         report: list, stage: str, encoder_descriptor: str) -> Checkpoint:
    _set_determinism(config)
    before = backbone.base_hash()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    steps_per_epoch = math.ceil(len(sources) / config.effective_batch) if sources else 0
    total = steps_per_epoch * config.epochs
    warmup = int(round(config.warmup_epochs * steps_per_epoch))
    peak = config.learning_rate
    opt = torch.optim.AdamW(params.parameters(), lr=peak, weight_decay=config.weight_decay)
    step = 0
    last_good = checkpoint_of(params, config, backbone, 0, encoder_descriptor, stage)
    for epoch in range(config.epochs):
        order = rng.permutation(len(sources))
        tasks = sample_tasks(len(sources), tasks_ratio, rng)
        examples = [_example_for(sources[i], t, tokenizer, rng) for i, t in zip(order, tasks)]
        epoch_losses = []
        for s in range(steps_per_epoch):
            lr = lr_at(step, total, warmup, peak)
            for g in opt.param_groups:
                g["lr"] = lr
            opt.zero_grad(set_to_none=True)
            chunk = examples[s * config.effective_batch:(s + 1) * config.effective_batch]
            step_loss = 0.0
            per_task: dict[str, list[float]] = {}
            for a in range(config.grad_accum):
                micro = chunk[a * config.batch_size:(a + 1) * config.batch_size]
                if not micro:
                    continue
                try:
                    losses = example_losses(micro, backbone, params)
                except NonFiniteLoss:
                    raise DivergenceDetected(step, last_good)
                (losses.sum() / len(chunk)).backward()
                step_loss += float(losses.detach().sum()) / len(chunk)
                for ex, l in zip(micro, losses.detach().tolist()):
                    per_task.setdefault(ex.task, []).append(l)
            if not math.isfinite(step_loss):
                raise DivergenceDetected(step, last_good)
            opt.step()
            step += 1
            epoch_losses.append(step_loss)
            for task in TASKS:
                if task in per_task:
                    report.append({"stage": stage, "epoch": epoch, "step": step, "task": task,
                                   "loss": float(np.mean(per_task[task])), "lr": lr})
            last_good = checkpoint_of(params, config, backbone, step, encoder_descriptor, stage)
        log.info("%s epoch %d: mean loss %.4f", stage, epoch,
                 float(np.mean(epoch_losses)) if epoch_losses else float("nan"))
    if backbone.base_hash() != before:
        raise RuntimeError("frozen backbone weights changed during training")
    return checkpoint_of(params, config, backbone, step, encoder_descriptor, stage)


def train(corpus: Iterable[tuple[Tideo, TideoAnnotation]], config: TrainerConfig, backbone: TinyBackbone,
          pair: EncoderPair, tokenizer: Tokenizer | None = None,
          init: Checkpoint | None = None) -> tuple[Checkpoint, list[dict]]:
    """Pre-align on text features of Tideos with the 1:1:2 task mixture."""
    tokenizer = tokenizer or backbone.tokenizer
    sources = [TrainingSource(encode_tideo(t, pair, config.target_frames), a) for t, a in corpus]
    params = init.to_params(backbone) if init else make_trainable(
        backbone, pair.dimension, config.adapter_length, config.adapter_layers, config.seed)
    report: list[dict] = []
    ckpt = _fit(sources, params, config, backbone, tokenizer, config.task_ratio, report,
                "pretrain", pair.descriptor)
    return ckpt, report


def subset(n: int, data_ratio: float, seed: int) -> list[int]:
    """Deterministic subset of ``round(n * data_ratio)`` indices, in ascending order."""
    if not 0 < data_ratio <= 1:
        raise ValueError("data_ratio must be in (0, 1]")
    k = n if data_ratio == 1 else max(1, int(round(n * data_ratio)))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    return sorted(rng.permutation(n)[:k].tolist())


def finetune(video_dataset: Sequence[tuple[SequenceRepresentation, TideoAnnotation]],
             checkpoint: Checkpoint | None, config: TrainerConfig, backbone: TinyBackbone,
             tokenizer: Tokenizer | None = None, data_ratio: float = 1.0,
             task_ratio: Sequence[float] | None = None, feature_dim: int | None = None,
             ) -> tuple[Checkpoint, list[dict]]:
    """Continue training directly on image-feature sequences (no projection).

    ``checkpoint=None`` trains from a fresh initialization.  The optimizer
    state always starts fresh.
    """
    tokenizer = tokenizer or backbone.tokenizer
    keep = subset(len(video_dataset), data_ratio, config.seed)
    sources = []
    for i in keep:
        feats, ann = video_dataset[i]
        if feats.modality != "image":
            raise ValueError("finetuning expects image-modality features")
        sources.append(TrainingSource(resample(feats, config.target_frames), ann))
    if checkpoint is not None:
        params = checkpoint.to_params(backbone)
        enc = checkpoint.meta.get("encoder_descriptor", "")
    else:
        dim = feature_dim or (sources[0].features.dimension if sources else 1)
        params = make_trainable(backbone, dim, config.adapter_length, config.adapter_layers, config.seed)
        enc = ""
    report: list[dict] = []
    ratio = task_ratio or config.task_ratio
    ckpt = _fit(sources, params, config, backbone, tokenizer, ratio, report, "finetune", enc)
    return ckpt, report


@torch.no_grad()
def validation_loss(examples: Sequence[AlignmentExample], backbone, params, batch_size: int = 64) -> float:
    total = 0.0
    for i in range(0, len(examples), batch_size):
        chunk = examples[i:i + batch_size]
        total += float(batch_loss(chunk, backbone, params)) * len(chunk)
    return total / max(1, len(examples))


# -- backbone language pretraining ------------------------------------------


def pretrain_backbone(backbone: TinyBackbone, examples: Sequence[AlignmentExample], epochs: int,
                      lr: float = 3e-3, batch_size: int = 32, seed: int = 0,
                      weight_decay: float = 0.01) -> list[float]:
    """Give a fresh backbone language competence, then freeze it.

    Used to turn the randomly initialized tiny transformer into a stand-in for a
    pretrained LM: it is trained on text-only prompts whose feature block is
    filled with word tokens (``slot_tokens``).  All base weights train here;
    afterwards they are frozen for every alignment run.
    """
    torch.set_num_threads(1)
    for p in backbone.parameters():
        p.requires_grad_(True)
    opt = torch.optim.AdamW(backbone.parameters(), lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    steps_per_epoch = math.ceil(len(examples) / batch_size)
    total = steps_per_epoch * epochs
    losses = []
    step = 0
    try:
        for _ in range(epochs):
            order = rng.permutation(len(examples))
            epoch_loss = 0.0
            for s in range(steps_per_epoch):
                for g in opt.param_groups:
                    g["lr"] = lr_at(step, total, steps_per_epoch, lr)
                chunk = [examples[i] for i in order[s * batch_size:(s + 1) * batch_size]]
                opt.zero_grad(set_to_none=True)
                loss = batch_loss(chunk, backbone, None)
                loss.backward()
                opt.step()
                epoch_loss += float(loss.detach()) * len(chunk)
                step += 1
            losses.append(epoch_loss / len(examples))
    finally:
        backbone.freeze()
    return losses
