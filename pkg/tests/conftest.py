import time
from dataclasses import dataclass, field

import pytest

from topa.aligner import Checkpoint, train
from topa.backbone import TinyBackbone
from topa.config import RunConfig
from topa.encoders import EncoderPair
from topa.memory import SupportMemory, build_memory
from topa.synthetic import benchmark_records, eval_items, language_backbone, make_corpus, make_world


@dataclass
class Reference:
    """The reference synthetic run shared by the heavier tests."""

    config: RunConfig
    pair: EncoderPair
    backbone: TinyBackbone
    corpus: list
    checkpoint: Checkpoint
    report: list
    memory: SupportMemory
    bench: dict
    feats: dict
    hash_before_train: str
    timings: dict = field(default_factory=dict)

    def items(self, kind: str):
        return eval_items(self.bench[kind], self.feats)


@pytest.fixture(scope="session")
def reference() -> Reference:
    cfg = RunConfig()
    t0 = time.perf_counter()
    pair = make_world(cfg.world)
    b = cfg.backbone
    backbone, _ = language_backbone(cfg.world.n_concepts, b.language_corpus, b.language_epochs, cfg.seed,
                                    b.width, b.n_layers, b.n_heads, b.language_lr, b.dtype, cfg.generation.kinds)
    t1 = time.perf_counter()
    corpus = make_corpus(cfg.generation.count, cfg.seed, cfg.generation.kinds, cfg.world.n_concepts)
    before = backbone.base_hash()
    ckpt, report = train(corpus, cfg.trainer, backbone, pair)
    t2 = time.perf_counter()
    memory = build_memory((f.caption for t, _ in corpus for f in t.frames), pair, cfg.memory.max_size,
                          cfg.memory.temperature, cfg.seed)
    videos = make_corpus(cfg.encoder.benchmark_size, cfg.seed + 7, cfg.generation.kinds, cfg.world.n_concepts,
                         prefix="benchmark")
    bench, feats = benchmark_records(videos, pair)
    t3 = time.perf_counter()
    return Reference(cfg, pair, backbone, corpus, ckpt, report, memory, bench, feats, before,
                     {"language": t1 - t0, "align": t2 - t1, "prepare": t3 - t2})
