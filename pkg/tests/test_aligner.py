import math

import numpy as np
import pytest
import torch

from topa.aligner import (
    AlignmentExample,
    Checkpoint,
    TrainerConfig,
    assemble,
    batch_loss,
    finetune,
    lr_at,
    make_example,
    render_example,
    sample_tasks,
    subset,
    train,
    validation_loss,
)
from topa.backbone import BackboneConfig, TinyBackbone, make_trainable
from topa.data import QAItem, TideoAnnotation
from topa.encoders import encode_tideo, resample
from topa.errors import DivergenceDetected, MissingAnnotationField
from topa.synthetic import WorldConfig, image_features, make_corpus, make_tokenizer, make_world


class StubBackbone:
    """Returns fixed logits at the target-predicting positions, zeros elsewhere."""

    def __init__(self, target_logits, vocab: int, n_ctx: int):
        self.target_logits = torch.as_tensor(target_logits, dtype=torch.float64)
        self.vocab = vocab
        self.n_ctx = n_ctx

    def embed(self, ids):
        return torch.zeros(len(ids), 1, dtype=torch.float64)

    def __call__(self, embeds, params=None):
        logits = torch.zeros(embeds.shape[0], embeds.shape[1], self.vocab, dtype=torch.float64)
        k = self.target_logits.shape[0]
        logits[:, self.n_ctx - 1:self.n_ctx - 1 + k] = self.target_logits
        return logits


def bare_example(targets, n_pre=3, n_post=2):
    return AlignmentExample(None, list(range(n_pre)), list(range(n_post)), list(targets), "open_qa")


# -- loss oracles --------------------------------------------------------------------

def test_certain_backbone_has_zero_loss():
    targets = [1, 3, 0]
    stub = StubBackbone(1e4 * torch.eye(4)[targets], 4, 5)
    assert float(batch_loss([bare_example(targets)], stub, None)) == 0.0


def test_uniform_backbone_loss_is_log_vocab():
    stub = StubBackbone(torch.zeros(4, 16), 16, 5)
    assert float(batch_loss([bare_example([1, 2, 3, 4])], stub, None)) == pytest.approx(math.log(16), abs=1e-12)
    assert math.log(16) == pytest.approx(2.77259, abs=1e-5)


def test_two_token_toy():
    stub = StubBackbone([[2.0, 0.0], [0.0, 2.0]], 2, 5)
    expected = -math.log(math.exp(2) / (math.exp(2) + 1))
    loss = float(batch_loss([bare_example([0, 1])], stub, None))
    assert loss == pytest.approx(expected, abs=1e-12)
    assert loss == pytest.approx(0.12693, abs=1e-5)


def test_prefix_positions_carry_no_loss():
    tok = make_tokenizer(10)
    bb = TinyBackbone(BackboneConfig(len(tok), width=16, n_layers=1, n_heads=2, dtype="float64"), tok)
    ex = make_example("open_qa", tok, None, question="What object appears in the video", answer="apple",
                      slot_tokens=[tok.ids["apple"]] * 3)
    _, labels = assemble([ex], bb, None)
    n_ctx = len(ex.pre_tokens) + 3 + len(ex.post_tokens)
    assert torch.all(labels[0, :n_ctx - 1] == -100)
    k = len(ex.target_tokens)
    assert labels[0, n_ctx - 1:n_ctx - 1 + k].tolist() == ex.target_tokens
    assert torch.all(labels[0, n_ctx - 1 + k:] == -100)
    # changing prefix tokens changes the context, never the set of scored positions
    other = make_example("open_qa", tok, None, question="What object appears at the end of the video",
                         answer="apple", slot_tokens=[tok.ids["apple"]] * 3)
    _, labels2 = assemble([other], bb, None)
    assert (labels2 >= 0).sum() == (labels >= 0).sum() == len(ex.target_tokens)


# -- rendering ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny():
    tok = make_tokenizer(10)
    pair = make_world(WorldConfig(n_concepts=10, dimension=16, gap_magnitude=0.5))
    bb = TinyBackbone(BackboneConfig(len(tok), width=16, n_layers=1, n_heads=2), tok)
    corpus = make_corpus(40, 1, ("content", "temporal"), n_concepts=10)
    return tok, pair, bb, corpus


def test_render_targets(tiny):
    tok, pair, _, corpus = tiny
    t, a = corpus[0]
    qa = QAItem("What is shown", ("a", "b", "c"), 1)
    ann = TideoAnnotation(t.id, "The video shows the apple.", (qa,))
    mc = render_example(t, ann, "multi_choice", pair, 10, tok)
    assert mc.target_text == "The correct choice is (B)."
    assert len(mc.features) == 10 and mc.features.modality == "text"
    assert render_example(t, ann, "summarization", pair, 10, tok).target_text == "The video shows the apple."
    empty = TideoAnnotation(t.id, "x", (QAItem(" ", ("a", "b"), 0),))
    with pytest.raises(MissingAnnotationField):
        render_example(t, empty, "open_qa", pair, 10, tok)


# -- schedule and sampling ---------------------------------------------------------------

def test_task_mix_proportions():
    tasks = sample_tasks(10_000, (1, 1, 2), 0)
    for task, p in (("summarization", 0.25), ("open_qa", 0.25), ("multi_choice", 0.5)):
        assert abs(tasks.count(task) / 10_000 - p) <= 0.02


def test_learning_rate_rule():
    cfg = TrainerConfig(base_lr=5e-3, batch_size=8, grad_accum=4)
    assert cfg.effective_batch == 32
    assert cfg.learning_rate == pytest.approx(5e-3 * 32 / 256)
    with pytest.raises(ValueError):
        TrainerConfig(task_ratio=(1, 0, 2))


def test_schedule_shape():
    lrs = [lr_at(s, 100, 10, 1.0) for s in range(100)]
    assert lrs[9] == 1.0 and lrs[0] == pytest.approx(0.1)
    assert lrs[10] == 1.0
    assert all(b <= a for a, b in zip(lrs[10:], lrs[11:]))
    assert lr_at(55, 100, 10, 1.0) == pytest.approx(0.5)


# -- training ------------------------------------------------------------------------------

def test_zero_epochs_is_initialization(tiny):
    tok, pair, bb, corpus = tiny
    cfg = TrainerConfig(epochs=0, adapter_length=4)
    ckpt, report = train(corpus, cfg, bb, pair)
    init = make_trainable(bb, pair.dimension, 4, seed=cfg.seed)
    assert report == [] and ckpt.step == 0
    for name, arr in init.named_arrays().items():
        assert np.array_equal(ckpt.arrays[name], arr)


def test_training_is_deterministic_and_frozen(tiny, tmp_path):
    tok, pair, bb, corpus = tiny
    cfg = TrainerConfig(epochs=2, batch_size=8, base_lr=0.5, adapter_length=4)
    before = bb.base_hash()
    a, _ = train(corpus, cfg, bb, pair)
    b, _ = train(corpus, cfg, bb, pair)
    a.save(tmp_path / "a.topa")
    b.save(tmp_path / "b.topa")
    assert (tmp_path / "a.topa").read_bytes() == (tmp_path / "b.topa").read_bytes()
    assert bb.base_hash() == before


def test_checkpoint_round_trip_is_byte_identical(tiny, tmp_path):
    tok, pair, bb, corpus = tiny
    ckpt, _ = train(corpus[:8], TrainerConfig(epochs=1, batch_size=4, adapter_length=4), bb, pair)
    ckpt.save(tmp_path / "1.topa")
    back = Checkpoint.load(tmp_path / "1.topa")
    back.save(tmp_path / "2.topa")
    assert (tmp_path / "1.topa").read_bytes() == (tmp_path / "2.topa").read_bytes()
    assert back.config_fingerprint == ckpt.config_fingerprint
    params = back.to_params(bb)
    for name, arr in params.named_arrays().items():
        assert np.array_equal(arr, ckpt.arrays[name])


def test_loss_decreases_over_first_epochs(tiny):
    tok, pair, bb, corpus = tiny
    cfg = TrainerConfig(epochs=3, batch_size=8, base_lr=32.0, adapter_length=4, warmup_epochs=0)
    _, report = train(corpus, cfg, bb, pair)
    epoch_loss = [np.mean([r["loss"] for r in report if r["epoch"] == e]) for e in range(3)]
    assert epoch_loss[0] > epoch_loss[1] > epoch_loss[2]
    assert {r["task"] for r in report} == {"summarization", "open_qa", "multi_choice"}
    assert set(report[0]) == {"stage", "epoch", "step", "task", "loss", "lr"}


def test_divergence_reports_last_good(tiny):
    tok, pair, bb, corpus = tiny
    cfg = TrainerConfig(epochs=1, batch_size=8, adapter_length=4)
    ckpt, _ = train(corpus[:8], TrainerConfig(epochs=0, adapter_length=4), bb, pair)
    ckpt.arrays["proj_weight"] = np.full_like(ckpt.arrays["proj_weight"], np.nan)
    with pytest.raises(DivergenceDetected) as info:
        train(corpus[:8], cfg, bb, pair, init=ckpt)
    assert info.value.step == 0


# -- finetuning -----------------------------------------------------------------------------

def test_subset_rules():
    assert subset(50, 1.0, 0) == list(range(50))
    a = subset(50, 0.1, 3)
    assert len(a) == 5 and a == subset(50, 0.1, 3)
    with pytest.raises(ValueError):
        subset(50, 0.0, 0)


def test_finetune_rejects_text_features(tiny):
    tok, pair, bb, corpus = tiny
    data = [(encode_tideo(t, pair), a) for t, a in corpus[:4]]
    with pytest.raises(ValueError):
        finetune(data, None, TrainerConfig(epochs=1, adapter_length=4), bb)


def test_pre_aligned_finetune_beats_random_init(reference):
    pair, bb = reference.pair, reference.backbone
    videos = make_corpus(96, 21, ("content", "temporal"), prefix="ft")
    held = make_corpus(64, 22, ("content", "temporal"), prefix="val")
    data = [(image_features(t, pair), a) for t, a in videos]
    cfg = TrainerConfig(epochs=1, batch_size=16, base_lr=0.5, adapter_length=10)
    from_pre, _ = finetune(data, reference.checkpoint, cfg, bb)
    from_scratch, _ = finetune(data, None, cfg, bb, feature_dim=pair.dimension)
    rng = np.random.default_rng(0)
    val = []
    for (t, a), task in zip(held, sample_tasks(len(held), (1, 1, 2), rng)):
        feats = resample(image_features(t, pair), 10)
        val.append(render_example(None, a, task, None, 10, bb.tokenizer, features=feats))
    pre_loss = validation_loss(val, bb, from_pre.to_params(bb))
    scratch_loss = validation_loss(val, bb, from_scratch.to_params(bb))
    assert pre_loss < scratch_loss
