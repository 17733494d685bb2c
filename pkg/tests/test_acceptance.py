"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines are printed
even when pytest captures output.
"""

import time

import mpmath
import numpy as np
import pytest
import torch

from topa.aligner import Checkpoint, TrainerConfig, batch_loss, finetune, lm_loss, make_example, sample_tasks, \
    train
from topa.backbone import BackboneConfig, TinyBackbone, make_trainable
from topa.data import read_shard
from topa.encoders import SequenceRepresentation
from topa.evaluation import Model, run_benchmark
from topa.generation import FixtureClient, format_generation, default_condition_weights, plan_jobs, \
    prompt_sha256, run_generation
from topa.memory import SupportMemory, project, softmax_weights
from topa.prompts import Tokenizer, full_prompt
from topa.synthetic import image_features, make_corpus

from test_prompts import MC_EXPECTED, QA_EXPECTED, SUM_EXPECTED


@pytest.fixture
def verdict(capsys):
    def report(number: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\ncriterion {number:2d}: {'PASS' if ok else 'FAIL'} - {detail}")
        assert ok, detail
    return report


# 1 -------------------------------------------------------------------------------

def naive_mixture(query, anchors, tau):
    with mpmath.workdps(40):
        q = [mpmath.mpf(float(x)) for x in query]
        norm = mpmath.sqrt(sum(x * x for x in q))
        q = [x / norm for x in q]
        rows = [[mpmath.mpf(float(x)) for x in m] for m in anchors]
        num = [mpmath.exp(mpmath.fsum(a * b for a, b in zip(m, q)) / mpmath.mpf(tau)) for m in rows]
        z = mpmath.fsum(num)
        return np.array([float(mpmath.fsum(n * m[j] for n, m in zip(num, rows)) / z) for j in range(len(q))])


def test_c01_projection_oracle(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_rel = worst_sum = worst_hull = 0.0
    for k in range(1000):
        n, d = int(rng.integers(1, 65)), int(rng.integers(1, 33))
        tau = (1e-3, 0.01, 0.1, 1.0)[k % 4]
        a = rng.standard_normal((n, d))
        memory = SupportMemory(a / np.linalg.norm(a, axis=1, keepdims=True), tau)
        q = rng.standard_normal(d)
        out = project(q, memory).vector
        ref = naive_mixture(q, memory.anchors, tau)
        # relative to the output's magnitude; single tiny components have no meaningful relative error
        worst_rel = max(worst_rel, float(np.max(np.abs(out - ref)) / np.max(np.abs(ref))))
        worst_sum = max(worst_sum, abs(float(softmax_weights(q, memory).sum()) - 1))
        ell = rng.standard_normal(d)
        vals = memory.anchors @ ell
        worst_hull = max(worst_hull, vals.min() - out @ ell, out @ ell - vals.max())
    elapsed = time.perf_counter() - t0
    ok = worst_rel < 1e-6 and worst_sum < 1e-9 and worst_hull < 1e-7 and elapsed < 30
    verdict(1, ok, f"max rel err {worst_rel:.2e}, max |sum w - 1| {worst_sum:.1e}, "
                   f"hull violation {max(worst_hull, 0):.1e}, {elapsed:.1f}s")


# 2 -------------------------------------------------------------------------------

def test_c02_gradient_check(verdict):
    t0 = time.perf_counter()
    tok = Tokenizer.build(["the dog holds a red cup", "what is shown"])
    assert len(tok) <= 64
    backbone = TinyBackbone(BackboneConfig(len(tok), width=32, n_layers=2, n_heads=4, seed=3, dtype="float64"),
                            tok)
    params = make_trainable(backbone, 8, adapter_length=4, seed=5)
    gen = torch.Generator().manual_seed(11)
    with torch.no_grad():
        for g in params.gates:
            g.copy_(torch.randn(g.shape, generator=gen, dtype=torch.float64))
        params.proj_weight.mul_(4.0)
    rng = np.random.default_rng(7)
    feats = SequenceRepresentation(rng.standard_normal((5, 8)), "text", False)
    ex = make_example("open_qa", tok, feats, question="what is shown", answer="the dog holds a red cup")
    _, grads = lm_loss(ex, backbone, params)
    w = params.proj_weight
    coords = [(int(i), int(j)) for i, j in zip(rng.integers(0, w.shape[0], 120), rng.integers(0, w.shape[1], 120))]
    h = 1e-4
    worst = 0.0
    for i, j in coords:
        with torch.no_grad():
            orig = float(w[i, j])
            w[i, j] = orig + h
            up = float(batch_loss([ex], backbone, params))
            w[i, j] = orig - h
            down = float(batch_loss([ex], backbone, params))
            w[i, j] = orig
        numeric = (up - down) / (2 * h)
        analytic = float(grads["proj_weight"][i, j])
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8))
    elapsed = time.perf_counter() - t0
    verdict(2, worst < 1e-4 and elapsed < 120,
            f"{len(coords)} coordinates of P, max relative error {worst:.2e}, {elapsed:.1f}s")


# 3, 4, 5 --------------------------------------------------------------------------

def accuracies(reference, kind, **settings):
    model = Model.from_checkpoint(reference.checkpoint, reference.backbone)
    return run_benchmark(reference.items(kind), model, "logits", memory=reference.memory, **settings).accuracy


def test_c03_zero_shot_transfer(reference, verdict):
    t0 = time.perf_counter()
    projected = accuracies(reference, "content", projection=True)
    raw = accuracies(reference, "content", projection=False)
    elapsed = sum(reference.timings.values()) + time.perf_counter() - t0
    n = len(reference.bench["content"])
    ok = projected >= 0.70 and projected >= raw + 0.10 and elapsed < 15 * 60
    verdict(3, ok, f"{n} items, 4 options: projected {projected:.3f}, unprojected {raw:.3f}, "
                   f"end-to-end {elapsed:.0f}s")


def test_c04_frame_ablation(reference, verdict):
    ten = accuracies(reference, "temporal", projection=True, frames=10)
    one = accuracies(reference, "temporal", projection=True, frames=1)
    verdict(4, ten >= one + 0.10, f"temporal task: frames=10 {ten:.3f}, frames=1 {one:.3f}")


def test_c05_blind_floor(reference, verdict):
    sighted = accuracies(reference, "content", projection=True)
    blind = accuracies(reference, "content", projection=True, blind=True)
    ok = sighted >= 0.70 and abs(blind - 0.25) <= 0.05
    verdict(5, ok, f"content task: sighted {sighted:.3f}, blind {blind:.3f} (chance 0.25)")


# 6 -------------------------------------------------------------------------------

def test_c06_task_mix(verdict):
    tasks = sample_tasks(10_000, (1, 1, 2), np.random.default_rng(0))
    props = [tasks.count(t) / 10_000 for t in ("summarization", "open_qa", "multi_choice")]
    ok = all(abs(p - e) <= 0.02 for p, e in zip(props, (0.25, 0.25, 0.5)))
    verdict(6, ok, "proportions " + ", ".join(f"{p:.4f}" for p in props))


# 7 -------------------------------------------------------------------------------

def test_c07_template_bytes(verdict):
    q = "What is the man holding?"
    got = [
        full_prompt("multi_choice", question=q, options=["a cup", "a phone", "a book", "a key", "a pen"],
                    answer_index=1),
        full_prompt("open_qa", question=q, answer="a phone"),
        full_prompt("summarization", description="A man picks up a phone"),
    ]
    same = [g.encode() == e.encode() for g, e in zip(got, (MC_EXPECTED, QA_EXPECTED, SUM_EXPECTED))]
    verdict(7, all(same), f"byte-exact (multi_choice, open_qa, summarization): {same}")


# 8 -------------------------------------------------------------------------------

SOURCES = {
    "video_title": [f"how to do task {i}" for i in range(500)],
    "video_caption": [f"a clip of scene {i}" for i in range(500)],
    "ego_scenario": [f"doing chore {i}" for i in range(500)],
    "object_lexicon": [f"object {i}: a thing" for i in range(500)],
}


def test_c08_fixture_replay(tmp_path, verdict):
    t0 = time.perf_counter()
    weights = default_condition_weights()
    jobs = plan_jobs(SOURCES, weights, 24, rng_seed=3)
    assert len({j.prompt_text for j in jobs}) == 24
    corpus = make_corpus(24, 99, ("content",), prefix="fx")
    malformed = {4, 11, 19}
    records = []
    for job, (t, a) in zip(jobs, corpus):
        text = "no frames here, sorry" if job.index in malformed else format_generation(t, a)
        records.append({"prompt_sha256": prompt_sha256(job.prompt_text), "response_text": text})
    shards = []
    for run in range(2):
        out, rep = run_generation(SOURCES, weights, 24, FixtureClient(records), 3, tmp_path / f"r{run}")
        shards.append(b"".join((out / name).read_bytes() for name in ("tideos.jsonl", "annotations.jsonl")))
    revalidated = read_shard(tmp_path / "r0")
    elapsed = time.perf_counter() - t0
    ok = (shards[0] == shards[1] and rep.rejected == 3 and rep.accepted == 21
          and len(revalidated) == 21 and elapsed < 5)
    verdict(8, ok, f"24 responses ({len(malformed)} malformed): accepted {rep.accepted}, rejected {rep.rejected}, "
                   f"revalidated {len(revalidated)}/{rep.accepted}, identical shards {shards[0] == shards[1]}, "
                   f"{elapsed:.2f}s")


# 9 -------------------------------------------------------------------------------

def test_c09_determinism(reference, tmp_path, verdict):
    cfg = TrainerConfig(epochs=2, batch_size=16, base_lr=0.5, adapter_length=10, seed=4, deterministic=True)
    corpus = reference.corpus[:120]
    items = reference.items("content")[:60]
    blobs = []
    for run in range(2):
        ckpt, _ = train(corpus, cfg, reference.backbone, reference.pair)
        ckpt.save(tmp_path / f"ck{run}.topa")
        model = Model.from_checkpoint(Checkpoint.load(tmp_path / f"ck{run}.topa"), reference.backbone)
        result = run_benchmark(items, model, "logits", memory=reference.memory)
        path = result.write(tmp_path / f"eval{run}")
        blobs.append(((tmp_path / f"ck{run}.topa").read_bytes(), path.read_bytes(),
                      (tmp_path / f"eval{run}" / "eval.items.jsonl").read_bytes()))
    same = [a == b for a, b in zip(*blobs)]
    verdict(9, all(same), f"byte-identical (checkpoint, result JSON, per-item JSONL): {same}")


# 10 ------------------------------------------------------------------------------

def test_c10_frozen_contract(reference, verdict):
    after_train = reference.backbone.base_hash()
    videos = [(image_features(t, reference.pair), a) for t, a in make_corpus(64, 5, ("content",), prefix="ft")]
    cfg = TrainerConfig(epochs=1, batch_size=16, base_lr=0.5, adapter_length=10)
    finetune(videos, reference.checkpoint, cfg, reference.backbone)
    after_finetune = reference.backbone.base_hash()
    ok = reference.hash_before_train == after_train == after_finetune
    verdict(10, ok, f"backbone hash {reference.hash_before_train[:16]} before train, "
                    f"{after_train[:16]} after train, {after_finetune[:16]} after finetune")
