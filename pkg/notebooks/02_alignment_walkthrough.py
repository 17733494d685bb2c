# %% [markdown]
# # A small pre-alignment run, end to end
#
# Train the projection and adapter prompts on textual videos only, then answer
# multi-choice questions about real (synthetic image) videos.  The sizes here
# are cut down so the script runs in a couple of minutes; the test suite uses
# the full reference configuration.

# %%
import time

from topa.aligner import TrainerConfig, train
from topa.evaluation import Model, run_benchmark
from topa.memory import build_memory
from topa.synthetic import WorldConfig, benchmark_records, eval_items, language_backbone, make_corpus, make_world

t0 = time.perf_counter()
pair = make_world(WorldConfig())
backbone, lm_losses = language_backbone(50, 3000, 4, seed=1_000_003, width=64, n_layers=2)
print(f"language pretraining: final loss {lm_losses[-1]:.3f}")

# %% [markdown]
# ## Text-only alignment
#
# The backbone is frozen; only the projection and the gated prompts move.

# %%
corpus = make_corpus(1000, seed=0, kinds=("content", "temporal"))
before = backbone.base_hash()
ckpt, report = train(corpus, TrainerConfig(epochs=5, batch_size=32, base_lr=0.5, adapter_length=10),
                     backbone, pair)
print("steps:", ckpt.step, "last loss:", round(report[-1]["loss"], 3))
print("backbone untouched:", backbone.base_hash() == before)

# %% [markdown]
# ## Zero-shot evaluation
#
# Image features go through the support memory before reaching the model.

# %%
memory = build_memory((f.caption for t, _ in corpus for f in t.frames), pair, 10_000, 0.01, seed=0)
bench, feats = benchmark_records(make_corpus(200, 7, ("content", "temporal"), prefix="benchmark"), pair)
model = Model.from_checkpoint(ckpt, backbone)
items = eval_items(bench["content"], feats)
for projection in (True, False):
    r = run_benchmark(items, model, "logits", projection, memory)
    print(f"projection={projection}: accuracy {r.accuracy:.3f}")
print("blind:", run_benchmark(items, model, "logits", True, memory, blind=True).accuracy)
print(f"total {time.perf_counter() - t0:.0f}s")
