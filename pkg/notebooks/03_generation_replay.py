# %% [markdown]
# # Corpus generation without a network
#
# Generation jobs are planned from seed sources, sent to a client, parsed and
# validated.  A fixture client replays recorded responses by prompt hash, so a
# shard can be rebuilt byte for byte.

# %%
import json
import tempfile
from pathlib import Path

from topa.data import corpus_stats, read_shard
from topa.generation import FixtureClient, format_generation, default_condition_weights, plan_jobs, \
    prompt_sha256, run_generation
from topa.synthetic import make_corpus

sources = {
    "video_title": [f"how to repot plant {i}" for i in range(40)],
    "video_caption": [f"a person walks a dog in park {i}" for i in range(40)],
    "ego_scenario": [f"cooking breakfast, step {i}" for i in range(40)],
    "object_lexicon": [f"object {i}: something on a desk" for i in range(40)],
}
weights = default_condition_weights()
print(json.dumps(weights, indent=1))

# %% [markdown]
# ## Recording responses
#
# Here the "recordings" are rendered from synthetic videos; one is deliberately
# broken so the validator has something to reject.

# %%
jobs = plan_jobs(sources, weights, 12, rng_seed=0)
print(jobs[0].prompt_text[:300])
records = []
for job, (t, a) in zip(jobs, make_corpus(12, 1, ("content",), prefix="fx")):
    text = "I cannot help with that." if job.index == 5 else format_generation(t, a)
    records.append({"prompt_sha256": prompt_sha256(job.prompt_text), "response_text": text})

# %%
out = Path(tempfile.mkdtemp())
shard, report = run_generation(sources, weights, 12, FixtureClient(records), 0, out / "shard", max_retries=0)
print("accepted", report.accepted, "rejected", report.rejected)
print(json.dumps(corpus_stats(read_shard(shard)).to_dict(), indent=1))
