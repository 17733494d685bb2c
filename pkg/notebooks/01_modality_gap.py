# %% [markdown]
# # The modality gap and the support memory
#
# Text and image embeddings of the same concept do not coincide.  This script
# measures the gap in the synthetic encoder pair, then shows how a softmax
# mixture over stored text embeddings pulls image features back into the
# text region.

# %%
import numpy as np

from topa.memory import build_memory, project_vectors
from topa.synthetic import WorldConfig, image_features, make_corpus, make_world

pair = make_world(WorldConfig())
corpus = make_corpus(300, seed=0, kinds=("content",))
tideo, _ = corpus[0]

# %% [markdown]
# ## Measuring the gap
#
# Cosine between the text and image embedding of the same frame.

# %%
text = np.stack([pair.encode_text(f.caption) for f in tideo.frames])
image = image_features(tideo, pair).vectors
print("same-frame cosine:", np.round(np.sum(text * image, axis=1), 3))

# %% [markdown]
# ## Projecting through the memory
#
# The memory holds frame-caption embeddings from the corpus.  Low temperature
# makes the mixture close to nearest-neighbour retrieval.

# %%
memory = build_memory((f.caption for t, _ in corpus for f in t.frames), pair, 10_000, 0.01, seed=0)
print("memory size:", memory.size)

for tau in (1.0, 0.1, 0.01):
    memory = build_memory((f.caption for t, _ in corpus for f in t.frames), pair, 10_000, tau, seed=0)
    projected = project_vectors(image, memory)
    cos = np.sum(text * projected, axis=1) / np.linalg.norm(projected, axis=1)
    print(f"tau={tau:<5} mean cosine to text after projection: {cos.mean():.3f}")
