"""A tiny causal transformer that plays the role of the frozen language model.

The backbone consumes embedding sequences, so feature vectors (after the
trainable projection) can be spliced between token embeddings.  Trainable
state lives outside the backbone in :class:`TrainableParams`: the linear
projection from feature space to model width, and per-layer adaption prompts
with zero-initialized gates (prompt attention is a separate softmax scaled by
the gate, so an untrained adapter leaves the backbone's output unchanged).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import container
from .prompts import PAD, Tokenizer

DTYPES = {"float32": torch.float32, "float64": torch.float64}


def torch_dtype(name: str) -> torch.dtype:
    if name not in DTYPES:
        raise ValueError(f"unsupported dtype {name!r}")
    return DTYPES[name]


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int
    width: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_len: int = 256
    seed: int = 0
    dtype: str = "float32"


class Block(nn.Module):
    def __init__(self, width: int, n_heads: int, dtype: torch.dtype):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(width, dtype=dtype)
        self.qkv = nn.Linear(width, 3 * width, dtype=dtype)
        self.out = nn.Linear(width, width, dtype=dtype)
        self.ln2 = nn.LayerNorm(width, dtype=dtype)
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width, dtype=dtype), nn.GELU(),
                                 nn.Linear(4 * width, width, dtype=dtype))

    def _heads(self, x):
        b, n, w = x.shape
        return x.view(b, n, self.n_heads, w // self.n_heads).transpose(1, 2)

    def forward(self, x, prompt=None, gate=None):
        b, n, w = x.shape
        h = self.ln1(x)
        q, k, v = self.qkv(h).split(w, dim=-1)
        q, k, v = self._heads(q), self._heads(k), self._heads(v)
        scale = 1.0 / math.sqrt(w // self.n_heads)
        scores = (q @ k.transpose(-1, -2)) * scale
        causal = torch.ones(n, n, dtype=torch.bool, device=x.device).triu(1)
        scores = scores.masked_fill(causal, float("-inf"))
        att = scores.softmax(-1) @ v
        if prompt is not None:
            hp = self.ln1(prompt).unsqueeze(0).expand(b, -1, -1)
            _, kp, vp = self.qkv(hp).split(w, dim=-1)
            kp, vp = self._heads(kp), self._heads(vp)
            sp = ((q @ kp.transpose(-1, -2)) * scale).softmax(-1)
            att = att + gate.view(1, -1, 1, 1) * (sp @ vp)
        att = att.transpose(1, 2).reshape(b, n, w)
        x = x + self.out(att)
        return x + self.mlp(self.ln2(x))


class TinyBackbone(nn.Module):
    """Frozen-by-contract language model over a closed word vocabulary."""

    def __init__(self, config: BackboneConfig, tokenizer: Tokenizer | None = None):
        super().__init__()
        self.config = config
        self.tokenizer = tokenizer
        gen = torch.Generator().manual_seed(config.seed)
        dtype = torch_dtype(config.dtype)
        self.tok = nn.Embedding(config.vocab_size, config.width, dtype=dtype)
        self.pos = nn.Embedding(config.max_len, config.width, dtype=dtype)
        self.blocks = nn.ModuleList(
            Block(config.width, config.n_heads, dtype) for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(config.width, dtype=dtype)
        self.head = nn.Linear(config.width, config.vocab_size, bias=False, dtype=dtype)
        # deterministic init independent of the global torch RNG
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                elif "ln" in name:
                    p.fill_(1.0)
                else:
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=dtype) * 0.02 * (
                        5.0 if name.startswith(("tok", "pos")) else 1.0))
        self.freeze()

    @property
    def width(self) -> int:
        return self.config.width

    @property
    def dtype(self) -> torch.dtype:
        return torch_dtype(self.config.dtype)

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        return self.tok(ids)

    def forward(self, embeds: torch.Tensor, adapter: "TrainableParams | None" = None) -> torch.Tensor:
        """Next-token logits for every position of an embedding batch (B, L, width)."""
        n = embeds.shape[1]
        if n > self.config.max_len:
            raise ValueError(f"sequence length {n} exceeds max_len {self.config.max_len}")
        x = embeds + self.pos.weight[:n]
        first_adapted = len(self.blocks) - (adapter.n_adapted if adapter is not None else 0)
        for i, block in enumerate(self.blocks):
            if adapter is not None and i >= first_adapted:
                j = i - first_adapted
                x = block(x, adapter.prompts[j], adapter.gates[j])
            else:
                x = block(x)
        return self.head(self.ln_f(x))

    # -- frozen contract ---------------------------------------------------

    def weights(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.state_dict().items()}

    def base_hash(self) -> str:
        h = hashlib.sha256()
        for name, arr in sorted(self.weights().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def descriptor(self) -> str:
        return f"tiny-transformer:{self.base_hash()[:16]}"

    def save(self, path) -> None:
        meta = {"config": asdict(self.config),
                "vocab": self.tokenizer.vocab if self.tokenizer else None}
        container.save(path, meta, self.weights())

    @classmethod
    def load(cls, path) -> "TinyBackbone":
        meta, arrays = container.load(path)
        tok = Tokenizer(meta["vocab"][4:]) if meta.get("vocab") else None
        model = cls(BackboneConfig(**meta["config"]), tok)
        model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()})
        model.freeze()
        return model


class TrainableParams(nn.Module):
    """Projection P (feature dim -> width) plus adaption prompts and per-head gates."""

    def __init__(self, feature_dim: int, width: int, n_layers: int, n_heads: int,
                 adapter_length: int = 50, adapter_layers: int | None = None, seed: int = 0,
                 dtype: str = "float32"):
        super().__init__()
        self.dtype = torch_dtype(dtype)
        self.feature_dim = feature_dim
        adapted = n_layers if adapter_layers is None else min(adapter_layers, n_layers)
        self.n_adapted = adapted if adapter_length > 0 else 0
        gen = torch.Generator().manual_seed(seed)
        bound = 1.0 / math.sqrt(feature_dim)
        self.proj_weight = nn.Parameter(
            (torch.rand(width, feature_dim, generator=gen, dtype=self.dtype) * 2 - 1) * bound)
        self.proj_bias = nn.Parameter(torch.zeros(width, dtype=self.dtype))
        self.prompts = nn.ParameterList(
            nn.Parameter(torch.randn(adapter_length, width, generator=gen, dtype=self.dtype) * 0.02)
            for _ in range(self.n_adapted))
        self.gates = nn.ParameterList(
            nn.Parameter(torch.zeros(n_heads, dtype=self.dtype)) for _ in range(self.n_adapted))

    def project(self, features: torch.Tensor) -> torch.Tensor:
        return features @ self.proj_weight.T + self.proj_bias

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.state_dict().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.load_state_dict({k: torch.from_numpy(np.array(v)).to(self.dtype) for k, v in arrays.items()})


def make_trainable(backbone: TinyBackbone, feature_dim: int, adapter_length: int = 50,
                   adapter_layers: int | None = None, seed: int = 0) -> TrainableParams:
    return TrainableParams(feature_dim, backbone.width, backbone.config.n_layers,
                           backbone.config.n_heads, adapter_length, adapter_layers, seed,
                           backbone.config.dtype)


def pad_batch(seqs: list[torch.Tensor]) -> torch.Tensor:
    n = max(s.shape[0] for s in seqs)
    return torch.stack([F.pad(s, (0, n - s.shape[0]), value=PAD) for s in seqs])
