"""Frozen language models with LoRA deltas.

Any object satisfying :class:`LanguageModel` can back the adapter; the
built-in :class:`TinyLM` is a 2-layer post-norm causal transformer whose base
weights come from a fixed seed and never train.
"""

from __future__ import annotations

import copy
import math
import re
from typing import Protocol, Sequence, runtime_checkable

import torch
import torch.nn.functional as F
from torch import nn

TEMPLATE_WORDS = ("what", "can", "the", "object", "at", "be", "used", "for", "affordances")
PUNCTUATION = tuple("(),.?:-")
_TOKEN_RE = re.compile(r"[a-z]+(?:-[a-z]+)*|\d|[^\sa-z\d]")


@runtime_checkable
class LanguageModel(Protocol):
    hidden_size: int
    max_length: int

    def tokenize(self, text: str) -> list[int]: ...

    def embed(self, ids: torch.Tensor) -> torch.Tensor: ...

    def forward(self, embeds: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor: ...


class Tokenizer:
    """Lowercasing word/digit/punctuation tokenizer over a closed vocabulary."""

    PAD, UNK = "<pad>", "<unk>"

    def __init__(self, words: Sequence[str]):
        vocab = [self.PAD, self.UNK]
        for w in words:
            if w not in vocab:
                vocab.append(w)
        self.vocab = vocab
        self.index = {w: i for i, w in enumerate(vocab)}

    @classmethod
    def for_labels(cls, class_names, affordance_names) -> "Tokenizer":
        words = list(TEMPLATE_WORDS) + [str(d) for d in range(10)] + list(PUNCTUATION)
        for name in list(class_names) + list(affordance_names):
            words.extend(_TOKEN_RE.findall(name.lower()))
        return cls(words)

    def __len__(self) -> int:
        return len(self.vocab)

    def split(self, text: str) -> list[str]:
        return _TOKEN_RE.findall(text.lower())

    def __call__(self, text: str) -> list[int]:
        unk = self.index[self.UNK]
        return [self.index.get(t, unk) for t in self.split(text)]


class LoRALinear(nn.Module):
    """Frozen linear layer plus a trainable low-rank delta ``scaling * B @ A``."""

    def __init__(self, base: nn.Linear, rank: int, scaling: float, generator: torch.Generator | None = None):
        super().__init__()
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.rank = rank
        self.scaling = scaling
        a = torch.empty(rank, base.in_features)
        bound = 1 / math.sqrt(base.in_features)
        a.uniform_(-bound, bound, generator=generator)
        self.lora_A = nn.Parameter(a)
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank))

    def forward(self, x):
        return self.base(x) + self.scaling * F.linear(F.linear(x, self.lora_A), self.lora_B)

    def merged_weight(self) -> torch.Tensor:
        return self.base.weight + self.scaling * self.lora_B @ self.lora_A


class Block(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)
        self.ln1 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))
        self.ln2 = nn.LayerNorm(dim)

    def attention(self, x):
        n, t, d = x.shape
        h = self.heads

        def split(z):
            return z.view(n, t, h, d // h).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        causal = torch.ones(t, t, dtype=torch.bool).triu(1)
        scores = scores.masked_fill(causal, float("-inf"))
        out = scores.softmax(-1) @ v
        return self.o(out.transpose(1, 2).reshape(n, t, d))

    def forward(self, x):
        x = self.ln1(x + self.attention(x))
        return self.ln2(x + self.ff(x))


class TinyLM(nn.Module):
    """Seeded, frozen causal transformer with optional LoRA on chosen projections."""

    def __init__(self, tokenizer: Tokenizer, dim: int = 64, layers: int = 2, heads: int = 4, max_length: int = 64, seed: int = 1234):
        super().__init__()
        self.tokenizer = tokenizer
        self.hidden_size = dim
        self.max_length = max_length
        self.calls = 0
        gen = torch.Generator().manual_seed(seed)
        self.tok_emb = nn.Embedding(len(tokenizer), dim)
        self.pos_emb = nn.Embedding(max_length, dim)
        self.blocks = nn.ModuleList(Block(dim, heads) for _ in range(layers))
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                elif p.ndim == 1:
                    p.fill_(1.0)
                else:
                    p.normal_(0.0, 1.0 if "emb" in name else p.shape[1] ** -0.5, generator=gen)
        for p in self.parameters():
            p.requires_grad_(False)
        self.lora_rank = 0

    def add_lora(self, rank: int, scaling: float, targets=("q", "v"), seed: int = 0) -> "TinyLM":
        gen = torch.Generator().manual_seed(seed)
        for block in self.blocks:
            for name in targets:
                layer = getattr(block, name)
                if isinstance(layer, LoRALinear):
                    raise ValueError(f"projection {name!r} already carries LoRA")
                setattr(block, name, LoRALinear(layer, rank, scaling, gen))
        self.lora_rank = rank
        return self

    def lora_parameters(self) -> list[nn.Parameter]:
        return [p for n, p in self.named_parameters() if "lora_" in n]

    def base_state(self) -> dict[str, torch.Tensor]:
        return {n: p for n, p in self.state_dict().items() if "lora_" not in n}

    def tokenize(self, text: str) -> list[int]:
        return self.tokenizer(text)

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        return self.tok_emb(ids)

    def forward(self, embeds: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        """Hidden states for N x T x D input embeddings (right padding allowed)."""
        self.calls += 1
        t = embeds.shape[1]
        if t > self.max_length:
            raise ValueError(f"sequence length {t} exceeds max_length {self.max_length}")
        x = embeds + self.pos_emb.weight[:t]
        for block in self.blocks:
            x = block(x)
        return x


def merge_lora(lm: TinyLM, rank: int | None = None) -> TinyLM:
    """Copy of ``lm`` with every LoRA delta folded into its base weight."""
    merged = copy.deepcopy(lm)
    for block in merged.blocks:
        for name in ("q", "k", "v", "o"):
            layer = getattr(block, name)
            if not isinstance(layer, LoRALinear):
                continue
            if rank is not None and layer.rank != rank:
                raise ValueError(f"LoRA rank mismatch: layer has {layer.rank}, expected {rank}")
            base = nn.Linear(layer.base.in_features, layer.base.out_features)
            with torch.no_grad():
                base.weight.copy_(layer.merged_weight())
                base.bias.copy_(layer.base.bias)
            base.requires_grad_(False)
            setattr(block, name, base)
    merged.lora_rank = 0
    return merged
