"""A small decoder-only language model that accepts soft tokens at its input.

The model is trained briefly on a synthetic corpus and then frozen: its
arrays become read-only and no longer request gradients, so gradients of
:func:`answer_nll` reach only the soft vectors spliced into the prompt.
"""
from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from . import layers
from . import numerics as nx
from .numerics import Tensor

log = logging.getLogger(__name__)

BOS, EOS, UNK, GRAPH_SLOT = 0, 1, 2, 3
RESERVED = ("<bos>", "<eos>", "<unk>", "<graph>")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
_NO_SPACE_BEFORE = set(",.:;?!)]")
_NO_SPACE_AFTER = set("([")


class LMError(ValueError):
    pass


class Tokenizer:
    """Word/punctuation tokenizer over a fixed vocabulary; unknown words map to UNK."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:len(RESERVED)]) != RESERVED:
            raise LMError(f"vocabulary must start with reserved tokens {RESERVED}")
        self.tokens = tokens
        self.ids = {t: i for i, t in enumerate(tokens)}
        if len(self.ids) != len(tokens):
            raise LMError("duplicate token in vocabulary")

    @classmethod
    def from_corpus(cls, texts: Iterable[str]) -> "Tokenizer":
        seen: dict[str, None] = dict.fromkeys(RESERVED)
        for text in texts:
            for tok in _TOKEN_RE.findall(text):
                seen.setdefault(tok, None)
        return cls(list(seen))

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        return [self.ids.get(tok, UNK) for tok in _TOKEN_RE.findall(text)]

    def decode(self, ids: Iterable[int]) -> str:
        out = ""
        prev = None
        for i in ids:
            tok = self.tokens[i]
            if tok in RESERVED:
                continue
            if out and tok not in _NO_SPACE_BEFORE and prev not in _NO_SPACE_AFTER:
                out += " "
            out += tok
            prev = tok
        return out

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Tokenizer":
        return cls(Path(path).read_text(encoding="utf-8").split("\n")[:-1])

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()[:16]


class LanguageModel(Protocol):
    """What the rest of the pipeline needs from a generation backend."""

    width: int
    context: int
    vocab_size: int

    def embed_tokens(self, ids: Sequence[int]) -> Tensor: ...

    def forward(self, embeddings: Tensor) -> Tensor: ...


@dataclass
class LMConfig:
    width: int = 64
    n_layers: int = 2
    n_heads: int = 2
    context: int = 256
    seed: int = 0


class FrozenLM:
    """Causal transformer: token + position embeddings, pre-norm blocks, output head."""

    def __init__(self, vocab_size: int, config: LMConfig | None = None):
        self.config = config or LMConfig()
        c = self.config
        self.vocab_size = vocab_size
        self.width = c.width
        self.context = c.context
        self.n_heads = c.n_heads
        rng = np.random.default_rng(c.seed)
        p: dict[str, Tensor] = {}
        p["tok_emb"] = Tensor(rng.normal(0.0, 1.0, (vocab_size, c.width)), name="tok_emb")
        p["pos_emb"] = Tensor(rng.normal(0.0, 0.1, (c.context, c.width)), name="pos_emb")
        for i in range(c.n_layers):
            layers.init_block(p, f"block{i}", rng, c.width, 4 * c.width)
        layers.init_norm(p, "ln_f", c.width)
        layers.init_linear(p, "head", rng, c.width, vocab_size)
        self.params = p
        self.frozen = False

    def trainable(self) -> list[Tensor]:
        if self.frozen:
            raise LMError("language model is frozen")
        for t in self.params.values():
            t.requires_grad = True
        return list(self.params.values())

    def freeze(self) -> "FrozenLM":
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None
            t.data.flags.writeable = False
        self.frozen = True
        return self

    def embed_tokens(self, ids: Sequence[int]) -> Tensor:
        return nx.take(self.params["tok_emb"], np.asarray(ids, dtype=np.int64))

    def forward(self, embeddings: Tensor) -> Tensor:
        """Logits ``(..., T, V)`` for an embedding sequence ``(..., T, width)``."""
        T, d = embeddings.shape[-2:]
        if d != self.width:
            raise LMError(f"embedding width {d} does not match model width {self.width}")
        if T > self.context:
            raise LMError(f"sequence length {T} exceeds the context window of {self.context}")
        x = embeddings + self.params["pos_emb"][:T]
        mask = layers.causal_mask(T)
        for i in range(self.config.n_layers):
            x = layers.block(x, self.params, f"block{i}", self.n_heads, mask)
        x = layers.norm(x, self.params, "ln_f")
        return layers.linear(x, self.params, "head")

    def save(self, path, tokenizer: Tokenizer | None = None) -> None:
        c = self.config
        meta = {"kind": "lm", "vocab_size": self.vocab_size, "width": c.width, "n_layers": c.n_layers,
                "n_heads": c.n_heads, "context": c.context, "seed": c.seed}
        if tokenizer is not None:
            meta["tokenizer"] = tokenizer.digest()
        nx.save_archive(path, self.params, meta)

    @classmethod
    def load(cls, path, tokenizer: Tokenizer | None = None) -> "FrozenLM":
        arrays, meta = nx.load_archive(path)
        if meta.get("kind") != "lm":
            raise LMError(f"{path}: not a language-model checkpoint")
        if tokenizer is not None and meta.get("tokenizer") not in (None, tokenizer.digest()):
            raise LMError(f"{path}: checkpoint was built for a different vocabulary")
        config = LMConfig(width=int(meta["width"]), n_layers=int(meta["n_layers"]),
                          n_heads=int(meta["n_heads"]), context=int(meta["context"]), seed=int(meta["seed"]))
        lm = cls(int(meta["vocab_size"]), config)
        for name, t in lm.params.items():
            if arrays[name].shape != t.shape:
                raise LMError(f"{path}: parameter {name} has shape {arrays[name].shape}, expected {t.shape}")
            t.data = arrays[name].copy()
        return lm.freeze()


def freeze_digest(lm: FrozenLM) -> str:
    """SHA-256 over every parameter's name, shape and float32 bytes, in a fixed order."""
    h = hashlib.sha256()
    for name in sorted(lm.params):
        arr = lm.params[name].data
        h.update(name.encode() + repr(arr.shape).encode())
        h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return h.hexdigest()


@dataclass
class MixedPrompt:
    """Hard token ids containing one GRAPH_SLOT, plus the soft vectors that fill it."""

    hard_ids: list[int]
    soft: Tensor | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_soft(self) -> int:
        return 0 if self.soft is None else self.soft.shape[0]

    def __len__(self) -> int:
        return len(self.hard_ids) - 1 + self.n_soft

    def with_soft(self, soft: Tensor | None) -> "MixedPrompt":
        return MixedPrompt(list(self.hard_ids), soft, dict(self.meta))


def embed_mixed(lm: FrozenLM, prompt: MixedPrompt) -> Tensor:
    """Embed hard tokens and splice the soft vectors in place of the slot, unchanged."""
    slots = [i for i, t in enumerate(prompt.hard_ids) if t == GRAPH_SLOT]
    if len(slots) != 1:
        raise LMError(f"mixed prompt needs exactly one graph slot, found {len(slots)}")
    s = slots[0]
    before, after = prompt.hard_ids[:s], prompt.hard_ids[s + 1:]
    parts = []
    if before:
        parts.append(lm.embed_tokens(before))
    if prompt.n_soft:
        if prompt.soft.ndim != 2 or prompt.soft.shape[1] != lm.width:
            raise LMError(f"soft prompt shape {prompt.soft.shape} does not match LM width {lm.width}")
        parts.append(prompt.soft)
    if after:
        parts.append(lm.embed_tokens(after))
    return nx.concat(parts, axis=0)


def answer_nll(lm: FrozenLM, prompt: MixedPrompt, answer_ids: Sequence[int], reduction: str = "mean") -> Tensor:
    """Teacher-forced negative log-likelihood of ``answer_ids`` after the prompt.

    Only answer positions contribute; "mean" divides by the answer length.
    """
    answer_ids = list(answer_ids)
    if not answer_ids:
        raise LMError("answer must be non-empty")
    seq = embed_mixed(lm, prompt)
    P = seq.shape[0]
    if answer_ids[:-1]:
        seq = nx.concat([seq, lm.embed_tokens(answer_ids[:-1])], axis=0)
    if seq.shape[0] > lm.context:
        raise LMError(f"prompt plus answer ({seq.shape[0]} tokens) exceeds the context window of {lm.context}")
    logits = lm.forward(seq)
    picked = logits[P - 1:]
    return nx.cross_entropy(picked, np.asarray(answer_ids), reduction=reduction)


def generate_greedy(lm: FrozenLM, prompt: MixedPrompt, max_new: int) -> list[int]:
    """Argmax decoding until EOS or ``max_new`` tokens; EOS is not returned."""
    if max_new < 0:
        raise LMError("max_new must be non-negative")
    out: list[int] = []
    with nx.no_grad():
        seq = embed_mixed(lm, prompt)
        if seq.shape[0] + max_new > lm.context + 1:
            raise LMError(f"prompt of {seq.shape[0]} tokens leaves no room for {max_new} new tokens "
                          f"in a context of {lm.context}")
        for _ in range(max_new):
            logits = lm.forward(seq).data[-1].copy()
            logits[GRAPH_SLOT] = -np.inf
            nxt = int(np.argmax(logits))
            if nxt == EOS:
                break
            out.append(nxt)
            seq = nx.concat([seq, lm.embed_tokens([nxt])], axis=0)
    return out


def pretrain(lm: FrozenLM, sequences: Sequence[tuple[list[int], list[float]]], steps: int,
             batch_size: int = 16, lr: float = 3e-3, seed: int = 0) -> list[float]:
    """Next-token training on ``(ids, weights)`` pairs; ``weights[t]`` scales the loss on ids[t+1]."""
    params = lm.trainable()
    opt = nx.Adam(params, lr=lr)
    rng = np.random.default_rng(seed)
    losses = []
    for step in range(steps):
        idx = rng.choice(len(sequences), size=min(batch_size, len(sequences)), replace=False)
        batch = [sequences[i] for i in idx]
        T = max(len(ids) for ids, _ in batch)
        ids = np.full((len(batch), T), EOS, dtype=np.int64)
        w = np.zeros((len(batch), T - 1))
        for b, (seq, weights) in enumerate(batch):
            ids[b, :len(seq)] = seq
            w[b, :len(seq) - 1] = weights[:len(seq) - 1]
        logits = lm.forward(lm.embed_tokens(ids[:, :-1]))
        loss = nx.cross_entropy(logits, ids[:, 1:], weights=w)
        opt.zero_grad()
        nx.backward(loss)
        opt.step(nx.cosine_lr(step, steps, lr))
        losses.append(loss.item())
        if step % 200 == 0:
            log.info("lm pretrain step %d loss %.4f", step, losses[-1])
    return losses
