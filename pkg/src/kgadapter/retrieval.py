"""Reasoning-graph retrieval: hop prediction, relation-link search, ranking, path sampling."""
from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np

from . import numerics as nx
from .kg import (KnowledgeGraph, LoadError, ReasoningPath, RelationLink,
                 enumerate_relation_links, instantiate_paths)
from .numerics import Tensor

UNK_WORD = "<unk>"
_WORD_RE = re.compile(r"\w+|[^\w\s]")
_LABEL_SPLIT = re.compile(r"[\W_]+")


class RetrievalError(ValueError):
    pass


@dataclass
class Question:
    text: str
    anchors: list[int]
    gold_answers: list[str] = field(default_factory=list)
    gold_hops: int | None = None


def load_questions(lines: Iterable[str], kg: KnowledgeGraph) -> list[Question]:
    """Read ``{"text", "anchors", "answers", "hops"?}`` JSON lines; anchors are entity labels."""
    out = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            anchors = [kg.entity_id(a) for a in rec["anchors"]]
            text = rec["text"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise LoadError(f"question line {lineno}: {exc}") from None
        if not anchors:
            raise LoadError(f"question line {lineno}: no anchor entities")
        out.append(Question(text, anchors, list(rec.get("answers", [])), rec.get("hops")))
    return out


def question_to_json(q: Question, kg: KnowledgeGraph) -> str:
    rec = {"text": q.text, "anchors": [kg.entities[a] for a in q.anchors], "answers": q.gold_answers}
    if q.gold_hops is not None:
        rec["hops"] = q.gold_hops
    return json.dumps(rec, ensure_ascii=False)


# ------------------------------------------------------------- hop classifier

def question_words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


@dataclass
class HopConfig:
    dim: int = 32
    epochs: int = 60
    batch_size: int = 16
    lr: float = 2e-2
    seed: int = 0


class HopClassifier:
    """Mean bag-of-words question encoder with a linear softmax head over 1..max_hops."""

    def __init__(self, vocab: Sequence[str], max_hops: int, dim: int = 32, seed: int = 0):
        vocab = list(vocab)
        if not vocab or vocab[0] != UNK_WORD:
            vocab = [UNK_WORD] + [w for w in vocab if w != UNK_WORD]
        self.vocab = vocab
        self.word_ids = {w: i for i, w in enumerate(vocab)}
        self.max_hops = max_hops
        self.dim = dim
        rng = np.random.default_rng(seed)
        self.params = {
            "embedding": Tensor(rng.normal(0.0, 1.0, (len(vocab), dim)), name="hop.embedding"),
            "weight": Tensor(nx.uniform_init(rng, dim, (dim, max_hops)), name="hop.weight"),
            "bias": Tensor(np.zeros(max_hops), name="hop.bias"),
        }
        self.train_accuracy: float | None = None

    def token_ids(self, text: str) -> list[int]:
        words = question_words(text)
        if not words:
            raise RetrievalError(f"question {text!r} is empty after tokenization")
        return [self.word_ids.get(w, 0) for w in words]

    def encode(self, q: Question | str) -> Tensor:
        text = q.text if isinstance(q, Question) else q
        return nx.take(self.params["embedding"], self.token_ids(text)).mean(axis=0)

    def logits(self, q: Question | str) -> Tensor:
        return self.encode(q) @ self.params["weight"] + self.params["bias"]

    def probabilities(self, q: Question | str) -> np.ndarray:
        with nx.no_grad():
            return nx.softmax(self.logits(q)).data

    def predict(self, q: Question | str) -> int:
        with nx.no_grad():
            return int(np.argmax(self.logits(q).data)) + 1

    def _batch_logits(self, texts: Sequence[str]) -> Tensor:
        rows = [self.token_ids(t) for t in texts]
        L = max(len(r) for r in rows)
        ids = np.zeros((len(rows), L), dtype=np.int64)
        w = np.zeros((len(rows), L, 1))
        for i, r in enumerate(rows):
            ids[i, :len(r)] = r
            w[i, :len(r)] = 1.0 / len(r)
        pooled = (nx.take(self.params["embedding"], ids) * w).sum(axis=1)
        return pooled @ self.params["weight"] + self.params["bias"]

    def save(self, path) -> None:
        meta = {"kind": "hop", "max_hops": self.max_hops, "dim": self.dim,
                "vocab": json.dumps(self.vocab, ensure_ascii=False)}
        nx.save_archive(path, self.params, meta)

    @classmethod
    def load(cls, path) -> "HopClassifier":
        arrays, meta = nx.load_archive(path)
        if meta.get("kind") != "hop":
            raise RetrievalError(f"{path}: not a hop-classifier checkpoint")
        clf = cls(json.loads(meta["vocab"]), int(meta["max_hops"]), int(meta["dim"]))
        for name, t in clf.params.items():
            t.data = arrays[name].copy()
        return clf


def encode_question(clf: HopClassifier, q: Question) -> Tensor:
    return clf.encode(q)


def predict_hops(clf: HopClassifier, q: Question) -> int:
    """Most probable hop count; ties go to the smaller count."""
    return clf.predict(q)


def train_hop_classifier(dataset: Sequence[Question], max_hops: int, config: HopConfig | None = None) -> HopClassifier:
    """Fit the classifier by cross-entropy with Adam; sets ``train_accuracy``."""
    config = config or HopConfig()
    if not dataset:
        raise RetrievalError("empty hop-classifier training set")
    for q in dataset:
        if q.gold_hops is None:
            raise RetrievalError(f"question {q.text!r} has no gold hop count")
        if not 1 <= q.gold_hops <= max_hops:
            raise RetrievalError(f"question {q.text!r} has hop count {q.gold_hops} outside 1..{max_hops}")
    vocab: dict[str, None] = {UNK_WORD: None}
    for q in dataset:
        vocab.update(dict.fromkeys(question_words(q.text)))
    clf = HopClassifier(list(vocab), max_hops, config.dim, config.seed)
    params = list(clf.params.values())
    for p in params:
        p.requires_grad = True
    labels = np.array([q.gold_hops - 1 for q in dataset])
    texts = [q.text for q in dataset]
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
    total = config.epochs * steps_per_epoch
    opt = nx.Adam(params, lr=config.lr)
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(dataset))
        for start in range(0, len(dataset), config.batch_size):
            idx = order[start:start + config.batch_size]
            loss = nx.cross_entropy(clf._batch_logits([texts[i] for i in idx]), labels[idx])
            opt.zero_grad()
            nx.backward(loss)
            opt.step(nx.cosine_lr(step, total, config.lr))
            step += 1
    for p in params:
        p.requires_grad = False
        p.grad = None
    with nx.no_grad():
        pred = np.argmax(clf._batch_logits(texts).data, axis=1)
    clf.train_accuracy = float((pred == labels).mean())
    return clf


class FixedHops:
    """Stand-in classifier that always predicts the same hop count."""

    def __init__(self, hops: int, max_hops: int | None = None):
        self.hops = hops
        self.max_hops = max_hops or hops

    def predict(self, q) -> int:
        return self.hops


# -------------------------------------------------------------------- scoring

@dataclass(frozen=True)
class ScoredLink:
    link: RelationLink
    score: float


class LinkScorer(Protocol):
    kg: KnowledgeGraph

    def __call__(self, q: Question, links: Sequence[RelationLink]) -> list[float]: ...


def label_tokens(label: str) -> list[str]:
    return [t for t in _LABEL_SPLIT.split(label.lower()) if t]


class LexicalScorer:
    """Fraction of a link's label tokens that also occur in the question."""

    def __init__(self, kg: KnowledgeGraph):
        self.kg = kg

    def __call__(self, q: Question, links: Sequence[RelationLink]) -> list[float]:
        qtok = set(label_tokens(q.text))
        scores = []
        for link in links:
            ltok = set()
            for label in self.kg.link_labels(link):
                ltok.update(label_tokens(label))
            scores.append(len(qtok & ltok) / len(ltok) if ltok else 0.0)
        return scores


class RandomScorer:
    """Uniform random scores, reproducible per (seed, question text)."""

    def __init__(self, kg: KnowledgeGraph, seed: int = 0):
        self.kg = kg
        self.seed = seed

    def __call__(self, q: Question, links: Sequence[RelationLink]) -> list[float]:
        digest = hashlib.sha256(f"{self.seed}\0{q.text}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return [float(x) for x in rng.random(len(links))]


class LMScorer:
    """Mean log-likelihood of the link's label text continued from the question."""

    def __init__(self, kg: KnowledgeGraph, lm, tokenizer):
        self.kg = kg
        self.lm = lm
        self.tokenizer = tokenizer

    def __call__(self, q: Question, links: Sequence[RelationLink]) -> list[float]:
        from .lm import BOS
        prefix = [BOS] + self.tokenizer.encode(q.text)
        scores = []
        with nx.no_grad():
            for link in links:
                cont = self.tokenizer.encode(" ".join(self.kg.link_labels(link)))
                ids = (prefix + cont)[: self.lm.context]
                logp = nx.log_softmax(self.lm.forward(self.lm.embed_tokens(ids[:-1]))).data
                n = len(ids) - len(prefix)
                picked = [logp[len(prefix) - 1 + i, ids[len(prefix) + i]] for i in range(n)]
                scores.append(float(np.mean(picked)) if picked else -math.inf)
        return scores


def score_links(q: Question, links: Iterable[RelationLink], scorer: LinkScorer) -> list[ScoredLink]:
    """Rank links by descending score; ties go to the lexicographically smaller label sequence."""
    links = list(links)
    if not links:
        raise RetrievalError("no relation links to score")
    scores = scorer(q, links)
    for link, s in zip(links, scores):
        if not math.isfinite(s):
            raise RetrievalError(f"non-finite score {s} for link {scorer.kg.link_labels(link)}")
    ranked = sorted(zip(links, scores), key=lambda ls: (-ls[1], scorer.kg.link_labels(ls[0])))
    return [ScoredLink(link, float(s)) for link, s in ranked]


# ------------------------------------------------------------ reasoning graph

@dataclass
class ReasoningGraph:
    question: Question
    hops: int
    selected_links: list[ScoredLink]
    paths: list[ReasoningPath]
    n_candidates: int = 0

    @property
    def empty(self) -> bool:
        return not self.paths


def build_reasoning_graph(kg: KnowledgeGraph, q: Question, clf, scorer: LinkScorer, k: int = 4, cap: int = 8,
                          hops: int | None = None, exact_hops: bool = False) -> ReasoningGraph:
    """Predict hops, collect links from every anchor, keep the top ``k``, sample paths.

    With ``exact_hops`` only links whose length equals the hop count compete,
    when any exist.
    """
    if k < 1 or cap < 1:
        raise RetrievalError("k and cap must be positive")
    h = clf.predict(q) if hops is None else hops
    links: dict[RelationLink, None] = {}
    for anchor in q.anchors:
        links.update(dict.fromkeys(enumerate_relation_links(kg, anchor, h)))
    candidates = list(links)
    if exact_hops:
        exact = [link for link in candidates if len(link) == h]
        candidates = exact or candidates
    if not candidates:
        return ReasoningGraph(q, h, [], [], 0)
    selected = score_links(q, candidates, scorer)[:k]
    paths: list[ReasoningPath] = []
    for sl in selected:
        found: list[ReasoningPath] = []
        for anchor in q.anchors:
            found += instantiate_paths(kg, anchor, sl.link, cap - len(found)) if len(found) < cap else []
        paths += found
    return ReasoningGraph(q, h, selected, paths, len(candidates))
