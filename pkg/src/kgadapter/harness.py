"""End-to-end pipeline: prompts, adapter training, evaluation and ablations."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import re
import string
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .adapter import AdapterConfig, KnowledgeAdapter
from .kg import KnowledgeGraph
from .lm import (BOS, EOS, GRAPH_SLOT, FrozenLM, LMConfig, MixedPrompt, Tokenizer, answer_nll,
                 embed_mixed, freeze_digest, generate_greedy, pretrain)
from .retrieval import (HopClassifier, HopConfig, LexicalScorer, LMScorer, Question, RandomScorer,
                        ReasoningGraph, build_reasoning_graph, train_hop_classifier)
from .synth import Benchmark

log = logging.getLogger(__name__)

DEFAULT_TEMPLATE = (
    "Based on the knowledge graphs, please answer the given question. Please keep the answer as "
    "simple as possible and return all the possible answers as a list. knowledge graphs: {graph}\n"
    "question: {question}\nanswer:"
)


class HarnessError(ValueError):
    pass


class FrozenLMViolation(RuntimeError):
    pass


# ------------------------------------------------------------------- prompts

@dataclass(frozen=True)
class PromptTemplate:
    text: str = DEFAULT_TEMPLATE

    def __post_init__(self):
        for slot in ("{question}", "{graph}"):
            n = self.text.count(slot)
            if n != 1:
                raise HarnessError(f"template must contain {slot} exactly once, found {n}")

    def render(self, question: str, graph: str = "{graph}") -> str:
        return self.text.replace("{question}", question).replace("{graph}", graph)


def assemble_prompt(template: PromptTemplate, q: Question, tokenizer: Tokenizer) -> MixedPrompt:
    """BOS + tokenised template with the question filled in and the graph slot marked."""
    before, after = template.text.replace("{question}", q.text).split("{graph}")
    ids = [BOS] + tokenizer.encode(before) + [GRAPH_SLOT] + tokenizer.encode(after)
    return MixedPrompt(ids)


def format_answer_list(answers: Sequence[str]) -> str:
    return "[" + ", ".join(answers) + "]"


_QUOTES = "\"'“”‘’"


def parse_answer_list(text: str) -> list[str]:
    """Items of a bracketed, comma-separated list; otherwise the trimmed first line."""
    text = text.strip()
    m = re.search(r"\[(.*?)\]", text, flags=re.S)
    if m is None:
        line = text.splitlines()[0].strip() if text else ""
        return [line] if line else []
    inner = m.group(1)
    for q in "“”":
        inner = inner.replace(q, '"')
    items = next(csv.reader([inner], skipinitialspace=True), [])
    return [s for s in (item.strip().strip(_QUOTES).strip() for item in items) if s]


_PUNCT = string.punctuation + _QUOTES


def normalize_answer(s: str) -> str:
    return " ".join(s.lower().split()).strip(_PUNCT + " ")


def hits_at_1(predicted: Sequence[str], gold: Sequence[str]) -> int:
    if not gold:
        raise HarnessError("gold answer set is empty")
    if not predicted:
        return 0
    return int(normalize_answer(predicted[0]) in {normalize_answer(g) for g in gold})


# -------------------------------------------------------------------- config

@dataclass
class TrainConfig:
    epochs: int = 1
    batch_size: int = 4
    lr: float = 2e-3
    schedule: str = "cosine"
    seed: int = 0
    k: int = 4
    cap: int = 8
    max_hops: int = 2
    struct_mode: str = "HplusRminusT"
    no_struct: bool = False
    no_train_encoder: bool = False
    freeze_labels: bool = False
    random_retrieve: bool = False
    exact_hops: bool = True
    scorer: str = "lexical"
    loss_reduction: str = "mean"
    label_init: str = "lm"
    dim: int = 64
    hidden: int = 128
    max_new: int = 16
    max_steps: int = 0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "k", "cap", "max_hops", "dim", "hidden", "max_new"):
            if getattr(self, name) <= 0:
                raise HarnessError(f"{name} must be positive")
        if self.lr <= 0:
            raise HarnessError("lr must be positive")
        if self.schedule not in ("cosine", "constant"):
            raise HarnessError(f"unknown schedule {self.schedule!r}")
        if self.loss_reduction not in ("mean", "sum"):
            raise HarnessError(f"unknown loss_reduction {self.loss_reduction!r}")
        if self.scorer not in ("lexical", "lm"):
            raise HarnessError(f"unknown scorer {self.scorer!r}")
        if self.label_init not in ("lm", "random"):
            raise HarnessError(f"unknown label_init {self.label_init!r}")

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        parsed = {}
        for key, raw in values.items():
            if key not in kinds:
                raise HarnessError(f"unknown config key {key!r}")
            parsed[key] = _coerce(kinds[key], raw, key)
        return cls(**parsed)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def _coerce(kind: str, raw, key: str):
    if not isinstance(raw, str):
        return raw
    try:
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise HarnessError(f"bad value {raw!r} for config key {key!r}") from None
    return raw


def read_config_file(path) -> dict[str, str]:
    """``key = value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise HarnessError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


# ------------------------------------------------------------------- pipeline

@dataclass
class Pipeline:
    kg: KnowledgeGraph
    tokenizer: Tokenizer
    lm: FrozenLM
    classifier: HopClassifier
    adapter: KnowledgeAdapter
    config: TrainConfig = field(default_factory=TrainConfig)
    template: PromptTemplate = field(default_factory=PromptTemplate)

    def check_compatible(self) -> None:
        c = self.adapter.config
        if c.lm_width != self.lm.width:
            raise HarnessError(f"adapter emits width {c.lm_width} but the LM expects {self.lm.width}")
        if self.adapter.vocab_hash and self.adapter.vocab_hash != self.kg.vocab_hash():
            raise HarnessError("adapter was trained on a different graph vocabulary")
        if (self.adapter.n_entities, self.adapter.n_relations) != (self.kg.num_entities, self.kg.num_relations):
            raise HarnessError("adapter vocabulary size does not match the graph")
        if self.classifier.max_hops > c.max_hops:
            raise HarnessError(f"classifier predicts up to {self.classifier.max_hops} hops, "
                               f"adapter handles {c.max_hops}")
        if self.lm.vocab_size != len(self.tokenizer):
            raise HarnessError("LM vocabulary size does not match the tokenizer")

    def scorer(self):
        if self.config.random_retrieve:
            return RandomScorer(self.kg, self.config.seed)
        if self.config.scorer == "lm":
            return LMScorer(self.kg, self.lm, self.tokenizer)
        return LexicalScorer(self.kg)

    def retrieve(self, q: Question) -> ReasoningGraph:
        return build_reasoning_graph(self.kg, q, self.classifier, self.scorer(), self.config.k,
                                     self.config.cap, exact_hops=self.config.exact_hops)

    def prompt(self, q: Question, rg: ReasoningGraph) -> MixedPrompt:
        return assemble_prompt(self.template, q, self.tokenizer).with_soft(self.adapter.soft_prompt(rg.paths))

    def answer_ids(self, q: Question) -> list[int]:
        return self.tokenizer.encode(format_answer_list(q.gold_answers)) + [EOS]

    def textual_graph(self, rg: ReasoningGraph) -> str:
        return " ; ".join(" ".join(self.kg.path_labels(p)) for p in rg.paths)

    def run(self, q: Question) -> dict:
        rg = self.retrieve(q)
        with nx.no_grad():
            prompt = self.prompt(q, rg)
            n_input = embed_mixed(self.lm, prompt).shape[0]
            out = generate_greedy(self.lm, prompt, self.config.max_new)
        text = self.tokenizer.decode(out)
        predicted = parse_answer_list(text)
        hard = len(prompt.hard_ids) - 1
        text_graph = len(self.tokenizer.encode(self.textual_graph(rg)))
        return {
            "question": q.text,
            "predicted_hops": rg.hops,
            "selected_links": [[list(self.kg.link_labels(s.link)), s.score] for s in rg.selected_links],
            "n_paths": len(rg.paths),
            "fallback": rg.empty,
            "hard_tokens": hard,
            "soft_tokens": prompt.n_soft,
            "input_tokens": n_input,
            "text_graph_tokens": text_graph,
            "text_input_tokens": hard + text_graph,
            "generated": text,
            "predicted": predicted,
            "gold": list(q.gold_answers),
            "hit": hits_at_1(predicted, q.gold_answers) if q.gold_answers else 0,
        }


# ------------------------------------------------------------------ training

@dataclass
class TrainResult:
    adapter: KnowledgeAdapter
    classifier: HopClassifier
    log: list[dict]
    hop_accuracy: float | None = None


def make_adapter(kg: KnowledgeGraph, lm: FrozenLM, tokenizer: Tokenizer, cfg: TrainConfig) -> KnowledgeAdapter:
    ac = AdapterConfig(dim=cfg.dim, hidden=cfg.hidden, lm_width=lm.width, max_hops=cfg.max_hops,
                       mode=cfg.struct_mode, use_struct=not cfg.no_struct, seed=cfg.seed)
    adapter = KnowledgeAdapter.for_graph(kg, ac)
    if cfg.label_init == "lm":
        adapter.init_labels_from_lm(kg, lm, tokenizer)
    return adapter


def train_adapter(kg: KnowledgeGraph, trainset: Sequence[Question], lm: FrozenLM, tokenizer: Tokenizer,
                  cfg: TrainConfig, classifier: HopClassifier | None = None,
                  template: PromptTemplate | None = None) -> TrainResult:
    """Fit the adapter by answer likelihood through the frozen LM.

    The hop classifier is trained first when not supplied. Only adapter
    parameters move; the LM digest is compared before and after.
    """
    if not trainset:
        raise HarnessError("empty training set")
    if not lm.frozen:
        raise HarnessError("the language model must be frozen before adapter training")
    for q in trainset:
        if not q.gold_answers:
            raise HarnessError(f"training question {q.text!r} has no gold answer")
    digest = freeze_digest(lm)
    if classifier is None:
        classifier = train_hop_classifier(trainset, cfg.max_hops, HopConfig(seed=cfg.seed))
    adapter = make_adapter(kg, lm, tokenizer, cfg)
    pipe = Pipeline(kg, tokenizer, lm, classifier, adapter, cfg, template or PromptTemplate())
    pipe.check_compatible()

    prepared = []
    for q in trainset:
        rg = pipe.retrieve(q)
        prepared.append((assemble_prompt(pipe.template, q, tokenizer), rg.paths, pipe.answer_ids(q)))

    excluded = (("encoder",) if cfg.no_train_encoder else ()) + (("embedding",) if cfg.freeze_labels else ())
    params = adapter.trainable(exclude=excluded)
    opt = nx.Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(prepared) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    if cfg.max_steps:
        total = min(total, cfg.max_steps)
    history = []
    step = 0
    while step < total:
        order = rng.permutation(len(prepared))
        for start in range(0, len(order), cfg.batch_size):
            if step >= total:
                break
            batch = [prepared[i] for i in order[start:start + cfg.batch_size]]
            losses = [answer_nll(lm, skel.with_soft(adapter.soft_prompt(paths)), ans, cfg.loss_reduction)
                      for skel, paths, ans in batch]
            loss = nx.stack(losses).mean()
            lr = nx.cosine_lr(step, total, cfg.lr) if cfg.schedule == "cosine" else cfg.lr
            if loss.requires_grad:
                opt.zero_grad()
                nx.backward(loss)
                opt.step(lr)
            history.append({"step": step, "loss": loss.item(), "lr": lr})
            step += 1
    adapter.freeze()
    if freeze_digest(lm) != digest:
        raise FrozenLMViolation("language-model parameters changed during adapter training")
    return TrainResult(adapter, classifier, history, classifier.train_accuracy)


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalReport:
    hits_at_1: float
    token_used: int
    requests: int
    npr: float
    time_cost: float
    text_token_used: int = 0
    fallbacks: int = 0
    traces: list[dict] = field(default_factory=list)

    @staticmethod
    def compute_npr(token_used: int, requests: int) -> float:
        if requests <= 0:
            raise HarnessError("NPR needs at least one request")
        return token_used / requests

    @property
    def token_reduction(self) -> float:
        """Fraction of input tokens saved against rendering paths as text."""
        return 1.0 - self.token_used / self.text_token_used if self.text_token_used else 0.0

    def to_json(self, include_traces: bool = True) -> str:
        d = dataclasses.asdict(self)
        if not include_traces:
            d.pop("traces")
        return json.dumps(d, sort_keys=True, indent=2, ensure_ascii=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def without_timing(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("time_cost")
        return d

    def save(self, path, trace_path=None) -> None:
        Path(path).write_text(self.to_json(include_traces=trace_path is None), encoding="utf-8")
        if trace_path is not None:
            with open(trace_path, "w", encoding="utf-8") as fh:
                for t in self.traces:
                    fh.write(json.dumps(t, sort_keys=True, ensure_ascii=False) + "\n")


def evaluate(pipe: Pipeline, testset: Sequence[Question]) -> EvalReport:
    """Run every question once through retrieval, the adapter and greedy decoding."""
    pipe.check_compatible()
    if not testset:
        raise HarnessError("empty test set")
    t0 = time.perf_counter()
    traces = [pipe.run(q) for q in testset]
    elapsed = time.perf_counter() - t0
    token_used = sum(t["input_tokens"] for t in traces)
    requests = len(traces)
    return EvalReport(
        hits_at_1=sum(t["hit"] for t in traces) / requests,
        token_used=token_used,
        requests=requests,
        npr=EvalReport.compute_npr(token_used, requests),
        time_cost=elapsed,
        text_token_used=sum(t["text_input_tokens"] for t in traces),
        fallbacks=sum(t["fallback"] for t in traces),
        traces=traces,
    )


# --------------------------------------------------------------- LM building

@dataclass
class PretrainConfig:
    steps: int = 600
    batch_size: int = 16
    lr: float = 3e-3
    n_sequences: int = 4000
    seed: int = 0
    lm: LMConfig = field(default_factory=LMConfig)


def build_tokenizer(kg: KnowledgeGraph, questions: Sequence[Question],
                    template: PromptTemplate | None = None) -> Tokenizer:
    template = template or PromptTemplate()
    texts = [template.render("", ""), "[ , ]"]
    texts += [q.text for q in questions]
    texts += list(kg.entities) + list(kg.relations)
    return Tokenizer.from_corpus(texts)


def pretraining_corpus(kg: KnowledgeGraph, questions: Sequence[Question], tokenizer: Tokenizer,
                       template: PromptTemplate, n: int, max_graph: int, seed: int) -> list[tuple[list[int], list[float]]]:
    """Prompts whose graph slot holds entity names; the target answer is the first one.

    Losses on the random graph names are masked out; answer tokens weigh
    ten times the surrounding template text.
    """
    rng = np.random.default_rng(seed)
    entity_ids = [tokenizer.encode(e) for e in kg.entities]
    out = []
    for _ in range(n):
        q = questions[int(rng.integers(len(questions)))]
        skel = assemble_prompt(template, q, tokenizer).hard_ids
        s = skel.index(GRAPH_SLOT)
        picks = rng.choice(len(entity_ids), size=int(rng.integers(1, max_graph + 1)))
        graph = [t for i in picks for t in entity_ids[i]]
        answer = tokenizer.encode(format_answer_list([kg.entities[picks[0]]])) + [EOS]
        ids = skel[:s] + graph + skel[s + 1:] + answer
        # weights[t] applies to predicting ids[t + 1]
        w = [0.1] * (len(ids) - 1)
        for t in range(s - 1, s - 1 + len(graph)):
            w[t] = 0.0
        for t in range(len(ids) - 1 - len(answer), len(ids) - 1):
            w[t] = 1.0
        out.append((ids, w))
    return out


def build_lm(kg: KnowledgeGraph, trainset: Sequence[Question], all_questions: Sequence[Question],
             cfg: PretrainConfig | None = None, max_graph: int = 32,
             template: PromptTemplate | None = None) -> tuple[FrozenLM, Tokenizer, list[float]]:
    """Tokenizer over the benchmark text plus a briefly pretrained, frozen LM."""
    cfg = cfg or PretrainConfig()
    template = template or PromptTemplate()
    tokenizer = build_tokenizer(kg, all_questions, template)
    corpus = pretraining_corpus(kg, trainset, tokenizer, template, cfg.n_sequences, max_graph, cfg.seed)
    lm = FrozenLM(len(tokenizer), cfg.lm)
    losses = pretrain(lm, corpus, cfg.steps, cfg.batch_size, cfg.lr, cfg.seed)
    return lm.freeze(), tokenizer, losses


# ----------------------------------------------------------------- ablations

ABLATIONS = {
    "full": {},
    "no-struct": {"no_struct": True},
    "no-train": {"no_train_encoder": True},
    "random-retrieve": {"random_retrieve": True},
    "hrt-plus": {"struct_mode": "HplusRplusT"},
}


def ablation_config(cfg: TrainConfig, mode: str) -> TrainConfig:
    if mode not in ABLATIONS:
        raise HarnessError(f"unknown ablation mode {mode!r}; choose from {sorted(ABLATIONS)}")
    return cfg.replace(**ABLATIONS[mode])


def run_ablation(kg: KnowledgeGraph, trainset: Sequence[Question], testset: Sequence[Question], lm: FrozenLM,
                 tokenizer: Tokenizer, cfg: TrainConfig, mode: str,
                 classifier: HopClassifier | None = None) -> tuple[EvalReport, TrainResult]:
    variant = ablation_config(cfg, mode)
    result = train_adapter(kg, trainset, lm, tokenizer, variant, classifier)
    pipe = Pipeline(kg, tokenizer, lm, result.classifier, result.adapter, variant)
    return evaluate(pipe, testset), result


def load_benchmark(directory) -> tuple[Benchmark, KnowledgeGraph, list[Question], list[Question]]:
    bench = Benchmark.read(directory)
    kg = bench.graph()
    train, test = bench.questions(kg)
    return bench, kg, train, test
