"""Finite-difference gradient suites for every primitive and the composed losses.

All suites run in float64: a 1e-4 central-difference step in float32 has
rounding error far above the 1e-4 tolerance.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import layers
from . import numerics as nx
from .adapter import AdapterConfig, KnowledgeAdapter
from .kg import ReasoningPath
from .lm import GRAPH_SLOT, FrozenLM, LMConfig, MixedPrompt, answer_nll
from .numerics import Tensor

TOLERANCE = 1e-4
KINK_MARGIN = 1e-3


@dataclass
class SuiteResult:
    name: str
    cases: int
    max_error: float

    @property
    def ok(self) -> bool:
        return self.max_error < TOLERANCE


def _leaf(rng, *shape, low=-1.0, high=1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, shape), requires_grad=True)


def _away_from_zero(rng, *shape) -> Tensor:
    # keep relu inputs off the kink so central differences stay valid
    x = rng.uniform(0.1, 1.0, shape) * rng.choice([-1.0, 1.0], shape)
    return Tensor(x, requires_grad=True)


def _dims(rng, n=2, low=1, high=5):
    return [int(d) for d in rng.integers(low, high + 1, n)]


def _primitive_cases(rng) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    m, n = _dims(rng)
    k = int(rng.integers(1, 6))
    a, b = _leaf(rng, m, n), _leaf(rng, m, n)
    row = _leaf(rng, n)
    x3 = _leaf(rng, 2, m, n)
    mm_a, mm_b = _leaf(rng, m, k), _leaf(rng, k, n)
    table = _leaf(rng, 6, n)
    ids = rng.integers(0, 6, (m, 3))
    gain, bias = _leaf(rng, n, low=0.5, high=1.5), _leaf(rng, n)
    logits = _leaf(rng, m, n + 1, low=-3, high=3)
    targets = rng.integers(0, n + 1, m)
    tw = rng.uniform(0.0, 1.0, m)
    relu_x = _away_from_zero(rng, m, n)
    vec_a, vec_b = _leaf(rng, k), _leaf(rng, k)
    weights: dict[tuple, np.ndarray] = {}

    def proj(t: Tensor) -> Tensor:
        # a fixed random linear functional per output shape turns any output into a scalar
        if t.shape not in weights:
            weights[t.shape] = rng.normal(size=t.shape)
        return (t * weights[t.shape]).sum()

    return {
        "add": (lambda: proj(a + row), [a, row]),
        "sub": (lambda: proj(a - b), [a, b]),
        "mul": (lambda: proj(a * b), [a, b]),
        "div": (lambda: proj(a / 1.7), [a]),
        "neg": (lambda: proj(-a), [a]),
        "matmul": (lambda: proj(mm_a @ mm_b), [mm_a, mm_b]),
        "matmul_batched": (lambda: proj(x3 @ nx.transpose(a, (1, 0))), [x3, a]),
        "matmul_vector": (lambda: vec_a @ vec_b, [vec_a, vec_b]),
        "concat": (lambda: proj(nx.concat([a, b], axis=1)), [a, b]),
        "stack": (lambda: proj(nx.stack([a, b], axis=0)), [a, b]),
        "sum": (lambda: proj(x3.sum(axis=1)), [x3]),
        "mean": (lambda: proj(x3.mean(axis=-1, keepdims=True)), [x3]),
        "reshape": (lambda: proj(a.reshape(n, m)), [a]),
        "transpose": (lambda: proj(x3.transpose(2, 0, 1)), [x3]),
        "swapaxes": (lambda: proj(nx.swapaxes(x3, 0, 2)), [x3]),
        "getitem": (lambda: proj(x3[:, -1]), [x3]),
        "take": (lambda: proj(nx.take(table, ids)), [table]),
        "tanh": (lambda: proj(nx.tanh(a)), [a]),
        "relu": (lambda: proj(nx.relu(relu_x)), [relu_x]),
        "layer_norm": (lambda: proj(nx.layer_norm(a, gain, bias)), [a, gain, bias]),
        "softmax": (lambda: proj(nx.softmax(a)), [a]),
        "log_softmax": (lambda: proj(nx.log_softmax(a, axis=0)), [a]),
        "cross_entropy": (lambda: nx.cross_entropy(logits, targets), [logits]),
        "cross_entropy_weighted": (lambda: nx.cross_entropy(logits, targets, tw, "sum"), [logits]),
    }


PRIMITIVES = tuple(_primitive_cases(np.random.default_rng(0)))


def primitive_suite(cases: int = 20, seed: int = 0) -> list[SuiteResult]:
    worst = {name: 0.0 for name in PRIMITIVES}
    with nx.precision(np.float64):
        for c in range(cases):
            rng = np.random.default_rng([seed, c])
            for name, (fn, inputs) in _primitive_cases(rng).items():
                worst[name] = max(worst[name], nx.gradcheck(fn, inputs))
    return [SuiteResult(name, cases, err) for name, err in worst.items()]


def _random_paths(rng, n_entities: int, n_relations: int, max_hops: int, n: int) -> list[ReasoningPath]:
    out = []
    for _ in range(n):
        hops = int(rng.integers(1, max_hops + 1))
        origin = int(rng.integers(n_entities))
        steps = tuple((int(rng.integers(n_relations)), int(rng.integers(n_entities))) for _ in range(hops))
        out.append(ReasoningPath(origin, steps))
    return out


def _smooth_cases(build, cases: int, seed: int, offset: int, max_entries: int | None = None) -> float:
    """Gradcheck ``cases`` draws from ``build(rng, c) -> (fn, inputs)``.

    Draws whose relu inputs come within ``KINK_MARGIN`` of zero are replaced
    by the next draw, since a finite-difference step there may cross the kink.
    """
    worst = 0.0
    accepted = draw = 0
    with nx.precision(np.float64):
        while accepted < cases:
            rng = np.random.default_rng([seed, offset + draw])
            draw += 1
            fn, inputs = build(rng, draw)
            with nx.no_grad(), nx.kink_monitor() as margin:
                fn()
            if margin[0] < KINK_MARGIN:
                continue
            worst = max(worst, nx.gradcheck(fn, inputs, max_entries=max_entries, rng=rng))
            accepted += 1
    return worst


def adapter_suite(cases: int = 20, seed: int = 0, max_entries: int = 12) -> SuiteResult:
    """Random functional of the soft prompt, checked against every adapter parameter."""
    def build(rng, c):
        d = int(rng.choice([4, 8]))
        cfg = AdapterConfig(dim=d, hidden=2 * d, lm_width=int(rng.choice([4, 8, 16])), max_hops=2,
                            mode=str(rng.choice(["HplusRminusT", "HplusRplusT"])), seed=c)
        adapter = KnowledgeAdapter(7, 3, cfg)
        params = adapter.trainable()
        paths = _random_paths(rng, 7, 3, 2, int(rng.integers(1, 5)))
        w = rng.normal(size=(len(paths), cfg.lm_width))
        return (lambda: (adapter.soft_prompt(paths) * w).sum()), params

    return SuiteResult("adapter_soft_prompt", cases, _smooth_cases(build, cases, seed, 1000, max_entries))


def lm_suite(cases: int = 20, seed: int = 0) -> SuiteResult:
    """Answer NLL through a frozen LM, differentiated with respect to the soft vectors."""
    def build(rng, c):
        width, vocab = int(rng.choice([8, 16])), 12
        lm = FrozenLM(vocab, LMConfig(width=width, n_layers=2, n_heads=2, context=32, seed=c)).freeze()
        before = [int(t) for t in rng.integers(4, vocab, int(rng.integers(1, 4)))]
        after = [int(t) for t in rng.integers(4, vocab, int(rng.integers(0, 3)))]
        soft = Tensor(rng.normal(size=(int(rng.integers(1, 4)), width)), requires_grad=True)
        answer = [int(t) for t in rng.integers(0, vocab, int(rng.integers(1, 4)))]
        prompt = MixedPrompt(before + [GRAPH_SLOT] + after)
        return (lambda: answer_nll(lm, prompt.with_soft(soft), answer)), [soft]

    return SuiteResult("lm_answer_nll", cases, _smooth_cases(build, cases, seed, 2000))


def end_to_end_suite(cases: int = 20, seed: int = 0, max_entries: int = 6) -> SuiteResult:
    """Adapter parameters differentiated through the frozen LM's answer likelihood."""
    def build(rng, c):
        width = 8
        lm = FrozenLM(10, LMConfig(width=width, n_layers=1, n_heads=2, context=24, seed=c)).freeze()
        adapter = KnowledgeAdapter(6, 2, AdapterConfig(dim=4, hidden=8, lm_width=width, seed=c))
        params = adapter.trainable()
        paths = _random_paths(rng, 6, 2, 2, int(rng.integers(1, 4)))
        prompt = MixedPrompt([0, 5, GRAPH_SLOT, 6])
        answer = [int(t) for t in rng.integers(4, 10, 2)]
        return (lambda: answer_nll(lm, prompt.with_soft(adapter.soft_prompt(paths)), answer)), params

    return SuiteResult("adapter_through_lm", cases, _smooth_cases(build, cases, seed, 3000, max_entries))


def attention_suite(cases: int = 20, seed: int = 0) -> SuiteResult:
    """One transformer block, with and without the causal mask."""
    def build(rng, c):
        params: dict = {}
        layers.init_block(params, "b", rng, 4, 8)
        for t in params.values():
            t.requires_grad = True
        x = _leaf(rng, 2, 3, 4)
        w = rng.normal(size=(2, 3, 4))
        mask = layers.causal_mask(3) if c % 2 else None
        return (lambda: (layers.block(x, params, "b", 2, mask) * w).sum()), [x, *params.values()]

    return SuiteResult("transformer_block", cases, _smooth_cases(build, cases, seed, 4000))


def run_all(cases: int = 20, seed: int = 0) -> list[SuiteResult]:
    return [*primitive_suite(cases, seed), attention_suite(cases, seed), adapter_suite(cases, seed),
            lm_suite(cases, seed), end_to_end_suite(cases, seed)]
