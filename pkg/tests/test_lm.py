import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kgadapter import checks
from kgadapter import numerics as nx
from kgadapter.lm import (BOS, EOS, GRAPH_SLOT, UNK, FrozenLM, LMConfig, LMError, MixedPrompt, Tokenizer,
                          answer_nll, embed_mixed, freeze_digest, generate_greedy, pretrain)
from kgadapter.numerics import Tensor


@pytest.fixture
def tok():
    return Tokenizer.from_corpus(["what is the capital of france ?", "[ paris , rome ]"])


@pytest.fixture
def lm(tok):
    return FrozenLM(len(tok), LMConfig(width=16, n_layers=2, n_heads=2, context=32)).freeze()


def test_tokenizer_basics(tok):
    assert tok.encode("") == []
    (i,) = tok.encode("paris")
    assert tok.decode([i]) == "paris"
    assert tok.encode("atlantis") == [UNK]
    assert tok.tokens[:4] == ["<bos>", "<eos>", "<unk>", "<graph>"]


def test_tokenizer_decode_spacing(tok):
    assert tok.decode(tok.encode("[paris, rome]")) == "[paris, rome]"
    assert tok.decode([BOS] + tok.encode("what is the capital of france?") + [EOS]) == \
        "what is the capital of france?"


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(["what", "is", "the", "capital", "of", "france", "paris"]), max_size=8))
def test_tokenizer_round_trip_in_vocabulary(words):
    tok = Tokenizer.from_corpus(["what is the capital of france paris"])
    text = " ".join(words)
    assert tok.decode(tok.encode(text)) == text


def test_tokenizer_save_load(tmp_path, tok):
    tok.save(tmp_path / "v.txt")
    back = Tokenizer.load(tmp_path / "v.txt")
    assert back.tokens == tok.tokens and back.digest() == tok.digest()


def test_tokenizer_requires_reserved_prefix():
    with pytest.raises(LMError):
        Tokenizer(["a", "b"])


def test_mixed_prompt_length(lm):
    soft = Tensor(np.random.default_rng(0).normal(size=(3, 16)))
    prompt = MixedPrompt([BOS, 4, 5, 6, 7, GRAPH_SLOT], soft)
    assert len(prompt) == 8
    seq = embed_mixed(lm, prompt)
    assert seq.shape == (8, 16)
    # soft vectors pass through untouched
    np.testing.assert_array_equal(seq.data[5:], soft.data)


def test_empty_graph_falls_back_to_hard_prompt(lm):
    prompt = MixedPrompt([BOS, 4, GRAPH_SLOT, 5])
    seq = embed_mixed(lm, prompt)
    np.testing.assert_array_equal(seq.data, lm.embed_tokens([BOS, 4, 5]).data)
    assert len(prompt) == 3


def test_slot_count_and_width_checked(lm):
    with pytest.raises(LMError):
        embed_mixed(lm, MixedPrompt([BOS, 4]))
    with pytest.raises(LMError):
        embed_mixed(lm, MixedPrompt([GRAPH_SLOT, GRAPH_SLOT]))
    with pytest.raises(LMError):
        embed_mixed(lm, MixedPrompt([GRAPH_SLOT], Tensor(np.zeros((2, 5)))))


def test_forward_shapes_and_context(lm):
    assert lm.forward(lm.embed_tokens([BOS])).shape == (1, len(lm.params["head.bias"].data))
    with pytest.raises(LMError):
        lm.forward(lm.embed_tokens([BOS] * 33))
    with pytest.raises(LMError):
        lm.forward(Tensor(np.zeros((2, 8))))


def test_forward_is_causal(lm):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 16))
    y = x.copy()
    y[4:] = rng.normal(size=(2, 16))
    a = lm.forward(Tensor(x)).data
    b = lm.forward(Tensor(y)).data
    np.testing.assert_array_equal(a[:4], b[:4])
    assert not np.allclose(a[4:], b[4:])


def test_forward_is_pure(lm):
    x = lm.embed_tokens([BOS, 4, 5])
    assert lm.forward(x).data.tobytes() == lm.forward(x).data.tobytes()


def uniform_lm(vocab=4, width=8):
    lm = FrozenLM(vocab, LMConfig(width=width, n_layers=1, context=16))
    lm.params["head.weight"].data[:] = 0
    lm.params["head.bias"].data[:] = 0
    return lm.freeze()


def test_answer_nll_uniform_is_log_vocab():
    lm = uniform_lm()
    prompt = MixedPrompt([BOS, GRAPH_SLOT])
    assert answer_nll(lm, prompt, [1, 2]).item() == pytest.approx(math.log(4), rel=1e-6)
    assert answer_nll(lm, prompt, [1, 2], "sum").item() == pytest.approx(2 * math.log(4), rel=1e-6)


def test_answer_nll_dominant_logit_goes_to_zero():
    lm = FrozenLM(4, LMConfig(width=8, n_layers=1, context=16))
    lm.params["head.weight"].data[:] = 0
    lm.params["head.bias"].data[:] = [0, 0, 60.0, 0]
    assert answer_nll(lm.freeze(), MixedPrompt([BOS, GRAPH_SLOT]), [2]).item() < 1e-12


def test_answer_nll_errors(lm):
    with pytest.raises(LMError):
        answer_nll(lm, MixedPrompt([BOS, GRAPH_SLOT]), [])
    with pytest.raises(LMError):
        answer_nll(lm, MixedPrompt([BOS] * 30 + [GRAPH_SLOT]), [4] * 5)


def test_soft_prompt_gradients_through_lm():
    assert checks.lm_suite(cases=3, seed=9).ok


def test_frozen_lm_receives_no_gradient(lm):
    soft = Tensor(np.ones((2, 16)), requires_grad=True)
    nx.backward(answer_nll(lm, MixedPrompt([BOS, GRAPH_SLOT], soft), [4, 5]))
    assert soft.grad is not None and soft.grad.any()
    assert all(t.grad is None for t in lm.params.values())
    with pytest.raises(ValueError):
        lm.params["tok_emb"].data[0, 0] = 1.0
    with pytest.raises(LMError):
        lm.trainable()


def test_generate_edge_cases():
    lm = uniform_lm()
    assert generate_greedy(lm, MixedPrompt([BOS, GRAPH_SLOT]), 0) == []
    eos_lm = FrozenLM(6, LMConfig(width=8, n_layers=1, context=16))
    eos_lm.params["head.weight"].data[:] = 0
    eos_lm.params["head.bias"].data[:] = 0
    eos_lm.params["head.bias"].data[EOS] = 5.0
    assert generate_greedy(eos_lm.freeze(), MixedPrompt([BOS, GRAPH_SLOT]), 5) == []


def test_generate_never_emits_graph_slot():
    lm = FrozenLM(6, LMConfig(width=8, n_layers=1, context=16))
    lm.params["head.weight"].data[:] = 0
    lm.params["head.bias"].data[:] = 0
    lm.params["head.bias"].data[GRAPH_SLOT] = 9.0
    lm.params["head.bias"].data[5] = 1.0
    assert generate_greedy(lm.freeze(), MixedPrompt([BOS, GRAPH_SLOT]), 3) == [5, 5, 5]


def test_generate_respects_context(lm):
    with pytest.raises(LMError):
        generate_greedy(lm, MixedPrompt([BOS] * 30 + [GRAPH_SLOT]), 5)


def test_digest_properties(lm):
    d = freeze_digest(lm)
    assert d == freeze_digest(lm)
    other = FrozenLM(lm.vocab_size, lm.config)
    other.params["tok_emb"].data[3, 2] += 1e-3
    assert freeze_digest(other) != d


def test_checkpoint_round_trip(tmp_path, lm, tok):
    lm.save(tmp_path / "lm.kga", tok)
    back = FrozenLM.load(tmp_path / "lm.kga", tok)
    assert back.frozen and freeze_digest(back) == freeze_digest(lm)
    other = Tokenizer.from_corpus(["something else"])
    with pytest.raises(LMError, match="vocabulary"):
        FrozenLM.load(tmp_path / "lm.kga", other)


def test_pretrain_learns_a_copy_task():
    # sequence "<bos> a b a" : predict the repeat of the first token
    lm = FrozenLM(10, LMConfig(width=16, n_layers=1, context=8, seed=1))
    rng = np.random.default_rng(0)
    data = []
    for _ in range(200):
        a, b = (int(x) for x in rng.integers(4, 10, 2))
        data.append(([BOS, a, b, a, EOS], [0.0, 0.0, 1.0, 1.0]))
    losses = pretrain(lm, data, steps=300, batch_size=16, lr=1e-2)
    assert np.mean(losses[-20:]) < 0.25 * np.mean(losses[:20])
    lm.freeze()
    hits = [generate_greedy(lm, MixedPrompt([BOS, a, b, GRAPH_SLOT]), 1) == [a]
            for a in range(4, 10) for b in range(4, 10)]
    assert np.mean(hits) > 0.9


def test_pretrained_standard_lm_copies_first_graph_token(standard, standard_lm):
    from kgadapter.harness import PromptTemplate, assemble_prompt, parse_answer_list
    kg, _, test = standard
    lm, tokenizer, _ = standard_lm
    rng = np.random.default_rng(7)
    hits = 0
    for q in test:
        picks = rng.choice(kg.num_entities, size=4)
        soft = lm.embed_tokens([tokenizer.encode(kg.entities[e])[0] for e in picks])
        prompt = assemble_prompt(PromptTemplate(), q, tokenizer).with_soft(soft)
        answer = parse_answer_list(tokenizer.decode(generate_greedy(lm, prompt, 8)))
        hits += answer[:1] == [kg.entities[picks[0]]]
    assert hits / len(test) >= 0.9
