import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from kgadapter import checks
from kgadapter import numerics as nx
from kgadapter.adapter import (PARAM_GROUPS, AdapterConfig, AdapterError, KnowledgeAdapter, consolidate,
                               fuse_text, struct_embed)
from kgadapter.kg import KnowledgeGraph, ReasoningPath
from kgadapter.numerics import Tensor

vectors = hnp.arrays(np.float32, 6, elements=st.floats(-100, 100, width=32))


def small(**kw) -> KnowledgeAdapter:
    cfg = AdapterConfig(**{"dim": 8, "hidden": 16, "lm_width": 12, "max_hops": 2, **kw})
    return KnowledgeAdapter(6, 3, cfg)


def test_struct_embed_zero_case():
    z = np.zeros(4)
    for mode in ("HplusRminusT", "HplusRplusT"):
        assert not struct_embed(z, z, z, mode).data.any()


@settings(max_examples=200, deadline=None)
@given(vectors, vectors, vectors)
def test_plus_mode_blind_to_reversal(h, r, t):
    a = struct_embed(h, r, t, "HplusRplusT").data
    b = struct_embed(t, r, h, "HplusRplusT").data
    assert a.tobytes() == b.tobytes()


@settings(max_examples=200, deadline=None)
@given(vectors, vectors, vectors)
def test_minus_mode_sees_reversal(h, r, t):
    a = struct_embed(h, r, t, "HplusRminusT").data
    b = struct_embed(t, r, h, "HplusRminusT").data
    assert np.array_equal(a, b) == np.array_equal(h, t)


def test_struct_embed_rejects_bad_input():
    with pytest.raises(AdapterError):
        struct_embed(np.ones(2), np.ones(3), np.ones(2))
    with pytest.raises(AdapterError):
        struct_embed(np.ones(2), np.ones(2), np.ones(2), "HtimesT")


def test_fuse_text():
    v = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(fuse_text([v]).data, v)
    assert not fuse_text([v, -v]).data.any()
    with pytest.raises(AdapterError):
        fuse_text([])


@settings(max_examples=50, deadline=None)
@given(st.lists(hnp.arrays(np.float64, 3, elements=st.floats(-10, 10)), min_size=1, max_size=5), st.randoms())
def test_fuse_text_permutation_invariant(vs, random):
    shuffled = list(vs)
    random.shuffle(shuffled)
    np.testing.assert_allclose(fuse_text(vs).data, fuse_text(shuffled).data, rtol=1e-5, atol=1e-5)


def test_consolidate():
    out = consolidate([1, 2], [3, 4], [5, 6]).data
    np.testing.assert_array_equal(out, [1, 2, 3, 4, 5, 6])
    assert not np.array_equal(consolidate([5, 6], [3, 4], [1, 2]).data, out)
    for d in (1, 4, 9):
        assert consolidate(np.ones(d), np.ones(d), np.ones(d)).shape == (3 * d,)


def test_embed_label_lookup():
    ad = small()
    v = ad.embed_label(0)
    assert v.shape == (8,)
    np.testing.assert_array_equal(v.data, ad.params["label_embedding"].data[0])
    np.testing.assert_array_equal(ad.embed_label(0).data, v.data)
    assert not np.array_equal(ad.embed_label(1).data, v.data)
    with pytest.raises(AdapterError):
        ad.embed_label(9)


def test_aggregate_struct_padding():
    ad = small()
    s = Tensor(np.random.default_rng(0).normal(size=8))
    w, b = ad.params["struct.weight"].data, ad.params["struct.bias"].data
    expected = np.concatenate([s.data, np.zeros(8)]) @ w + b
    np.testing.assert_allclose(ad.aggregate_struct([s]).data, expected, rtol=1e-5, atol=1e-6)
    ad.params["struct.bias"].data[:] = 0
    assert not ad.aggregate_struct([Tensor(np.zeros(8))] * 2).data.any()
    with pytest.raises(AdapterError):
        ad.aggregate_struct([s, s, s])


def test_structure_changes_fused_vector():
    ad = small()
    rng = np.random.default_rng(1)
    z_text = Tensor(rng.normal(size=24))
    a = ad.encode_knowledge(z_text, Tensor(rng.normal(size=8))).data
    b = ad.encode_knowledge(z_text, Tensor(rng.normal(size=8))).data
    assert a.shape == (8,) and not np.allclose(a, b)


def test_encode_knowledge_shape_errors():
    ad = small()
    with pytest.raises(AdapterError):
        ad.encode_knowledge(np.zeros(8), np.zeros(8))


def two_hop():
    return ReasoningPath(0, ((1, 2), (0, 3)))


def test_path_decomposition():
    p = two_hop()
    assert p.triples() == [(0, 1, 2), (2, 0, 3)]
    assert len(ReasoningPath(0, ((1, 2),)).triples()) == 1


def test_path_encoding_is_deterministic_and_batched():
    ad = small()
    paths = [two_hop(), ReasoningPath(4, ((2, 5),)), ReasoningPath(1, ((0, 0), (1, 1)))]
    batched = ad.encode_paths(paths).data
    for i, p in enumerate(paths):
        np.testing.assert_allclose(ad.encode_path(p).data, batched[i], rtol=1e-5, atol=1e-6)
    np.testing.assert_array_equal(ad.encode_paths(paths).data, batched)


def test_one_soft_token_per_path():
    ad = small()
    paths = [two_hop(), ReasoningPath(4, ((2, 5),)), ReasoningPath(1, ((0, 0),))]
    soft = ad.soft_prompt(paths).data
    assert soft.shape == (3, 12)
    for perm in itertools.permutations(range(3)):
        permuted = ad.soft_prompt([paths[i] for i in perm]).data
        np.testing.assert_allclose(permuted, soft[list(perm)], rtol=1e-5, atol=1e-6)
    assert ad.soft_prompt([]) is None


def test_paths_outside_limits_rejected():
    ad = small()
    with pytest.raises(AdapterError):
        ad.encode_paths([ReasoningPath(0, ((0, 1),) * 3)])
    with pytest.raises(AdapterError):
        ad.encode_paths([ReasoningPath(0, ((7, 1),))])
    with pytest.raises(AdapterError):
        ad.encode_paths([])


def test_no_struct_ignores_structure_group():
    ad = small(use_struct=False)
    params = ad.trainable()
    nx.backward(ad.soft_prompt([two_hop()]).sum())
    assert ad.params["struct.weight"].grad is None
    assert any(p.grad is not None and p.grad.any() for p in params)


def test_every_group_receives_gradient():
    ad = small()
    ad.trainable()
    w = np.random.default_rng(0).normal(size=(2, 12))
    nx.backward((ad.soft_prompt([two_hop(), ReasoningPath(3, ((1, 4),))]) * w).sum())
    for group, names in ad.groups().items():
        assert any(ad.params[n].grad is not None and ad.params[n].grad.any() for n in names), group
    assert set(ad.groups()) == set(PARAM_GROUPS)


def test_trainable_excludes_groups():
    ad = small()
    chosen = ad.trainable(exclude=("encoder",))
    names = {t.name for t in chosen}
    assert names and not any(n.startswith("encoder.") for n in names)


def test_adapter_gradients_match_finite_differences():
    assert checks.adapter_suite(cases=3, seed=5).ok


def test_checkpoint_round_trip(tmp_path, tiny_kg):
    ad = KnowledgeAdapter.for_graph(tiny_kg, AdapterConfig(dim=8, hidden=16, lm_width=8, mode="HplusRplusT"))
    ad.save(tmp_path / "a.kga")
    back = KnowledgeAdapter.load(tmp_path / "a.kga", tiny_kg)
    assert back.config == ad.config
    for name, t in ad.params.items():
        np.testing.assert_array_equal(back.params[name].data, t.data)
    other = KnowledgeGraph.from_labeled([("x", "r", "y")])
    with pytest.raises(AdapterError, match="hash"):
        KnowledgeAdapter.load(tmp_path / "a.kga", other)


def test_label_init_from_lm(tiny_kg):
    from kgadapter.lm import FrozenLM, LMConfig, Tokenizer
    tok = Tokenizer.from_corpus(list(tiny_kg.entities) + list(tiny_kg.relations))
    lm = FrozenLM(len(tok), LMConfig(width=8))
    ad = KnowledgeAdapter.for_graph(tiny_kg, AdapterConfig(dim=8, lm_width=8))
    ad.init_labels_from_lm(tiny_kg, lm, tok)
    bob = tiny_kg.entity_id("bob")
    np.testing.assert_allclose(ad.embed_label(bob).data, lm.params["tok_emb"].data[tok.encode("bob")[0]])
    with pytest.raises(AdapterError):
        KnowledgeAdapter.for_graph(tiny_kg, AdapterConfig(dim=4)).init_labels_from_lm(tiny_kg, lm, tok)


def test_adapter_smaller_than_lm(standard, standard_lm):
    kg, _, _ = standard
    lm, _, _ = standard_lm
    ad = KnowledgeAdapter.for_graph(kg, AdapterConfig(lm_width=lm.width))
    lm_count = sum(t.size for t in lm.params.values())
    print(f"adapter parameters {ad.num_parameters()}, LM parameters {lm_count}")
    assert 0 < ad.num_parameters() < lm_count
