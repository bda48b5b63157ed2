import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kgadapter.kg import KnowledgeGraph, LoadError, enumerate_relation_links, instantiate_paths
from kgadapter.retrieval import (FixedHops, HopClassifier, LexicalScorer, LMScorer, Question, RandomScorer,
                                 RetrievalError, ScoredLink, build_reasoning_graph, label_tokens,
                                 load_questions, predict_hops, question_to_json, score_links,
                                 train_hop_classifier)
from kgadapter.synth import marker_hop_dataset

from conftest import random_kg


def chain_kg():
    return KnowledgeGraph.from_labeled([("a", "r1", "b"), ("b", "r2", "c")])


def test_question_json_round_trip(tiny_kg):
    q = Question("who is the sibling of alice ?", [tiny_kg.entity_id("alice")], ["bob"], 1)
    (back,) = load_questions([question_to_json(q, tiny_kg)], tiny_kg)
    assert back == q


def test_load_questions_errors(tiny_kg):
    with pytest.raises(LoadError, match="line 2"):
        load_questions(['{"text": "x", "anchors": ["alice"]}', "{oops"], tiny_kg)
    with pytest.raises(LoadError):
        load_questions([json.dumps({"text": "x", "anchors": []})], tiny_kg)
    with pytest.raises(LoadError, match="nobody"):
        load_questions([json.dumps({"text": "x", "anchors": ["nobody"]})], tiny_kg)


# ------------------------------------------------------------ hop classifier

def test_question_encoding_is_mean_of_rows():
    clf = HopClassifier(["<unk>", "alpha", "beta"], max_hops=2, dim=4)
    rows = clf.params["embedding"].data
    np.testing.assert_allclose(clf.encode("alpha").data, rows[1])
    np.testing.assert_allclose(clf.encode("alpha beta").data, (rows[1] + rows[2]) / 2, rtol=1e-6)
    np.testing.assert_allclose(clf.encode("zzz qqq").data, rows[0])


def test_empty_question_is_an_error():
    clf = HopClassifier(["<unk>"], 2)
    with pytest.raises(RetrievalError):
        clf.encode("   ")


def _fixed_logits(values):
    clf = HopClassifier(["<unk>"], len(values), dim=1)
    clf.params["embedding"].data[:] = 0.0
    clf.params["bias"].data[:] = values
    return clf


def test_predict_argmax_and_tie_rule():
    assert _fixed_logits([2.0, -1.0]).predict("anything") == 1
    assert _fixed_logits([-1.0, 2.0]).predict("anything") == 2
    assert _fixed_logits([0.5, 0.5]).predict("anything") == 1
    np.testing.assert_allclose(_fixed_logits([0.0, 0.0]).probabilities("x"), [0.5, 0.5])


def test_marker_dataset_reaches_high_training_accuracy():
    data = marker_hop_dataset(0, n=200, max_hops=2)
    clf = train_hop_classifier(data, 2)
    assert clf.train_accuracy >= 0.95


@pytest.mark.parametrize("max_hops", [2, 4])
def test_marker_dataset_generalises(max_hops):
    data = marker_hop_dataset(3, n=400, max_hops=max_hops)
    clf = train_hop_classifier(data[:200], max_hops)
    held_out = data[200:]
    assert np.mean([clf.predict(q) == q.gold_hops for q in held_out]) >= 0.9


def test_case_study_question_gets_two_hops():
    train = [
        Question("what drugs did the actor abuse ?", [0], [], 2),
        Question("what substances did the singer abuse ?", [0], [], 2),
        Question("what drugs lindsay lohan abuse ?", [0], [], 2),
        Question("where was lindsay lohan born ?", [0], [], 1),
        Question("who is the spouse of the actor ?", [0], [], 1),
        Question("where was the singer born ?", [0], [], 1),
    ]
    clf = train_hop_classifier(train, 2)
    assert predict_hops(clf, Question("what drugs lindsay lohan abuse?", [0])) == 2


def test_training_rejects_bad_labels():
    with pytest.raises(RetrievalError):
        train_hop_classifier([Question("x", [0], [], None)], 2)
    with pytest.raises(RetrievalError):
        train_hop_classifier([Question("x", [0], [], 3)], 2)
    with pytest.raises(RetrievalError):
        train_hop_classifier([], 2)


def test_classifier_checkpoint_round_trip(tmp_path):
    data = marker_hop_dataset(0, n=40)
    clf = train_hop_classifier(data, 2)
    clf.save(tmp_path / "hop.kga")
    back = HopClassifier.load(tmp_path / "hop.kga")
    assert back.vocab == clf.vocab
    for q in data:
        np.testing.assert_array_equal(back.logits(q).data, clf.logits(q).data)


# ------------------------------------------------------------------- scoring

def test_label_tokens_split_on_dots_underscores_dashes():
    assert label_tokens("people.person.place_of-birth") == ["people", "person", "place", "of", "birth"]


def test_overlap_prefers_matching_relation():
    kg = KnowledgeGraph.from_labeled([("eric", "founded", "imvu"), ("eric", "born_in", "boston")])
    ranked = score_links(Question("who founded imvu", [0]), [(1,), (0,)], LexicalScorer(kg))
    assert ranked[0] == ScoredLink((0,), 1.0)
    assert ranked[1] == ScoredLink((1,), 0.0)


def test_ties_break_lexicographically_on_labels():
    kg = KnowledgeGraph.from_labeled([("a", "zeta", "b"), ("a", "alpha", "c"), ("a", "mid", "d")])
    ranked = score_links(Question("nothing relevant", [0]), [(0,), (1,), (2,)], LexicalScorer(kg))
    assert [kg.link_labels(s.link) for s in ranked] == [("alpha",), ("mid",), ("zeta",)]


def lohan_kg():
    return KnowledgeGraph.from_labeled([
        ("lindsay lohan", "base.popstra.celebrity.substance_abuse", "m.0abuse1"),
        ("m.0abuse1", "base.popstra.substance_abuse.substance", "cocaine"),
        ("m.0abuse1", "base.popstra.substance_abuse.abuser", "lindsay lohan"),
        ("lindsay lohan", "people.person.place_of_birth", "new york city"),
        ("new york city", "location.location.containedby", "new york"),
        ("lindsay lohan", "film.actor.film", "m.0perf"),
        ("m.0perf", "film.performance.film", "mean girls"),
        ("lindsay lohan", "people.person.parents", "dina lohan"),
        ("dina lohan", "people.person.place_of_birth", "long island"),
    ])


def test_case_study_links_both_retained():
    kg = lohan_kg()
    q = Question("what drugs lindsay lohan abuse?", [kg.entity_id("lindsay lohan")], ["Cocaine"])
    rg = build_reasoning_graph(kg, q, FixedHops(2), LexicalScorer(kg), k=3, exact_hops=True)
    chosen = {kg.link_labels(s.link) for s in rg.selected_links}
    assert ("base.popstra.celebrity.substance_abuse", "base.popstra.substance_abuse.substance") in chosen
    assert ("base.popstra.celebrity.substance_abuse", "base.popstra.substance_abuse.abuser") in chosen
    assert "cocaine" in {kg.entities[p.terminal] for p in rg.paths}


def test_random_scorer_is_seeded_per_question():
    kg = chain_kg()
    q = Question("x", [0])
    assert RandomScorer(kg, 1)(q, [(0,), (1,)]) == RandomScorer(kg, 1)(q, [(0,), (1,)])
    assert RandomScorer(kg, 1)(q, [(0,), (1,)]) != RandomScorer(kg, 2)(q, [(0,), (1,)])


def test_score_links_rejects_empty_and_non_finite():
    kg = chain_kg()
    with pytest.raises(RetrievalError):
        score_links(Question("x", [0]), [], LexicalScorer(kg))

    class Broken:
        def __init__(self):
            self.kg = kg

        def __call__(self, q, links):
            return [float("nan")] * len(links)

    with pytest.raises(RetrievalError):
        score_links(Question("x", [0]), [(0,)], Broken())


def test_lm_scorer_returns_finite_scores(standard, standard_lm):
    kg, train, _ = standard
    lm, tokenizer, _ = standard_lm
    q = train[0]
    links = enumerate_relation_links(kg, q.anchors[0], 1)
    scores = LMScorer(kg, lm, tokenizer)(q, links)
    assert len(scores) == len(links) and all(np.isfinite(scores))


# ----------------------------------------------------------- reasoning graph

def test_chain_reasoning_graph():
    kg = chain_kg()
    q = Question("the r1 then r2 of a", [0])
    rg = build_reasoning_graph(kg, q, FixedHops(2), LexicalScorer(kg), k=1, exact_hops=True)
    assert [kg.path_labels(p) for p in rg.paths] == [["a", "r1", "b", "r2", "c"]]
    assert rg.hops == 2 and not rg.empty


def test_top_k_cutoff():
    kg = KnowledgeGraph.from_labeled([("a", "r1", "b"), ("a", "r2", "c"), ("a", "r3", "d")])
    rg = build_reasoning_graph(kg, Question("x", [0]), FixedHops(1), LexicalScorer(kg), k=2)
    assert len(rg.selected_links) == 2 and rg.n_candidates == 3


def test_no_links_gives_empty_graph():
    kg = chain_kg()
    rg = build_reasoning_graph(kg, Question("x", [kg.entity_id("c")]), FixedHops(2), LexicalScorer(kg))
    assert rg.empty and rg.selected_links == []


def test_paths_capped_per_link():
    kg = KnowledgeGraph.from_labeled([("a", "r", f"t{i}") for i in range(10)])
    rg = build_reasoning_graph(kg, Question("r", [0]), FixedHops(1), LexicalScorer(kg), k=1, cap=3)
    assert len(rg.paths) == 3


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), k=st.integers(1, 5), hops=st.integers(1, 3))
def test_selected_links_are_brute_force_top_k(seed, k, hops):
    rng = np.random.default_rng(seed)
    kg = random_kg(rng)
    words = rng.choice([f"r{i}" for i in range(kg.num_relations)] + ["foo", "bar"], size=3)
    q = Question(" ".join(words), [0])
    scorer = LexicalScorer(kg)
    rg = build_reasoning_graph(kg, q, FixedHops(hops), scorer, k=k)
    links = enumerate_relation_links(kg, 0, hops)
    if not links:
        assert rg.empty
        return
    scored = sorted(((-s, kg.link_labels(l)) for l, s in zip(links, scorer(q, links))))
    assert [(-s.score, kg.link_labels(s.link)) for s in rg.selected_links] == scored[:k]
    for s in rg.selected_links:
        for p in instantiate_paths(kg, 0, s.link, 8):
            assert p in rg.paths
