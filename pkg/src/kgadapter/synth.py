"""Seeded synthetic KGQA benchmarks.

Entities get pronounceable pseudo-word names; relations get dotted,
Freebase-style labels such as ``people.person.place_of_birth``. Each
question walks a gold relation link from an anchor, mentions the words of
every relation property it uses, and has exactly one terminal entity, so it
is answerable and its gold link is the unique best match for the lexical
scorer among links of the same length.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kg import KnowledgeGraph, enumerate_relation_links, instantiate_paths, load_triples
from .retrieval import LexicalScorer, Question, load_questions, question_to_json

DOMAINS = ["people", "film", "music", "location", "sports", "book", "business",
           "education", "medicine", "government", "travel", "food"]
TYPES = ["person", "artist", "team", "company", "country", "city", "drug", "school",
         "album", "author", "celebrity", "player", "region", "venue"]
PROPERTIES = ["place_of_birth", "nationality", "founder", "member_of", "capital", "spouse",
              "substance_abuse", "alma_mater", "headquarters", "genre", "award_won", "employer",
              "influenced_by", "treats", "produced_by", "located_in", "coach", "sibling",
              "parent_company", "language_spoken", "home_venue", "record_label", "mentor",
              "official_symbol"]
# one marker word per hop count beyond the first, so hop count is readable from the text
HOP_TEMPLATES = {
    1: "what is the {p1} of {a} ?",
    2: "what is the {p2} of the {p1} linked to {a} ?",
    3: "what is the {p3} of the {p2} of the {p1} reached via {a} ?",
    4: "what is the {p4} of the {p3} of the {p2} of the {p1} traced through {a} ?",
}
# up to 2 hops mirrors WebQSP-style data, up to 4 CWQ-style data
SUPPORTED_MAX_HOPS = (2, 4)
_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


class SynthError(ValueError):
    pass


@dataclass
class Benchmark:
    triples_tsv: str
    train_jsonl: str
    test_jsonl: str
    max_hops: int

    def graph(self) -> KnowledgeGraph:
        return load_triples(self.triples_tsv)

    def questions(self, kg: KnowledgeGraph | None = None) -> tuple[list[Question], list[Question]]:
        kg = kg or self.graph()
        return (load_questions(self.train_jsonl.splitlines(), kg),
                load_questions(self.test_jsonl.splitlines(), kg))

    def write(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "triples.tsv").write_text(self.triples_tsv, encoding="utf-8")
        (d / "train.jsonl").write_text(self.train_jsonl, encoding="utf-8")
        (d / "test.jsonl").write_text(self.test_jsonl, encoding="utf-8")
        (d / "meta.json").write_text(json.dumps({"max_hops": self.max_hops}) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, directory) -> "Benchmark":
        d = Path(directory)
        for name in ("triples.tsv", "train.jsonl", "test.jsonl"):
            if not (d / name).exists():
                raise FileNotFoundError(f"missing benchmark file: {d / name}")
        meta = json.loads((d / "meta.json").read_text()) if (d / "meta.json").exists() else {}
        return cls((d / "triples.tsv").read_text(encoding="utf-8"), (d / "train.jsonl").read_text(encoding="utf-8"),
                   (d / "test.jsonl").read_text(encoding="utf-8"), int(meta.get("max_hops", 2)))


def _pseudo_words(rng: np.random.Generator, n: int, taken: set[str]) -> list[str]:
    out: list[str] = []
    while len(out) < n:
        syllables = rng.integers(2, 4)
        word = "".join(rng.choice(list(_CONSONANTS)) + rng.choice(list(_VOWELS)) for _ in range(syllables))
        word += rng.choice(list(_CONSONANTS))
        if word not in taken:
            taken.add(word)
            out.append(word)
    return out


def _relation_labels(rng: np.random.Generator, n: int, taken: set[str]) -> tuple[list[str], list[str]]:
    props = list(PROPERTIES)
    if n > len(props):
        props += _pseudo_words(rng, n - len(props), taken)
    chosen = rng.permutation(len(props))[:n]
    labels, phrases = [], []
    for i in chosen:
        prop = props[i]
        labels.append(f"{rng.choice(DOMAINS)}.{rng.choice(TYPES)}.{prop}")
        phrases.append(prop.replace("_", " "))
    return labels, phrases


def gen_synthetic(seed: int, n_entities: int, n_relations: int, n_questions: int, max_hops: int,
                  n_test: int | None = None, out_degree: tuple[int, int] = (2, 4),
                  max_attempts: int = 500) -> Benchmark:
    """Random graph plus train/test questions; ``n_test`` defaults to a sixth of the questions."""
    if n_entities < 2 or n_relations < 1 or n_questions < 1:
        raise SynthError("need at least 2 entities, 1 relation and 1 question")
    if max_hops not in SUPPORTED_MAX_HOPS:
        raise SynthError(f"max_hops must be one of {SUPPORTED_MAX_HOPS}")
    if n_questions < max_hops:
        raise SynthError(f"{n_questions} questions cannot cover hop counts 1..{max_hops}")
    n_test = n_questions // 6 if n_test is None else n_test
    if not 0 <= n_test < n_questions:
        raise SynthError("n_test must leave at least one training question")
    rng = np.random.default_rng(seed)

    taken = set(DOMAINS) | set(TYPES) | {w for p in PROPERTIES for w in p.split("_")}
    taken |= {w for t in HOP_TEMPLATES.values() for w in t.split()}
    names = _pseudo_words(rng, n_entities, taken)
    rel_labels, rel_phrases = _relation_labels(rng, n_relations, taken)

    lo, hi = out_degree
    lines = []
    for h in range(n_entities):
        for _ in range(int(rng.integers(lo, hi + 1))):
            t = int(rng.integers(n_entities - 1))
            t += t >= h
            lines.append(f"{names[h]}\t{rel_labels[int(rng.integers(n_relations))]}\t{names[t]}\n")
    kg = load_triples(lines)
    scorer = LexicalScorer(kg)
    phrase_of = {kg.relation_id(lbl): ph for lbl, ph in zip(rel_labels, rel_phrases) if lbl in kg.relations}

    hops = np.array([1 + i % max_hops for i in range(n_questions)])
    rng.shuffle(hops)
    used: set[tuple] = set()
    records = []
    for h in hops:
        for _ in range(max_attempts):
            q = _try_question(kg, scorer, phrase_of, rng, int(h), used)
            if q is not None:
                records.append(q)
                break
        else:
            raise SynthError(f"could not build a unique {h}-hop question; graph too small or too sparse")

    train = records[:n_questions - n_test]
    test = records[n_questions - n_test:]
    dump = lambda qs: "".join(question_to_json(q, kg) + "\n" for q in qs)
    return Benchmark(kg.to_tsv(), dump(train), dump(test), max_hops)


def _try_question(kg, scorer, phrase_of, rng, h, used) -> Question | None:
    anchor = int(rng.integers(kg.num_entities))
    entity, link = anchor, []
    for _ in range(h):
        edges = kg.out_edges(entity)
        if not edges:
            return None
        r, entity = edges[int(rng.integers(len(edges)))]
        link.append(r)
    link = tuple(link)
    if (anchor, link) in used:
        return None
    terminals = {p.terminal for p in instantiate_paths(kg, anchor, link, cap=10 ** 6)}
    if len(terminals) != 1 or anchor in terminals:
        return None
    fields = {f"p{i + 1}": phrase_of[r] for i, r in enumerate(link)}
    text = HOP_TEMPLATES[h].format(a=kg.entities[anchor], **fields)
    q = Question(text, [anchor], [kg.entities[terminals.pop()]], h)
    rivals = [lk for lk in enumerate_relation_links(kg, anchor, h) if len(lk) == h]
    scores = dict(zip(rivals, scorer(q, rivals)))
    best = scores[link]
    if any(s >= best for lk, s in scores.items() if lk != link):
        return None
    used.add((anchor, link))
    return q


def marker_hop_dataset(seed: int, n: int = 200, max_hops: int = 2, length: tuple[int, int] = (4, 10)) -> list[Question]:
    """Filler-word questions whose hop label is set by a per-class marker token."""
    rng = np.random.default_rng(seed)
    fillers = _pseudo_words(rng, 60, set())
    markers = {h: f"marker{h}" for h in range(2, max_hops + 1)}
    out = []
    for i in range(n):
        h = 1 + i % max_hops
        words = list(rng.choice(fillers, size=int(rng.integers(*length))))
        if h > 1:
            words.insert(int(rng.integers(len(words) + 1)), markers[h])
        out.append(Question(" ".join(words), [0], [], h))
    return out
