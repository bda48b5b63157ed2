"""Immutable triple store with relation-first adjacency indices."""
from __future__ import annotations

import hashlib
import operator
from dataclasses import dataclass
from typing import Iterable, NamedTuple

# A relation link is an ordered sequence of relation ids, e.g. (3, 7).
RelationLink = tuple[int, ...]


class LoadError(ValueError):
    pass


class UnknownEntityError(KeyError):
    def __str__(self) -> str:
        return str(self.args[0])


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


@dataclass(frozen=True)
class ReasoningPath:
    """A concrete walk ``origin -r1-> e1 -r2-> e2 ...`` through the graph."""

    origin: int
    steps: tuple[tuple[int, int], ...]

    @property
    def relations(self) -> RelationLink:
        return tuple(r for r, _ in self.steps)

    @property
    def entities(self) -> tuple[int, ...]:
        return (self.origin,) + tuple(e for _, e in self.steps)

    @property
    def terminal(self) -> int:
        return self.steps[-1][1] if self.steps else self.origin

    def triples(self) -> list[Triple]:
        ents = self.entities
        return [Triple(ents[i], r, ents[i + 1]) for i, (r, _) in enumerate(self.steps)]

    def __len__(self) -> int:
        return len(self.steps)


class KnowledgeGraph:
    """Entity/relation vocabularies plus deduplicated triples.

    Ids are dense and assigned in first-appearance order. ``out_edges(e)``
    lists ``(relation, tail)`` pairs sorted by relation then tail, and
    ``tails(e, r)`` is the relation-first view used by path search.
    """

    def __init__(self, entities: Iterable[str], relations: Iterable[str],
                 triples: Iterable[tuple[int, int, int]]):
        self.entities: tuple[str, ...] = tuple(entities)
        self.relations: tuple[str, ...] = tuple(relations)
        self._entity_ids = {label: i for i, label in enumerate(self.entities)}
        self._relation_ids = {label: i for i, label in enumerate(self.relations)}
        if len(self._entity_ids) != len(self.entities):
            raise ValueError("duplicate entity label")
        if len(self._relation_ids) != len(self.relations):
            raise ValueError("duplicate relation label")

        ordered: dict[Triple, None] = {}
        for h, r, t in triples:
            tr = Triple(int(h), int(r), int(t))
            if not (0 <= tr.head < len(self.entities) and 0 <= tr.tail < len(self.entities)):
                raise ValueError(f"triple {tr} references an unknown entity")
            if not 0 <= tr.relation < len(self.relations):
                raise ValueError(f"triple {tr} references an unknown relation")
            ordered.setdefault(tr, None)
        self.triples: tuple[Triple, ...] = tuple(ordered)
        self._triple_set = frozenset(self.triples)

        out: dict[int, list[tuple[int, int]]] = {}
        for h, r, t in self.triples:
            out.setdefault(h, []).append((r, t))
        self._out = {h: tuple(sorted(edges)) for h, edges in out.items()}
        by_rel: dict[tuple[int, int], list[int]] = {}
        for h, edges in self._out.items():
            for r, t in edges:
                by_rel.setdefault((h, r), []).append(t)
        self._by_rel = {key: tuple(ts) for key, ts in by_rel.items()}

    @classmethod
    def from_labeled(cls, triples: Iterable[tuple[str, str, str]]) -> "KnowledgeGraph":
        ents: dict[str, int] = {}
        rels: dict[str, int] = {}
        ids = []
        for h, r, t in triples:
            hid = ents.setdefault(h, len(ents))
            rid = rels.setdefault(r, len(rels))
            tid = ents.setdefault(t, len(ents))
            ids.append((hid, rid, tid))
        return cls(ents, rels, ids)

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    def entity_id(self, label: str) -> int:
        try:
            return self._entity_ids[label]
        except KeyError:
            raise UnknownEntityError(f"unknown entity {label!r}") from None

    def relation_id(self, label: str) -> int:
        try:
            return self._relation_ids[label]
        except KeyError:
            raise UnknownEntityError(f"unknown relation {label!r}") from None

    def check_entity(self, entity: int) -> None:
        try:
            ok = 0 <= operator.index(entity) < len(self.entities)
        except TypeError:
            ok = False
        if not ok:
            raise UnknownEntityError(f"unknown entity id {entity!r}")

    def has_triple(self, head: int, relation: int, tail: int) -> bool:
        return Triple(head, relation, tail) in self._triple_set

    def out_edges(self, entity: int) -> tuple[tuple[int, int], ...]:
        return self._out.get(entity, ())

    def tails(self, entity: int, relation: int) -> tuple[int, ...]:
        return self._by_rel.get((entity, relation), ())

    def link_labels(self, link: RelationLink) -> tuple[str, ...]:
        return tuple(self.relations[r] for r in link)

    def path_labels(self, path: ReasoningPath) -> list[str]:
        out = [self.entities[path.origin]]
        for r, e in path.steps:
            out += [self.relations[r], self.entities[e]]
        return out

    def is_valid_path(self, path: ReasoningPath) -> bool:
        return all(self.has_triple(*tr) for tr in path.triples())

    def vocab_hash(self) -> str:
        h = hashlib.sha256()
        for label in self.entities:
            h.update(b"E" + label.encode("utf-8") + b"\0")
        for label in self.relations:
            h.update(b"R" + label.encode("utf-8") + b"\0")
        return h.hexdigest()[:16]

    def to_tsv(self) -> str:
        return "".join(f"{self.entities[h]}\t{self.relations[r]}\t{self.entities[t]}\n"
                       for h, r, t in self.triples)

    def __eq__(self, other) -> bool:
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return (self.entities, self.relations, self.triples) == (other.entities, other.relations, other.triples)

    def __hash__(self):
        return hash((self.entities, self.relations, self.triples))

    def __repr__(self) -> str:
        return (f"KnowledgeGraph({self.num_entities} entities, {self.num_relations} relations, "
                f"{len(self.triples)} triples)")


def load_triples(source) -> KnowledgeGraph:
    """Parse ``head<TAB>relation<TAB>tail`` lines from a text stream or string."""
    lines = source.splitlines() if isinstance(source, str) else source
    labeled = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n")
        if line.endswith("\r"):
            line = line[:-1]
        if not line:
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise LoadError(f"line {lineno}: expected 3 tab-separated fields, got {len(fields)}")
        if any(not f for f in fields):
            raise LoadError(f"line {lineno}: empty field")
        labeled.append(tuple(fields))
    return KnowledgeGraph.from_labeled(labeled)


def enumerate_relation_links(kg: KnowledgeGraph, anchor: int, max_depth: int) -> list[RelationLink]:
    """All relation sequences of length 1..max_depth realised from ``anchor``.

    Breadth-first over relation sequences: each frontier maps a link to the set
    of entities it reaches. Entities may be revisited; only depth bounds the
    search. Output is sorted by length, then lexicographically.
    """
    kg.check_entity(anchor)
    if max_depth < 1:
        raise ValueError(f"max_depth must be >= 1, got {max_depth}")
    found: list[RelationLink] = []
    frontier: dict[RelationLink, set[int]] = {(): {anchor}}
    for _ in range(max_depth):
        nxt: dict[RelationLink, set[int]] = {}
        for link, reached in frontier.items():
            for e in reached:
                for r, t in kg.out_edges(e):
                    nxt.setdefault(link + (r,), set()).add(t)
        if not nxt:
            break
        found.extend(sorted(nxt))
        frontier = nxt
    return found


def instantiate_paths(kg: KnowledgeGraph, anchor: int, link: RelationLink, cap: int) -> list[ReasoningPath]:
    """Up to ``cap`` walks from ``anchor`` following ``link``, depth-first in index order."""
    kg.check_entity(anchor)
    if not link:
        raise ValueError("relation link must be non-empty")
    if cap < 1:
        raise ValueError(f"cap must be positive, got {cap}")
    paths: list[ReasoningPath] = []

    def walk(entity: int, depth: int, steps: tuple) -> None:
        if len(paths) >= cap:
            return
        if depth == len(link):
            paths.append(ReasoningPath(anchor, steps))
            return
        r = link[depth]
        for t in kg.tails(entity, r):
            walk(t, depth + 1, steps + ((r, t),))
            if len(paths) >= cap:
                return

    walk(anchor, 0, ())
    return paths
