"""Triple loading, vocabularies, inverse augmentation and adjacency indexes."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

INVERSE_SUFFIX = "^-1"


class TripleFormatError(ValueError):
    pass


class VocabError(KeyError):
    def __str__(self):
        return str(self.args[0])


@dataclass
class TripleFile:
    path: str
    rows: list[tuple[str, str, str]]


def load_triples(path: str) -> TripleFile:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"triple file not found: {path}")
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not all(parts):
                raise TripleFormatError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            rows.append((parts[0], parts[1], parts[2]))
    return TripleFile(path, rows)


@dataclass
class Vocab:
    entities: list[str] = field(default_factory=list)
    relations: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.entity_ids = {e: i for i, e in enumerate(self.entities)}
        self.relation_ids = {r: i for i, r in enumerate(self.relations)}
        if len(self.entity_ids) != len(self.entities) or len(self.relation_ids) != len(self.relations):
            raise ValueError("vocabulary contains duplicate strings")

    @classmethod
    def from_triples(cls, files: Iterable[TripleFile]) -> "Vocab":
        ents: dict[str, None] = {}
        rels: dict[str, None] = {}
        for f in files:
            for h, r, t in f.rows:
                ents.setdefault(h)
                ents.setdefault(t)
                rels.setdefault(r)
        return cls(list(ents), list(rels))

    def entity(self, name: str) -> int:
        try:
            return self.entity_ids[name]
        except KeyError:
            raise VocabError(f"unknown entity {name!r}") from None

    def relation(self, name: str) -> int:
        try:
            return self.relation_ids[name]
        except KeyError:
            raise VocabError(f"unknown relation {name!r}") from None


class KnowledgeGraph:
    """Inverse-augmented fact store.

    Facts ``0..nb-1`` are the deduplicated input triples; fact ``i + nb`` is
    the reverse of fact ``i`` and uses relation ``r + num_base_relations``.
    Adjacency is CSR-style: ``out_facts[out_ptr[e]:out_ptr[e+1]]`` lists the
    fact ids whose subject is ``e``.
    """

    def __init__(self, num_entities: int, num_base_relations: int, base_facts: np.ndarray):
        self.num_entities = int(num_entities)
        self.num_base_relations = int(num_base_relations)
        self.num_relations = 2 * self.num_base_relations
        base = np.asarray(base_facts, dtype=np.int64).reshape(-1, 3)
        inv = np.stack([base[:, 2], base[:, 1] + self.num_base_relations, base[:, 0]], axis=1)
        self.facts = np.concatenate([base, inv], axis=0)
        self.num_base_facts = len(base)
        self.heads = self.facts[:, 0]
        self.rels = self.facts[:, 1]
        self.tails = self.facts[:, 2]

        order = np.argsort(self.heads, kind="stable")
        self.out_facts = order
        self.out_ptr = np.zeros(self.num_entities + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.heads, minlength=self.num_entities), out=self.out_ptr[1:])

        order = np.argsort(self.rels, kind="stable")
        self.rel_facts = order
        self.rel_ptr = np.zeros(self.num_relations + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.rels, minlength=self.num_relations), out=self.rel_ptr[1:])

        self._index = None

    @property
    def num_facts(self) -> int:
        return len(self.facts)

    def inverse_relation(self, r: int) -> int:
        nb = self.num_base_relations
        return r + nb if r < nb else r - nb

    def inverse_fact(self, fid: int) -> int:
        nb = self.num_base_facts
        return fid + nb if fid < nb else fid - nb

    def adj_out(self, e: int) -> np.ndarray:
        return self.out_facts[self.out_ptr[e]:self.out_ptr[e + 1]]

    def adj_by_rel(self, r: int) -> np.ndarray:
        return self.rel_facts[self.rel_ptr[r]:self.rel_ptr[r + 1]]

    def fact_id(self, s: int, r: int, o: int) -> Optional[int]:
        if self._index is None:
            self._index = {tuple(f): i for i, f in enumerate(self.facts.tolist())}
        return self._index.get((s, r, o))

    def neighbors(self, e: int) -> np.ndarray:
        return self.tails[self.adj_out(e)]


def build_kg(train: TripleFile, vocab: Optional[Vocab] = None) -> tuple[KnowledgeGraph, Vocab]:
    """Build an inverse-augmented graph; with ``vocab`` every string must resolve."""
    if vocab is None:
        vocab = Vocab.from_triples([train])
    seen: dict[tuple[int, int, int], None] = {}
    for h, r, t in train.rows:
        seen.setdefault((vocab.entity(h), vocab.relation(r), vocab.entity(t)))
    base = np.array(list(seen), dtype=np.int64).reshape(-1, 3)
    kg = KnowledgeGraph(len(vocab.entities), len(vocab.relations), base)
    return kg, vocab


def encode_triples(f: TripleFile, vocab: Vocab) -> np.ndarray:
    return np.array([(vocab.entity(h), vocab.relation(r), vocab.entity(t)) for h, r, t in f.rows],
                    dtype=np.int64).reshape(-1, 3)


FilterSet = dict[tuple[int, int], set[int]]


def build_filter_set(splits: list[TripleFile], kg: KnowledgeGraph, vocab: Vocab) -> FilterSet:
    nb = kg.num_base_relations
    filt: FilterSet = {}
    for split in splits:
        for s, r, o in encode_triples(split, vocab).tolist():
            filt.setdefault((s, r), set()).add(o)
            filt.setdefault((o, r + nb), set()).add(s)
    return filt


def relation_name(vocab: Vocab, r: int) -> str:
    nb = len(vocab.relations)
    return vocab.relations[r] if r < nb else vocab.relations[r - nb] + INVERSE_SUFFIX


def parse_relation(vocab: Vocab, name: str) -> int:
    if name.endswith(INVERSE_SUFFIX) and name not in vocab.relation_ids:
        return vocab.relation(name[: -len(INVERSE_SUFFIX)]) + len(vocab.relations)
    return vocab.relation(name)
