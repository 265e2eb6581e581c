"""Example sampling, prompt-graph extraction and the unified tokenizer."""
from __future__ import annotations

import json
import os
from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .kg import KnowledgeGraph

VARIANTS = ("neighbor_and_path", "neighbor", "path")
DEFAULT_FACT_CAP = 4096
CACHE_FORMAT = "kgicl-prompt-cache/1"


class NoExamplesError(ValueError):
    pass


@dataclass(frozen=True)
class ExampleFact:
    u: int
    q: int
    v: int
    fact_id: int


@dataclass
class ExampleSet:
    q: int
    examples: list[ExampleFact]


@dataclass
class PromptGraph:
    entities: np.ndarray   # sorted entity ids
    facts: np.ndarray      # (T, 3) triples, kg ids
    relations: np.ndarray  # sorted relation ids appearing in facts
    example: ExampleFact


@dataclass
class TokenizedPromptGraph:
    entities: np.ndarray
    tokens: np.ndarray     # (n, 2) clamped distance pairs
    facts: np.ndarray
    relations: np.ndarray
    flags: np.ndarray      # 1 where relation == example.q
    example: ExampleFact
    k: int

    def token_ids(self) -> np.ndarray:
        return self.tokens[:, 0] * (self.k + 1) + self.tokens[:, 1]

    def to_json(self) -> dict:
        ex = self.example
        return {"example": [ex.u, ex.q, ex.v, ex.fact_id], "entities": self.entities.tolist(),
                "tokens": self.tokens.tolist(), "facts": self.facts.tolist(),
                "relations": self.relations.tolist(), "flags": self.flags.tolist()}

    @classmethod
    def from_json(cls, d: dict, k: int) -> "TokenizedPromptGraph":
        return cls(np.array(d["entities"], dtype=np.int64),
                   np.array(d["tokens"], dtype=np.int64).reshape(-1, 2),
                   np.array(d["facts"], dtype=np.int64).reshape(-1, 3),
                   np.array(d["relations"], dtype=np.int64),
                   np.array(d["flags"], dtype=np.int64),
                   ExampleFact(*d["example"]), k)


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def sample_examples(kg: KnowledgeGraph, q: int, M: int, seed: int,
                    exclude: Optional[int] = None) -> ExampleSet:
    """Draw M facts of relation q uniformly; with replacement only when the pool is smaller than M."""
    pool = kg.adj_by_rel(q)
    if exclude is not None:
        pool = pool[pool != exclude]
    if len(pool) == 0:
        raise NoExamplesError(f"relation {q} has no example facts")
    rng = np.random.default_rng(seed)
    picks = rng.choice(pool, size=M, replace=len(pool) < M)
    facts = kg.facts
    return ExampleSet(q, [ExampleFact(int(facts[f, 0]), q, int(facts[f, 2]), int(f)) for f in picks])


def bfs_distances(pg_facts: np.ndarray, source: int, cap: int) -> dict[int, int]:
    """Hop distances from ``source`` along the given directed facts, up to ``cap``."""
    adj: dict[int, list[int]] = {}
    for s, _, o in np.asarray(pg_facts).reshape(-1, 3).tolist():
        adj.setdefault(s, []).append(o)
    dist = {source: 0}
    queue = deque([source])
    while queue:
        x = queue.popleft()
        d = dist[x]
        if d >= cap:
            continue
        for y in adj.get(x, ()):
            if y not in dist:
                dist[y] = d + 1
                queue.append(y)
    return dist


def kg_bfs(kg: KnowledgeGraph, source: int, cap: int) -> np.ndarray:
    """Distances from ``source`` over the whole graph; -1 beyond ``cap`` or unreachable."""
    dist = np.full(kg.num_entities, -1, dtype=np.int64)
    dist[source] = 0
    frontier = np.array([source], dtype=np.int64)
    for d in range(1, cap + 1):
        if frontier.size == 0:
            break
        starts, ends = kg.out_ptr[frontier], kg.out_ptr[frontier + 1]
        fids = kg.out_facts[_ranges(starts, ends)]
        nxt = np.unique(kg.tails[fids])
        nxt = nxt[dist[nxt] < 0]
        dist[nxt] = d
        frontier = nxt
    return dist


def _ranges(starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    lens = ends - starts
    total = int(lens.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    offs = np.repeat(starts - np.r_[0, np.cumsum(lens)[:-1]], lens)
    return np.arange(total, dtype=np.int64) + offs


def extract_prompt_graph(kg: KnowledgeGraph, c: ExampleFact, k: int = 3,
                         variant: str = "neighbor_and_path", cap: int = DEFAULT_FACT_CAP,
                         seed: int = 0) -> PromptGraph:
    if variant not in VARIANTS:
        raise ValueError(f"unknown prompt variant {variant!r}")
    members = np.zeros(kg.num_entities, dtype=bool)
    if variant in ("neighbor_and_path", "neighbor"):
        members[kg.neighbors(c.u)] = True
        members[kg.neighbors(c.v)] = True
    if variant in ("neighbor_and_path", "path"):
        du, dv = kg_bfs(kg, c.u, k), kg_bfs(kg, c.v, k)
        members |= (du >= 0) & (dv >= 0) & (du + dv <= k)
    members[c.u] = members[c.v] = True
    entities = np.flatnonzero(members)

    starts, ends = kg.out_ptr[entities], kg.out_ptr[entities + 1]
    fids = kg.out_facts[_ranges(starts, ends)]
    fids = np.sort(fids[members[kg.tails[fids]]])
    if len(fids) > cap:
        keep = {c.fact_id, kg.inverse_fact(c.fact_id)}
        must = np.array(sorted(keep), dtype=np.int64)
        rest = fids[~np.isin(fids, must)]
        rng = np.random.default_rng(derive_seed(seed, c.fact_id))
        chosen = rng.choice(rest, size=max(cap - len(must), 0), replace=False)
        fids = np.sort(np.concatenate([must, chosen]))
    facts = kg.facts[fids]
    return PromptGraph(entities, facts, np.unique(facts[:, 1]), c)


def tokenize(pg: PromptGraph, k: int = 3) -> TokenizedPromptGraph:
    c = pg.example
    du = bfs_distances(pg.facts, c.u, k)
    dv = bfs_distances(pg.facts, c.v, k)
    tokens = np.array([[du.get(e, k), dv.get(e, k)] for e in pg.entities.tolist()],
                      dtype=np.int64).reshape(-1, 2)
    flags = (pg.relations == c.q).astype(np.int64)
    return TokenizedPromptGraph(pg.entities, tokens, pg.facts, pg.relations, flags, c, k)


def build_prompt(kg: KnowledgeGraph, c: ExampleFact, k: int, variant: str,
                 cap: int, seed: int) -> TokenizedPromptGraph:
    return tokenize(extract_prompt_graph(kg, c, k, variant, cap, seed), k)


class PromptCache:
    """Per-relation tokenized prompt graphs for one message graph, sampled once."""

    def __init__(self, k: int, shots: int, seed: int, variant: str, cap: int,
                 prompts: Optional[dict[int, list[TokenizedPromptGraph]]] = None):
        self.k, self.shots, self.seed, self.variant, self.cap = k, shots, seed, variant, cap
        self.prompts = prompts if prompts is not None else {}

    @classmethod
    def build(cls, kg: KnowledgeGraph, k: int = 3, shots: int = 5, seed: int = 0,
              variant: str = "neighbor_and_path", cap: int = DEFAULT_FACT_CAP) -> "PromptCache":
        cache = cls(k, shots, seed, variant, cap)
        for q in range(kg.num_relations):
            if kg.rel_ptr[q + 1] > kg.rel_ptr[q]:
                cache.prompts[q] = cache._sample(kg, q)
        return cache

    def _sample(self, kg, q, exclude=None, salt=0):
        ex = sample_examples(kg, q, self.shots, derive_seed(self.seed, q, salt), exclude)
        return [build_prompt(kg, c, self.k, self.variant, self.cap, self.seed) for c in ex.examples]

    def has(self, q: int) -> bool:
        return q in self.prompts

    def get(self, q: int) -> list[TokenizedPromptGraph]:
        return self.prompts[q]

    def for_query(self, kg: KnowledgeGraph, q: int, query_fact: Optional[int],
                  salt: int) -> list[TokenizedPromptGraph]:
        """Cached prompts, with any example equal to the query fact swapped for a fresh draw."""
        graphs = self.prompts[q]
        if query_fact is None or all(g.example.fact_id != query_fact for g in graphs):
            return graphs
        out = list(graphs)
        try:
            fresh = sample_examples(kg, q, self.shots, derive_seed(self.seed, q, salt + 1),
                                    exclude=query_fact).examples
        except NoExamplesError:
            return graphs
        for i, g in enumerate(graphs):
            if g.example.fact_id == query_fact:
                out[i] = build_prompt(kg, fresh[i], self.k, self.variant, self.cap, self.seed)
        return out

    def matches(self, k, shots, seed, variant, cap) -> bool:
        return (self.k, self.shots, self.seed, self.variant, self.cap) == (k, shots, seed, variant, cap)

    def to_json(self) -> dict:
        return {"k": self.k, "shots": self.shots, "seed": self.seed, "variant": self.variant,
                "cap": self.cap,
                "relations": {str(q): [g.to_json() for g in gs] for q, gs in sorted(self.prompts.items())}}

    @classmethod
    def from_json(cls, d: dict) -> "PromptCache":
        k = d["k"]
        prompts = {int(q): [TokenizedPromptGraph.from_json(g, k) for g in gs]
                   for q, gs in d["relations"].items()}
        return cls(k, d["shots"], d["seed"], d["variant"], d["cap"], prompts)


CACHE_FILE = "prompt_cache.json"


def save_prompt_caches(caches: dict[str, PromptCache], path: str) -> None:
    doc = {"format": CACHE_FORMAT, "graphs": {name: c.to_json() for name, c in sorted(caches.items())}}
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, separators=(",", ":"), sort_keys=True)
    os.replace(tmp, path)


def load_prompt_caches(path: str) -> dict[str, PromptCache]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CACHE_FORMAT:
        raise ValueError(f"{path}: unsupported prompt cache format {doc.get('format')!r}")
    return {name: PromptCache.from_json(c) for name, c in doc["graphs"].items()}
