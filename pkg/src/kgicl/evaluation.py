"""Filtered ranking, MRR / Hits@10 reports and prompt-similarity export."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff.tape import Tape
from .kg import FilterSet, KnowledgeGraph, Vocab, parse_relation, relation_name
from .model import KGICLModel, Query
from .prompts import PromptCache

RECORD_HEADER = ["dataset", "split", "direction", "query_head", "query_relation", "target", "rank"]
AGGREGATE_HEADER = ["dataset", "mrr", "hits10", "num_queries"]


def filtered_rank(scores: np.ndarray, target: int, filtered: Optional[set] = None) -> float:
    """Tie-averaged rank of ``target`` among entities not in ``filtered``."""
    filtered = filtered or set()
    if target in filtered:
        raise ValueError(f"target {target} is in the filter set")
    scores = np.asarray(scores)
    keep = np.ones(len(scores), dtype=bool)
    if filtered:
        keep[np.fromiter(filtered, dtype=np.int64)] = False
    cand = scores[keep]
    t = scores[target]
    return float(np.sum(cand > t) + (np.sum(cand == t) + 1) / 2.0)


@dataclass
class RankRecord:
    dataset: str
    split: str
    direction: str
    head: str
    relation: str
    target: str
    rank: float


@dataclass
class EvalReport:
    records: list[RankRecord] = field(default_factory=list)
    unrankable: dict[str, int] = field(default_factory=dict)

    def aggregates(self) -> dict[str, dict]:
        out: dict[str, dict] = {}
        for name in dict.fromkeys(r.dataset for r in self.records):
            ranks = np.array([r.rank for r in self.records if r.dataset == name])
            out[name] = {"mrr": float(np.mean(1.0 / ranks)), "hits10": float(np.mean(ranks <= 10)),
                         "num_queries": len(ranks)}
        return out

    def mrr(self, dataset: Optional[str] = None) -> float:
        ranks = np.array([r.rank for r in self.records if dataset is None or r.dataset == dataset])
        return float(np.mean(1.0 / ranks)) if len(ranks) else 0.0

    def hits10(self, dataset: Optional[str] = None) -> float:
        ranks = np.array([r.rank for r in self.records if dataset is None or r.dataset == dataset])
        return float(np.mean(ranks <= 10)) if len(ranks) else 0.0

    def records_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RECORD_HEADER)
        for r in self.records:
            w.writerow([r.dataset, r.split, r.direction, r.head, r.relation, r.target, repr(r.rank)])
        return buf.getvalue()

    def aggregate_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(AGGREGATE_HEADER)
        for name, agg in self.aggregates().items():
            w.writerow([name, f"{agg['mrr']:.6f}", f"{agg['hits10']:.6f}", agg["num_queries"]])
        return buf.getvalue()


def directed_queries(triples: np.ndarray, num_base_relations: int):
    """Both query directions for each triple: (s, r, o) and (o, r^-1, s)."""
    out = []
    for s, r, o in np.asarray(triples).reshape(-1, 3).tolist():
        out.append(("tail", s, r, o))
        out.append(("head", o, r + num_base_relations, s))
    return out


def evaluate(model: KGICLModel, kg: KnowledgeGraph, vocab: Vocab, cache: PromptCache,
             triples: np.ndarray, filters: FilterSet, dataset: str = "data", split: str = "test",
             batch_size: int = 32, seed: int = 0) -> EvalReport:
    report = EvalReport()
    queries = directed_queries(triples, kg.num_base_relations)
    ranks = [0.0] * len(queries)
    order = sorted(range(len(queries)), key=lambda i: (queries[i][2], i))
    rankable = [i for i in order if cache.has(queries[i][2])]
    report.unrankable[dataset] = len(queries) - len(rankable)
    for i in order:
        if not cache.has(queries[i][2]):
            _, s, q, o = queries[i]
            n_cand = kg.num_entities - len(filters.get((s, q), set()) - {o})
            ranks[i] = (n_cand + 1) / 2.0
    rng = np.random.default_rng(seed)
    for start in range(0, len(rankable), batch_size):
        idx = rankable[start:start + batch_size]
        batch = [Query(queries[i][1], queries[i][2], queries[i][3]) for i in idx]
        tape = Tape()
        scores, _ = model.score(tape, kg, batch, cache.prompts, rng=rng)
        S = scores.data
        for row, i in enumerate(idx):
            _, s, q, o = queries[i]
            ranks[i] = filtered_rank(S[row], o, filters.get((s, q), set()) - {o})
    for (direction, s, q, o), rank in zip(queries, ranks):
        report.records.append(RankRecord(dataset, split, direction, vocab.entities[s],
                                         relation_name(vocab, q), vocab.entities[o], rank))
    return report


def prompt_rows(model: KGICLModel, kg: KnowledgeGraph, cache: PromptCache,
                relations: Sequence[int]) -> np.ndarray:
    """Each relation's own row of its mean prompt representation, shape (len(relations), d)."""
    out = np.zeros((len(relations), model.cfg.d))
    present = [i for i, r in enumerate(relations) if cache.has(r)]
    if present:
        tape = Tape()
        P = model.leaves(tape)
        rels = [relations[i] for i in present]
        hbar = model.prompt_matrix(tape, P, kg, rels, [cache.get(r) for r in rels],
                                   rng=np.random.default_rng(0)).data
        R = kg.num_relations
        for j, i in enumerate(present):
            out[i] = hbar[j * R + relations[i]]
    return out


def cosine_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    sim = A @ B.T
    denom = np.outer(na, nb)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(denom > 0, sim / np.where(denom > 0, denom, 1.0), 0.0)
    return out


def export_prompt_similarity(model: KGICLModel, a: tuple[KnowledgeGraph, Vocab, PromptCache],
                             b: tuple[KnowledgeGraph, Vocab, PromptCache],
                             rel_names_a: Optional[Sequence[str]] = None,
                             rel_names_b: Optional[Sequence[str]] = None) -> str:
    """CSV of cosine similarities between prompt rows; rows are A's relations, columns B's."""
    def resolve(side, names):
        kg, vocab, _ = side
        if names is None:
            ids = list(range(kg.num_base_relations))
        else:
            ids = [parse_relation(vocab, n) for n in names]
        return ids, [relation_name(vocab, r) for r in ids]

    ids_a, names_a = resolve(a, rel_names_a)
    ids_b, names_b = resolve(b, rel_names_b)
    sim = cosine_matrix(prompt_rows(model, a[0], a[2], ids_a), prompt_rows(model, b[0], b[2], ids_b))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["relation"] + names_b)
    for name, row in zip(names_a, sim):
        w.writerow([name] + [f"{x:.6f}" for x in row])
    return buf.getvalue()
