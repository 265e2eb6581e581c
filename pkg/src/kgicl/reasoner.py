"""Conditional hop-by-hop message passing over the full KG.

A batch of queries ``(s, q)`` is run together: entity state is a stacked
``(B * |E|, d)`` matrix and relation state a ``(G * |R|, d)`` matrix, one
block per prompt group. Only frontier entities are ever written, so rows
outside the frontier stay exactly zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import ops
from .autodiff.tape import Tape, Tensor
from .kg import KnowledgeGraph
from .prompts import _ranges


@dataclass
class Frontier:
    """Per-layer reached sets and the facts that carry messages into layer l+1."""
    layers: list[np.ndarray]        # L^(0..N), sorted entity ids
    edges: list[np.ndarray]         # fact ids with subject in L^(l), one array per layer


def compute_frontier(kg: KnowledgeGraph, s: int, num_layers: int,
                     masked: Optional[Sequence[int]] = None) -> Frontier:
    reached = np.zeros(kg.num_entities, dtype=bool)
    reached[s] = True
    banned = np.zeros(kg.num_facts, dtype=bool)
    if masked is not None and len(masked):
        banned[np.asarray(masked, dtype=np.int64)] = True
    layers = [np.array([s], dtype=np.int64)]
    edges = []
    for _ in range(num_layers):
        cur = layers[-1]
        fids = kg.out_facts[_ranges(kg.out_ptr[cur], kg.out_ptr[cur + 1])]
        fids = np.sort(fids[~banned[fids]])
        edges.append(fids)
        reached[kg.tails[fids]] = True
        layers.append(np.flatnonzero(reached))
    return Frontier(layers, edges)


@dataclass
class ReasonerTrace:
    entity_states: list[np.ndarray] = field(default_factory=list)   # V_E^(l), (B*|E|, d)
    frontiers: list[Frontier] = field(default_factory=list)


def init_kg_reps(hbar: Tensor, subjects: np.ndarray, qrows: np.ndarray, num_entities: int) -> Tensor:
    """V_E^(0): the subject row of each query takes its query relation's prompt row."""
    B = len(subjects)
    if np.any(subjects < 0) or np.any(subjects >= num_entities):
        raise IndexError("subject entity out of range")
    if np.any(qrows < 0) or np.any(qrows >= hbar.shape[0]):
        raise IndexError("query relation out of range")
    glob = np.arange(B, dtype=np.int64) * num_entities + subjects
    return ops.scatter_rows(ops.gather_rows(hbar, qrows), glob, B * num_entities)


def update_relations(vr: Tensor, P: dict[str, Tensor], layer: int) -> Tensor:
    pre = f"kg.layer{layer}."
    h = ops.relu(ops.matmul(vr, P[pre + "w_rel"], trans_b=True))
    return ops.layer_norm(ops.add(vr, h), P[pre + "rel_ln.gain"], P[pre + "rel_ln.bias"])


def kg_layer(kg: KnowledgeGraph, ve: Tensor, vr_next: Tensor, frontiers: Sequence[Frontier],
             layer: int, subjects: np.ndarray, group_of: np.ndarray, queries_q: np.ndarray,
             P: dict[str, Tensor]) -> Tensor:
    """Entity step of one layer; ``vr_next`` is the already-updated relation state."""
    pre = f"kg.layer{layer}."
    E, R = kg.num_entities, kg.num_relations
    B = len(subjects)
    src, rel, seg, comp_glob, self_seg = [], [], [], [], []
    offset = 0
    for b, fr in enumerate(frontiers):
        fids = fr.edges[layer]
        nxt = fr.layers[layer + 1]
        src.append(kg.heads[fids] + b * E)
        rel.append(kg.rels[fids] + group_of[b] * R)
        seg.append(np.searchsorted(nxt, kg.tails[fids]) + offset)
        comp_glob.append(nxt + b * E)
        self_seg.append(np.searchsorted(nxt, subjects[b]) + offset)
        offset += len(nxt)
    src, rel, seg = np.concatenate(src), np.concatenate(rel), np.concatenate(seg)
    comp_glob = np.concatenate(comp_glob)
    self_seg = np.array(self_seg, dtype=np.int64)
    edge_q = np.repeat(group_of * R + queries_q, [len(fr.edges[layer]) for fr in frontiers])

    # P_r, P_q and W_msg act on relation rows before the per-edge gather
    x_rows = ops.gather_rows(ve, src)
    r_rows = ops.gather_rows(vr_next, rel)
    gate_pre = ops.add(ops.add(ops.matmul(x_rows, P[pre + "p_s"], trans_b=True),
                               ops.gather_rows(ops.matmul(vr_next, P[pre + "p_r"], trans_b=True), rel)),
                       ops.gather_rows(ops.matmul(vr_next, P[pre + "p_q"], trans_b=True), edge_q))
    alpha = ops.sigmoid(ops.matmul(gate_pre, P[pre + "a_row"], trans_b=True))
    msg = ops.scale_rows(ops.matmul(ops.add(x_rows, r_rows), P[pre + "w_msg"], trans_b=True), alpha)

    n = offset
    total = ops.scatter_rows(msg, seg, n)
    # the subject also receives its own previous state
    self_rows = ops.gather_rows(ve, np.arange(B, dtype=np.int64) * E + subjects)
    total = ops.add(total, ops.scatter_rows(self_rows, self_seg, n))
    counts = np.bincount(seg, minlength=n) + np.bincount(self_seg, minlength=n)
    mean = ops.scale_rows(total, (1.0 / counts)[:, None])
    h = ops.layer_norm(ops.relu(mean), P[pre + "ent_ln.gain"], P[pre + "ent_ln.bias"])
    return ops.scatter_rows(h, comp_glob, B * E)


def encode_and_score(kg: KnowledgeGraph, subjects: Sequence[int], queries_q: Sequence[int],
                     group_of: Sequence[int], hbar: Tensor, P: dict[str, Tensor], num_layers: int,
                     masked: Optional[Sequence[Sequence[int]]] = None,
                     trace: Optional[ReasonerTrace] = None) -> tuple[Tensor, np.ndarray]:
    """Scores (B, |E|) for each query plus the reached mask (B, |E|)."""
    subjects = np.asarray(subjects, dtype=np.int64)
    queries_q = np.asarray(queries_q, dtype=np.int64)
    group_of = np.asarray(group_of, dtype=np.int64)
    E, R = kg.num_entities, kg.num_relations
    B = len(subjects)
    frontiers = [compute_frontier(kg, int(s), num_layers, masked[b] if masked is not None else None)
                 for b, s in enumerate(subjects)]
    ve = init_kg_reps(hbar, subjects, group_of * R + queries_q, E)
    vr = hbar
    if trace is not None:
        trace.frontiers = frontiers
        trace.entity_states.append(ve.data.copy())
    for l in range(num_layers):
        vr = update_relations(vr, P, l)
        ve = kg_layer(kg, ve, vr, frontiers, l, subjects, group_of, queries_q, P)
        if trace is not None:
            trace.entity_states.append(ve.data.copy())
    scores = ops.reshape(ops.matmul(ve, P["kg.w_score"], trans_b=True), (B, E))
    reached = np.zeros((B, E), dtype=bool)
    for b, fr in enumerate(frontiers):
        reached[b, fr.layers[-1]] = True
    return scores, reached
