"""Prompt-graph encoder: token init, entity/relation-centric layers, readout, mean pooling.

Several prompt graphs (possibly for different query relations) are encoded
at once as one disjoint union; each graph keeps its own query-relation row.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import ops
from .autodiff.tape import Tape, Tensor
from .prompts import TokenizedPromptGraph


@dataclass
class PromptBatch:
    """Index arrays for a disjoint union of tokenized prompt graphs."""
    num_entities: int
    num_relations: int
    token_ids: np.ndarray      # per union entity
    tokens: np.ndarray         # (n, 2) distance pairs
    flags: np.ndarray          # per union relation
    src: np.ndarray            # per fact, union entity index
    dst: np.ndarray
    rel: np.ndarray            # per fact, union relation index
    fact_q: np.ndarray         # per fact, union index of its graph's query relation
    rel_q: np.ndarray          # per union relation, union index of its graph's query relation
    readout_rows: np.ndarray   # per union relation, target row in the (groups * |R|) output
    readout_scale: np.ndarray  # per union relation, 1 / (#graphs in its group)
    num_out_rows: int


def build_prompt_batch(groups: Sequence[Sequence[TokenizedPromptGraph]], num_kg_relations: int) -> PromptBatch:
    token_ids, tokens, flags = [], [], []
    src, dst, rel, fact_q, rel_q, rows, scale = [], [], [], [], [], [], []
    ne = nr = 0
    for g, graphs in enumerate(groups):
        inv_m = 1.0 / len(graphs)
        for tpg in graphs:
            ents, rels = tpg.entities, tpg.relations
            qpos = np.searchsorted(rels, tpg.example.q)
            if qpos >= len(rels) or rels[qpos] != tpg.example.q:
                raise ValueError("prompt graph does not contain its query relation")
            token_ids.append(tpg.token_ids())
            tokens.append(tpg.tokens)
            flags.append(tpg.flags)
            f = tpg.facts
            src.append(np.searchsorted(ents, f[:, 0]) + ne)
            dst.append(np.searchsorted(ents, f[:, 2]) + ne)
            rel.append(np.searchsorted(rels, f[:, 1]) + nr)
            fact_q.append(np.full(len(f), nr + qpos, dtype=np.int64))
            rel_q.append(np.full(len(rels), nr + qpos, dtype=np.int64))
            rows.append(g * num_kg_relations + rels)
            scale.append(np.full(len(rels), inv_m))
            ne += len(ents)
            nr += len(rels)
    cat = lambda xs, dt=np.int64: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt)
    return PromptBatch(ne, nr, cat(token_ids), np.concatenate(tokens).reshape(-1, 2), cat(flags),
                       cat(src), cat(dst), cat(rel), cat(fact_q), cat(rel_q), cat(rows),
                       cat(scale, np.float64), len(groups) * num_kg_relations)


def xavier_normal(rng: np.random.Generator, shape) -> np.ndarray:
    fan_out, fan_in = shape[0], shape[-1]
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=shape)


def init_token_reps(batch: PromptBatch, P: dict[str, Tensor], tape: Tape, d: int,
                    labeling: str = "tokenizer",
                    rng: Optional[np.random.Generator] = None) -> tuple[Tensor, Tensor]:
    """Initial entity and relation rows of the union graph.

    ``labeling`` is ``"tokenizer"`` (learned token table), ``"random"``
    (fresh Xavier-normal inputs, no tokenizer) or ``"grail"`` (fixed one-hot
    distance pairs).
    """
    if labeling == "random":
        rng = rng if rng is not None else np.random.default_rng(0)
        he = tape.constant(xavier_normal(rng, (batch.num_entities, d)))
        hr = tape.constant(xavier_normal(rng, (batch.num_relations, d)))
        return he, hr
    if labeling == "grail":
        k1 = int(np.sqrt(P["prompt.token_table"].shape[0]))
        if 2 * k1 > d:
            raise ValueError(f"one-hot distance labels need d >= {2 * k1}")
        onehot = np.zeros((batch.num_entities, d))
        rows = np.arange(batch.num_entities)
        onehot[rows, batch.tokens[:, 0]] = 1.0
        onehot[rows, k1 + batch.tokens[:, 1]] = 1.0
        he = tape.constant(onehot)
    elif labeling == "tokenizer":
        he = ops.gather_rows(P["prompt.token_table"], batch.token_ids)
    else:
        raise ValueError(f"unknown labeling {labeling!r}")
    q_rows = ops.gather_rows(P["prompt.q_token"], np.zeros(batch.num_relations, dtype=np.int64))
    hr = ops.scale_rows(q_rows, batch.flags.astype(np.float64)[:, None])
    return he, hr


def prompt_layer(batch: PromptBatch, he: Tensor, hr: Tensor, P: dict[str, Tensor],
                 layer: int) -> tuple[Tensor, Tensor]:
    pre = f"prompt.layer{layer}."
    # entity-centric: messages along every fact into its object
    s_rows = ops.gather_rows(he, batch.src)
    r_rows = ops.gather_rows(hr, batch.rel)
    q_rows = ops.gather_rows(hr, batch.fact_q)
    msg = ops.matmul(ops.concat_lastdim([s_rows, r_rows, q_rows]), P[pre + "e_msg"], trans_b=True)
    alpha = ops.sigmoid(ops.matmul(ops.concat_lastdim([r_rows, q_rows]), P[pre + "e_attn"], trans_b=True))
    agg = ops.segment_max(ops.scale_rows(msg, alpha), batch.dst, batch.num_entities)
    he_next = ops.layer_norm(ops.relu(agg), P[pre + "e_ln.gain"], P[pre + "e_ln.bias"])

    # relation-centric: messages from each fact's (updated) endpoints into its relation
    s_new = ops.gather_rows(he_next, batch.src)
    o_new = ops.gather_rows(he_next, batch.dst)
    msg = ops.matmul(ops.concat_lastdim([s_new, o_new, q_rows]), P[pre + "r_msg"], trans_b=True)
    # the gate depends only on (r, q), so compute it once per relation
    rq = ops.concat_lastdim([hr, ops.gather_rows(hr, batch.rel_q)])
    alpha_rel = ops.sigmoid(ops.matmul(rq, P[pre + "r_attn"], trans_b=True))
    alpha = ops.gather_rows(alpha_rel, batch.rel)
    agg = ops.segment_max(ops.scale_rows(msg, alpha), batch.rel, batch.num_relations)
    hr_next = ops.layer_norm(ops.add(ops.relu(agg), hr), P[pre + "r_ln.gain"], P[pre + "r_ln.bias"])
    return he_next, hr_next


def readout(batch: PromptBatch, hr_layers: Sequence[Tensor], P: dict[str, Tensor]) -> Tensor:
    """Project concatenated per-layer relation rows and mean-pool them into (groups*|R|, d).

    Relations absent from a prompt graph contribute zero rows to the mean.
    """
    proj = ops.matmul(ops.concat_lastdim(list(hr_layers)), P["prompt.readout"], trans_b=True)
    proj = ops.scale_rows(proj, batch.readout_scale[:, None])
    return ops.scatter_rows(proj, batch.readout_rows, batch.num_out_rows)


def encode_prompts(groups: Sequence[Sequence[TokenizedPromptGraph]], num_kg_relations: int,
                   P: dict[str, Tensor], tape: Tape, num_layers: int, d: int,
                   labeling: str = "tokenizer", rng=None) -> Tensor:
    """Mean prompt representation per group, stacked as (len(groups) * |R|, d)."""
    batch = build_prompt_batch(groups, num_kg_relations)
    he, hr = init_token_reps(batch, P, tape, d, labeling, rng)
    layers = []
    for l in range(num_layers):
        he, hr = prompt_layer(batch, he, hr, P, l)
        layers.append(hr)
    return readout(batch, layers, P)


def aggregate_prompts(reps: Sequence[Tensor]) -> Tensor:
    if not reps:
        raise ValueError("aggregate_prompts: empty list")
    total = reps[0]
    for r in reps[1:]:
        total = ops.add(total, r)
    return ops.scalar_mul(total, 1.0 / len(reps))
