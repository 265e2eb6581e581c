import numpy as np
import pytest

from kgicl.autodiff import Tape
from kgicl.autodiff import ops
from kgicl.encoder import (aggregate_prompts, build_prompt_batch, encode_prompts, init_token_reps,
                           prompt_layer, readout)
from kgicl.kg import TripleFile, build_kg
from kgicl.model import ModelConfig, init_params
from kgicl.prompts import ExampleFact, PromptCache, build_prompt

from conftest import random_kg


def setup(d=4, L=2, seed=0):
    cfg = ModelConfig(k=3, L=L, N=2, d=d)
    return cfg, init_params(cfg, seed)


def leaves(tape, params):
    return {k: tape.param(k, v) for k, v in params.items()}


def one_fact_prompt():
    kg, _ = build_kg(TripleFile("x", [("u", "q", "v")]))
    return kg, build_prompt(kg, ExampleFact(0, 0, 1, 0), 3, "neighbor_and_path", 4096, 0)


def ln(x, g, b, eps=1e-5):
    mu = x.mean()
    var = ((x - mu) ** 2).mean()
    return (x - mu) / np.sqrt(var + eps) * g + b


def sig(x):
    return 1 / (1 + np.exp(-x))


def reference_layer(tpg, he, hr, P, l):
    """Per-entity / per-relation loops over one prompt graph."""
    p = f"prompt.layer{l}."
    ents, rels = tpg.entities.tolist(), tpg.relations.tolist()
    qi = rels.index(tpg.example.q)
    new_e = np.zeros_like(he)
    for i, e in enumerate(ents):
        msgs = []
        for s, r, o in tpg.facts.tolist():
            if o != e:
                continue
            si, ri = ents.index(s), rels.index(r)
            a = sig(P[p + "e_attn"] @ np.concatenate([hr[ri], hr[qi]]))
            msgs.append(a * (P[p + "e_msg"] @ np.concatenate([he[si], hr[ri], hr[qi]])))
        agg = np.max(msgs, axis=0) if msgs else np.zeros(he.shape[1])
        new_e[i] = ln(np.maximum(agg, 0), P[p + "e_ln.gain"], P[p + "e_ln.bias"])
    new_r = np.zeros_like(hr)
    for j, r in enumerate(rels):
        a = sig(P[p + "r_attn"] @ np.concatenate([hr[j], hr[qi]]))
        msgs = [a * (P[p + "r_msg"] @ np.concatenate([new_e[ents.index(s)], new_e[ents.index(o)], hr[qi]]))
                for s, rr, o in tpg.facts.tolist() if rr == r]
        new_r[j] = ln(np.maximum(np.max(msgs, axis=0), 0) + hr[j], P[p + "r_ln.gain"], P[p + "r_ln.bias"])
    return new_e, new_r


def test_initial_reps():
    cfg, params = setup()
    kg, tpg = one_fact_prompt()
    tape = Tape()
    P = leaves(tape, params)
    batch = build_prompt_batch([[tpg]], kg.num_relations)
    he, hr = init_token_reps(batch, P, tape, cfg.d)
    flags = dict(zip(tpg.relations.tolist(), tpg.flags.tolist()))
    for j, r in enumerate(tpg.relations.tolist()):
        if flags[r]:
            np.testing.assert_array_equal(hr.data[j], params["prompt.q_token"][0])
        else:
            assert np.all(hr.data[j] == 0)
    tid = tpg.token_ids()
    np.testing.assert_array_equal(he.data, params["prompt.token_table"][tid])


def test_single_fact_layer_shapes():
    cfg, params = setup()
    kg, tpg = one_fact_prompt()
    tape = Tape()
    P = leaves(tape, params)
    batch = build_prompt_batch([[tpg]], kg.num_relations)
    he, hr = init_token_reps(batch, P, tape, cfg.d)
    he1, hr1 = prompt_layer(batch, he, hr, P, 0)
    assert he1.shape == (2, cfg.d) and hr1.shape == (2, cfg.d)


def test_layer_matches_reference_and_fills_zero_relations(rng):
    cfg, params = setup(d=4, seed=3)
    kg = random_kg(rng, 12, 3, 30)
    c = ExampleFact(*kg.facts[0].tolist(), 0)
    tpg = build_prompt(kg, c, 3, "neighbor_and_path", 4096, 0)
    tape = Tape(np.float64)
    P = leaves(tape, params)
    batch = build_prompt_batch([[tpg]], kg.num_relations)
    he, hr = init_token_reps(batch, P, tape, cfg.d)
    he1, hr1 = prompt_layer(batch, he, hr, P, 0)
    ref_e, ref_r = reference_layer(tpg, he.data, hr.data, {k: v.astype(np.float64) for k, v in params.items()}, 0)
    np.testing.assert_allclose(he1.data, ref_e, atol=1e-9)
    np.testing.assert_allclose(hr1.data, ref_r, atol=1e-9)
    zero_before = tpg.flags == 0
    assert np.all(hr.data[zero_before] == 0)
    assert np.all(np.abs(hr1.data[zero_before]).sum(axis=1) > 0)


def test_empty_entity_segment_gives_bias_only():
    cfg, params = setup()
    params["prompt.layer0.e_ln.bias"] = np.arange(cfg.d, dtype=np.float32)
    kg, tpg = one_fact_prompt()
    tpg.entities = np.array([0, 1, 5])           # entity 5 has no facts
    tpg.tokens = np.vstack([tpg.tokens, [[3, 3]]])
    tape = Tape()
    P = leaves(tape, params)
    batch = build_prompt_batch([[tpg]], kg.num_relations)
    he, hr = init_token_reps(batch, P, tape, cfg.d)
    he1, _ = prompt_layer(batch, he, hr, P, 0)
    np.testing.assert_array_equal(he1.data[2], np.arange(cfg.d))


def test_readout_zero_rows_and_shape():
    cfg = ModelConfig()
    params = init_params(cfg)
    assert params["prompt.readout"].shape == (32, 96)
    kg, _ = build_kg(TripleFile("x", [("a", "r0", "b"), ("b", "r1", "c")]))
    tpg = build_prompt(kg, ExampleFact(0, 0, 1, 0), 3, "neighbor", 4096, 0)
    # drop relation 1 and its inverse so R_pmt = {0, 2}
    keep = np.isin(tpg.facts[:, 1], [0, 2])
    tpg.facts = tpg.facts[keep]
    tpg.relations = np.array([0, 2])
    tpg.flags = np.array([1, 0])
    tape = Tape()
    out = encode_prompts([[tpg]], kg.num_relations, leaves(tape, params), tape, cfg.L, cfg.d)
    assert out.shape == (4, 32)
    assert np.all(out.data[[1, 3]] == 0)
    assert np.any(out.data[0] != 0)


def test_readout_of_identical_layers():
    cfg, params = setup(d=4, L=3)
    kg, tpg = one_fact_prompt()
    batch = build_prompt_batch([[tpg]], kg.num_relations)
    tape = Tape(np.float64)
    P = leaves(tape, params)
    h = tape.constant(np.arange(8.0).reshape(2, 4))
    out = readout(batch, [h, h, h], P)
    W = params["prompt.readout"].astype(np.float64)
    for j, r in enumerate(tpg.relations):
        np.testing.assert_allclose(out.data[r], W @ np.concatenate([h.data[j]] * 3))


def test_aggregate_prompts():
    tape = Tape()
    A = tape.constant(np.arange(6.0).reshape(3, 2))
    np.testing.assert_array_equal(aggregate_prompts([A] * 5).data, A.data)
    neg = tape.constant(-A.data)
    assert np.all(aggregate_prompts([A, neg]).data == 0)
    with pytest.raises(ValueError):
        aggregate_prompts([])


def test_batched_equals_sequential_mean(rng):
    cfg, params = setup(d=8, L=2)
    kg = random_kg(rng, 15, 3, 40)
    cache = PromptCache.build(kg, k=3, shots=5, seed=0)
    graphs = cache.get(0)
    tape = Tape(np.float64)
    P = leaves(tape, params)
    together = encode_prompts([graphs], kg.num_relations, P, tape, cfg.L, cfg.d).data
    singles = [encode_prompts([[g]], kg.num_relations, P, tape, cfg.L, cfg.d) for g in graphs]
    np.testing.assert_allclose(together, aggregate_prompts(singles).data, atol=1e-12)


def test_isomorphic_prompts_give_identical_rows():
    cfg, params = setup(d=8)
    kg, _ = build_kg(TripleFile("x", [("a", "q", "b"), ("b", "r", "c"), ("x", "q", "y"), ("y", "r", "z")]))
    t1 = build_prompt(kg, ExampleFact(0, 0, 1, 0), 3, "neighbor_and_path", 4096, 0)
    fid = kg.fact_id(3, 0, 4)
    t2 = build_prompt(kg, ExampleFact(3, 0, 4, fid), 3, "neighbor_and_path", 4096, 0)
    tape = Tape()
    P = leaves(tape, params)
    h1 = encode_prompts([[t1]], kg.num_relations, P, tape, cfg.L, cfg.d).data
    h2 = encode_prompts([[t2]], kg.num_relations, P, tape, cfg.L, cfg.d).data
    np.testing.assert_array_equal(h1, h2)
