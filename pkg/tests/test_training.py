import math

import numpy as np
import pytest

from kgicl import training
from kgicl.autodiff import AdamState, Tape
from kgicl.dataset import load_dataset
from kgicl.evaluation import evaluate
from kgicl.model import KGICLModel, ModelConfig, Query, init_params, multiclass_log_loss
from kgicl.synthetic import make_synthetic_kg
from kgicl.training import TrainConfig, TrainingError, finetune, prepare, pretrain, run_training


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    return load_dataset(make_synthetic_kg(str(tmp_path_factory.mktemp("syn") / "syn"), 20, 0, 0))


def small_cfg(**kw):
    base = dict(d=16, L=2, N=3, max_epochs=10, patience=50, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def loss_of(scores, targets):
    tape = Tape(np.float64)
    return float(multiclass_log_loss(tape.constant(np.asarray(scores, dtype=float)), targets).data)


def test_loss_closed_forms():
    assert loss_of([[0, 0, 0, 0]], [2]) == pytest.approx(math.log(4))
    assert loss_of([[math.log(3), 0, 0, 0]], [0]) == pytest.approx(math.log(2))


def test_loss_matches_direct_summation(rng):
    for _ in range(20):
        E = int(rng.integers(1, 9))
        s = rng.normal(size=(3, E)) * 3
        t = rng.integers(0, E, size=3)
        direct = np.mean([-s[i, t[i]] + math.log(sum(math.exp(x) for x in s[i])) for i in range(3)])
        assert loss_of(s, t) == pytest.approx(direct, rel=1e-12)


def test_zero_model_loss_and_finite_score_gradient(synth):
    cfg = ModelConfig(d=8, L=2, N=2)
    params = {k: np.zeros_like(v) for k, v in init_params(cfg).items()}
    m = KGICLModel(cfg, params)
    cache = prepare(synth, small_cfg(d=8, N=2)).train_cache
    kg = synth.train_kg
    tape = Tape()
    qs = [Query(int(kg.facts[0, 0]), int(kg.facts[0, 1]), int(kg.facts[0, 2]), (0, kg.inverse_fact(0)))]
    loss = multiclass_log_loss(m.score(tape, kg, qs, cache.prompts)[0], [qs[0].o])
    assert float(loss.data) == pytest.approx(math.log(kg.num_entities), rel=1e-6)
    assert np.all(np.isfinite(tape.backward(loss)["kg.w_score"]))


def test_initial_loss_near_log_entities(synth):
    cfg = small_cfg()
    m = KGICLModel(cfg.model_config(), init_params(cfg.model_config(), 0))
    prep = prepare(synth, cfg)
    qs = training.training_queries(synth)[:32]
    loss = multiclass_log_loss(m.score(Tape(), synth.train_kg, qs, prep.train_cache.prompts)[0], [q.o for q in qs])
    assert abs(float(loss.data) - math.log(synth.train_kg.num_entities)) < 0.5


def test_single_step_descent(synth):
    cfg = small_cfg()
    params = init_params(cfg.model_config(), 0)
    params["kg.w_score"] = np.random.default_rng(0).normal(size=params["kg.w_score"].shape).astype(np.float32)
    m = KGICLModel(cfg.model_config(), params)
    prep = prepare(synth, cfg)
    q = training.training_queries(synth)[3]

    def loss():
        t = Tape()
        return float(multiclass_log_loss(m.score(t, synth.train_kg, [q], prep.train_cache.prompts)[0], [q.o]).data)

    before = loss()
    training.train_step(m, prep, [q], AdamState(), 1e-4, np.random.default_rng(0), 0)
    assert loss() < before


def test_loss_decreases_over_first_epochs(synth):
    cfg = small_cfg(d=32, L=3, N=6)
    m = KGICLModel(cfg.model_config(), init_params(cfg.model_config(), 0))
    hist = run_training(m, [prepare(synth, cfg)], cfg, 10, early_stopping=False, track_train_loss=True)
    curve = hist["train_loss"]
    assert len(curve) == 10
    assert all(b < a for a, b in zip(curve, curve[1:])), curve


def test_deterministic_replay(synth):
    cfg = small_cfg(max_epochs=3)
    a, ha = pretrain(cfg, [synth])
    b, hb = pretrain(cfg, [synth])
    np.testing.assert_allclose(ha["loss"], hb["loss"], atol=1e-5)
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()


def test_patience_stops_five_after_best(synth, monkeypatch):
    seq = iter([0.1, 0.3, 0.2, 0.25, 0.3, 0.1, 0.29, 0.5, 0.6])
    monkeypatch.setattr(training, "validation_mrr", lambda *a, **k: next(seq))
    cfg = small_cfg(max_epochs=20, patience=5)
    _, hist = pretrain(cfg, [synth])
    assert hist["best_epoch"] == 1
    assert hist["epochs_run"] == 1 + 5 + 1


def test_finetune_zero_epochs_is_identity(synth):
    ckpt, _ = pretrain(small_cfg(max_epochs=1), [synth])
    same, _ = finetune(ckpt, synth, epochs=0)
    assert all(same.params[k].tobytes() == v.tobytes() for k, v in ckpt.params.items())


def test_finetune_rejects_incompatible_config(synth):
    ckpt, _ = pretrain(small_cfg(max_epochs=1), [synth])
    with pytest.raises(TrainingError, match="incompatible"):
        finetune(ckpt, synth, 1, small_cfg(d=8))


def test_finetune_default_epochs():
    import inspect
    assert inspect.signature(finetune).parameters["epochs"].default == 5


def test_finetune_on_source_does_not_degrade(synth):
    cfg = small_cfg(d=32, L=3, N=6, max_epochs=60, patience=60)
    ckpt, hist = pretrain(cfg, [synth])
    tuned, _ = finetune(ckpt, synth, 5, cfg)
    prep = prepare(synth, cfg)

    def vmrr(c):
        m = KGICLModel(c.config, c.params)
        return evaluate(m, synth.eval_kg, synth.eval_vocab, prep.eval_cache, synth.valid, synth.filters).mrr()

    assert vmrr(tuned) >= vmrr(ckpt) - 0.02


@pytest.mark.parametrize("flag", ["no_prompt_graph", "no_unified_tokenizer", "grail_labeling"])
def test_ablations_train(synth, flag):
    cfg = small_cfg(max_epochs=2, **{flag: True})
    ckpt, hist = pretrain(cfg, [synth])
    assert all(np.isfinite(hist["loss"]))
    assert ("noprompt.slots" in ckpt.params) == (flag == "no_prompt_graph")


def test_nan_loss_aborts(synth):
    cfg = small_cfg()
    params = init_params(cfg.model_config(), 0)
    params["kg.w_score"][:] = np.nan
    m = KGICLModel(cfg.model_config(), params)
    with pytest.raises(TrainingError, match="non-finite"):
        run_training(m, [prepare(synth, cfg)], cfg, 1, early_stopping=False)


def test_missing_relation_facts_rejected(tmp_path):
    d = tmp_path / "bad"
    d.mkdir()
    (d / "train.txt").write_text("a\tr\tb\n")
    (d / "valid.txt").write_text("a\tq\tb\n")
    (d / "test.txt").write_text("")
    with pytest.raises(TrainingError, match="without training facts"):
        pretrain(small_cfg(), [load_dataset(str(d))])


def test_interleave_is_proportional():
    order = training.interleave([4, 2])
    assert sorted(order) == [(0, 0), (0, 1), (0, 2), (0, 3), (1, 0), (1, 1)]
    assert [s for s, _ in order] == [0, 1, 0, 0, 1, 0]
