"""Multi-KG pre-training, finetuning and early stopping."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff.adam import AdamState, adam_step
from .autodiff.tape import Tape
from .checkpoint import Checkpoint
from .dataset import Dataset, load_dataset
from .evaluation import evaluate
from .model import KGICLModel, ModelConfig, Query, count_params, init_params, multiclass_log_loss
from .prompts import DEFAULT_FACT_CAP, PromptCache, derive_seed

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    sources: list[str] = field(default_factory=list)
    shots: int = 5
    k: int = 3
    L: int = 3
    N: int = 6
    d: int = 32
    lr: float = 1e-3
    patience: int = 5
    max_epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    no_prompt_graph: bool = False
    no_unified_tokenizer: bool = False
    grail_labeling: bool = False
    prompt_variant: str = "neighbor_and_path"
    fact_cap: int = DEFAULT_FACT_CAP

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.k, self.L, self.N, self.d, self.no_prompt_graph,
                           self.no_unified_tokenizer, self.grail_labeling)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PreparedDataset:
    data: Dataset
    train_cache: PromptCache
    eval_cache: PromptCache


def prepare(data: Dataset, cfg: TrainConfig, caches: Optional[dict[str, PromptCache]] = None) -> PreparedDataset:
    def get(name, kg):
        c = (caches or {}).get(name)
        if c is not None and c.matches(cfg.k, cfg.shots, cfg.seed, cfg.prompt_variant, cfg.fact_cap):
            return c
        return PromptCache.build(kg, cfg.k, cfg.shots, cfg.seed, cfg.prompt_variant, cfg.fact_cap)

    if data.inductive:
        return PreparedDataset(data, get("train_graph", data.train_kg), get("inference_graph", data.eval_kg))
    cache = get("train", data.train_kg)
    return PreparedDataset(data, cache, cache)


def training_queries(data: Dataset) -> list[Query]:
    """One query per stored fact (inverse facts give the reverse direction), with the fact pair masked."""
    kg = data.train_kg
    return [Query(int(s), int(r), int(o), (fid, kg.inverse_fact(fid)))
            for fid, (s, r, o) in enumerate(kg.facts.tolist())]


def interleave(batches_per_source: Sequence[int]) -> list[tuple[int, int]]:
    """Merge per-source batch sequences so each source is spread proportionally."""
    order = []
    for src, n in enumerate(batches_per_source):
        order.extend(((i + 0.5) / n, src, i) for i in range(n))
    order.sort()
    return [(src, i) for _, src, i in order]


def train_step(model: KGICLModel, prep: PreparedDataset, batch: Sequence[Query], state: AdamState,
               lr: float, rng: np.random.Generator, step: int) -> float:
    kg = prep.data.train_kg
    prompts = dict(prep.train_cache.prompts)
    for qu in batch:
        graphs = prep.train_cache.for_query(kg, qu.q, qu.mask[0], salt=step)
        if graphs is not prep.train_cache.prompts[qu.q]:
            prompts[(qu.q, qu.s, qu.o)] = graphs
    tape = Tape()
    scores, _ = model.score(tape, kg, batch, prompts, rng=rng)
    loss = multiclass_log_loss(scores, [qu.o for qu in batch])
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at step {step} "
                            f"(relations {sorted({qu.q for qu in batch})})")
    grads = tape.backward(loss)
    adam_step(model.params, grads, state, lr)
    return value


def training_loss(model: KGICLModel, preps: Sequence[PreparedDataset], cfg: TrainConfig) -> float:
    """Mean loss over every training query at the current parameters (no update)."""
    total, count = 0.0, 0
    for p in preps:
        qs = sorted(training_queries(p.data), key=lambda q: (q.q, q.s, q.o))
        kg = p.data.train_kg
        for j in range(0, len(qs), cfg.batch_size):
            batch = qs[j:j + cfg.batch_size]
            prompts = dict(p.train_cache.prompts)
            for qu in batch:
                graphs = p.train_cache.for_query(kg, qu.q, qu.mask[0], salt=0)
                if graphs is not p.train_cache.prompts[qu.q]:
                    prompts[(qu.q, qu.s, qu.o)] = graphs
            scores, _ = model.score(Tape(), kg, batch, prompts, rng=np.random.default_rng(cfg.seed))
            total += float(multiclass_log_loss(scores, [qu.o for qu in batch]).data) * len(batch)
            count += len(batch)
    return total / max(count, 1)


def validation_mrr(model: KGICLModel, preps: Sequence[PreparedDataset], cfg: TrainConfig,
                   split: str = "valid") -> float:
    scores = []
    for p in preps:
        d = p.data
        rep = evaluate(model, d.eval_kg, d.eval_vocab, p.eval_cache, d.split(split), d.filters,
                       d.name, split, cfg.batch_size, cfg.seed)
        scores.append(rep.mrr())
    return float(np.mean(scores))


def run_training(model: KGICLModel, preps: Sequence[PreparedDataset], cfg: TrainConfig,
                 epochs: int, state: Optional[AdamState] = None,
                 early_stopping: bool = True, track_train_loss: bool = False,
                 on_epoch: Optional[Callable[[int, KGICLModel], bool]] = None) -> dict:
    """Optimise in place; restores the best-validation parameters when early stopping.

    ``on_epoch(epoch, model)`` runs after each epoch; returning True stops training.
    """
    rng = np.random.default_rng(cfg.seed)
    state = state or AdamState()
    all_queries = [training_queries(p.data) for p in preps]
    history = {"loss": [], "valid_mrr": [], "train_loss": []}
    best = (-1.0, {k: v.copy() for k, v in model.params.items()}, 0)
    bad = 0
    step = 0
    for epoch in range(epochs):
        batches = []
        for qs in all_queries:
            perm = rng.permutation(len(qs))
            chunks = [sorted((qs[i] for i in perm[j:j + cfg.batch_size]), key=lambda q: q.q)
                      for j in range(0, len(qs), cfg.batch_size)]
            batches.append(chunks)
        losses = []
        for src, i in interleave([len(b) for b in batches]):
            losses.append(train_step(model, preps[src], batches[src][i], state, cfg.lr, rng, step))
            step += 1
        history["loss"].append(float(np.mean(losses)))
        if track_train_loss:
            history["train_loss"].append(training_loss(model, preps, cfg))
        if on_epoch is not None and on_epoch(epoch, model):
            break
        if not early_stopping:
            log.info("epoch %d loss %.5f", epoch, history["loss"][-1])
            continue
        mrr = validation_mrr(model, preps, cfg)
        history["valid_mrr"].append(mrr)
        log.info("epoch %d loss %.5f valid_mrr %.4f", epoch, history["loss"][-1], mrr)
        if mrr > best[0]:
            best = (mrr, {k: v.copy() for k, v in model.params.items()}, epoch)
            bad = 0
        else:
            bad += 1
            if bad >= cfg.patience:
                log.info("early stop at epoch %d (best epoch %d)", epoch, best[2])
                break
    if early_stopping:
        model.params.update(best[1])
        history["best_epoch"] = best[2]
        history["best_valid_mrr"] = best[0]
    history["epochs_run"] = len(history["loss"])
    return history


def pretrain(cfg: TrainConfig, datasets: Optional[Sequence[Dataset]] = None) -> tuple[Checkpoint, dict]:
    if datasets is None:
        datasets = [load_dataset(p) for p in cfg.sources]
    if not datasets:
        raise TrainingError("no source datasets")
    for d in datasets:
        nb = d.train_kg.num_base_relations
        counts = np.diff(d.train_kg.rel_ptr)[:nb]
        if np.any(counts == 0):
            missing = [d.train_vocab.relations[i] for i in np.flatnonzero(counts == 0)[:3]]
            raise TrainingError(f"{d.name}: relations without training facts: {missing}")
    mcfg = cfg.model_config()
    model = KGICLModel(mcfg, init_params(mcfg, derive_seed(cfg.seed, 1)))
    log.info("model parameters: %d", count_params(model.params))
    preps = [prepare(d, cfg) for d in datasets]
    history = run_training(model, preps, cfg, cfg.max_epochs)
    meta = {"train": cfg.to_dict(), "history": history, "sources": [d.name for d in datasets]}
    return Checkpoint(mcfg, model.params, cfg.seed, meta), history


def finetune(ckpt: Checkpoint, data: Dataset, epochs: int = 5,
             cfg: Optional[TrainConfig] = None) -> tuple[Checkpoint, dict]:
    """Continue optimisation on one dataset for a fixed number of epochs."""
    cfg = cfg or TrainConfig(**{k: v for k, v in ckpt.meta.get("train", {}).items()
                                if k in TrainConfig.__dataclass_fields__})
    mc = cfg.model_config()
    if (mc.d, mc.L, mc.N, mc.k) != (ckpt.config.d, ckpt.config.L, ckpt.config.N, ckpt.config.k):
        raise TrainingError(f"incompatible checkpoint: d/L/N/k {ckpt.config.d}/{ckpt.config.L}/"
                            f"{ckpt.config.N}/{ckpt.config.k} vs config {mc.d}/{mc.L}/{mc.N}/{mc.k}")
    params = {k: v.copy() for k, v in ckpt.params.items()}
    if epochs <= 0:
        return Checkpoint(ckpt.config, params, ckpt.seed, dict(ckpt.meta)), {"loss": []}
    model = KGICLModel(ckpt.config, params)
    history = run_training(model, [prepare(data, cfg)], cfg, epochs, early_stopping=False)
    meta = dict(ckpt.meta)
    meta["finetune"] = {"dataset": data.name, "epochs": epochs, "history": history}
    return Checkpoint(ckpt.config, model.params, ckpt.seed, meta), history
