"""Model hyperparameters, named parameters and the end-to-end scoring pass."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import ops
from .autodiff.tape import Tape, Tensor
from .encoder import encode_prompts, xavier_normal
from .kg import KnowledgeGraph
from .prompts import TokenizedPromptGraph
from .reasoner import ReasonerTrace, encode_and_score


@dataclass(frozen=True)
class ModelConfig:
    k: int = 3
    L: int = 3
    N: int = 6
    d: int = 32
    no_prompt_graph: bool = False
    no_unified_tokenizer: bool = False
    grail_labeling: bool = False

    @property
    def labeling(self) -> str:
        if self.no_unified_tokenizer:
            return "random"
        return "grail" if self.grail_labeling else "tokenizer"

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.d
    shapes: dict[str, tuple[int, ...]] = {
        "prompt.token_table": ((cfg.k + 1) ** 2, d),
        "prompt.q_token": (1, d),
    }
    for l in range(cfg.L):
        p = f"prompt.layer{l}."
        shapes.update({p + "e_msg": (d, 3 * d), p + "e_attn": (1, 2 * d),
                       p + "r_msg": (d, 3 * d), p + "r_attn": (1, 2 * d),
                       p + "e_ln.gain": (d,), p + "e_ln.bias": (d,),
                       p + "r_ln.gain": (d,), p + "r_ln.bias": (d,)})
    shapes["prompt.readout"] = (d, cfg.L * d)
    for l in range(cfg.N):
        p = f"kg.layer{l}."
        shapes.update({p + "w_rel": (d, d), p + "w_msg": (d, d),
                       p + "p_s": (d, d), p + "p_r": (d, d), p + "p_q": (d, d), p + "a_row": (1, d),
                       p + "rel_ln.gain": (d,), p + "rel_ln.bias": (d,),
                       p + "ent_ln.gain": (d,), p + "ent_ln.bias": (d,)})
    shapes["kg.w_score"] = (1, d)
    if cfg.no_prompt_graph:
        # slot 0: any non-query relation, slot 1: the query relation
        shapes["noprompt.slots"] = (2, d)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gain"):
            arr = np.ones(shape)
        elif name.endswith(".bias") or name == "kg.w_score":
            # zero scores at init keep the initial loss at log|E|
            arr = np.zeros(shape)
        else:
            arr = xavier_normal(rng, shape)
        params[name] = arr.astype(np.float32)
    return params


def count_params(params: dict[str, np.ndarray]) -> int:
    return int(sum(p.size for p in params.values()))


@dataclass
class Query:
    s: int
    q: int
    o: Optional[int] = None          # target, when known
    mask: tuple[int, ...] = ()       # fact ids withheld from message passing


class KGICLModel:
    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray]):
        expected = param_shapes(cfg)
        for name, shape in expected.items():
            if name not in params or params[name].shape != shape:
                got = None if name not in params else params[name].shape
                raise ValueError(f"parameter {name}: expected shape {shape}, got {got}")
        self.cfg = cfg
        self.params = params

    def leaves(self, tape: Tape) -> dict[str, Tensor]:
        return {name: tape.param(name, arr) for name, arr in self.params.items()}

    def prompt_matrix(self, tape: Tape, P: dict[str, Tensor], kg: KnowledgeGraph, rels: Sequence[int],
                      prompts: Sequence[Sequence[TokenizedPromptGraph]], rng=None) -> Tensor:
        """Stacked mean prompt representations, one |R|-row block per relation in ``rels``."""
        R = kg.num_relations
        if self.cfg.no_prompt_graph:
            slot = np.zeros(len(rels) * R, dtype=np.int64)
            slot[np.arange(len(rels)) * R + np.asarray(rels, dtype=np.int64)] = 1
            return ops.gather_rows(P["noprompt.slots"], slot)
        return encode_prompts(prompts, R, P, tape, self.cfg.L, self.cfg.d, self.cfg.labeling, rng)

    def score(self, tape: Tape, kg: KnowledgeGraph, queries: Sequence[Query],
              prompt_sets: dict, rng=None, trace: Optional[ReasonerTrace] = None,
              P: Optional[dict[str, Tensor]] = None) -> tuple[Tensor, np.ndarray]:
        """Forward pass for a batch; queries sharing a relation share one prompt encoding.

        ``prompt_sets`` maps a relation id (or a per-query key, see
        ``prompt_key``) to its list of tokenized prompt graphs.
        """
        P = P if P is not None else self.leaves(tape)
        keys, group_of = [], []
        index = {}
        for qu in queries:
            key = prompt_key(qu, prompt_sets)
            if key not in index:
                index[key] = len(keys)
                keys.append(key)
            group_of.append(index[key])
        rels = [key if isinstance(key, int) else key[0] for key in keys]
        hbar = self.prompt_matrix(tape, P, kg, rels, [prompt_sets.get(key, ()) for key in keys], rng)
        return encode_and_score(kg, [qu.s for qu in queries], [qu.q for qu in queries], group_of,
                                hbar, P, self.cfg.N, [qu.mask for qu in queries], trace)


def prompt_key(qu: Query, prompt_sets: dict):
    """Queries may carry their own prompt list (keyed by (q, s, o)) when an example had to be swapped."""
    k = (qu.q, qu.s, qu.o)
    return k if k in prompt_sets else qu.q


def multiclass_log_loss(scores: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean over the batch of  -f(target) + log sum_e exp f(e)."""
    B, E = scores.shape
    targets = np.asarray(targets, dtype=np.int64)
    if np.any(targets < 0) or np.any(targets >= E):
        raise IndexError("target entity out of range")
    onehot = np.zeros((B, E))
    onehot[np.arange(B), targets] = 1.0
    lse = ops.reduce_logsumexp(scores)
    total = ops.sub(ops.dot(lse, np.ones(B)), ops.dot(scores, onehot))
    return ops.scalar_mul(total, 1.0 / B)
