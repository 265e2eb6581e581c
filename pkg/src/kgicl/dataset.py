"""Dataset directories: transductive and (fully-)inductive layouts."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .kg import (FilterSet, KnowledgeGraph, Vocab, build_filter_set, build_kg,
                 encode_triples, load_triples)


@dataclass
class Dataset:
    name: str
    path: str
    inductive: bool
    train_kg: KnowledgeGraph
    train_vocab: Vocab
    eval_kg: KnowledgeGraph
    eval_vocab: Vocab
    valid: np.ndarray          # base-direction triples, ids in eval_vocab
    test: np.ndarray
    filters: FilterSet         # over eval_kg ids

    def split(self, name: str) -> np.ndarray:
        if name not in ("valid", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def load_dataset(path: str) -> Dataset:
    name = os.path.basename(os.path.normpath(path))
    valid = load_triples(os.path.join(path, "valid.txt"))
    test = load_triples(os.path.join(path, "test.txt"))
    if os.path.isfile(os.path.join(path, "train_graph.txt")):
        train_graph = load_triples(os.path.join(path, "train_graph.txt"))
        inference = load_triples(os.path.join(path, "inference_graph.txt"))
        train_kg, train_vocab = build_kg(train_graph)
        # valid/test may mention relations absent from the inference graph;
        # those become relations without facts and are ranked as unrankable.
        eval_vocab = Vocab.from_triples([inference, valid, test])
        eval_kg, _ = build_kg(inference, eval_vocab)
        filters = build_filter_set([inference, valid, test], eval_kg, eval_vocab)
        inductive = True
    elif os.path.isfile(os.path.join(path, "train.txt")):
        train = load_triples(os.path.join(path, "train.txt"))
        vocab = Vocab.from_triples([train, valid, test])
        train_kg, train_vocab = build_kg(train, vocab)
        eval_kg, eval_vocab = train_kg, vocab
        filters = build_filter_set([train, valid, test], eval_kg, eval_vocab)
        inductive = False
    else:
        raise FileNotFoundError(f"{path}: expected train.txt or train_graph.txt")
    return Dataset(name, path, inductive, train_kg, train_vocab, eval_kg, eval_vocab,
                   encode_triples(valid, eval_vocab), encode_triples(test, eval_vocab), filters)
