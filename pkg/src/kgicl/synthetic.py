"""Small synthetic KGs with a planted composition rule r3 = r1 . r2."""
from __future__ import annotations

import os

import numpy as np


def rule_closure(facts, r1: str = "r1", r2: str = "r2") -> set[tuple[str, str]]:
    """Every (a, c) with a -r1-> b -r2-> c, by brute-force enumeration."""
    facts = list(facts)
    out = set()
    for a, ra, b in facts:
        if ra != r1:
            continue
        for b2, rb, c in facts:
            if rb == r2 and b2 == b:
                out.add((a, c))
    return out


def make_synthetic_kg(out_dir: str, entities: int = 20, noise: int = 0, seed: int = 0,
                      test_fraction: float = 0.25, valid_fraction: float = 0.15) -> str:
    """Write train/valid/test where every held-out r3 fact follows from train r1, r2 facts."""
    if entities < 6:
        raise ValueError("need at least 6 entities")
    rng = np.random.default_rng(seed)
    names = [f"e{i}" for i in range(entities)]

    def random_map():
        out = []
        for a in range(entities):
            b = int(rng.integers(entities - 1))
            out.append((a, b if b < a else b + 1))
        return out

    r1 = [(names[a], "r1", names[b]) for a, b in random_map()]
    r2 = [(names[a], "r2", names[b]) for a, b in random_map()]
    implied = sorted((a, "r3", c) for a, c in rule_closure(r1 + r2) if a != c)
    perm = rng.permutation(len(implied))
    n_test = max(1, int(round(test_fraction * len(implied))))
    n_valid = max(1, int(round(valid_fraction * len(implied))))
    test = sorted(implied[i] for i in perm[:n_test])
    valid = sorted(implied[i] for i in perm[n_test:n_test + n_valid])
    train_r3 = sorted(implied[i] for i in perm[n_test + n_valid:])
    existing = set(r1 + r2 + implied)
    noise_facts = []
    while len(noise_facts) < noise:
        a, b = (int(x) for x in rng.integers(entities, size=2))
        f = (names[a], "noise", names[b])
        if a != b and f not in existing:
            existing.add(f)
            noise_facts.append(f)
    train = r1 + r2 + train_r3 + noise_facts

    os.makedirs(out_dir, exist_ok=True)
    for fname, rows in (("train.txt", train), ("valid.txt", valid), ("test.txt", test)):
        with open(os.path.join(out_dir, fname), "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(f"{h}\t{r}\t{t}\n" for h, r, t in rows)
    return out_dir
