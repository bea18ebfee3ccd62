"""Independent test oracles.

The assignment oracle enumerates every injection between the smaller and
larger entry set, so it shares no code path with the Hungarian-based
implementation it checks.
"""

from itertools import permutations

from chartforge.metrics import TableTriples, entry_similarity


def brute_force_similarity(pred: TableTriples, gold: TableTriples):
    """(P, R, F1) by exhaustive search over all one-to-one assignments."""
    if not pred.entries and not gold.entries:
        return (1.0, 1.0, 1.0)
    if not pred.entries or not gold.entries:
        return (0.0, 0.0, 0.0)
    n, m = len(pred.entries), len(gold.entries)
    best = 0.0
    if n <= m:
        for perm in permutations(range(m), n):
            total = sum(
                entry_similarity(pred.entries[i], gold.entries[perm[i]])
                for i in range(n)
            )
            best = max(best, total)
    else:
        for perm in permutations(range(n), m):
            total = sum(
                entry_similarity(pred.entries[perm[j]], gold.entries[j])
                for j in range(m)
            )
            best = max(best, total)
    precision = best / n
    recall = best / m
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return (precision, recall, f1)


def random_triples(rng, max_entries=4) -> TableTriples:
    """Random small entry sets mixing numeric and text values."""
    from chartforge.metrics import TripleEntry
    from chartforge.model import Cell

    keys = ["Q1", "Q2", "Q3", "north", "south", "alpha", "beta", "x"]
    cols = ["sales", "cost", "users", "score"]
    entries = []
    for _ in range(rng.randint(0, max_entries)):
        if rng.random() < 0.7:
            value = Cell.from_number(round(rng.uniform(-50, 150), 2))
        else:
            value = Cell.from_raw(rng.choice(["high", "low", "n/a", "medium"]))
        entries.append(
            TripleEntry(rng.choice(keys), rng.choice(cols), value)
        )
    return TableTriples(tuple(entries))
