"""Independent reference implementations used as test oracles."""

import random

from oietd.oie_post import TripleExtraction


def brute_force_merge(spans):
    """Union-find over every pair of token-sharing spans, then pick the longest
    member of each cluster (smallest start, then input order, on ties)."""
    spans = list(spans)
    parent = list(range(len(spans)))

    def find(i):
        while parent[i] != i:
            i = parent[i]
        return i

    for i in range(len(spans)):
        for j in range(i + 1, len(spans)):
            shared = set(range(*spans[i])) & set(range(*spans[j]))
            if shared:
                parent[find(i)] = find(j)
    clusters = {}
    for i in range(len(spans)):
        clusters.setdefault(find(i), []).append(i)
    winners = []
    for members in clusters.values():
        best = members[0]
        for i in members[1:]:
            (bs, be), (s, e) = spans[best], spans[i]
            if (e - s, -s, -i) > (be - bs, -bs, -best):
                best = i
        winners.append(spans[best])
    return sorted(winners)


def _slot_ok(indices):
    return len(indices) > 0 and all(b == a + 1 for a, b in zip(indices, indices[1:]))


def brute_force_filter(extractions):
    out = []
    for ex in extractions:
        slots = (ex.subject, ex.relation, ex.object)
        if ex.is_implicit or not all(_slot_ok(s) for s in slots):
            continue
        if len(ex.relation) > 5:
            continue
        if max(ex.subject) < min(ex.relation) and max(ex.relation) < min(ex.object):
            out.append(ex)
    return out


def brute_force_pipeline(extractions):
    kept = brute_force_filter(extractions)
    return brute_force_merge([(min(e.relation), max(e.relation) + 1) for e in kept])


def _random_slot(rng, n):
    roll = rng.random()
    if roll < 0.05:
        return ()
    start = rng.randrange(n)
    length = rng.randint(1, min(7, n - start))
    if roll < 0.15 and length > 2:
        indices = list(range(start, start + length))
        del indices[rng.randrange(1, length - 1)]
        return tuple(indices)
    return tuple(range(start, start + length))


def random_extractions(rng: random.Random, sentence_id: str, n_tokens: int, count: int):
    """Mostly well-formed S-R-O triples mixed with every kind of malformed one."""
    out = []
    for _ in range(count):
        if rng.random() < 0.6 and n_tokens >= 3:
            cuts = sorted(rng.sample(range(1, n_tokens), 2))
            s0 = rng.randrange(0, cuts[0])
            r_end = rng.randint(cuts[0] + 1, min(cuts[1], cuts[0] + 7))
            o_end = rng.randint(cuts[1] + 1, n_tokens) if cuts[1] < n_tokens else n_tokens
            subj = tuple(range(s0, cuts[0]))
            rel = tuple(range(cuts[0], r_end))
            obj = tuple(range(cuts[1], max(o_end, cuts[1] + 1)))
            if not obj or obj[-1] >= n_tokens:
                obj = (n_tokens - 1,)
        else:
            subj, rel, obj = (_random_slot(rng, n_tokens) for _ in range(3))
        out.append(TripleExtraction(sentence_id, subj, rel, obj, rng.random() < 0.1, rng.choice(["minie", "stanford"])))
    return out
