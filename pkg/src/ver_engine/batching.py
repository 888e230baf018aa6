"""Visually-clustered minibatch construction and hard-negative selection.

Batches group visually similar queries (k-means over unit query vectors);
for each sample a handful of synthetic entities — own image, a batch
neighbour's text — are built, and the easiest in-batch negatives are
swapped for the hardest synthetics under a strict similarity test.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

KMEANS_MAX_ITER = 50
KMEANS_TOL = 1e-4


@dataclass
class ClusterPlan:
    assignments: np.ndarray  # sample -> cluster id
    centroids: np.ndarray  # K x D


def kmeans_cluster(queries: np.ndarray, k: int, seed: int) -> ClusterPlan:
    """Lloyd's algorithm with k-means++ seeding on unit vectors.

    On the unit sphere squared Euclidean distance is 2 - 2*cos, so plain
    Euclidean k-means realizes cosine clustering.
    """
    n = queries.shape[0]
    if k < 1 or k > n:
        raise ConfigError(f"k={k} outside [1, {n}]")
    rng = np.random.default_rng(seed)

    # k-means++ seeding: D^2-weighted draws
    centroids = np.empty((k, queries.shape[1]), dtype=queries.dtype)
    centroids[0] = queries[rng.integers(n)]
    dist_sq = np.sum((queries - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        total = float(dist_sq.sum())
        if total <= 0.0:
            idx = int(rng.integers(n))  # all points coincide with a centroid
        else:
            idx = int(rng.choice(n, p=dist_sq / total))
        centroids[i] = queries[idx]
        dist_sq = np.minimum(dist_sq, np.sum((queries - centroids[i]) ** 2, axis=1))

    assignments = np.zeros(n, dtype=np.int64)
    for _ in range(KMEANS_MAX_ITER):
        d2 = (
            np.sum(queries**2, axis=1, keepdims=True)
            - 2.0 * queries @ centroids.T
            + np.sum(centroids**2, axis=1)[None, :]
        )
        assignments = np.argmin(d2, axis=1)
        new_centroids = centroids.copy()
        for c in range(k):
            members = assignments == c
            if members.any():
                new_centroids[c] = queries[members].mean(axis=0)
            else:
                new_centroids[c] = queries[int(rng.integers(n))]
        shift = float(np.sqrt(np.sum((new_centroids - centroids) ** 2)))
        centroids = new_centroids
        if shift < KMEANS_TOL:
            break
    d2 = (
        np.sum(queries**2, axis=1, keepdims=True)
        - 2.0 * queries @ centroids.T
        + np.sum(centroids**2, axis=1)[None, :]
    )
    assignments = np.argmin(d2, axis=1)
    return ClusterPlan(assignments=assignments, centroids=centroids)


def build_batches(plan: ClusterPlan, batch_size: int, seed: int) -> list[list[int]]:
    """Pack clusters into batches of ``batch_size`` sample indices.

    Clusters are visited in shuffled order and emitted contiguously;
    oversized clusters split, and a trailing partial batch is topped up
    from the cluster whose centroid is nearest. Every sample appears
    exactly once per epoch.
    """
    if batch_size < 2:
        raise ConfigError(f"batch size must be >= 2, got {batch_size}")
    rng = np.random.default_rng(seed)
    k = plan.centroids.shape[0]
    pools: dict[int, list[int]] = {}
    for c in range(k):
        members = np.flatnonzero(plan.assignments == c)
        if members.size:
            pools[c] = list(rng.permutation(members))

    centroid_dist = np.sqrt(
        np.sum((plan.centroids[:, None, :] - plan.centroids[None, :, :]) ** 2, axis=2)
    )
    order = [c for c in rng.permutation(k) if c in pools]

    batches: list[list[int]] = []
    for c in order:
        pool = pools.get(c)
        if not pool:
            continue
        while len(pool) >= batch_size:
            batches.append([int(i) for i in pool[:batch_size]])
            del pool[:batch_size]
        if pool:
            batch = [int(i) for i in pool]
            pool.clear()
            # pull the remainder from nearest-centroid clusters
            for other in np.argsort(centroid_dist[c], kind="stable"):
                other = int(other)
                if other == c or len(batch) >= batch_size:
                    continue
                donor = pools.get(other)
                while donor and len(batch) < batch_size:
                    batch.append(int(donor.pop(0)))
            batches.append(batch)
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2].extend(batches.pop())
    return batches


def random_batches(n: int, batch_size: int, seed: int) -> list[list[int]]:
    """Uniform-random batching (the vanilla baseline path)."""
    if batch_size < 2:
        raise ConfigError(f"batch size must be >= 2, got {batch_size}")
    perm = np.random.default_rng(seed).permutation(n)
    batches = [list(map(int, perm[i : i + batch_size])) for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2].extend(batches.pop())
    return batches


def assign_synthetics(
    batch_size: int,
    n_sync: int,
    seed: int,
    entity_ids: list[str] | None = None,
) -> list[list[int]]:
    """For each sample i, up to ``n_sync`` distinct donor indices drawn
    uniformly without replacement from the rest of the batch.

    When ``entity_ids`` is given, donors are restricted to samples of a
    *different entity* (a same-entity donor would synthesize an exact copy
    of the positive); a sample's donor list shrinks if the batch holds too
    few foreign samples.
    """
    if n_sync > batch_size - 1:
        raise ConfigError(f"n_sync={n_sync} exceeds batch size - 1 = {batch_size - 1}")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(batch_size):
        if entity_ids is None:
            others = [j for j in range(batch_size) if j != i]
        else:
            others = [j for j in range(batch_size) if entity_ids[j] != entity_ids[i]]
        take = min(n_sync, len(others))
        if take == 0:
            out.append([])
        else:
            out.append(sorted(int(j) for j in rng.choice(others, size=take, replace=False)))
    return out


@dataclass
class NegativeSlot:
    """One entry of a query's final negative list."""

    kind: str  # "orig" | "synth"
    index: int  # batch index j for originals, synthetic index m for synths
    sim: float


@dataclass
class SelectionResult:
    slots: list[NegativeSlot]  # exactly B-1 entries, original slot order
    replacements: list[dict] = field(default_factory=list)

    @property
    def replaced_count(self) -> int:
        return len(self.replacements)


def select_hard_negatives(
    query_vec: np.ndarray,
    originals: list[tuple[int, np.ndarray]],
    synthetics: list[np.ndarray],
) -> SelectionResult:
    """Swap easy in-batch negatives for harder synthetics.

    Originals ordered by ascending similarity to the query, synthetics by
    descending; greedily the easiest remaining original is replaced by the
    hardest remaining synthetic iff the synthetic is strictly more similar.
    Each synthetic is used at most once. Slot order of the originals is
    preserved in the output.
    """
    orig_sims = [float(np.dot(query_vec, vec)) for _, vec in originals]
    synth_sims = [float(np.dot(query_vec, vec)) for vec in synthetics]

    slots = [
        NegativeSlot("orig", idx, sim) for (idx, _), sim in zip(originals, orig_sims)
    ]
    order = sorted(range(len(slots)), key=lambda s: orig_sims[s])
    synth_order = sorted(range(len(synthetics)), key=lambda m: -synth_sims[m])

    replacements = []
    for slot_pos, m in zip(order, synth_order):
        if synth_sims[m] > orig_sims[slot_pos]:
            replacements.append(
                {
                    "slot": slot_pos,
                    "original_index": slots[slot_pos].index,
                    "synthetic_index": m,
                    "old_sim": orig_sims[slot_pos],
                    "new_sim": synth_sims[m],
                }
            )
            slots[slot_pos] = NegativeSlot("synth", m, synth_sims[m])
        else:
            break  # originals only get harder and synthetics weaker from here
    return SelectionResult(slots=slots, replacements=replacements)


def mean_pairwise_cosine(vectors: np.ndarray) -> float:
    """Mean off-diagonal pairwise dot product of unit rows."""
    n = vectors.shape[0]
    if n < 2:
        return 0.0
    gram = vectors @ vectors.T
    return float((gram.sum() - np.trace(gram)) / (n * (n - 1)))
