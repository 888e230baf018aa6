"""Metrics, representation diagnostics, and the synthetic planted-signal KB.

The generator plants a compositional signal that makes the whole pipeline
verifiable at desk scale: each entity carries a unit code; its description
embeds the lifted code at a random subset of token positions (with other
entities' codes as distractors elsewhere), its image patches mark those
informative positions in a visual subspace, and queries are noisy codes.
Recovering the ground truth therefore requires using the patches to select
the informative tokens, while a fixed linear decoder exists by
construction, so held-out entities remain solvable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import index as index_mod
from .adaptor import (
    AdaptorConfig,
    AdaptorParams,
    PatchFeatures,
    TokenEmbeddings,
    adaptor_forward_cached,
    init_params,
)
from .errors import ConfigError, EngineError
from .store import FeatureBundle, QueryRecord, QuerySet
from .training import EntityFeatures, TrainConfig, train

DEFAULT_KS = (1, 5, 10, 20)


def harmonic_mean(seen: float, unseen: float) -> float:
    if seen < 0 or unseen < 0:
        raise EngineError(f"rates must be non-negative: {seen}, {unseen}")
    if seen == 0 and unseen == 0:
        return 0.0
    return 2.0 * seen * unseen / (seen + unseen)


@dataclass
class EvalReport:
    top1_seen: float | None
    top1_unseen: float | None
    top1_overall: float
    hm: float | None
    recall: dict[int, float]
    counts: dict[str, int]
    hm_undefined: bool = False

    def to_json(self) -> dict:
        return {
            "top1_seen": self.top1_seen,
            "top1_unseen": self.top1_unseen,
            "top1_overall": self.top1_overall,
            "hm": self.hm,
            "hm_undefined": self.hm_undefined,
            "recall": {str(k): v for k, v in sorted(self.recall.items())},
            "counts": self.counts,
        }


def eval_retrieval(
    shard: index_mod.IndexShard,
    queries: QuerySet,
    ks: Sequence[int] = DEFAULT_KS,
    use_ivf: bool = False,
    n_probe: int | None = None,
) -> EvalReport:
    """Per-split top-1 accuracy, recall@K over entities, and their harmonic
    mean. An empty split is reported as absent and leaves HM undefined."""
    known = set(shard.entity_ids)
    for r in queries.records:
        if r.entity_id not in known:
            raise ConfigError(f"query {r.query_id}: ground truth {r.entity_id!r} not indexed")
    ks = sorted(set(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise ConfigError(f"invalid recall cutoffs: {ks}")
    k_max = ks[-1]

    hits_at = {k: 0 for k in ks}
    split_hits = {"seen": 0, "unseen": 0}
    split_total = {"seen": 0, "unseen": 0}
    for r in queries.records:
        if use_ivf:
            result = index_mod.query_ivf(shard, r.vector, k_max, n_probe)
        else:
            result = index_mod.query(shard, r.vector, k_max)
        ranked_ids = [eid for eid, _, _ in result.entries]
        rank = ranked_ids.index(r.entity_id) if r.entity_id in ranked_ids else None
        for k in ks:
            if rank is not None and rank < k:
                hits_at[k] += 1
        split_total[r.split] += 1
        if rank == 0:
            split_hits[r.split] += 1

    total = len(queries.records)
    top1_seen = split_hits["seen"] / split_total["seen"] if split_total["seen"] else None
    top1_unseen = (
        split_hits["unseen"] / split_total["unseen"] if split_total["unseen"] else None
    )
    overall = (split_hits["seen"] + split_hits["unseen"]) / total if total else 0.0
    hm_undefined = top1_seen is None or top1_unseen is None
    return EvalReport(
        top1_seen=top1_seen,
        top1_unseen=top1_unseen,
        top1_overall=overall,
        hm=None if hm_undefined else harmonic_mean(top1_seen, top1_unseen),
        recall={k: hits_at[k] / total for k in ks} if total else {k: 0.0 for k in ks},
        counts={"total": total, **split_total},
        hm_undefined=hm_undefined,
    )


def silhouette_score(embeddings: np.ndarray, labels: Sequence) -> float:
    """Mean silhouette under cosine distance (1 - cos of row directions).

    Samples in singleton clusters score 0; fewer than two labels is an
    error.
    """
    labels = np.asarray(labels)
    n = embeddings.shape[0]
    if labels.shape[0] != n:
        raise ConfigError("labels length != number of embeddings")
    unique = np.unique(labels)
    if unique.size < 2:
        raise ConfigError("silhouette needs at least two labels")

    norms = np.linalg.norm(embeddings, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ConfigError("zero embedding row")
    unit = embeddings / norms
    dist = 1.0 - unit @ unit.T

    scores = np.zeros(n)
    members = {lab: np.flatnonzero(labels == lab) for lab in unique}
    for i in range(n):
        own = members[labels[i]]
        if own.size == 1:
            continue  # singleton: score 0
        a = float(dist[i, own].sum() / (own.size - 1))
        b = math.inf
        for lab in unique:
            if lab == labels[i]:
                continue
            other = members[lab]
            b = min(b, float(dist[i, other].mean()))
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0 else (b - a) / denom
    return float(scores.mean())


# ---------------------------------------------------------------------------
# Synthetic planted-signal knowledge base
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    n_entities: int
    n_seen: int
    queries_per_entity: int  # training queries per seen entity
    d: int = 64
    d_t: int = 96
    n_p: int = 16
    n_t: int = 32
    eval_queries_per_entity: int = 4
    images_per_entity: int = 1
    n_informative: int = 0  # token positions carrying the code; 0 = n_t // 2
    query_noise: float = 0.4
    patch_noise: float = 0.25
    token_noise: float = 0.15
    pooled_noise: float = 0.15
    posenc_scale: float = 0.75
    distractor_scale: float = 0.7
    confusable: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.n_seen <= self.n_entities:
            raise ConfigError(f"n_seen={self.n_seen} outside (0, {self.n_entities}]")
        if min(self.d, self.d_t, self.n_p, self.n_t, self.queries_per_entity) < 1:
            raise ConfigError("all dims and counts must be >= 1")
        if self.n_informative == 0:
            object.__setattr__(self, "n_informative", max(1, self.n_t // 2))
        if self.n_informative < 1 or self.n_informative > self.n_t:
            raise ConfigError(f"n_informative={self.n_informative} outside [1, {self.n_t}]")
        if self.confusable and (self.n_entities % 2 or self.n_seen % 2):
            raise ConfigError("confusable mode needs even n_entities and n_seen")

    def scale_noise(self, factor: float) -> "SynthSpec":
        return replace(
            self,
            query_noise=self.query_noise * factor,
            patch_noise=self.patch_noise * factor,
            token_noise=self.token_noise * factor,
            pooled_noise=self.pooled_noise * factor,
        )

    @classmethod
    def desk_recovery(cls, seed: int) -> "SynthSpec":
        """Planted-recovery benchmark: clean signal at moderate noise."""
        return cls(
            n_entities=256, n_seen=64, queries_per_entity=20,
            d=64, d_t=96, n_p=16, n_t=32, seed=seed,
        )

    @classmethod
    def desk_confusable(cls, seed: int) -> "SynthSpec":
        """Confusable-pairs benchmark: pair-shared appearance, full-strength
        distractors, one training query per entity."""
        return cls(
            n_entities=192, n_seen=128, queries_per_entity=1,
            eval_queries_per_entity=4, d=64, d_t=96, n_p=16, n_t=32,
            confusable=True, distractor_scale=1.0, seed=seed,
        )


# training presets matched to the desk benchmarks
def desk_recovery_config(seed: int) -> "TrainConfig":
    return TrainConfig(
        batch_size=16, n_sync=15, lr=3e-3, epochs=1, seed=seed, cluster=False
    )


def desk_confusable_config(seed: int) -> "TrainConfig":
    return TrainConfig(batch_size=16, n_sync=8, lr=3e-3, epochs=8, seed=seed)


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    m = rng.standard_normal((n, d))
    return (m / np.linalg.norm(m, axis=1, keepdims=True)).astype(np.float32)


def _noisy_unit(rng: np.random.Generator, base: np.ndarray, sigma: float) -> np.ndarray:
    # sigma is the expected noise norm relative to the unit base vector
    d = base.shape[0]
    v = base + sigma * (rng.standard_normal(d) / math.sqrt(d))
    return (v / np.linalg.norm(v)).astype(np.float32)


def gen_synthetic_kb(
    spec: SynthSpec,
) -> tuple[list[FeatureBundle], QuerySet, QuerySet]:
    """Deterministic planted-signal KB: (bundles, train queries, eval queries).

    Entities [0, n_seen) are the seen split. In confusable mode consecutive
    entity pairs share their pooled image vector (and the visual part of
    their queries) while keeping distinct codes, and each entity's
    distractor tokens include its partner's code — the pooled-vector
    baseline then degrades to a within-pair coin flip, and only text-level
    discrimination separates the pair.
    """
    rng = np.random.default_rng(spec.seed)
    ent = spec.n_entities

    codes = _unit_rows(rng, ent, spec.d)
    # fixed random lift into the text space, scaled to keep lifted codes ~unit
    lift = rng.standard_normal((spec.d, spec.d_t)).astype(np.float32) / math.sqrt(spec.d)
    lift *= math.sqrt(spec.d / spec.d_t)
    markers = _unit_rows(rng, spec.n_t, spec.d)
    # token position encodings are one fixed linear image of the visual
    # markers, so patch -> token position matching is a single global map
    pos_lift = rng.standard_normal((spec.d, spec.d_t)).astype(np.float32) / math.sqrt(spec.d)
    pos_lift *= math.sqrt(spec.d / spec.d_t)
    posenc = (markers @ pos_lift) * spec.posenc_scale

    if spec.confusable:
        # the pair's shared visual appearance is the normalized sum of its
        # codes, so both members' embeddings compete for the same queries
        shared = codes[0::2] + codes[1::2]
        shared /= np.linalg.norm(shared, axis=1, keepdims=True)
        visual_codes = np.repeat(shared, 2, axis=0)
    else:
        visual_codes = codes

    def lifted(i: int) -> np.ndarray:
        return codes[i] @ lift

    bundles: list[FeatureBundle] = []
    for e in range(ent):
        eid = f"entity-{e:05d}"
        min_valid = max(spec.n_informative + 2, 3 * spec.n_t // 4)
        valid_len = int(rng.integers(min(min_valid, spec.n_t), spec.n_t + 1))
        informative = rng.choice(valid_len, size=spec.n_informative, replace=False)
        info_set = set(int(p) for p in informative)

        partner = e + 1 if e % 2 == 0 else e - 1
        partner_slots: set[int] = set()
        if spec.confusable:
            free = [p for p in range(valid_len) if p not in info_set]
            n_partner = min(2, len(free))
            if n_partner:
                partner_slots = set(
                    int(p) for p in rng.choice(free, size=n_partner, replace=False)
                )

        tokens = np.empty((spec.n_t, spec.d_t), dtype=np.float32)
        for pos in range(spec.n_t):
            if pos >= valid_len:
                # padding rows: garbage the mask must neutralize
                tokens[pos] = rng.standard_normal(spec.d_t)
                continue
            if pos in info_set:
                content = lifted(e)
            elif pos in partner_slots:
                content = lifted(partner)
            else:
                donor = int(rng.integers(ent - 1))
                donor = donor if donor < e else donor + 1
                content = spec.distractor_scale * lifted(donor)
            noise = spec.token_noise * rng.standard_normal(spec.d_t) / math.sqrt(spec.d_t)
            tokens[pos] = content + posenc[pos] + noise

        images, pooled = [], []
        info_list = sorted(info_set)
        for img_idx in range(spec.images_per_entity):
            patches = np.empty((spec.n_p, spec.d), dtype=np.float32)
            for j in range(spec.n_p):
                pos = info_list[j % len(info_list)]
                noise = spec.patch_noise * rng.standard_normal(spec.d) / math.sqrt(spec.d)
                patches[j] = markers[pos] + noise
            images.append(PatchFeatures(patches))
            if spec.confusable:
                # pooled vectors are exactly pair-shared: the visual channel
                # alone cannot tell pair members apart
                pair_rng = np.random.default_rng(
                    np.random.SeedSequence((spec.seed, 7919, e // 2, img_idx))
                )
                pooled.append(_noisy_unit(pair_rng, visual_codes[e], spec.pooled_noise))
            else:
                pooled.append(_noisy_unit(rng, visual_codes[e], spec.pooled_noise))
        bundles.append(
            FeatureBundle(eid, TokenEmbeddings(tokens, valid_len), images, pooled)
        )

    def make_query(e: int) -> np.ndarray:
        if spec.confusable:
            # mostly the pair-shared appearance, with a weak entity cue
            base = 0.75 * visual_codes[e] + 0.25 * codes[e]
            base = base / np.linalg.norm(base)
        else:
            base = codes[e]
        return _noisy_unit(rng, base, spec.query_noise)

    train_records, eval_records = [], []
    for e in range(spec.n_seen):
        for t in range(spec.queries_per_entity):
            train_records.append(
                QueryRecord(
                    f"train-{e:05d}-{t:03d}", make_query(e), f"entity-{e:05d}", "seen"
                )
            )
    for e in range(ent):
        split = "seen" if e < spec.n_seen else "unseen"
        for t in range(spec.eval_queries_per_entity):
            eval_records.append(
                QueryRecord(f"eval-{e:05d}-{t:03d}", make_query(e), f"entity-{e:05d}", split)
            )
    return bundles, QuerySet(train_records), QuerySet(eval_records)


def bundle_features(bundles: list[FeatureBundle]) -> dict[str, EntityFeatures]:
    """Primary-image training features keyed by entity id."""
    return {
        b.entity_id: EntityFeatures(
            b.image_features[0].patches,
            b.description_tokens.tokens,
            b.description_tokens.valid_len,
        )
        for b in bundles
    }


def pooled_nn_top1(bundles: list[FeatureBundle], queries: QuerySet) -> float:
    """Nearest-neighbour baseline over primary pooled image vectors."""
    ids = [b.entity_id for b in bundles]
    mat = np.stack([b.pooled_image_vectors[0] for b in bundles])
    hits = 0
    for r in queries.records:
        h = r.vector / np.linalg.norm(r.vector)
        best = int(np.argmax(mat @ h))
        hits += ids[best] == r.entity_id
    return hits / len(queries.records)


def embed_bundles(
    bundles: list[FeatureBundle],
    params: AdaptorParams,
    all_images: bool = True,
    modality: str = "both",
) -> index_mod.IndexShard:
    """In-memory counterpart of embed-kb for benchmarking loops."""
    rows = []
    for b in bundles:
        toks = b.description_tokens
        images = b.image_features if all_images else b.image_features[:1]
        for image_id, img in enumerate(images):
            unit, _ = adaptor_forward_cached(
                img.patches, toks.tokens, toks.valid_len, params, modality=modality
            )
            rows.append((b.entity_id, image_id, unit.astype(np.float32)))
    return index_mod.build_shard(rows)


def eval_set_silhouette(shard: index_mod.IndexShard, queries: QuerySet) -> float:
    """Cluster-separation diagnostic of the trained representation space:
    each entity's cluster holds its eval query vectors plus its per-image
    embeddings, so the score rises when entity embeddings sit inside their
    own query neighbourhood and away from competing entities'."""
    points, labels = [], []
    wanted = {r.entity_id for r in queries.records}
    for r in queries.records:
        points.append(r.vector / np.linalg.norm(r.vector))
        labels.append(r.entity_id)
    eidx = {eid: i for i, eid in enumerate(shard.entity_ids)}
    starts = shard.group_starts()
    for eid in sorted(wanted):
        e = eidx[eid]
        start = int(starts[e])
        end = int(starts[e + 1]) if e + 1 < starts.size else shard.n_rows
        for row in range(start, end):
            points.append(shard.matrix[row])
            labels.append(eid)
    return silhouette_score(np.stack(points), labels)


# ---------------------------------------------------------------------------
# Ablation harness
# ---------------------------------------------------------------------------

ABLATION_CONFIGS = (
    # (name, modality, cluster, synthetic)
    ("image-only", "image_only", False, False),
    ("text-only", "text_only", False, False),
    ("image+text", "both", False, False),
    ("image+text+cluster", "both", True, False),
    ("image+text+synthetic", "both", False, True),
    ("full", "both", True, True),
)


@dataclass
class AblationRow:
    name: str
    modality: str
    cluster: bool
    synthetic: bool
    seed: int
    top1_seen: float | None
    top1_unseen: float | None
    top1_overall: float
    hm: float | None
    silhouette: float

    def to_json(self) -> dict:
        return self.__dict__.copy()


def run_single_config(
    spec: SynthSpec,
    base_config: TrainConfig,
    modality: str,
    cluster: bool,
    synthetic: bool,
    seed: int,
) -> AblationRow:
    """Train one configuration on a fresh KB and evaluate it."""
    bundles, train_q, eval_q = gen_synthetic_kb(replace(spec, seed=seed))
    features = bundle_features(bundles)
    cfg = replace(
        base_config, modality=modality, cluster=cluster, synthetic=synthetic, seed=seed
    )
    dims = AdaptorConfig(d_t=spec.d_t, d=spec.d, heads=min(16, spec.d))
    params = init_params(seed, dims)
    qvecs = np.stack([r.vector for r in train_q.records])
    qids = [r.entity_id for r in train_q.records]
    train(features, qvecs, qids, params, cfg)
    shard = embed_bundles(bundles, params, modality=modality)
    report = eval_retrieval(shard, eval_q)
    sil = eval_set_silhouette(shard, eval_q)
    return AblationRow(
        name=_config_name(modality, cluster, synthetic),
        modality=modality,
        cluster=cluster,
        synthetic=synthetic,
        seed=seed,
        top1_seen=report.top1_seen,
        top1_unseen=report.top1_unseen,
        top1_overall=report.top1_overall,
        hm=report.hm,
        silhouette=sil,
    )


def _config_name(modality: str, cluster: bool, synthetic: bool) -> str:
    for name, m, c, s in ABLATION_CONFIGS:
        if (m, c, s) == (modality, cluster, synthetic):
            return name
    return f"{modality}/cluster={cluster}/synthetic={synthetic}"


def ablation_run(
    spec: SynthSpec, base_config: TrainConfig, seeds: Sequence[int]
) -> list[AblationRow]:
    """Modality and training-strategy grid over shared specs and seeds."""
    rows = []
    for name, modality, cluster, synthetic in ABLATION_CONFIGS:
        for seed in seeds:
            rows.append(
                run_single_config(spec, base_config, modality, cluster, synthetic, seed)
            )
    return rows


@dataclass
class ComparisonReport:
    """Full method vs vanilla in-batch InfoNCE across seeds."""

    rows: list[AblationRow]
    top1_wins: int
    silhouette_wins: int
    n_seeds: int

    def to_json(self) -> dict:
        return {
            "n_seeds": self.n_seeds,
            "top1_wins": self.top1_wins,
            "silhouette_wins": self.silhouette_wins,
            "rows": [r.to_json() for r in self.rows],
        }


def compare_full_vs_vanilla(
    spec: SynthSpec, base_config: TrainConfig, seeds: Sequence[int]
) -> ComparisonReport:
    rows = []
    top1_wins = 0
    sil_wins = 0
    for seed in seeds:
        vanilla = run_single_config(spec, base_config, "both", False, False, seed)
        full = run_single_config(spec, base_config, "both", True, True, seed)
        rows.extend([vanilla, full])
        top1_wins += full.top1_overall >= vanilla.top1_overall
        sil_wins += full.silhouette >= vanilla.silhouette
    return ComparisonReport(rows, top1_wins, sil_wins, len(seeds))
