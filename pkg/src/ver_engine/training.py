"""Contrastive training of the adaptor.

InfoNCE over hard-negative-substituted batches, with gradients flowing
through both the positive and the synthetic entity embeddings (both are
functions of the same adaptor), Adam updates, and a cosine learning-rate
schedule. One training thread owns the parameters; runs are
bit-reproducible for a fixed seed and thread count.
"""

from __future__ import annotations

import math
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import batching
from .adaptor import (
    AdaptorCache,
    AdaptorParams,
    adaptor_backward,
    adaptor_forward_cached,
    init_grads,
)
from .errors import ConfigError, TrainingDiverged

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

MODALITIES = ("both", "image_only", "text_only")


@dataclass
class TrainConfig:
    batch_size: int = 128
    n_sync: int = 8
    lr: float = 1e-4
    epochs: int = 1
    seed: int = 0
    temperature_init: float = 0.07
    cluster: bool = True
    synthetic: bool = True
    detach_synthetics: bool = False
    modality: str = "both"
    precision: str = "f32"
    eval_interval: int = 0  # steps between eval_fn calls; 0 disables
    early_stop_patience: int = 0  # eval rounds without improvement; 0 disables

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if not 0 <= self.n_sync <= self.batch_size - 1:
            raise ConfigError(
                f"n_sync={self.n_sync} outside [0, batch_size-1={self.batch_size - 1}]"
            )
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.temperature_init <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature_init}")
        if self.modality not in MODALITIES:
            raise ConfigError(f"modality must be one of {MODALITIES}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision}")

    @property
    def effective_n_sync(self) -> int:
        return self.n_sync if self.synthetic else 0


@dataclass
class OptimizerState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


def init_opt_state(params: AdaptorParams) -> OptimizerState:
    return OptimizerState(
        step=0,
        m={n: np.zeros_like(a) for n, a in params.named_arrays()},
        v={n: np.zeros_like(a) for n, a in params.named_arrays()},
    )


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def adam_update(
    params: AdaptorParams,
    grads: Mapping[str, np.ndarray],
    opt_state: OptimizerState,
    lr: float,
) -> None:
    """Bias-corrected Adam, in place. No weight decay."""
    opt_state.step += 1
    t = opt_state.step
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for name, arr in params.named_arrays():
        g = grads[name]
        m = opt_state.m[name]
        v = opt_state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        arr -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    # keep the contrastive temperature at or above its floor; the bound is
    # rounded toward zero so the clamp holds after dtype rounding
    from .adaptor import MIN_TEMPERATURE

    bound = np.asarray(math.log(1.0 / MIN_TEMPERATURE), dtype=params.log_inv_temp.dtype)
    while math.exp(-float(bound)) < MIN_TEMPERATURE:
        bound = np.nextafter(bound, np.asarray(0.0, dtype=bound.dtype))
    np.clip(params.log_inv_temp, None, bound, out=params.log_inv_temp)


def infonce_loss(
    queries: list[np.ndarray],
    positives: list[np.ndarray],
    negative_sets: list[list[np.ndarray]],
    tau: float,
) -> tuple[float, list[np.ndarray], list[np.ndarray], list[list[np.ndarray]], float]:
    """Batch-mean InfoNCE with dot-product similarity over unit vectors.

    Returns (loss, d_queries, d_positives, d_negatives, d_tau); gradients
    are exact and already scaled by 1/B.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    b = len(queries)
    if not (len(positives) == len(negative_sets) == b):
        raise ConfigError("queries/positives/negative_sets lengths differ")

    total = 0.0
    d_q: list[np.ndarray] = []
    d_pos: list[np.ndarray] = []
    d_negs: list[list[np.ndarray]] = []
    d_tau = 0.0
    inv_b = 1.0 / b
    for i in range(b):
        h = queries[i]
        vecs = [positives[i]] + list(negative_sets[i])
        sims = np.array([float(np.dot(h, v)) for v in vecs])
        logits = sims / tau
        m = float(np.max(logits))
        lse = m + math.log(float(np.sum(np.exp(logits - m))))
        total += (lse - logits[0]) * inv_b

        p = np.exp(logits - lse)
        d_logits = p.copy()
        d_logits[0] -= 1.0
        d_logits *= inv_b
        d_sims = d_logits / tau
        d_tau += float(np.dot(d_logits, -sims / (tau * tau)))

        d_q.append(sum((ds * v for ds, v in zip(d_sims, vecs)), np.zeros_like(h)))
        d_pos.append((d_sims[0] * h).astype(h.dtype, copy=False))
        d_negs.append([(ds * h).astype(h.dtype, copy=False) for ds in d_sims[1:]])
    return float(total), d_q, d_pos, d_negs, d_tau


@dataclass
class EntityFeatures:
    """Primary-image patches plus description tokens of one entity."""

    patches: np.ndarray
    tokens: np.ndarray
    valid_len: int


@dataclass
class _BatchAux:
    pos_units: list[np.ndarray]
    pos_caches: list[AdaptorCache]
    syn_units: list[list[np.ndarray]]
    syn_caches: list[list[AdaptorCache]]
    selections: list[batching.SelectionResult]
    loss: float
    d_pos: list[np.ndarray]
    d_negs: list[list[np.ndarray]]
    d_tau: float
    replacement_rate: float


def batch_forward(
    queries: np.ndarray,
    entity_ids: list[str],
    features: Mapping[str, EntityFeatures],
    donors: list[list[int]],
    params: AdaptorParams,
    config: TrainConfig,
) -> _BatchAux:
    """Embed positives and synthetics, select negatives, evaluate the loss."""
    b = len(entity_ids)
    pos_units, pos_caches = [], []
    for eid in entity_ids:
        feat = features[eid]
        unit, cache = adaptor_forward_cached(
            feat.patches, feat.tokens, feat.valid_len, params, modality=config.modality
        )
        pos_units.append(unit)
        pos_caches.append(cache)

    syn_units: list[list[np.ndarray]] = []
    syn_caches: list[list[AdaptorCache]] = []
    for i in range(b):
        units_i, caches_i = [], []
        own = features[entity_ids[i]]
        for j in donors[i]:
            donor_feat = features[entity_ids[j]]
            unit, cache = adaptor_forward_cached(
                own.patches, donor_feat.tokens, donor_feat.valid_len, params,
                modality=config.modality,
            )
            units_i.append(unit)
            caches_i.append(cache)
        syn_units.append(units_i)
        syn_caches.append(caches_i)

    selections = []
    neg_sets: list[list[np.ndarray]] = []
    replaced = 0
    for i in range(b):
        originals = [(j, pos_units[j]) for j in range(b) if j != i]
        sel = batching.select_hard_negatives(queries[i], originals, syn_units[i])
        selections.append(sel)
        replaced += sel.replaced_count
        neg_sets.append(
            [
                pos_units[s.index] if s.kind == "orig" else syn_units[i][s.index]
                for s in sel.slots
            ]
        )

    tau = params.temperature()
    loss, _, d_pos, d_negs, d_tau = infonce_loss(
        [queries[i] for i in range(b)], pos_units, neg_sets, tau
    )
    return _BatchAux(
        pos_units, pos_caches, syn_units, syn_caches, selections,
        loss, d_pos, d_negs, d_tau,
        replacement_rate=replaced / max(1, b * (b - 1)),
    )


def batch_gradients(
    queries: np.ndarray,
    entity_ids: list[str],
    features: Mapping[str, EntityFeatures],
    donors: list[list[int]],
    params: AdaptorParams,
    config: TrainConfig,
) -> tuple[float, dict[str, np.ndarray], _BatchAux]:
    """Loss plus full parameter gradients for one batch (no update)."""
    aux = batch_forward(queries, entity_ids, features, donors, params, config)
    b = len(entity_ids)

    d_pos_total = [d.copy() for d in aux.d_pos]
    d_syn_total = [[np.zeros_like(u) for u in units] for units in aux.syn_units]
    for i in range(b):
        for slot, d_vec in zip(aux.selections[i].slots, aux.d_negs[i]):
            if slot.kind == "orig":
                d_pos_total[slot.index] += d_vec
            else:
                d_syn_total[i][slot.index] += d_vec

    grads = init_grads(params)
    for cache, d_unit in zip(aux.pos_caches, d_pos_total):
        adaptor_backward(cache, d_unit, params, grads)
    if not config.detach_synthetics:
        for i in range(b):
            for cache, d_unit in zip(aux.syn_caches[i], d_syn_total[i]):
                adaptor_backward(cache, d_unit, params, grads)

    tau = params.temperature()
    grads["log_inv_temp"][0] += aux.d_tau * (-tau)  # d tau / d log(1/tau) = -tau
    return aux.loss, grads, aux


@dataclass
class StepStats:
    step: int
    loss: float
    lr: float
    tau: float
    replacement_rate: float
    intra_batch_sim: float


def train_step(
    queries: np.ndarray,
    entity_ids: list[str],
    features: Mapping[str, EntityFeatures],
    donors: list[list[int]],
    params: AdaptorParams,
    opt_state: OptimizerState,
    config: TrainConfig,
    lr: float,
    step: int = 0,
    dump_dir: str | Path | None = None,
) -> StepStats:
    loss, grads, aux = batch_gradients(
        queries, entity_ids, features, donors, params, config
    )
    if not math.isfinite(loss):
        dump_dir = Path(dump_dir) if dump_dir else Path(tempfile.gettempdir())
        dump_path = dump_dir / f"diverged_step{step}.npz"
        np.savez(
            dump_path,
            queries=queries,
            entity_ids=np.array(entity_ids),
            donors=np.array([np.array(d) for d in donors], dtype=object),
            loss=loss,
        )
        raise TrainingDiverged(f"non-finite loss at step {step}; batch dumped to {dump_path}")
    adam_update(params, grads, opt_state, lr)
    return StepStats(
        step=step,
        loss=loss,
        lr=lr,
        tau=params.temperature(),
        replacement_rate=aux.replacement_rate,
        intra_batch_sim=batching.mean_pairwise_cosine(queries),
    )


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(parts).generate_state(1)[0])


@dataclass
class TrainResult:
    params: AdaptorParams
    opt_state: OptimizerState
    history: list[dict] = field(default_factory=list)
    best_metric: float | None = None
    best_step: int | None = None
    stopped_early: bool = False


def train(
    features: Mapping[str, EntityFeatures],
    query_vectors: np.ndarray,
    query_entity_ids: list[str],
    params: AdaptorParams,
    config: TrainConfig,
    eval_fn: Callable[[AdaptorParams], float] | None = None,
    log_sink: Callable[[dict], None] | None = None,
    dump_dir: str | Path | None = None,
) -> TrainResult:
    """Full training loop over (query vector, entity id) pairs.

    Each epoch re-clusters the query vectors with a fresh derived seed,
    packs batches, draws per-step synthetic donor assignments, and steps.
    ``eval_fn`` (higher = better) drives optional early stopping; the best
    parameters seen are restored on stop.
    """
    n = query_vectors.shape[0]
    if n != len(query_entity_ids):
        raise ConfigError("query vectors / entity ids length mismatch")
    if n < config.batch_size:
        raise ConfigError(
            f"{n} training samples cannot fill one batch of {config.batch_size}"
        )
    dtype = np.float32 if config.precision == "f32" else np.float64
    query_vectors = query_vectors.astype(dtype, copy=False)

    opt_state = init_opt_state(params)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * steps_per_epoch

    result = TrainResult(params=params, opt_state=opt_state)
    best_params = None
    evals_without_improvement = 0
    global_step = 0

    for epoch in range(config.epochs):
        if config.cluster:
            k = math.ceil(n / config.batch_size)
            plan = batching.kmeans_cluster(
                query_vectors, k, _derived_seed(config.seed, epoch, 1)
            )
            batches = batching.build_batches(
                plan, config.batch_size, _derived_seed(config.seed, epoch, 2)
            )
        else:
            batches = batching.random_batches(
                n, config.batch_size, _derived_seed(config.seed, epoch, 3)
            )

        for batch in batches:
            b = len(batch)
            batch_entities = [query_entity_ids[i] for i in batch]
            donors = batching.assign_synthetics(
                b,
                min(config.effective_n_sync, b - 1),
                _derived_seed(config.seed, epoch, 4, global_step),
                entity_ids=batch_entities,
            )
            lr = cosine_lr(min(global_step, total_steps), total_steps, config.lr)
            stats = train_step(
                query_vectors[batch],
                [query_entity_ids[i] for i in batch],
                features,
                donors,
                params,
                opt_state,
                config,
                lr,
                step=global_step,
                dump_dir=dump_dir,
            )
            row = {
                "step": stats.step,
                "epoch": epoch,
                "loss": stats.loss,
                "lr": stats.lr,
                "tau": stats.tau,
                "replacement_rate": stats.replacement_rate,
                "intra_batch_sim": stats.intra_batch_sim,
            }
            result.history.append(row)
            if log_sink is not None:
                log_sink(row)
            global_step += 1

            if eval_fn is not None and config.eval_interval > 0 and (
                global_step % config.eval_interval == 0
            ):
                metric = float(eval_fn(params))
                if log_sink is not None:
                    log_sink({"step": global_step - 1, "eval_metric": metric})
                if result.best_metric is None or metric > result.best_metric:
                    result.best_metric = metric
                    result.best_step = global_step
                    best_params = params.copy()
                    evals_without_improvement = 0
                else:
                    evals_without_improvement += 1
                    if (
                        config.early_stop_patience > 0
                        and evals_without_improvement >= config.early_stop_patience
                    ):
                        result.stopped_early = True
                        break
        if result.stopped_early:
            break

    if best_params is not None and result.stopped_early:
        for name, arr in best_params.named_arrays():
            params.set_named(name, arr)
    return result
