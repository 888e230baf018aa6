"""Central finite-difference verification of the hand-written adjoints.

The numerical side never touches the analytic backward code: it only calls
scalar objectives built from forward passes, perturbing one parameter
entry at a time at double precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .adaptor import AdaptorConfig, AdaptorParams, init_params
from .evalbench import SynthSpec, bundle_features, gen_synthetic_kb
from .training import TrainConfig, batch_forward, batch_gradients

DEFAULT_STEP = 1e-5


def central_difference(
    objective: Callable[[], float], arr: np.ndarray, h: float = DEFAULT_STEP
) -> np.ndarray:
    """d objective / d arr, one entry at a time, evaluated in place."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = objective()
        flat[i] = orig - h
        f_minus = objective()
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err <= self.tolerance


@dataclass
class GradCheckReport:
    results: list[GradCheckResult] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.results)

    def worst(self) -> float:
        return max((r.max_rel_err for r in self.results), default=0.0)


def tiny_objective_fixture(
    batch: int = 3,
    d: int = 8,
    d_t: int = 12,
    n_p: int = 2,
    n_t: int = 4,
    heads: int = 1,
    layers: int = 2,
    n_sync: int = 2,
    seed: int = 0,
):
    """A fixed tiny batch plus double-precision parameters for checking the
    full objective: adaptor forward for positives and synthetics, hard
    negative selection, and the contrastive loss."""
    spec = SynthSpec(
        n_entities=batch,
        n_seen=batch,
        queries_per_entity=1,
        d=d,
        d_t=d_t,
        n_p=n_p,
        n_t=n_t,
        n_informative=min(2, n_t),
        eval_queries_per_entity=1,
        seed=seed,
    )
    bundles, train_q, _ = gen_synthetic_kb(spec)
    features = {
        k: _as_f64(v) for k, v in bundle_features(bundles).items()
    }
    config = TrainConfig(
        batch_size=batch, n_sync=n_sync, precision="f64", cluster=False, seed=seed
    )
    params = init_params(
        seed, AdaptorConfig(d_t=d_t, d=d, layers=layers, heads=heads), dtype=np.float64
    )
    queries = np.stack([r.vector for r in train_q.records]).astype(np.float64)
    entity_ids = [r.entity_id for r in train_q.records]
    rng = np.random.default_rng(seed + 1)
    donors = [
        sorted(rng.choice([j for j in range(batch) if j != i], n_sync, replace=False))
        for i in range(batch)
    ]
    donors = [[int(j) for j in row] for row in donors]
    return queries, entity_ids, features, donors, params, config


def _as_f64(f):
    from .training import EntityFeatures

    return EntityFeatures(
        f.patches.astype(np.float64), f.tokens.astype(np.float64), f.valid_len
    )


def check_full_objective(
    tolerance: float = 1e-4, h: float = DEFAULT_STEP, **fixture_kwargs
) -> GradCheckReport:
    """Analytic gradients of the full adaptor + contrastive objective vs
    central finite differences, parameter tensor by parameter tensor."""
    queries, entity_ids, features, donors, params, config = tiny_objective_fixture(
        **fixture_kwargs
    )
    _, grads, _ = batch_gradients(queries, entity_ids, features, donors, params, config)

    def objective() -> float:
        aux = batch_forward(queries, entity_ids, features, donors, params, config)
        return aux.loss

    report = GradCheckReport()
    for name, arr in params.named_arrays():
        numeric = central_difference(objective, arr, h)
        report.results.append(
            GradCheckResult(name, max_relative_error(grads[name], numeric), tolerance)
        )
    return report


def check_kernel_backwards(tolerance: float = 1e-6, seed: int = 0) -> GradCheckReport:
    """Spot-check each kernel adjoint in isolation at double precision."""
    from . import kernels

    rng = np.random.default_rng(seed)
    report = GradCheckReport()

    # layer_norm
    x = rng.standard_normal((4, 6))
    gamma = rng.standard_normal((1, 6))
    beta = rng.standard_normal((1, 6))
    w = rng.standard_normal((4, 6))  # fixed projection making the output scalar

    def ln_obj() -> float:
        out, _ = kernels.layer_norm(x, gamma, beta, 1e-5)
        return float(np.sum(out * w))

    out, cache = kernels.layer_norm(x, gamma, beta, 1e-5)
    dx, dg, db = kernels.layer_norm_backward(cache, gamma, w)
    for name, arr, analytic in (("layer_norm/x", x, dx), ("layer_norm/gamma", gamma, dg),
                                ("layer_norm/beta", beta, db)):
        numeric = central_difference(ln_obj, arr)
        report.results.append(
            GradCheckResult(name, max_relative_error(analytic, numeric), tolerance)
        )

    # mha
    q = rng.standard_normal((3, 8))
    kv = rng.standard_normal((5, 8))
    ws = {n: rng.standard_normal((8, 8)) * 0.3 for n in ("w_q", "w_k", "w_v", "w_o")}
    wout = rng.standard_normal((3, 8))
    mask = np.zeros(5)
    mask[4] = -np.inf

    def mha_obj() -> float:
        out, _ = kernels.mha_forward(q, kv, kv, ws["w_q"], ws["w_k"], ws["w_v"],
                                     ws["w_o"], heads=2, key_mask=mask)
        return float(np.sum(out * wout))

    out, cache = kernels.mha_forward(
        q, kv, kv, ws["w_q"], ws["w_k"], ws["w_v"], ws["w_o"], heads=2, key_mask=mask
    )
    dq, dk, dv, dwq, dwk, dwv, dwo = kernels.mha_backward(cache, wout)
    checks = [
        ("mha/q", q, dq),
        ("mha/w_q", ws["w_q"], dwq),
        ("mha/w_k", ws["w_k"], dwk),
        ("mha/w_v", ws["w_v"], dwv),
        ("mha/w_o", ws["w_o"], dwo),
    ]
    for name, arr, analytic in checks:
        numeric = central_difference(mha_obj, arr)
        report.results.append(
            GradCheckResult(name, max_relative_error(analytic, numeric), tolerance)
        )
    # key/value share the input tensor, so compare against their summed adjoint
    numeric = central_difference(mha_obj, kv)
    report.results.append(
        GradCheckResult("mha/kv", max_relative_error(dk + dv, numeric), tolerance)
    )

    # gelu
    g_in = rng.standard_normal((3, 4))
    g_w = rng.standard_normal((3, 4))

    def gelu_obj() -> float:
        y, _ = kernels.gelu(g_in)
        return float(np.sum(y * g_w))

    _, g_cache = kernels.gelu(g_in)
    numeric = central_difference(gelu_obj, g_in)
    report.results.append(
        GradCheckResult(
            "gelu/x",
            max_relative_error(kernels.gelu_backward(g_cache, g_w), numeric),
            tolerance,
        )
    )
    return report


def run_suite(tolerance: float = 1e-4, **fixture_kwargs) -> GradCheckReport:
    """Kernel-level checks plus the full-graph check; used by the CLI."""
    report = check_kernel_backwards(tolerance=max(tolerance * 1e-2, 1e-7))
    full = check_full_objective(tolerance=tolerance, **fixture_kwargs)
    report.results.extend(full.results)
    return report
