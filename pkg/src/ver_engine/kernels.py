"""Dense-matrix kernels for the adaptor graph.

Forward passes plus hand-written reverse-mode adjoints for exactly the
operations the fixed graph needs; no general autodiff. Everything operates
on 2-D row-major numpy arrays and preserves the input dtype (float32 for
training/inference, float64 for verification). All reductions are plain
numpy ops, so results are bit-reproducible across runs at a fixed thread
count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, DimensionError

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def check_matrix(m: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Validate a finite 2-D array (checked construction mode)."""
    m = np.ascontiguousarray(m)
    if m.ndim != 2:
        raise DimensionError(f"{name}: expected 2-D, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise DegenerateInputError(f"{name}: contains NaN/Inf")
    return m


@dataclass
class GradPair:
    """A parameter tensor paired with its gradient accumulator."""

    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise DimensionError(
                f"grad shape {self.grad.shape} != value shape {self.value.shape}"
            )

    def zero_(self) -> None:
        self.grad[...] = 0.0


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row softmax with max-subtraction. Rows of -inf entries are allowed as
    long as each row keeps at least one finite entry."""
    shifted = m - np.max(m, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_rows_backward(soft: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    inner = np.sum(d_out * soft, axis=-1, keepdims=True)
    return soft * (d_out - inner)


def layer_norm(
    m: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float
) -> tuple[np.ndarray, tuple]:
    """Per-row normalization with affine. Returns (out, cache)."""
    if eps <= 0:
        raise DimensionError(f"layer_norm eps must be > 0, got {eps}")
    if gamma.shape != (1, m.shape[1]) or beta.shape != (1, m.shape[1]):
        raise DimensionError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} "
            f"do not match {m.shape[1]} columns"
        )
    mu = np.mean(m, axis=1, keepdims=True)
    centered = m - mu
    var = np.mean(centered * centered, axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=m.dtype))
    xhat = centered * inv_std
    out = xhat * gamma + beta
    return out, (xhat, inv_std)


def layer_norm_backward(
    cache: tuple, gamma: np.ndarray, d_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (d_input, d_gamma, d_beta)."""
    xhat, inv_std = cache
    d_gamma = np.sum(d_out * xhat, axis=0, keepdims=True)
    d_beta = np.sum(d_out, axis=0, keepdims=True)
    d_xhat = d_out * gamma
    m1 = np.mean(d_xhat, axis=1, keepdims=True)
    m2 = np.mean(d_xhat * xhat, axis=1, keepdims=True)
    d_in = inv_std * (d_xhat - m1 - xhat * m2)
    return d_in, d_gamma, d_beta


@dataclass
class MhaCache:
    q_in: np.ndarray
    k_in: np.ndarray
    v_in: np.ndarray
    q_heads: np.ndarray  # H x Nq x dh
    k_heads: np.ndarray  # H x Nk x dh
    v_heads: np.ndarray  # H x Nk x dh
    attn: np.ndarray  # H x Nq x Nk
    ctx: np.ndarray  # Nq x D (concatenated heads, pre-output-projection)
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    heads: int
    scale: float


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    n, d = x.shape
    return x.reshape(n, heads, d // heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dh)


def mha_forward(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    w_q: np.ndarray,
    w_k: np.ndarray,
    w_v: np.ndarray,
    w_o: np.ndarray,
    heads: int,
    key_mask: np.ndarray | None = None,
) -> tuple[np.ndarray, MhaCache]:
    """Scaled dot-product multi-head attention, queries over keys/values.

    ``key_mask`` is an additive row of shape (Nk,), 0 for valid positions and
    -inf for padding; masked positions get exactly zero attention weight.
    """
    d = q.shape[1]
    if d % heads != 0:
        raise DimensionError(f"model dim {d} not divisible by {heads} heads")
    if k.shape != v.shape or k.shape[1] != d:
        raise DimensionError(f"key/value shapes {k.shape}/{v.shape} inconsistent with dim {d}")
    scale = 1.0 / math.sqrt(d // heads)

    qh = _split_heads(q @ w_q, heads)
    kh = _split_heads(k @ w_k, heads)
    vh = _split_heads(v @ w_v, heads)

    logits = (qh @ kh.transpose(0, 2, 1)) * np.asarray(scale, dtype=q.dtype)
    if key_mask is not None:
        logits = logits + key_mask[None, None, :]
    attn = softmax_rows(logits)
    ctx = _merge_heads(attn @ vh)
    out = ctx @ w_o
    cache = MhaCache(q, k, v, qh, kh, vh, attn, ctx, w_q, w_k, w_v, w_o, heads, scale)
    return out, cache


def mha_backward(
    cache: MhaCache, d_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Returns (d_q_in, d_k_in, d_v_in, dW_q, dW_k, dW_v, dW_o)."""
    d_wo = cache.ctx.T @ d_out
    d_ctx = _split_heads(d_out @ cache.w_o.T, cache.heads)

    d_attn = d_ctx @ cache.v_heads.transpose(0, 2, 1)
    d_vh = cache.attn.transpose(0, 2, 1) @ d_ctx
    d_logits = softmax_rows_backward(cache.attn, d_attn)
    scale = np.asarray(cache.scale, dtype=d_out.dtype)
    d_qh = (d_logits @ cache.k_heads) * scale
    d_kh = (d_logits.transpose(0, 2, 1) @ cache.q_heads) * scale

    d_q_proj = _merge_heads(d_qh)
    d_k_proj = _merge_heads(d_kh)
    d_v_proj = _merge_heads(d_vh)

    d_wq = cache.q_in.T @ d_q_proj
    d_wk = cache.k_in.T @ d_k_proj
    d_wv = cache.v_in.T @ d_v_proj
    d_q_in = d_q_proj @ cache.w_q.T
    d_k_in = d_k_proj @ cache.w_k.T
    d_v_in = d_v_proj @ cache.w_v.T
    return d_q_in, d_k_in, d_v_in, d_wq, d_wk, d_wv, d_wo


def mean_pool(m: np.ndarray) -> np.ndarray:
    if m.ndim != 2 or m.shape[0] < 1:
        raise DimensionError(f"mean_pool expects a non-empty 2-D input, got {m.shape}")
    return np.mean(m, axis=0)


def mean_pool_backward(d_vec: np.ndarray, n_rows: int) -> np.ndarray:
    return np.tile(d_vec / np.asarray(n_rows, dtype=d_vec.dtype), (n_rows, 1))


def l2_normalize(v: np.ndarray) -> tuple[np.ndarray, tuple]:
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise DegenerateInputError("cannot normalize a zero vector")
    unit = v / np.asarray(norm, dtype=v.dtype)
    return unit, (unit, norm)


def l2_normalize_backward(cache: tuple, d_unit: np.ndarray) -> np.ndarray:
    unit, norm = cache
    return (d_unit - unit * np.dot(unit, d_unit)) / np.asarray(norm, dtype=d_unit.dtype)


def gelu(x: np.ndarray) -> tuple[np.ndarray, tuple]:
    """tanh-approximated gaussian error linear unit (smooth everywhere,
    which keeps finite-difference checks clean)."""
    c = np.asarray(_GELU_C, dtype=x.dtype)
    a = np.asarray(_GELU_A, dtype=x.dtype)
    inner = c * (x + a * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)
    return out.astype(x.dtype, copy=False), (x, t)


def gelu_backward(cache: tuple, d_out: np.ndarray) -> np.ndarray:
    x, t = cache
    c = np.asarray(_GELU_C, dtype=x.dtype)
    a = np.asarray(_GELU_A, dtype=x.dtype)
    d_inner = c * (1.0 + 3.0 * a * x * x)
    grad = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
    return d_out * grad


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise DimensionError(f"cosine_sim shape mismatch: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity undefined for a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))
