"""Vision-guided knowledge adaptor.

Projects frozen text-token embeddings into the visual space, cross-attends
with image patch features as queries over the projected tokens, and pools
to a single unit-norm entity embedding. The query-image path is a frozen
pass-through; only this adaptor (plus the contrastive temperature) trains.

Block structure per layer, with the patch features as the initial stream:

    x = x + MHA(LN1(x), T, T)      # T = tokens @ w_proj, padding masked
    x = x + FFN(LN2(x))            # FFN = gelu(x W1 + b1) W2 + b2

followed by mean pooling over the stream rows and L2 normalization.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import kernels
from .errors import ConfigError, DegenerateInputError, DimensionError, FormatError

CHECKPOINT_MAGIC = b"WKCK"
CHECKPOINT_VERSION = 1

# temperature starts at 0.07; stored as log(1/tau) so it can train freely
INIT_LOG_INV_TEMP = math.log(1.0 / 0.07)
MIN_TEMPERATURE = 0.01


@dataclass(frozen=True)
class AdaptorConfig:
    d_t: int
    d: int
    layers: int = 2
    heads: int = 16
    d_ff: int = 0  # 0 means 4*d
    ln_eps: float = 1e-5

    def __post_init__(self):
        if min(self.d_t, self.d, self.layers, self.heads) < 1:
            raise ConfigError(f"all dims must be >= 1: {self}")
        if self.d % self.heads != 0:
            raise ConfigError(f"model dim {self.d} not divisible by {self.heads} heads")
        if self.d_ff == 0:
            object.__setattr__(self, "d_ff", 4 * self.d)

    def parameter_count(self) -> int:
        per_layer = (
            4 * self.d * self.d
            + self.d * self.d_ff + self.d_ff
            + self.d_ff * self.d + self.d
            + 4 * self.d  # two layer-norm affine pairs
        )
        return self.d_t * self.d + self.layers * per_layer + 1  # +1 log_inv_temp


@dataclass
class LayerParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    w_ff1: np.ndarray
    b_ff1: np.ndarray
    w_ff2: np.ndarray
    b_ff2: np.ndarray
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray


_LAYER_FIELDS = (
    "w_q", "w_k", "w_v", "w_o",
    "w_ff1", "b_ff1", "w_ff2", "b_ff2",
    "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta",
)


@dataclass
class AdaptorParams:
    config: AdaptorConfig
    w_proj: np.ndarray
    layers: list[LayerParams]
    # log(1/tau) for the contrastive loss, trained jointly with the weights
    log_inv_temp: np.ndarray = field(
        default_factory=lambda: np.array([INIT_LOG_INV_TEMP], dtype=np.float32)
    )

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        """Canonical (name, array) order; defines checkpoint blob layout."""
        yield "w_proj", self.w_proj
        for i, layer in enumerate(self.layers):
            for name in _LAYER_FIELDS:
                yield f"layer{i}.{name}", getattr(layer, name)
        yield "log_inv_temp", self.log_inv_temp

    @property
    def dtype(self) -> np.dtype:
        return self.w_proj.dtype

    def temperature(self) -> float:
        return float(np.exp(-self.log_inv_temp[0]))

    def astype(self, dtype) -> "AdaptorParams":
        layers = [
            LayerParams(**{f: getattr(l, f).astype(dtype) for f in _LAYER_FIELDS})
            for l in self.layers
        ]
        return AdaptorParams(
            self.config, self.w_proj.astype(dtype), layers, self.log_inv_temp.astype(dtype)
        )

    def copy(self) -> "AdaptorParams":
        return self.astype(self.dtype)

    def parameter_count(self) -> int:
        return sum(a.size for _, a in self.named_arrays())

    def set_named(self, name: str, value: np.ndarray) -> None:
        if name == "w_proj":
            self.w_proj = value
        elif name == "log_inv_temp":
            self.log_inv_temp = value
        else:
            layer, fieldname = name.split(".")
            setattr(self.layers[int(layer.removeprefix("layer"))], fieldname, value)


def init_grads(params: AdaptorParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(a) for name, a in params.named_arrays()}


def init_params(seed: int, config: AdaptorConfig, dtype=np.float32) -> AdaptorParams:
    """Xavier-uniform weights, zero biases, identity layer norms.

    Draw order is fixed (w_proj, then per layer w_q, w_k, w_v, w_o, w_ff1,
    w_ff2) so a seed always yields bit-identical parameters.
    """
    rng = np.random.default_rng(seed)

    def xavier(fan_in: int, fan_out: int) -> np.ndarray:
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)

    w_proj = xavier(config.d_t, config.d)
    layers = []
    for _ in range(config.layers):
        layers.append(
            LayerParams(
                w_q=xavier(config.d, config.d),
                w_k=xavier(config.d, config.d),
                w_v=xavier(config.d, config.d),
                w_o=xavier(config.d, config.d),
                w_ff1=xavier(config.d, config.d_ff),
                b_ff1=np.zeros((1, config.d_ff), dtype=dtype),
                w_ff2=xavier(config.d_ff, config.d),
                b_ff2=np.zeros((1, config.d), dtype=dtype),
                ln1_gamma=np.ones((1, config.d), dtype=dtype),
                ln1_beta=np.zeros((1, config.d), dtype=dtype),
                ln2_gamma=np.ones((1, config.d), dtype=dtype),
                ln2_beta=np.zeros((1, config.d), dtype=dtype),
            )
        )
    return AdaptorParams(
        config, w_proj, layers, np.array([INIT_LOG_INV_TEMP], dtype=dtype)
    )


@dataclass
class PatchFeatures:
    """Frozen per-patch visual features of one entity image."""

    patches: np.ndarray  # N_p x D


@dataclass
class TokenEmbeddings:
    """Frozen token embeddings of an entity description; rows beyond
    ``valid_len`` are padding and must not influence the output."""

    tokens: np.ndarray  # N_t_raw x D_t
    valid_len: int


@dataclass
class EntityEmbedding:
    vector: np.ndarray  # unit norm, length D
    entity_id: str
    image_id: int


@dataclass
class QueryEmbedding:
    vector: np.ndarray  # unit norm, length D


def project_tokens(txt: TokenEmbeddings, params: AdaptorParams) -> np.ndarray:
    if txt.tokens.shape[1] != params.config.d_t:
        raise ConfigError(
            f"token dim {txt.tokens.shape[1]} != configured d_t {params.config.d_t}"
        )
    return kernels.matmul(txt.tokens, params.w_proj)


@dataclass
class _LayerCache:
    x_in: np.ndarray
    ln1: tuple
    mha: kernels.MhaCache
    x_mid: np.ndarray
    ln2: tuple
    ffn_in: np.ndarray
    ffn_pre: np.ndarray
    gelu: tuple
    gelu_out: np.ndarray


@dataclass
class AdaptorCache:
    """Activations of one forward pass, consumed by ``adaptor_backward``."""

    tokens: np.ndarray
    t_proj: np.ndarray
    layer_caches: list[_LayerCache]
    final_rows: int
    norm_cache: tuple
    modality: str


def adaptor_forward_cached(
    patches: np.ndarray,
    tokens: np.ndarray,
    valid_len: int,
    params: AdaptorParams,
    modality: str = "both",
) -> tuple[np.ndarray, AdaptorCache]:
    """Forward pass returning the unit embedding and the activation cache.

    ``modality`` supports the ablation paths: "both" is the full block stack,
    "text_only" mean-pools the projected tokens without attention, and
    "image_only" zeroes the text so the embedding is driven by the patch
    stream alone.
    """
    cfg = params.config
    if valid_len < 1:
        raise DegenerateInputError("entity text is entirely padding")
    if patches.shape[0] < 1 or patches.shape[1] != cfg.d:
        raise DimensionError(f"patch features {patches.shape} inconsistent with D={cfg.d}")
    if tokens.shape[1] != cfg.d_t:
        raise ConfigError(f"token dim {tokens.shape[1]} != configured d_t {cfg.d_t}")
    valid_len = min(valid_len, tokens.shape[0])

    if modality == "image_only":
        tokens = np.zeros_like(tokens)
    t_proj = tokens @ params.w_proj

    if modality == "text_only":
        pooled = kernels.mean_pool(t_proj[:valid_len])
        unit, norm_cache = kernels.l2_normalize(pooled)
        return unit, AdaptorCache(tokens, t_proj, [], valid_len, norm_cache, modality)

    mask = np.zeros(tokens.shape[0], dtype=patches.dtype)
    mask[valid_len:] = -np.inf

    x = patches
    layer_caches = []
    for layer in params.layers:
        a_in, ln1_cache = kernels.layer_norm(x, layer.ln1_gamma, layer.ln1_beta, cfg.ln_eps)
        attn, mha_cache = kernels.mha_forward(
            a_in, t_proj, t_proj,
            layer.w_q, layer.w_k, layer.w_v, layer.w_o,
            cfg.heads, key_mask=mask,
        )
        x_mid = x + attn
        f_in, ln2_cache = kernels.layer_norm(
            x_mid, layer.ln2_gamma, layer.ln2_beta, cfg.ln_eps
        )
        ffn_pre = f_in @ layer.w_ff1 + layer.b_ff1
        g, gelu_cache = kernels.gelu(ffn_pre)
        ffn_out = g @ layer.w_ff2 + layer.b_ff2
        layer_caches.append(
            _LayerCache(x, ln1_cache, mha_cache, x_mid, ln2_cache, f_in, ffn_pre, gelu_cache, g)
        )
        x = x_mid + ffn_out

    pooled = kernels.mean_pool(x)
    unit, norm_cache = kernels.l2_normalize(pooled)
    return unit, AdaptorCache(tokens, t_proj, layer_caches, x.shape[0], norm_cache, modality)


def adaptor_backward(
    cache: AdaptorCache,
    d_unit: np.ndarray,
    params: AdaptorParams,
    grads: dict[str, np.ndarray],
) -> tuple[np.ndarray | None, np.ndarray]:
    """Accumulate parameter gradients for one upstream embedding gradient.

    Returns (d_patches, d_tokens) — the input adjoints — for completeness;
    both inputs are frozen features, so callers normally discard them.
    """
    d_pooled = kernels.l2_normalize_backward(cache.norm_cache, d_unit)

    if cache.modality == "text_only":
        d_rows = kernels.mean_pool_backward(d_pooled, cache.final_rows)
        d_t_proj = np.zeros_like(cache.t_proj)
        d_t_proj[: cache.final_rows] = d_rows
        grads["w_proj"] += cache.tokens.T @ d_t_proj
        return None, d_t_proj @ params.w_proj.T

    d_x = kernels.mean_pool_backward(d_pooled, cache.final_rows)
    d_t_proj = np.zeros_like(cache.t_proj)

    for i in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[i]
        lc = cache.layer_caches[i]

        # x_out = x_mid + gelu(f_in W1 + b1) W2 + b2
        d_ffn_out = d_x
        grads[f"layer{i}.w_ff2"] += lc.gelu_out.T @ d_ffn_out
        grads[f"layer{i}.b_ff2"] += d_ffn_out.sum(axis=0, keepdims=True)
        d_g = d_ffn_out @ layer.w_ff2.T
        d_ffn_pre = kernels.gelu_backward(lc.gelu, d_g)
        grads[f"layer{i}.w_ff1"] += lc.ffn_in.T @ d_ffn_pre
        grads[f"layer{i}.b_ff1"] += d_ffn_pre.sum(axis=0, keepdims=True)
        d_f_in = d_ffn_pre @ layer.w_ff1.T
        d_x_mid, d_g2, d_b2 = kernels.layer_norm_backward(lc.ln2, layer.ln2_gamma, d_f_in)
        grads[f"layer{i}.ln2_gamma"] += d_g2
        grads[f"layer{i}.ln2_beta"] += d_b2
        d_x_mid = d_x_mid + d_x  # residual

        # x_mid = x_in + MHA(LN1(x_in), T, T)
        d_attn = d_x_mid
        d_a_in, d_k, d_v, d_wq, d_wk, d_wv, d_wo = kernels.mha_backward(lc.mha, d_attn)
        grads[f"layer{i}.w_q"] += d_wq
        grads[f"layer{i}.w_k"] += d_wk
        grads[f"layer{i}.w_v"] += d_wv
        grads[f"layer{i}.w_o"] += d_wo
        d_t_proj += d_k + d_v
        d_x_in, d_g1, d_b1 = kernels.layer_norm_backward(lc.ln1, layer.ln1_gamma, d_a_in)
        grads[f"layer{i}.ln1_gamma"] += d_g1
        grads[f"layer{i}.ln1_beta"] += d_b1
        d_x = d_x_in + d_x_mid  # residual

    grads["w_proj"] += cache.tokens.T @ d_t_proj
    d_tokens = d_t_proj @ params.w_proj.T
    return d_x, d_tokens


def adaptor_forward(
    img: PatchFeatures,
    txt: TokenEmbeddings,
    params: AdaptorParams,
    entity_id: str = "",
    image_id: int = 0,
    modality: str = "both",
) -> EntityEmbedding:
    unit, _ = adaptor_forward_cached(
        img.patches, txt.tokens, txt.valid_len, params, modality=modality
    )
    return EntityEmbedding(unit, entity_id, image_id)


def embed_query(pooled_query_feature: np.ndarray) -> QueryEmbedding:
    """L2-normalized pass-through; the query image path has no learned
    transform."""
    v = np.asarray(pooled_query_feature)
    if v.ndim != 1:
        raise DimensionError(f"query feature must be 1-D, got shape {v.shape}")
    unit, _ = kernels.l2_normalize(v)
    return QueryEmbedding(unit)


# ---------------------------------------------------------------------------
# Checkpoint I/O — "WKCK" binary + JSON sidecar manifest
# ---------------------------------------------------------------------------

_HEADER_STRUCT = struct.Struct("<5I")  # d_t, d, layers, heads, d_ff


def save_checkpoint(
    params: AdaptorParams,
    path: str | Path,
    opt_state: "object | None" = None,
    metadata: dict | None = None,
) -> None:
    """Write params (and optionally Adam state) as little-endian f32 blobs
    in ``named_arrays`` order, with a trailing CRC32; plus a JSON sidecar."""
    from .training import OptimizerState  # local import to avoid a cycle

    cfg = params.config
    body = bytearray()
    body += _HEADER_STRUCT.pack(cfg.d_t, cfg.d, cfg.layers, cfg.heads, cfg.d_ff)
    flags = 1 if opt_state is not None else 0
    body += struct.pack("<I", flags)
    for _, arr in params.named_arrays():
        body += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    if opt_state is not None:
        if not isinstance(opt_state, OptimizerState):
            raise FormatError("opt_state must be an OptimizerState")
        body += struct.pack("<Q", opt_state.step)
        for name, _ in params.named_arrays():
            body += np.ascontiguousarray(opt_state.m[name], dtype="<f4").tobytes()
            body += np.ascontiguousarray(opt_state.v[name], dtype="<f4").tobytes()

    path = Path(path)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(bytes(body))
        f.write(struct.pack("<I", zlib.crc32(bytes(body))))

    manifest = {
        "format": "WKCK",
        "version": CHECKPOINT_VERSION,
        "dims": {"d_t": cfg.d_t, "d": cfg.d, "layers": cfg.layers,
                 "heads": cfg.heads, "d_ff": cfg.d_ff},
        "parameter_count": params.parameter_count(),
        "has_optimizer_state": bool(flags),
    }
    manifest.update(metadata or {})
    with open(path.with_suffix(path.suffix + ".json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_checkpoint(path: str | Path) -> tuple[AdaptorParams, "object | None"]:
    from .training import OptimizerState

    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 8 or raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a WKCK checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(
            f"{path}: unsupported checkpoint version {version} "
            f"(this build reads version {CHECKPOINT_VERSION})"
        )
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated checkpoint")
    body, (crc,) = raw[8:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError(f"{path}: checkpoint CRC mismatch (truncated or corrupt)")

    off = 0
    try:
        d_t, d, layers, heads, d_ff = _HEADER_STRUCT.unpack_from(body, off)
        off += _HEADER_STRUCT.size
        (flags,) = struct.unpack_from("<I", body, off)
        off += 4
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint header") from exc
    cfg = AdaptorConfig(d_t=d_t, d=d, layers=layers, heads=heads, d_ff=d_ff)
    params = init_params(0, cfg)  # shapes only; overwritten below

    def read_array(shape: tuple[int, ...]) -> np.ndarray:
        nonlocal off
        n = int(np.prod(shape))
        end = off + 4 * n
        if end > len(body):
            raise FormatError(f"{path}: truncated checkpoint blob at byte {off}")
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(shape)
        off = end
        return arr.copy()

    for name, arr in list(params.named_arrays()):
        params.set_named(name, read_array(arr.shape))

    opt_state = None
    if flags & 1:
        if off + 8 > len(body):
            raise FormatError(f"{path}: truncated optimizer state")
        (step,) = struct.unpack_from("<Q", body, off)
        off += 8
        m, v = {}, {}
        for name, arr in params.named_arrays():
            m[name] = read_array(arr.shape)
            v[name] = read_array(arr.shape)
        opt_state = OptimizerState(step=step, m=m, v=v)
    if off != len(body):
        raise FormatError(f"{path}: {len(body) - off} trailing bytes after checkpoint payload")
    return params, opt_state
