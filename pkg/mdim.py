# mdim.py
# Motion-guided dual interaction: patch saliency, Top-K selection, sparse
# attention over dynamic patches, convolutional static branch, mask-gated reconstruction

import math
import logging
from collections import OrderedDict
from dataclasses import dataclass, fields
from typing import Dict, Mapping

import numpy as np

import tensor_core as tc
from config_manager import ConfigError, FusionConfig, KV_MODES
from tensor_core import ShapeError, Tensor

logger = logging.getLogger("Mdim")


@dataclass
class MdimWeights:
    join_w: Tensor        # C × 2C × 1 × 1
    join_b: Tensor        # C
    wq: Tensor            # d × d
    wk: Tensor            # d × d
    wv: Tensor            # d × d
    static_dw: Tensor     # C × 3 × 3
    static_pw: Tensor     # C × C
    static_conv: Tensor   # C × C × 3 × 3
    smooth: Tensor        # C × C × 3 × 3, no bias

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, patch: int) -> "MdimWeights":
        """
        Static branch output conv starts at zero and the smoothing conv at a
        centred identity, so an untrained module passes the joined features through
        """
        d = channels * patch * patch
        std = 1.0 / math.sqrt(d)
        smooth = np.zeros((channels, channels, 3, 3))
        smooth[np.arange(channels), np.arange(channels), 1, 1] = 1.0
        return cls(
            join_w=tc.parameter(tc.he_normal(rng, (channels, 2 * channels, 1, 1), 2 * channels)),
            join_b=tc.parameter(np.zeros(channels)),
            wq=tc.parameter(rng.normal(0.0, std, size=(d, d))),
            wk=tc.parameter(rng.normal(0.0, std, size=(d, d))),
            wv=tc.parameter(rng.normal(0.0, std, size=(d, d))),
            static_dw=tc.parameter(tc.he_normal(rng, (channels, 3, 3), 9)),
            static_pw=tc.parameter(tc.he_normal(rng, (channels, channels), channels)),
            static_conv=tc.parameter(np.zeros((channels, channels, 3, 3))),
            smooth=tc.parameter(smooth),
        )

    def named(self, prefix: str) -> "OrderedDict[str, Tensor]":
        return OrderedDict((f"{prefix}.{f.name}", getattr(self, f.name)) for f in fields(self))

    @classmethod
    def from_named(cls, store: Mapping[str, np.ndarray], prefix: str) -> "MdimWeights":
        return cls(**{f.name: tc.parameter(store[f"{prefix}.{f.name}"]) for f in fields(cls)})


@dataclass
class SalientSet:
    """Selected patch indices Ω (ascending) and their scores W"""
    indices: np.ndarray
    weights: np.ndarray

    @property
    def k(self) -> int:
        return int(self.indices.size)


def pad_amount(extent: int, p: int) -> int:
    return (-extent) % p


def pad_mask(mask: np.ndarray, p: int) -> np.ndarray:
    """Zero-pad a mask at the bottom and right to multiples of p"""
    h, w = mask.shape
    return np.pad(mask, ((0, pad_amount(h, p)), (0, pad_amount(w, p))))


def saliency_scores(mask: np.ndarray, p: int) -> np.ndarray:
    """Mean of the (already padded) mask over each p×p patch, row-major"""
    pooled = tc.avg_pool(Tensor(mask, dtype=np.float64), p)
    return pooled.data.reshape(-1)


def select_count(n: int, tau: float, k_max: int) -> int:
    return max(1, min(int(math.floor(n * tau)), k_max))


def topk_select(scores: np.ndarray, tau: float, k_max: int) -> SalientSet:
    """
    Keep the k = max(1, min(⌊Nτ⌋, k_max)) highest scores; ties go to the
    lower patch index. Indices come back sorted ascending.
    """
    if not 0.0 < tau <= 1.0:
        raise ConfigError(f"tau must lie in (0, 1], got {tau}")
    if k_max < 1:
        raise ConfigError(f"k_max must be >= 1, got {k_max}")
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    k = select_count(scores.size, tau, k_max)
    order = np.lexsort((np.arange(scores.size), -scores))
    chosen = np.sort(order[:k])
    return SalientSet(indices=chosen, weights=scores[chosen])


def select_all(scores: np.ndarray) -> SalientSet:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    return SalientSet(indices=np.arange(scores.size), weights=scores)


def global_token(tokens: Tensor) -> Tensor:
    """Mean over all patch tokens"""
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise ShapeError("global_token", "expected a non-empty N×d token matrix", tokens=tokens.shape)
    return tc.mean_rows(tokens)


def sparse_attention(queries: Tensor, tokens: Tensor, t_global: Tensor,
                     wq: Tensor, wk: Tensor, wv: Tensor, kv_mode: str = "all_patches") -> Tensor:
    """
    Single-head attention of the selected tokens (k×d). Keys and values come
    from every patch token biased by the global token ("all_patches") or from
    the global token alone ("global_token_only").
    """
    d = queries.shape[1]
    for name, w in (("wq", wq), ("wk", wk), ("wv", wv)):
        if w.shape != (d, d):
            raise ShapeError("sparse_attention", f"{name} must be d×d for token width {d}",
                             queries=queries.shape, **{name: w.shape})
    if kv_mode == "all_patches":
        kv_source = tc.add_row(tokens, t_global)
    elif kv_mode == "global_token_only":
        kv_source = tc.reshape(t_global, (1, d))
    else:
        raise ConfigError(f"unknown kv_mode '{kv_mode}', expected one of {', '.join(KV_MODES)}")

    with tc.stage("attention_projection"):
        q = tc.matmul(queries, wq)
        k = tc.matmul(kv_source, wk)
        v = tc.matmul(kv_source, wv)
    with tc.stage("attention_interaction"):
        scores = tc.mul(tc.matmul(q, k, transpose_b=True), 1.0 / math.sqrt(d))
        attended = tc.matmul(tc.softmax(scores), v)
    return attended


def static_branch(x: Tensor, weights: MdimWeights) -> Tensor:
    """Residual local interaction: X + conv3×3(act(depthwise_separable(X)))"""
    if x.ndim != 3 or weights.static_dw.shape[0] != x.shape[0]:
        raise ShapeError("static_branch", "weights do not match the feature channels",
                         features=x.shape, depthwise=weights.static_dw.shape)
    local = tc.depthwise_separable(x, weights.static_dw, weights.static_pw)
    return tc.add(x, tc.conv2d(tc.leaky_relu(local), weights.static_conv))


def reconstruct(f_static: Tensor, f_attn: Tensor, salient: SalientSet, mask: np.ndarray,
                smooth: Tensor, p: int) -> Tensor:
    """
    Scatter the score-weighted attended tokens back to their patches, crop
    the padding, gate by the motion mask, smooth and add to the static branch
    """
    c, h, w = f_static.shape
    if mask.shape != (h, w):
        raise ShapeError("reconstruct", "mask must match the feature extent", mask=mask.shape, features=f_static.shape)
    hp, wp = h + pad_amount(h, p), w + pad_amount(w, p)
    n = (hp // p) * (wp // p)
    if salient.k and (salient.indices.min() < 0 or salient.indices.max() >= n):
        raise ShapeError("reconstruct", f"patch index out of range for {n} patches",
                         indices=salient.indices.shape)
    weighted = tc.scale_rows(f_attn, salient.weights)
    placed = tc.unpatchify(tc.scatter_rows(weighted, salient.indices, n), c, hp, wp, p)
    gated = tc.channel_gate(tc.crop2d(placed, h, w), mask)
    return tc.add(f_static, tc.conv2d(gated, smooth))


def mdim_forward(feat_ir: Tensor, feat_vis: Tensor, mask: np.ndarray,
                 weights: MdimWeights, config: FusionConfig) -> Tensor:
    """Join both modalities, then run the static and dynamic branches per the variant"""
    p = config.patch
    with tc.stage("mdim_join"):
        x = tc.conv2d(tc.concat([feat_ir, feat_vis], axis=0), weights.join_w, weights.join_b)
    with tc.stage("static_branch"):
        f_static = static_branch(x, weights)
    if config.variant == "full_sb":
        return f_static

    mask = np.asarray(mask, dtype=np.float64)
    if config.variant == "full_db":
        mask = np.ones_like(mask)
    elif config.variant == "inverted_mask":
        mask = 1.0 - mask

    _, h, w = x.shape
    padded = tc.pad2d(x, pad_amount(h, p), pad_amount(w, p))
    tokens = tc.patchify(padded, p)
    scores = saliency_scores(pad_mask(mask, p), p)
    if config.variant in ("full_db", "dense_attention"):
        salient = select_all(scores)
    else:
        salient = topk_select(scores, config.tau, config.k_max)
    logger.debug(f"selected {salient.k}/{scores.size} patches")

    t_global = global_token(tokens)
    queries = tc.gather_rows(tokens, salient.indices)
    f_attn = sparse_attention(queries, tokens, t_global, weights.wq, weights.wk, weights.wv, config.kv_mode)
    with tc.stage("reconstruct"):
        return reconstruct(f_static, f_attn, salient, mask.astype(x.dtype), weights.smooth, p)


def attention_flops(n: int, k: int, d: int, kv_mode: str = "all_patches") -> int:
    """
    Multiply-adds of sparse attention: query/key/value projections plus
    score and apply products
    """
    if kv_mode == "all_patches":
        return 2 * k * n * d + (k + 2 * n) * d * d
    if kv_mode == "global_token_only":
        return 2 * k * d + (k + 2) * d * d
    raise ConfigError(f"unknown kv_mode '{kv_mode}'")


def dense_attention_flops(n: int, d: int) -> int:
    """Full attention over all N tokens"""
    return attention_flops(n, n, d, "all_patches")


def attention_split(n: int, k: int, d: int, kv_mode: str) -> Dict[str, int]:
    """Projection and interaction shares of attention_flops"""
    kv = 1 if kv_mode == "global_token_only" else n
    return {"attention_projection": (k + 2 * kv) * d * d, "attention_interaction": 2 * k * kv * d}


def parameter_count(channels: int, patch: int) -> Dict[str, int]:
    d = channels * patch * patch
    return {
        "mdim_join": 2 * channels * channels + channels,
        "attention_projection": 3 * d * d,
        "static_branch": 9 * channels + channels * channels + 9 * channels * channels,
        "reconstruct": 9 * channels * channels,
    }

