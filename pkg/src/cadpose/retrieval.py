"""Attention-based retrieval of CAD knowledge for a query crop.

Three stages: multi-head self-attention over the knowledge-base tokens (with
a linear reduction for cheap downstream compute), a pointwise conv stack over
those tokens guided by a replicated global image feature, and multi-head
cross-attention where image pixel tokens query the fused CAD tokens. The
output is a per-pixel retrieved CAD feature map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    concat,
    conv1d,
    conv2d,
    layernorm,
    linear,
    matmul,
    mean,
    multi_head_attention,
    relu,
    reshape,
)
from .knowledge import KnowledgeBase
from .nn import ParameterStore, xavier_init


@dataclass(frozen=True)
class RespcConfig:
    heads_sa: int = 4
    d_sa: int = 64  # self-attention model width
    d_red: int = 64  # reduced token dim after self-attention
    d_g: int = 64  # global image feature dim
    d_pn: int = 128  # pointnet output dim
    heads_ca: int = 4
    d_ca: int = 64  # cross-attention model width
    d_r: int = 64  # retrieved feature dim
    token_subsample: int = 0  # >0: train-time token cap (off for acceptance)


def kb_tokens(kb: KnowledgeBase) -> np.ndarray:
    """Token matrix: concat(positional encoding, color, visual feature) per point."""
    return np.concatenate(
        [kb.posenc, kb.colors.astype(np.float32), kb.visual], axis=1, dtype=np.float32
    )


def token_dim(kb_or_dims) -> int:
    if isinstance(kb_or_dims, KnowledgeBase):
        return kb_or_dims.posenc.shape[1] + 3 + kb_or_dims.visual_dim
    d_pe, d_v = kb_or_dims
    return d_pe + 3 + d_v


GLOBAL_ENC_WIDTHS = (16, 32, 64)


def init_respc(store: ParameterStore, cfg: RespcConfig, d_b: int, d_i: int, rng: np.random.Generator) -> None:
    """Create all ReSPC parameters under the "respc/" namespace."""

    def lin(name, din, dout):
        store.add(f"respc/{name}_w", xavier_init(rng, (din, dout), din, dout))
        store.add(f"respc/{name}_b", np.zeros(dout))

    lin("sa_q", d_b, cfg.d_sa)
    lin("sa_k", d_b, cfg.d_sa)
    lin("sa_v", d_b, cfg.d_sa)
    lin("sa_o", cfg.d_sa, cfg.d_sa)
    lin("sa_red", cfg.d_sa, cfg.d_red)
    cin = 3
    for li, cout in enumerate(GLOBAL_ENC_WIDTHS):
        store.add(f"respc/g{li}_w", xavier_init(rng, (3, 3, cin, cout), 9 * cin, cout))
        store.add(f"respc/g{li}_b", np.zeros(cout))
        cin = cout
    lin("g_proj", cin, cfg.d_g)
    pn_in = cfg.d_red + cfg.d_g
    for li, (din, dout) in enumerate([(pn_in, 128), (128, 128), (128, cfg.d_pn)]):
        store.add(f"respc/pn{li}_w", xavier_init(rng, (1, din, dout), din, dout))
        store.add(f"respc/pn{li}_b", np.zeros(dout))
        if li < 2:
            store.add(f"respc/pn{li}_gain", np.ones(dout))
            store.add(f"respc/pn{li}_bias", np.zeros(dout))
    lin("ca_q", d_i, cfg.d_ca)
    lin("ca_k", cfg.d_pn, cfg.d_ca)
    lin("ca_v", cfg.d_pn, cfg.d_ca)
    lin("ca_o", cfg.d_ca, cfg.d_r)


def self_attn_reduce(tokens: Tensor, store: ParameterStore, cfg: RespcConfig) -> Tensor:
    """Self-attention over KB tokens followed by the dimensionality reduction."""
    p = store
    att = multi_head_attention(
        tokens, tokens, tokens, cfg.heads_sa,
        p["respc/sa_q_w"], p["respc/sa_k_w"], p["respc/sa_v_w"], p["respc/sa_o_w"],
        p["respc/sa_q_b"], p["respc/sa_k_b"], p["respc/sa_v_b"], p["respc/sa_o_b"],
    )
    return linear(att, p["respc/sa_red_w"], p["respc/sa_red_b"])


def global_feat(crop: Tensor, store: ParameterStore, cfg: RespcConfig) -> Tensor:
    """Strided conv stack + global average pooling -> (1, d_g) image feature."""
    if crop.shape[:2] != (224, 224):
        raise ValueError(f"global encoder expects a 224x224 crop, got {crop.shape}")
    x = crop
    for li in range(len(GLOBAL_ENC_WIDTHS)):
        x = relu(conv2d(x, store[f"respc/g{li}_w"], store[f"respc/g{li}_b"], stride=2, pad=1))
    pooled = mean(reshape(x, (x.shape[0] * x.shape[1], x.shape[2])), axis=0)  # (C,)
    return linear(reshape(pooled, (1, x.shape[2])), store["respc/g_proj_w"], store["respc/g_proj_b"])


def pointnet_fuse(f_sa: Tensor, f_g: Tensor, store: ParameterStore, cfg: RespcConfig) -> Tensor:
    """Pointwise conv stack over tokens with the global feature replicated per row."""
    n = f_sa.shape[0]
    rep = matmul(_ones(n, f_sa.data.dtype), f_g)  # physical replication to (N, d_g)
    x = concat([f_sa, rep], axis=1)
    for li in range(3):
        x = conv1d(x, store[f"respc/pn{li}_w"], store[f"respc/pn{li}_b"])
        if li < 2:
            x = relu(layernorm(x, store[f"respc/pn{li}_gain"], store[f"respc/pn{li}_bias"]))
    return x


def _ones(n: int, dtype) -> Tensor:
    return Tensor(np.ones((n, 1), dtype=dtype))


def cross_retrieve(f_i: Tensor, f_pn: Tensor, store: ParameterStore, cfg: RespcConfig, grid: tuple[int, int]) -> Tensor:
    """Pixels attend over CAD tokens; output reshaped to (Hf, Wf, d_r)."""
    p = store
    out = multi_head_attention(
        f_i, f_pn, f_pn, cfg.heads_ca,
        p["respc/ca_q_w"], p["respc/ca_k_w"], p["respc/ca_v_w"], p["respc/ca_o_w"],
        p["respc/ca_q_b"], p["respc/ca_k_b"], p["respc/ca_v_b"], p["respc/ca_o_b"],
    )
    return reshape(out, (grid[0], grid[1], cfg.d_r))


def respc_forward(
    tokens: Tensor,
    norm_crop: Tensor,
    f_i: Tensor,
    store: ParameterStore,
    cfg: RespcConfig,
    grid: tuple[int, int],
) -> Tensor:
    f_sa = self_attn_reduce(tokens, store, cfg)
    f_g = global_feat(norm_crop, store, cfg)
    f_pn = pointnet_fuse(f_sa, f_g, store, cfg)
    return cross_retrieve(f_i, f_pn, store, cfg, grid)


def subsample_tokens(tokens_np: np.ndarray, n: int, seed: int) -> np.ndarray:
    """Deterministic train-time token cap (permutation seeded per call site)."""
    if n <= 0 or n >= len(tokens_np):
        return tokens_np
    idx = np.random.default_rng(seed).permutation(len(tokens_np))[:n]
    return tokens_np[np.sort(idx)]
