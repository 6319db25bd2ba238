"""Trainable correspondence network: query encoder, retrieval-augmented
decoders, sinusoidal key-feature net, contrastive + mask losses, training loop.

Query side: a small trainable CNN concatenated with the frozen dense
descriptor stream forms per-pixel features F_i; two decoders (a U-Net style
feature decoder and a narrower mask decoder of the same topology) consume
concat(F_i, retrieved CAD features) and emit a per-pixel embedding map and a
segmentation probability map.

Key side: each query 3D point takes the learnable per-point feature of its
nearest knowledge-base point (a trainable copy; the KB itself stays frozen)
and is embedded through sinusoidal layers together with its coordinates.
Matching pixel/point pairs are pulled together by an InfoNCE loss against
surface-sampled negatives.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import (
    Tape,
    Tensor,
    absolute,
    add,
    backward,
    concat,
    conv2d,
    linear,
    logsumexp,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    sin,
    sub,
    take,
    transpose,
    tsum,
    upsample_nearest,
)
from .features import ExtractorConfig, extract_dense
from .geom import TriangleMesh, surface_samples
from .knowledge import KnowledgeBase
from .nn import (
    SIREN_OMEGA,
    ParameterStore,
    adam_step,
    siren_first_init,
    siren_hidden_init,
    xavier_init,
)
from .retrieval import RespcConfig, init_respc, kb_tokens, respc_forward, token_dim

CROP_SIZE = 224
FEAT_GRID = 28  # CROP_SIZE / encoder stride (8)


class TrainingError(Exception):
    pass


class SkipSample(Exception):
    """Raised when a training sample is unusable (e.g. empty mask)."""


@dataclass(frozen=True)
class NetConfig:
    d_cnn: int = 32
    enc_widths: tuple[int, int, int] = (16, 32, 64)
    d_e: int = 16
    dec_width: int = 48
    mask_width: int = 24
    siren_width: int = 64
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    respc: RespcConfig = field(default_factory=RespcConfig)
    bands: int = 6

    @property
    def d_i(self) -> int:
        return self.d_cnn + self.extractor.dim

    @property
    def d_b(self) -> int:
        return token_dim((6 * self.bands, self.extractor.dim))


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.0  # mask-loss weight
    lr: float = 3e-5
    n_pos: int = 256
    n_neg: int = 1024
    steps: int = 2000
    seed: int = 0
    temperature: float = 1.0
    use_contrastive: bool = True
    use_retrieval: bool = True  # False zeroes the retrieved features (ablation)
    jitter_px: int = 0
    color_jitter: float = 0.0
    log_every: int = 25


# ---------------------------------------------------------------------------
# parameter creation


def _unet_widths(base: int) -> tuple[int, int, int]:
    return base, (3 * base) // 2, 2 * base


def _init_unet(store: ParameterStore, prefix: str, cin: int, base: int, cout: int, rng) -> None:
    w0, w1, w2 = _unet_widths(base)
    t0, t1, t2 = max(base * 2 // 3, 8), max(base // 2, 8), max(base // 3, 8)

    def conv(name, kh, kw, ci, co):
        store.add(f"{prefix}/{name}_w", xavier_init(rng, (kh, kw, ci, co), kh * kw * ci, co))
        store.add(f"{prefix}/{name}_b", np.zeros(co))

    conv("fuse", 1, 1, cin, w0)
    conv("e0", 3, 3, w0, w0)
    conv("e1", 3, 3, w0, w1)
    conv("e2", 3, 3, w1, w2)
    conv("d1a", 3, 3, w2, w1)
    conv("d1b", 1, 1, 2 * w1, w1)
    conv("d0a", 3, 3, w1, w0)
    conv("d0b", 1, 1, 2 * w0, w0)
    conv("t0", 3, 3, w0, t0)
    conv("t1", 1, 1, t0, t1)
    conv("t2", 1, 1, t1, t2)
    conv("head", 1, 1, t2, cout)


def _unet_forward(store: ParameterStore, prefix: str, x: Tensor, base: int) -> Tensor:
    """Encoder-decoder with skip connections from the 28x28 grid to 224x224."""
    p = lambda name: (store[f"{prefix}/{name}_w"], store[f"{prefix}/{name}_b"])
    x = relu(conv2d(x, *p("fuse")))
    e0 = relu(conv2d(x, *p("e0"), pad=1))  # 28
    e1 = relu(conv2d(e0, *p("e1"), stride=2, pad=1))  # 14
    e2 = relu(conv2d(e1, *p("e2"), stride=2, pad=1))  # 7
    d1 = relu(conv2d(upsample_nearest(e2, 2), *p("d1a"), pad=1))  # 14
    d1 = relu(conv2d(concat([d1, e1], axis=2), *p("d1b")))
    d0 = relu(conv2d(d1, *p("d0a"), pad=1))  # 14
    d0 = relu(conv2d(concat([upsample_nearest(d0, 2), e0], axis=2), *p("d0b")))  # 28
    t = relu(conv2d(d0, *p("t0"), pad=1))  # 28
    t = relu(conv2d(upsample_nearest(t, 2), *p("t1")))  # 56
    t = relu(conv2d(upsample_nearest(t, 2), *p("t2")))  # 112
    return conv2d(upsample_nearest(t, 2), *p("head"))  # 224


def init_model(store: ParameterStore, cfg: NetConfig, kbs: dict[str, KnowledgeBase], seed: int) -> None:
    """Create all trainable parameters (shared net + per-object learnable KB copies)."""
    rng = np.random.default_rng(seed)
    cin = 3
    for li, cout in enumerate(cfg.enc_widths):
        store.add(f"encoder/c{li}_w", xavier_init(rng, (3, 3, cin, cout), 9 * cin, cout))
        store.add(f"encoder/c{li}_b", np.zeros(cout))
        cin = cout
    store.add("encoder/proj_w", xavier_init(rng, (1, 1, cin, cfg.d_cnn), cin, cfg.d_cnn))
    store.add("encoder/proj_b", np.zeros(cfg.d_cnn))
    init_respc(store, cfg.respc, cfg.d_b, cfg.d_i, rng)
    _init_unet(store, "decoder", cfg.d_i + cfg.respc.d_r, cfg.dec_width, cfg.d_e, rng)
    _init_unet(store, "mask", cfg.d_i + cfg.respc.d_r, cfg.mask_width, 1, rng)
    w = cfg.siren_width
    dv = cfg.extractor.dim
    store.add("keynet/sg0_w", siren_first_init(rng, 3, w))
    store.add("keynet/sg0_b", np.zeros(w))
    store.add("keynet/sg1_w", siren_hidden_init(rng, w, w))
    store.add("keynet/sg1_b", np.zeros(w))
    store.add("keynet/sv0_w", siren_first_init(rng, dv, w))
    store.add("keynet/sv0_b", np.zeros(w))
    store.add("keynet/sv1_w", siren_hidden_init(rng, w, w))
    store.add("keynet/sv1_b", np.zeros(w))
    store.add("keynet/si0_w", siren_hidden_init(rng, 2 * w, w))
    store.add("keynet/si0_b", np.zeros(w))
    store.add("keynet/si1_w", siren_hidden_init(rng, w, cfg.d_e))
    store.add("keynet/si1_b", np.zeros(cfg.d_e))
    for obj in sorted(kbs):
        store.add(f"keynet/fbprime/{obj}", kbs[obj].visual.copy())


# ---------------------------------------------------------------------------
# forward pieces


def pool_to_grid(feats: np.ndarray, grid: int) -> np.ndarray:
    """Average-pool an (H,W,D) map onto a (grid,grid,D) grid (exact divisor)."""
    h, w, d = feats.shape
    if (h, w) == (grid, grid):
        return feats
    if h % grid or w % grid:
        raise TrainingError(f"cannot pool {h}x{w} features onto a {grid}x{grid} grid")
    return feats.reshape(grid, h // grid, grid, w // grid, d).mean(axis=(1, 3))


def encode_query(norm_crop: Tensor, frozen_feats: np.ndarray, store: ParameterStore, cfg: NetConfig) -> Tensor:
    """Concat of the trainable CNN stream and the frozen descriptor stream.

    Returns pixel tokens (FEAT_GRID^2, d_i); the frozen stream enters as a
    constant, so no gradient ever reaches the extractor.
    """
    if norm_crop.shape != (CROP_SIZE, CROP_SIZE, 3):
        raise TrainingError(f"expected {CROP_SIZE}x{CROP_SIZE}x3 crop, got {norm_crop.shape}")
    x = norm_crop
    for li in range(len(cfg.enc_widths)):
        x = relu(conv2d(x, store[f"encoder/c{li}_w"], store[f"encoder/c{li}_b"], stride=2, pad=1))
    x = conv2d(x, store["encoder/proj_w"], store["encoder/proj_b"])  # (28,28,d_cnn)
    frozen = Tensor(pool_to_grid(frozen_feats, FEAT_GRID).astype(np.float32))
    fi = concat([x, frozen], axis=2)
    return reshape(fi, (FEAT_GRID * FEAT_GRID, cfg.d_i))


def decode(f_i: Tensor, f_r: Tensor, store: ParameterStore, cfg: NetConfig) -> tuple[Tensor, Tensor]:
    """Both decoders consume concat(F_i, F_r); returns (F_q, mask_prob)."""
    if f_r.shape[:2] != (FEAT_GRID, FEAT_GRID):
        raise TrainingError(f"retrieved features on wrong grid: {f_r.shape}")
    fi2d = reshape(f_i, (FEAT_GRID, FEAT_GRID, cfg.d_i))
    x = concat([fi2d, f_r], axis=2)
    f_q = _unet_forward(store, "decoder", x, cfg.dec_width)
    logits = _unet_forward(store, "mask", x, cfg.mask_width)
    mask_prob = sigmoid(reshape(logits, (CROP_SIZE, CROP_SIZE)))
    return f_q, mask_prob


def _siren_pair(x: Tensor, store: ParameterStore, name: str, first_omega: float = SIREN_OMEGA) -> Tensor:
    h = sin(scale(linear(x, store[f"keynet/{name}0_w"], store[f"keynet/{name}0_b"]), first_omega))
    return sin(scale(linear(h, store[f"keynet/{name}1_w"], store[f"keynet/{name}1_b"]), SIREN_OMEGA))


def key_features(points: np.ndarray, kb: KnowledgeBase, store: ParameterStore, cfg: NetConfig) -> Tensor:
    """Sinusoidal embedding of 3D query points with their learnable KB features.

    Nearest-KB-point lookup is a KD-tree query; gradients flow into the
    learnable copy only through rows actually hit.
    """
    if kb.n_points == 0:
        raise TrainingError("empty knowledge base")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    idx = kb.nearest(pts)
    lo = np.asarray(kb.meta["box_min"])
    hi = np.asarray(kb.meta["box_max"])
    ext = np.where(hi > lo, hi - lo, 1.0)
    coords = Tensor((2.0 * (pts - lo) / ext - 1.0).astype(np.float32))
    f_j = take(store[f"keynet/fbprime/{kb.object_id}"], idx)
    sg = _siren_pair(coords, store, "sg")
    sv = _siren_pair(f_j, store, "sv")
    h = sin(scale(linear(concat([sg, sv], axis=1), store["keynet/si0_w"], store["keynet/si0_b"]), SIREN_OMEGA))
    return linear(h, store["keynet/si1_w"], store["keynet/si1_b"])


# ---------------------------------------------------------------------------
# pair sampling and losses


def sample_training_pairs(
    mask: np.ndarray,
    coord_map: np.ndarray,
    mesh: TriangleMesh,
    n_pos: int,
    n_neg: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Positive (pixel, 3D point) pairs from the visible ground truth plus
    surface-uniform negatives. Returns (pos_px (P,2) row/col, pos_pts, neg_pts)."""
    rows, cols = np.nonzero(mask)
    if len(rows) == 0:
        raise SkipSample("empty ground-truth mask")
    pick = rng.integers(0, len(rows), size=n_pos)
    pos_px = np.stack([rows[pick], cols[pick]], axis=1)
    pos_pts = coord_map[pos_px[:, 0], pos_px[:, 1]]
    neg_pts, _, _, _ = surface_samples(mesh, n_neg, seed=int(rng.integers(0, 2**31 - 1)))
    return pos_px, pos_pts, neg_pts


def loss_contrastive(q: Tensor, k_pos: Tensor, k_neg: Tensor, temperature: float = 1.0) -> Tensor:
    """InfoNCE: one positive against the shared negative set, log-sum-exp stabilized."""
    inv_t = 1.0 / temperature
    s_pos = scale(tsum(mul(q, k_pos), axis=1), inv_t)  # (P,)
    s_neg = scale(matmul(q, transpose(k_neg, (1, 0))), inv_t)  # (P,N)
    logits = concat([reshape(s_pos, (s_pos.shape[0], 1)), s_neg], axis=1)
    return mean(sub(logsumexp(logits, axis=1), s_pos))


def loss_mask_l1(mask_prob: Tensor, gt_mask: np.ndarray) -> Tensor:
    return mean(absolute(sub(mask_prob, Tensor(gt_mask.astype(np.float32)))))


def loss_total(l_con: Tensor, mask_prob: Tensor, gt_mask: np.ndarray, alpha: float) -> tuple[Tensor, Tensor]:
    l_m = loss_mask_l1(mask_prob, gt_mask)
    return add(l_con, scale(l_m, alpha)), l_m


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainSample:
    object_id: str
    rgb: np.ndarray  # (224,224,3) float32 in [0,1]
    mask: np.ndarray  # (224,224) bool, visible pixels
    coord_map: np.ndarray  # (224,224,3) float32, NaN off-mask
    frozen: np.ndarray | None = None  # cached extractor output


@dataclass
class Model:
    store: ParameterStore
    cfg: NetConfig
    kbs: dict[str, KnowledgeBase]
    meshes: dict[str, TriangleMesh]
    tokens: dict[str, np.ndarray]
    norm_mean: np.ndarray
    norm_std: np.ndarray

    def normalize(self, rgb: np.ndarray) -> np.ndarray:
        return ((rgb - self.norm_mean) / self.norm_std).astype(np.float32)

    def frozen_features(self, rgb: np.ndarray) -> np.ndarray:
        return extract_dense(rgb.astype(np.float64), self.cfg.extractor).data

    def save(self, path: str | Path, extra_meta: dict | None = None) -> None:
        meta = {
            "norm_mean": self.norm_mean.tolist(),
            "norm_std": self.norm_std.tolist(),
            "objects": sorted(self.kbs),
            "net": _net_cfg_to_dict(self.cfg),
        }
        meta.update(extra_meta or {})
        self.store.save(path, meta=meta)


def new_model(
    cfg: NetConfig,
    kbs: dict[str, KnowledgeBase],
    meshes: dict[str, TriangleMesh],
    seed: int,
    norm_stats=None,
) -> Model:
    store = ParameterStore()
    init_model(store, cfg, kbs, seed)
    mean_, std_ = norm_stats if norm_stats is not None else (np.zeros(3), np.ones(3))
    return Model(
        store=store,
        cfg=cfg,
        kbs=kbs,
        meshes=meshes,
        tokens={obj: kb_tokens(kb) for obj, kb in kbs.items()},
        norm_mean=np.asarray(mean_, dtype=np.float32),
        norm_std=np.asarray(std_, dtype=np.float32),
    )


def load_model(path: str | Path, kbs: dict[str, KnowledgeBase], meshes: dict[str, TriangleMesh]) -> Model:
    store, meta = ParameterStore.load(path)
    cfg = _net_cfg_from_dict(meta["net"])
    return Model(
        store=store,
        cfg=cfg,
        kbs=kbs,
        meshes=meshes,
        tokens={obj: kb_tokens(kb) for obj, kb in kbs.items()},
        norm_mean=np.asarray(meta["norm_mean"], dtype=np.float32),
        norm_std=np.asarray(meta["norm_std"], dtype=np.float32),
    )


def _net_cfg_to_dict(cfg: NetConfig) -> dict:
    d = {
        "d_cnn": cfg.d_cnn,
        "enc_widths": list(cfg.enc_widths),
        "d_e": cfg.d_e,
        "dec_width": cfg.dec_width,
        "mask_width": cfg.mask_width,
        "siren_width": cfg.siren_width,
        "bands": cfg.bands,
        "extractor": {"kind": cfg.extractor.kind, "dim": cfg.extractor.dim, "stride": cfg.extractor.stride,
                      "scales": list(cfg.extractor.scales)},
        "respc": cfg.respc.__dict__.copy(),
    }
    return d


def _net_cfg_from_dict(d: dict) -> NetConfig:
    return NetConfig(
        d_cnn=d["d_cnn"],
        enc_widths=tuple(d["enc_widths"]),
        d_e=d["d_e"],
        dec_width=d["dec_width"],
        mask_width=d["mask_width"],
        siren_width=d["siren_width"],
        bands=d["bands"],
        extractor=ExtractorConfig(kind=d["extractor"]["kind"], dim=d["extractor"]["dim"],
                                  stride=d["extractor"]["stride"], scales=tuple(d["extractor"]["scales"])),
        respc=RespcConfig(**d["respc"]),
    )


def forward_maps(model: Model, rgb: np.ndarray, object_id: str, frozen: np.ndarray | None = None,
                 use_retrieval: bool = True) -> tuple[Tensor, Tensor]:
    """Full query-side forward pass: returns (F_q (224,224,d_e), mask_prob)."""
    cfg = model.cfg
    norm_crop = Tensor(model.normalize(rgb))
    frozen_np = frozen if frozen is not None else model.frozen_features(rgb)
    f_i = encode_query(norm_crop, frozen_np, model.store, cfg)
    if use_retrieval:
        tokens = Tensor(model.tokens[object_id])
        f_r = respc_forward(tokens, norm_crop, f_i, model.store, cfg.respc, (FEAT_GRID, FEAT_GRID))
    else:
        f_r = Tensor(np.zeros((FEAT_GRID, FEAT_GRID, cfg.respc.d_r), dtype=np.float32))
    return decode(f_i, f_r, model.store, cfg)


def shift_sample(sample: TrainSample, dr: int, dc: int) -> TrainSample:
    """Translate a sample by whole feature cells (stride-aligned crop jitter).

    The frozen feature map shifts by the same number of cells, so no
    re-extraction is needed; rolled-in borders become background.
    """
    if dr == 0 and dc == 0:
        return sample

    def roll2(a, rr, cc, fill):
        out = np.roll(np.roll(a, rr, axis=0), cc, axis=1)
        if rr > 0:
            out[:rr] = fill
        elif rr < 0:
            out[rr:] = fill
        if cc > 0:
            out[:, :cc] = fill
        elif cc < 0:
            out[:, cc:] = fill
        return out

    stride = CROP_SIZE // FEAT_GRID
    if dr % stride or dc % stride:
        raise TrainingError(f"jitter must be stride-aligned, got ({dr},{dc}) with stride {stride}")
    frozen = None
    if sample.frozen is not None:
        frozen = roll2(sample.frozen, dr // stride, dc // stride, 0.0)
    return TrainSample(
        object_id=sample.object_id,
        rgb=roll2(sample.rgb, dr, dc, 0.0),
        mask=roll2(sample.mask, dr, dc, False),
        coord_map=roll2(sample.coord_map, dr, dc, np.nan),
        frozen=frozen,
    )


def train_step(model: Model, sample: TrainSample, tc: TrainConfig, step: int) -> dict:
    """One optimization step on one sample; returns loss scalars and grad norms."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=tc.seed, spawn_key=(step,)))
    kb = model.kbs[sample.object_id]
    if tc.jitter_px > 0:
        stride = CROP_SIZE // FEAT_GRID
        cells = tc.jitter_px // stride
        dr, dc = rng.integers(-cells, cells + 1, size=2) * stride
        sample = shift_sample(sample, int(dr), int(dc))
    with Tape() as tape:
        f_q, mask_prob = forward_maps(
            model, sample.rgb, sample.object_id, frozen=sample.frozen, use_retrieval=tc.use_retrieval
        )
        if tc.use_contrastive:
            pos_px, pos_pts, neg_pts = sample_training_pairs(
                sample.mask, sample.coord_map, model.meshes[sample.object_id], tc.n_pos, tc.n_neg, rng
            )
            flat = reshape(f_q, (CROP_SIZE * CROP_SIZE, model.cfg.d_e))
            q = take(flat, pos_px[:, 0] * CROP_SIZE + pos_px[:, 1])
            k_pos = key_features(pos_pts, kb, model.store, model.cfg)
            k_neg = key_features(neg_pts, kb, model.store, model.cfg)
            l_con = loss_contrastive(q, k_pos, k_neg, tc.temperature)
        else:
            l_con = Tensor(np.float32(0.0))
        total, l_m = loss_total(l_con, mask_prob, sample.mask, tc.alpha)
        if not np.isfinite(total.data):
            raise TrainingError(
                f"non-finite loss at step {step}: l_con={float(l_con.data)} l_m={float(l_m.data)}"
            )
        backward(tape, total)
    report = adam_step(model.store, tc.lr)
    return {
        "step": step,
        "object": sample.object_id,
        "l_con": float(l_con.data),
        "l_m": float(l_m.data),
        "total": float(total.data),
        "updated": len(report["updated"]),
        "skipped": len(report["skipped"]),
    }


def train(
    model: Model,
    samples: list[TrainSample],
    tc: TrainConfig,
    log_path: str | Path | None = None,
    callback: Callable[[dict], None] | None = None,
) -> list[dict]:
    """Round-robin training over the sample list; returns the step log."""
    if not samples:
        raise TrainingError("no training samples")
    history: list[dict] = []
    log_f = open(log_path, "w") if log_path else None
    try:
        for step in range(tc.steps):
            sample = samples[step % len(samples)]
            if sample.frozen is None:
                sample.frozen = model.frozen_features(sample.rgb)
            try:
                stats = train_step(model, sample, tc, step)
            except SkipSample as exc:
                stats = {"step": step, "object": sample.object_id, "skipped_sample": str(exc)}
            history.append(stats)
            if log_f and ("l_con" in stats):
                log_f.write(json.dumps({k: stats[k] for k in ("step", "l_con", "l_m", "total")}) + "\n")
            if callback and step % tc.log_every == 0:
                callback(stats)
    finally:
        if log_f:
            log_f.close()
    return history


def norm_stats_from_samples(samples: list[TrainSample]) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std over the training crops (std floored for safety)."""
    acc = np.zeros(3)
    acc2 = np.zeros(3)
    n = 0
    for s in samples:
        acc += s.rgb.reshape(-1, 3).sum(axis=0)
        acc2 += (s.rgb.reshape(-1, 3).astype(np.float64) ** 2).sum(axis=0)
        n += s.rgb.shape[0] * s.rgb.shape[1]
    mean_ = acc / n
    std_ = np.sqrt(np.maximum(acc2 / n - mean_**2, 1e-6))
    return mean_, std_
