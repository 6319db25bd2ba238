"""Dense 2D visual descriptors: deterministic hand-crafted extractor + file injection.

The extractor is a frozen, pure function of the image, mirroring how the
pipeline treats a pretrained backbone: per-cell descriptors combining local
color statistics, multi-scale gradient-orientation histograms and
center-surround contrasts, L2-normalized per cell. Externally computed
feature maps (e.g. from a real backbone) can be injected from tensor-archive
files instead; nothing downstream can tell the difference.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import tensorio
from .autodiff import bilinear_resize

N_ORIENT_BINS = 8


class FeatureError(Exception):
    pass


@dataclass(frozen=True)
class ExtractorConfig:
    kind: str = "handcrafted"  # "handcrafted" | "file"
    dim: int = 32
    stride: int = 8
    scales: tuple[int, ...] = (0, 2)  # box-blur radii for the gradient pyramid
    feature_dir: str | None = None  # for kind="file"

    def __post_init__(self):
        if self.kind not in ("handcrafted", "file"):
            raise FeatureError(f"unknown extractor kind {self.kind!r}")
        if self.kind == "handcrafted" and self.dim != natural_dim(self.scales):
            raise FeatureError(
                f"handcrafted descriptor with scales {self.scales} has dim "
                f"{natural_dim(self.scales)}, config says {self.dim}"
            )

    def fingerprint(self) -> str:
        key = f"{self.kind}:dim={self.dim}:stride={self.stride}:scales={tuple(self.scales)}"
        return hashlib.sha256(key.encode()).hexdigest()[:16]


def natural_dim(scales) -> int:
    # color mean/std (6) + gray mean/std (2) + center-surround (4)
    # + per scale: orientation histogram (8) + gradient-magnitude mean/std (2)
    return 12 + (N_ORIENT_BINS + 2) * len(scales)


@dataclass
class FeatureMap:
    data: np.ndarray  # (Hv, Wv, D) float32
    stride: int
    source_dims: tuple[int, int]
    fingerprint: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        h, w = self.source_dims
        hv = -(-h // self.stride)
        wv = -(-w // self.stride)
        if self.data.shape[:2] != (hv, wv):
            raise FeatureError(f"feature grid {self.data.shape[:2]} does not match ceil({h}/{self.stride}) x ceil({w}/{self.stride})")
        if not np.all(np.isfinite(self.data)):
            raise FeatureError("feature map contains non-finite values")

    @property
    def dim(self) -> int:
        return self.data.shape[2]


def _cell_mean(img: np.ndarray, hv: int, wv: int, s: int) -> np.ndarray:
    return img.reshape(hv, s, wv, s, -1).mean(axis=(1, 3))


def _cell_std(img: np.ndarray, hv: int, wv: int, s: int) -> np.ndarray:
    return img.reshape(hv, s, wv, s, -1).std(axis=(1, 3))


def extract_dense(image: np.ndarray, cfg: ExtractorConfig = ExtractorConfig()) -> FeatureMap:
    """Dense per-cell descriptors of an (H,W,3) image with values in [0,1].

    Cells of exactly zero variance (in every non-mean channel) keep their raw
    descriptor — the canonical zero-gradient vector; all other cells are
    L2-normalized.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise FeatureError(f"expected (H,W,3) image, got {image.shape}")
    h, w = image.shape[:2]
    s = cfg.stride
    if h < s or w < s:
        raise FeatureError(f"image {h}x{w} smaller than one {s}x{s} feature cell")
    hv, wv = -(-h // s), -(-w // s)
    pad_h, pad_w = hv * s - h, wv * s - w
    if pad_h or pad_w:
        image = np.pad(image, ((0, pad_h), (0, pad_w), (0, 0)), mode="edge")

    gray = image @ np.array([0.299, 0.587, 0.114])
    parts = [
        _cell_mean(image, hv, wv, s),  # 3
        _cell_std(image, hv, wv, s),  # 3
        _cell_mean(gray[..., None], hv, wv, s),  # 1
        _cell_std(gray[..., None], hv, wv, s),  # 1
    ]
    cell_idx = np.repeat(np.arange(hv * wv).reshape(hv, wv), s, axis=0).repeat(s, axis=1)
    n_px = float(s * s)
    for radius in cfg.scales:
        g = gray if radius == 0 else ndimage.uniform_filter(gray, size=2 * radius + 1, mode="nearest")
        gy, gx = np.gradient(g)
        mag = np.hypot(gx, gy)
        ang = np.arctan2(gy, gx)  # [-pi, pi]
        bins = np.minimum((ang + np.pi) / (2 * np.pi) * N_ORIENT_BINS, N_ORIENT_BINS - 1).astype(np.int64)
        hist = np.bincount(
            (cell_idx * N_ORIENT_BINS + bins).ravel(), weights=mag.ravel(), minlength=hv * wv * N_ORIENT_BINS
        ).reshape(hv, wv, N_ORIENT_BINS) / n_px
        parts.append(hist)
        parts.append(_cell_mean(mag[..., None], hv, wv, s))
        parts.append(_cell_std(mag[..., None], hv, wv, s))
    # center-surround: inner half-cell mean minus whole-cell mean, RGB + gray
    q = max(s // 4, 1)
    inner = image.reshape(hv, s, wv, s, 3)[:, q : s - q, :, q : s - q, :].mean(axis=(1, 3))
    inner_gray = gray.reshape(hv, s, wv, s)[:, q : s - q, :, q : s - q].mean(axis=(1, 3))
    parts.append(inner - parts[0])
    parts.append((inner_gray - parts[2][..., 0])[..., None])

    desc = np.concatenate(parts, axis=2)
    if desc.shape[2] != cfg.dim:
        raise FeatureError(f"descriptor dim {desc.shape[2]} != configured {cfg.dim}")
    mean_channels = np.zeros(cfg.dim, dtype=bool)
    mean_channels[[0, 1, 2, 6]] = True
    # zero-variance cells (non-mean channels below float noise) keep the raw
    # means with the crumbs zeroed: the canonical zero-gradient descriptor
    flat = np.abs(desc[..., ~mean_channels]).max(axis=2) < 1e-12
    desc[flat[:, :, None] & ~mean_channels[None, None, :]] = 0.0
    norm = np.linalg.norm(desc, axis=2, keepdims=True)
    normed = desc / np.maximum(norm, 1e-30)
    desc = np.where(flat[..., None], desc, normed)
    return FeatureMap(desc.astype(np.float32), stride=s, source_dims=(h, w), fingerprint=cfg.fingerprint())


def upsample_features(fm: FeatureMap) -> np.ndarray:
    """Bilinear (corner-aligned) upsampling of a feature map to image resolution."""
    h, w = fm.source_dims
    return bilinear_resize(fm.data.astype(np.float64), h, w)


# ---------------------------------------------------------------------------
# feature-file injection


def save_feature_file(fm: FeatureMap, path: str | Path) -> None:
    tensorio.write_archive(
        path,
        {"features": fm.data},
        meta={
            "stride": fm.stride,
            "source_dims": list(fm.source_dims),
            "dim": fm.dim,
            "fingerprint": fm.fingerprint,
        },
    )


def load_feature_file(path: str | Path, expect_dim: int | None = None) -> FeatureMap:
    arrays, meta = tensorio.read_archive(path)
    if "features" not in arrays:
        raise FeatureError(f"{path}: no 'features' record")
    data = arrays["features"]
    if expect_dim is not None and data.shape[2] != expect_dim:
        raise FeatureError(f"{path}: feature dim {data.shape[2]}, pipeline expects {expect_dim}")
    return FeatureMap(
        data,
        stride=int(meta["stride"]),
        source_dims=tuple(meta["source_dims"]),
        fingerprint=str(meta.get("fingerprint", "")),
    )


class FileFeatureSource:
    """Looks up precomputed per-view feature files by name (kind="file")."""

    def __init__(self, cfg: ExtractorConfig):
        if cfg.feature_dir is None:
            raise FeatureError("kind='file' requires feature_dir")
        self.cfg = cfg
        self.dir = Path(cfg.feature_dir)

    def load(self, name: str) -> FeatureMap:
        return load_feature_file(self.dir / f"{name}.ta", expect_dim=self.cfg.dim)
