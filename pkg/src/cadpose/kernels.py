"""Rasterization hot loops: numba-jitted scalar kernel and a vectorized numpy twin.

Both paths implement the same z-buffered, perspective-correct triangle fill
and must agree bit-for-bit: triangles are processed in index order, the depth
test is a strict ``<`` so ties keep the earlier triangle, and all arithmetic
is float64 without reassociation.

Buffers are written in place: ``depth`` must be pre-filled with +inf and
``attr`` (per-pixel interpolated vertex attributes) with NaN.
"""

from __future__ import annotations

import numpy as np

from .backend import HAVE_NUMBA, numba_enabled


def _fill_py(uv, z, faces, vattr, znear, depth, attr):
    height, width = depth.shape
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        z0, z1, z2 = z[i0], z[i1], z[i2]
        if z0 <= znear or z1 <= znear or z2 <= znear:
            continue
        x0, y0 = uv[i0, 0], uv[i0, 1]
        x1, y1 = uv[i1, 0], uv[i1, 1]
        x2, y2 = uv[i2, 0], uv[i2, 1]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0.0:
            continue
        # pixel (px,py) has center (px+0.5, py+0.5)
        xmin = max(int(np.ceil(min(x0, x1, x2) - 0.5)), 0)
        xmax = min(int(np.floor(max(x0, x1, x2) - 0.5)), width - 1)
        ymin = max(int(np.ceil(min(y0, y1, y2) - 0.5)), 0)
        ymax = min(int(np.floor(max(y0, y1, y2) - 0.5)), height - 1)
        if xmin > xmax or ymin > ymax:
            continue
        inv_area = 1.0 / area
        iz0, iz1, iz2 = 1.0 / z0, 1.0 / z1, 1.0 / z2
        for py in range(ymin, ymax + 1):
            cy = py + 0.5
            for px in range(xmin, xmax + 1):
                cx = px + 0.5
                w0 = (x1 - cx) * (y2 - cy) - (x2 - cx) * (y1 - cy)
                w1 = (x2 - cx) * (y0 - cy) - (x0 - cx) * (y2 - cy)
                w2 = (x0 - cx) * (y1 - cy) - (x1 - cx) * (y0 - cy)
                if area > 0.0:
                    if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                        continue
                else:
                    if w0 > 0.0 or w1 > 0.0 or w2 > 0.0:
                        continue
                l0 = w0 * inv_area
                l1 = w1 * inv_area
                l2 = w2 * inv_area
                inv_z = l0 * iz0 + l1 * iz1 + l2 * iz2
                zp = 1.0 / inv_z
                if zp <= znear or zp >= depth[py, px]:
                    continue
                depth[py, px] = zp
                # perspective-correct attribute interpolation
                c0 = l0 * iz0 * zp
                c1 = l1 * iz1 * zp
                c2 = l2 * iz2 * zp
                for a in range(vattr.shape[1]):
                    attr[py, px, a] = c0 * vattr[i0, a] + c1 * vattr[i1, a] + c2 * vattr[i2, a]


if HAVE_NUMBA:
    from numba import njit

    _fill_jit = njit(cache=True)(_fill_py)
else:  # pragma: no cover
    _fill_jit = None


def _fill_numpy(uv, z, faces, vattr, znear, depth, attr):
    height, width = depth.shape
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f]
        z0, z1, z2 = z[i0], z[i1], z[i2]
        if z0 <= znear or z1 <= znear or z2 <= znear:
            continue
        x0, y0 = uv[i0]
        x1, y1 = uv[i1]
        x2, y2 = uv[i2]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0.0:
            continue
        xmin = max(int(np.ceil(min(x0, x1, x2) - 0.5)), 0)
        xmax = min(int(np.floor(max(x0, x1, x2) - 0.5)), width - 1)
        ymin = max(int(np.ceil(min(y0, y1, y2) - 0.5)), 0)
        ymax = min(int(np.floor(max(y0, y1, y2) - 0.5)), height - 1)
        if xmin > xmax or ymin > ymax:
            continue
        cx = np.arange(xmin, xmax + 1, dtype=np.float64) + 0.5
        cy = (np.arange(ymin, ymax + 1, dtype=np.float64) + 0.5)[:, None]
        w0 = (x1 - cx) * (y2 - cy) - (x2 - cx) * (y1 - cy)
        w1 = (x2 - cx) * (y0 - cy) - (x0 - cx) * (y2 - cy)
        w2 = (x0 - cx) * (y1 - cy) - (x1 - cx) * (y0 - cy)
        if area > 0.0:
            inside = (w0 >= 0.0) & (w1 >= 0.0) & (w2 >= 0.0)
        else:
            inside = (w0 <= 0.0) & (w1 <= 0.0) & (w2 <= 0.0)
        if not inside.any():
            continue
        inv_area = 1.0 / area
        l0, l1, l2 = w0 * inv_area, w1 * inv_area, w2 * inv_area
        iz0, iz1, iz2 = 1.0 / z0, 1.0 / z1, 1.0 / z2
        inv_z = l0 * iz0 + l1 * iz1 + l2 * iz2
        with np.errstate(divide="ignore"):
            zp = 1.0 / inv_z
        sub = (slice(ymin, ymax + 1), slice(xmin, xmax + 1))
        upd = inside & (zp > znear) & (zp < depth[sub])
        if not upd.any():
            continue
        depth[sub][upd] = zp[upd]
        c0 = l0 * iz0 * zp
        c1 = l1 * iz1 * zp
        c2 = l2 * iz2 * zp
        vals = (
            c0[..., None] * vattr[i0][None, None, :]
            + c1[..., None] * vattr[i1][None, None, :]
            + c2[..., None] * vattr[i2][None, None, :]
        )
        attr[sub][upd] = vals[upd]


def raster_fill(uv, z, faces, vattr, znear, depth, attr, force_backend: str | None = None) -> None:
    """Dispatch to the jitted or numpy fill according to the env flag.

    force_backend ("numba"/"numpy") overrides selection; used by the benchmark
    and the backend-consistency tests.
    """
    if force_backend == "numba":
        if _fill_jit is None:
            raise RuntimeError("numba backend requested but numba is unavailable")
        fn = _fill_jit
    elif force_backend == "numpy":
        fn = _fill_numpy
    else:
        fn = _fill_jit if (numba_enabled() and _fill_jit is not None) else _fill_numpy
    fn(
        np.ascontiguousarray(uv, dtype=np.float64),
        np.ascontiguousarray(z, dtype=np.float64),
        np.ascontiguousarray(faces, dtype=np.int64),
        np.ascontiguousarray(vattr, dtype=np.float64),
        float(znear),
        depth,
        attr,
    )
