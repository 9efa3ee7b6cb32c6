"""Feature-map rotations: exact quarter turns and bilinear rotation on a zero canvas.

Positive angles rotate clockwise in image coordinates (row index grows downward).
Bilinear rotation pivots about the canvas centre ((D-1)/2, (D-1)/2), so multiples
of 90 degrees land exactly on grid points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .autodiff import ContractError, Tensor, crop2d, make_op, no_grad, pad2d

EXACT = "exact-quarter"
BILINEAR = "bilinear"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RotationSpec:
    angle_degrees: float
    mode: str = BILINEAR
    canvas: int | None = None

    def __post_init__(self):
        if self.mode not in (EXACT, BILINEAR):
            raise ConfigError(f"unknown rotation mode {self.mode!r}")
        if self.mode == EXACT and self.angle_degrees % 90 != 0:
            raise ConfigError(f"exact-quarter mode needs a multiple of 90, got {self.angle_degrees}")


def diagonal_bound(h: int, w: int) -> int:
    return math.ceil(math.sqrt(h * h + w * w))


def canvas_size(h: int, w: int, factor: int = 1) -> int:
    """Smallest square canvas holding any rotation of an ``h x w`` map.

    ``factor`` is the cumulative downsampling of the block that will run on the
    canvas: the result is divisible by it and keeps the padding margin a multiple
    of it, so the centre crop after downsampling is pixel-aligned.
    """
    d = diagonal_bound(h, w)
    while d % factor or (d - h) % (2 * factor) or (d - w) % (2 * factor):
        d += 1
    return d


def rot90_exact(t: Tensor, quarter_turns: int) -> Tensor:
    """Rotate clockwise by ``quarter_turns`` * 90 degrees; a pure index permutation.

    One clockwise turn sends source (r, c) to (c, H-1-r).  Odd turns swap H and W.
    """
    q = quarter_turns % 4
    if q == 0:
        return make_op("rot90", t.data, (t,), lambda g: (g,))
    out = np.ascontiguousarray(np.rot90(t.data, k=-q, axes=(2, 3)))
    return make_op("rot90", out, (t,),
                   lambda g: (np.ascontiguousarray(np.rot90(g, k=q, axes=(2, 3))),))


def _trig(angle: float) -> tuple[float, float]:
    a = angle % 360
    exact = {0: (1.0, 0.0), 90: (0.0, 1.0), 180: (-1.0, 0.0), 270: (0.0, -1.0)}
    if a in exact:
        return exact[a]
    rad = math.radians(a)
    return math.cos(rad), math.sin(rad)


@lru_cache(maxsize=64)
def _rotation_matrix(d: int, angle: float, dtype_name: str) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Sparse (d*d, d*d) bilinear sampling matrix and its transpose."""
    cos, sin = _trig(angle)
    ctr = (d - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(d, dtype=np.float64), np.arange(d, dtype=np.float64), indexing="ij")
    dr, dc = rr - ctr, cc - ctr
    sr = cos * dr - sin * dc + ctr
    sc = sin * dr + cos * dc + ctr
    # snap coordinates that are integral up to rounding noise
    for arr in (sr, sc):
        near = np.abs(arr - np.round(arr)) < 1e-9
        arr[near] = np.round(arr[near])
    r0, c0 = np.floor(sr), np.floor(sc)
    fr, fc = sr - r0, sc - c0
    dest = np.arange(d * d)
    rows, cols, vals = [], [], []
    for dy, dx, wgt in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                        (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        r, c = (r0 + dy).astype(np.int64).ravel(), (c0 + dx).astype(np.int64).ravel()
        wgt = wgt.ravel()
        keep = (r >= 0) & (r < d) & (c >= 0) & (c < d) & (wgt > 0)
        rows.append(dest[keep])
        cols.append(r[keep] * d + c[keep])
        vals.append(wgt[keep])
    mat = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                        shape=(d * d, d * d), dtype=np.dtype(dtype_name))
    return mat, mat.T.tocsr()


def _apply(mat: sp.csr_matrix, data: np.ndarray) -> np.ndarray:
    n, c, h, w = data.shape
    flat = data.reshape(n * c, h * w)
    return np.ascontiguousarray((mat @ flat.T).T).reshape(n, c, h, w)


def center_on_canvas(t: Tensor, d: int) -> Tensor:
    """Place ``t`` in the middle of a ``d x d`` zero canvas."""
    n, c, h, w = t.shape
    if h == d and w == d:
        return t
    if h > d or w > d:
        raise ContractError(f"map {h}x{w} does not fit canvas {d}")
    if d < diagonal_bound(h, w):
        raise ContractError(f"canvas {d} below diagonal bound {diagonal_bound(h, w)} for {h}x{w}")
    top, left = (d - h) // 2, (d - w) // 2
    return pad2d(t, top, d - h - top, left, d - w - left)


def rotate_bilinear(t: Tensor, spec: RotationSpec) -> Tensor:
    """Centre ``t`` on the zero canvas, then rotate it by bilinear resampling.

    Samples falling outside the canvas read zero.  The backward pass scatters the
    same four weights (the transpose of the sampling matrix).
    """
    if spec.mode != BILINEAR:
        raise ConfigError("rotate_bilinear needs a bilinear RotationSpec")
    n, c, h, w = t.shape
    d = spec.canvas if spec.canvas is not None else canvas_size(h, w)
    x = center_on_canvas(t, d)
    if spec.angle_degrees % 360 == 0:
        return x
    mat, mat_t = _rotation_matrix(d, float(spec.angle_degrees % 360), x.dtype.name)
    return make_op("rotate_bilinear", _apply(mat, x.data), (x,), lambda g: (_apply(mat_t, g),))


def rotate(t: Tensor, angle: float, mode: str, canvas: int | None = None) -> Tensor:
    if mode == EXACT:
        if angle % 90:
            raise ConfigError(f"exact-quarter mode needs a multiple of 90, got {angle}")
        return rot90_exact(t, int(angle // 90))
    return rotate_bilinear(t, RotationSpec(angle, BILINEAR, canvas))


def realign(branch: Tensor, i: int, config, crop: tuple[int, int] | None = None) -> Tensor:
    """Undo branch ``i``'s rotation (counter-clockwise by ``i * theta``).

    In bilinear mode the branch lives on a canvas; after counter-rotating, the
    central ``crop`` window (the unpadded extents after downsampling) is kept.
    """
    angle = i * config.theta_degrees
    if config.interp == EXACT:
        return rot90_exact(branch, -int(angle // 90))
    n, c, h, w = branch.shape
    out = rotate_bilinear(branch, RotationSpec(-angle, BILINEAR, canvas=h))
    if crop is None:
        return out
    ch, cw = crop
    return crop2d(out, (h - ch) // 2, (w - cw) // 2, ch, cw)


def disk_mask(size: int, content: int, margin: float = 1.0) -> np.ndarray:
    """Boolean mask of the disk inscribed in a centred ``content``-wide square on a ``size`` canvas."""
    ctr = (size - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    radius = (content - 1) / 2.0 - margin
    return (rr - ctr) ** 2 + (cc - ctr) ** 2 <= radius ** 2


def roundtrip_error(x: np.ndarray, angle: float, canvas: int | None = None) -> float:
    """Max interior-disk error of rotate-then-counter-rotate, relative to the value range of ``x``."""
    n, c, h, w = x.shape
    d = canvas or canvas_size(h, w)
    with no_grad():
        t = Tensor(x)
        fwd = rotate_bilinear(t, RotationSpec(angle, BILINEAR, d))
        back = rotate_bilinear(fwd, RotationSpec(-angle, BILINEAR, d))
        top, left = (d - h) // 2, (d - w) // 2
        restored = back.data[:, :, top:top + h, left:left + w]
    mask = disk_mask(h, min(h, w))
    span = float(x.max() - x.min()) or 1.0
    return float(np.abs(restored - x)[..., mask].max() / span)
