"""Rotation Meanout: expand by rotation, share one extractor, realign, fuse.

For an input X and extractor f, branch i computes

    r_{i*theta}^{-1} f(r_{i*theta} X),   i = 0 .. k-1,  k * theta = 360

and the k realigned branches are fused elementwise (mean by default).
"""

from __future__ import annotations

import copy
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .autodiff import DimensionError, Tensor, concat, make_op
from .nn import Layer, _param, conv2d
from .rotation import BILINEAR, EXACT, ConfigError, RotationSpec, canvas_size, realign, rot90_exact, rotate_bilinear

MEANOUT, MAXOUT, EMBEDDING = "meanout", "maxout", "embedding"
FUSIONS = (MEANOUT, MAXOUT, EMBEDDING)


@dataclass(frozen=True)
class RmConfig:
    k: int = 4
    theta_degrees: float = 90.0
    fusion: str = MEANOUT
    interp: str | None = None
    rotate: bool = True
    share_weights: bool = True
    parallel: bool = False

    def __post_init__(self):
        if self.interp is None:
            object.__setattr__(self, "interp", EXACT if self.theta_degrees % 90 == 0 else BILINEAR)
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.k * self.theta_degrees != 360:
            raise ConfigError(f"k * theta must equal 360, got {self.k} * {self.theta_degrees}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"unknown fusion {self.fusion!r}")
        if self.interp not in (EXACT, BILINEAR):
            raise ConfigError(f"unknown interpolation {self.interp!r}")
        if self.interp == EXACT and self.theta_degrees % 90 != 0:
            raise ConfigError(f"exact-quarter interpolation needs theta divisible by 90, got {self.theta_degrees}")

    @classmethod
    def from_theta(cls, theta: float, **kw) -> "RmConfig":
        return cls(k=int(round(360 / theta)), theta_degrees=theta, **kw)

    def with_(self, **kw) -> "RmConfig":
        return replace(self, **kw)


def _check_branches(branches: Sequence[Tensor]) -> None:
    if not branches:
        raise DimensionError("fusion needs at least one branch")
    shape = branches[0].shape
    for i, b in enumerate(branches):
        if b.shape != shape:
            raise DimensionError(f"branch {i} has shape {b.shape}, expected {shape}")


def fuse_meanout(branches: Sequence[Tensor]) -> Tensor:
    _check_branches(branches)
    k = len(branches)
    acc = branches[0].data.copy()
    for b in branches[1:]:
        acc += b.data
    acc /= k
    return make_op("meanout", acc, tuple(branches), lambda g: tuple(g / k for _ in range(k)))


def fuse_maxout(branches: Sequence[Tensor]) -> Tensor:
    """Elementwise max; ties send the gradient to the lowest branch index."""
    _check_branches(branches)
    stacked = np.stack([b.data for b in branches])
    winner = stacked.argmax(axis=0)
    out = np.take_along_axis(stacked, winner[None], axis=0)[0]
    k = len(branches)
    return make_op("maxout", out, tuple(branches),
                   lambda g: tuple(np.where(winner == i, g, 0).astype(g.dtype) for i in range(k)))


def fuse_embedding(branches: Sequence[Tensor], weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """1x1 convolution over the branches concatenated along channels (branch-major)."""
    _check_branches(branches)
    cat = concat(list(branches), axis=1)
    if weight.shape[1] != cat.shape[1]:
        raise DimensionError(f"embedding weight expects {weight.shape[1]} channels, got {cat.shape[1]}")
    return conv2d(cat, weight, bias)


def averaging_weights(k: int, channels: int) -> np.ndarray:
    """Embedding weights that reproduce meanout: output c averages the k copies of c."""
    w = np.zeros((channels, k * channels, 1, 1))
    for i in range(k):
        w[np.arange(channels), i * channels + np.arange(channels), 0, 0] = 1.0 / k
    return w


def rm_forward(x: Tensor, f: Callable[[Tensor], Tensor], cfg: RmConfig, *,
               branch_fns: Sequence[Callable] | None = None, embedding: tuple | None = None,
               canvas: int | None = None) -> Tensor:
    """Run ``f`` on k rotated copies of ``x``, rotate each result back and fuse.

    ``branch_fns`` replaces ``f`` per branch (the no-weight-sharing ablation).
    ``embedding`` is the (weight, bias) pair for embedding fusion.  In bilinear
    mode every branch runs on the same zero canvas (``canvas`` or the smallest
    admissible one for ``f``'s downsampling) and is centre-cropped afterwards.
    """
    n, c, h, w = x.shape
    factor = getattr(f, "downsample", 1)
    bilinear = cfg.rotate and cfg.interp == BILINEAR
    if bilinear:
        if h % factor or w % factor:
            raise ConfigError(f"downsampling {factor} does not divide input {h}x{w}")
        d = canvas or canvas_size(h, w, factor)
        if d % factor:
            raise ConfigError(f"downsampling {factor} does not divide canvas {d}")
        crop = (h // factor, w // factor)

    def branch(i: int) -> Tensor:
        fi = branch_fns[i] if branch_fns is not None else f
        if not cfg.rotate:
            return fi(x)
        angle = i * cfg.theta_degrees
        if cfg.interp == EXACT:
            q = int(angle // 90)
            return rot90_exact(fi(rot90_exact(x, q)), -q)
        y = fi(rotate_bilinear(x, RotationSpec(angle, BILINEAR, d)))
        return realign(y, i, cfg, crop)

    if cfg.parallel and cfg.k > 1:
        with ThreadPoolExecutor(max_workers=cfg.k) as pool:
            branches = list(pool.map(branch, range(cfg.k)))
    else:
        branches = [branch(i) for i in range(cfg.k)]

    if cfg.fusion == MEANOUT:
        return fuse_meanout(branches)
    if cfg.fusion == MAXOUT:
        return fuse_maxout(branches)
    if embedding is None:
        raise ConfigError("embedding fusion needs 1x1 conv parameters")
    return fuse_embedding(branches, *embedding)


class RotationMeanout(Layer):
    """Wraps a shared block; one parameter set serves every branch unless weight sharing is off."""

    def __init__(self, block: Layer, cfg: RmConfig, out_channels: int, rng: np.random.Generator,
                 canvas: int | None = None):
        self.block = block
        self.cfg = cfg
        self.canvas = canvas
        self.branches = None
        if not cfg.share_weights:
            # independent copies for branches 1..k-1, branch 0 keeps the original
            self.branches = [copy.deepcopy(block) for _ in range(cfg.k - 1)]
        self.embed_weight = self.embed_bias = None
        if cfg.fusion == EMBEDDING:
            self.embed_weight = _param(averaging_weights(cfg.k, out_channels)
                                       + rng.normal(0, 0.01, (out_channels, cfg.k * out_channels, 1, 1)))
            self.embed_bias = _param(np.zeros(out_channels))

    @property
    def downsample(self) -> int:
        return getattr(self.block, "downsample", 1)

    def __call__(self, x: Tensor) -> Tensor:
        fns = None if self.branches is None else [self.block, *self.branches]
        emb = None if self.embed_weight is None else (self.embed_weight, self.embed_bias)
        return rm_forward(x, self.block, self.cfg, branch_fns=fns, embedding=emb, canvas=self.canvas)
