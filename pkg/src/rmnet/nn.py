"""Convolution, normalization, residual and head layers."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import DimensionError, Tensor, default_dtype, make_op, matmul, relu, reshape


def conv_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation of (N, C, H, W) with (O, C, K, K) weights."""
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c or kh != kw:
        raise DimensionError(f"conv weight {w.shape} incompatible with input {x.shape}")
    ho, wo = conv_extent(h, kh, stride, padding), conv_extent(wd, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv output extent underflow for input {h}x{wd}, kernel {kh}, stride {stride}")
    xd = x.data
    if padding:
        xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=xd.dtype)
        xp[:, :, padding:padding + h, padding:padding + wd] = xd
    else:
        xp = xd
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    if kh == 1 and stride == 1:
        cols = xp.reshape(n, c, h * wd)
    else:
        cols = np.empty((n, c, kh, kw, ho, wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = xp[:, :, i:i + hs:stride, j:j + ws:stride]
        cols = cols.reshape(n, c * kh * kw, ho * wo)
    wmat = w.data.reshape(o, -1)
    out = np.matmul(wmat, cols)
    if b is not None:
        out += b.data.reshape(1, o, 1)
    out = out.reshape(n, o, ho, wo)

    def fn(g):
        g3 = g.reshape(n, o, ho * wo)
        dx = dw = db = None
        if w.requires_grad:
            dw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if b is not None and b.requires_grad:
            db = g3.sum(axis=(0, 2))
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g3)
            if kh == 1 and stride == 1:
                dxp = dcols.reshape(n, c, h + 2 * padding, wd + 2 * padding)
            else:
                dcols = dcols.reshape(n, c, kh, kw, ho, wo)
                dxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i:i + hs:stride, j:j + ws:stride] += dcols[:, :, i, j]
            dx = np.ascontiguousarray(dxp[:, :, padding:padding + h, padding:padding + wd]) if padding else dxp
        return dx, dw, db

    parents = (x, w) if b is None else (x, w, b)
    return make_op("conv2d", out, parents, lambda g: fn(g)[:len(parents)])


def affine(x: Tensor, scale: Tensor, bias: Tensor) -> Tensor:
    """Per-channel ``x * scale + bias`` with (1, C, 1, 1) parameters."""
    xd, s = x.data, scale.data
    out = xd * s + bias.data

    def fn(g):
        return (
            g * s if x.requires_grad else None,
            (g * xd).sum(axis=(0, 2, 3), keepdims=True) if scale.requires_grad else None,
            g.sum(axis=(0, 2, 3), keepdims=True) if bias.requires_grad else None,
        )

    return make_op("affine", out, (x, scale, bias), fn)


def gap(x: Tensor) -> Tensor:
    """Global average pooling to (N, C, 1, 1)."""
    n, c, h, w = x.shape
    area = h * w
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return make_op("gap", out, (x,),
                   lambda g: (np.broadcast_to(g / area, (n, c, h, w)).astype(g.dtype),))


class Layer:
    """Minimal parameter container; subclasses implement ``__call__``."""

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((prefix + key, val))
            elif isinstance(val, Layer):
                out.extend(val.named_parameters(f"{prefix}{key}."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Layer):
                        out.extend(item.named_parameters(f"{prefix}{key}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr.astype(default_dtype()), requires_grad=True)


class Conv2d(Layer):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = False):
        fan_in = cin * kernel * kernel
        self.weight = _param(rng.normal(0.0, math.sqrt(2.0 / fan_in), (cout, cin, kernel, kernel)))
        self.bias = _param(np.zeros(cout)) if bias else None
        self.stride, self.padding = stride, padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Affine(Layer):
    """Learned per-channel scale and shift, no batch statistics."""

    def __init__(self, channels: int, scale: float = 1.0):
        self.scale = _param(np.full((1, channels, 1, 1), scale))
        self.bias = _param(np.zeros((1, channels, 1, 1)))

    def __call__(self, x: Tensor) -> Tensor:
        return affine(x, self.scale, self.bias)


class Stem(Layer):
    """3x3 conv, affine, rectifier."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, stride: int = 1):
        self.conv = Conv2d(cin, cout, 3, rng, stride=stride, padding=1)
        self.norm = Affine(cout)
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return relu(self.norm(self.conv(x)))


class ResidualBlock(Layer):
    """Two 3x3 convs with affine normalization; 1x1 projection shortcut when shape changes."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, stride: int = 1,
                 residual_scale: float = 1.0):
        self.conv1 = Conv2d(cin, cout, 3, rng, stride=stride, padding=1)
        self.norm1 = Affine(cout)
        self.conv2 = Conv2d(cout, cout, 3, rng, stride=1, padding=1)
        self.norm2 = Affine(cout, scale=residual_scale)
        if stride != 1 or cin != cout:
            self.proj = Conv2d(cin, cout, 1, rng, stride=stride)
            self.proj_norm = Affine(cout)
        else:
            self.proj = self.proj_norm = None
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        out = self.norm2(self.conv2(relu(self.norm1(self.conv1(x)))))
        short = x if self.proj is None else self.proj_norm(self.proj(x))
        if out.shape != short.shape:
            raise DimensionError(f"residual branch {out.shape} vs shortcut {short.shape}")
        return relu(out + short)


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    @property
    def downsample(self) -> int:
        s = 1
        for layer in self.layers:
            s *= getattr(layer, "downsample", getattr(layer, "stride", 1))
        return s

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


class Linear(Layer):
    def __init__(self, fin: int, fout: int, rng: np.random.Generator):
        bound = 1.0 / math.sqrt(fin)
        self.weight = _param(rng.uniform(-bound, bound, (fin, fout)))
        self.bias = _param(np.zeros((1, fout)))

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim == 4:
            x = reshape(x, (x.shape[0], -1))
        return matmul(x, self.weight) + self.bias
