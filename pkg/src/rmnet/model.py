"""Model graphs: a block list, an optional RM span and a classifier or hasher head.

Block 0 is the stem; residual blocks are numbered 1..n.  A span ``(a, b)`` wraps
blocks a..b inclusive in one RotationMeanout.  When ``b`` is the last block the
RM output goes straight into global average pooling (strict RM-GAP); otherwise
further non-equivariant blocks intervene (relaxed RM-GAP).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import Tensor, reshape
from .nn import Layer, Linear, ResidualBlock, Sequential, Stem, conv_extent, gap
from .rm import RmConfig, RotationMeanout
from .rotation import BILINEAR, ConfigError, canvas_size

BASELINE, STRICT, RELAXED = "baseline", "strict", "relaxed"
CLASSIFIER, HASHER = "classifier", "hasher"


class GraphError(ConfigError):
    def __init__(self, msg: str, block: int | None = None):
        super().__init__(msg if block is None else f"block {block}: {msg}")
        self.block = block


@dataclass(frozen=True)
class BlockSpec:
    kind: str  # "stem" | "res"
    cin: int
    cout: int
    stride: int = 1


@dataclass(frozen=True)
class ModelGraph:
    blocks: tuple[BlockSpec, ...]
    input_shape: tuple[int, int, int] = (3, 64, 64)
    num_classes: int = 8
    head: str = HASHER
    hash_bits: int = 16
    rm_span: tuple[int, int] | None = None
    rm: RmConfig | None = None
    residual_scale: float = 1.0

    @property
    def label(self) -> str:
        if self.rm_span is None:
            return BASELINE
        return STRICT if self.rm_span[1] == len(self.blocks) - 1 else RELAXED

    @property
    def full_trunk(self) -> bool:
        return self.label == STRICT and self.rm_span[0] == 0

    def extents(self) -> list[tuple[int, int, int]]:
        """(C, H, W) entering each block, plus the trunk output as the last entry."""
        c, h, w = self.input_shape
        out = [(c, h, w)]
        for i, b in enumerate(self.blocks):
            if b.cin != c:
                raise GraphError(f"expects {b.cin} input channels, previous stage gives {c}", i)
            h, w = conv_extent(h, 3, b.stride, 1), conv_extent(w, 3, b.stride, 1)
            if h < 1 or w < 1:
                raise GraphError("spatial extent underflow", i)
            c = b.cout
            out.append((c, h, w))
        return out

    def span_downsample(self) -> int:
        a, b = self.rm_span
        s = 1
        for blk in self.blocks[a:b + 1]:
            s *= blk.stride
        return s

    def canvas(self) -> int | None:
        if self.rm_span is None or self.rm is None or not self.rm.rotate or self.rm.interp != BILINEAR:
            return None
        _, h, w = self.extents()[self.rm_span[0]]
        return canvas_size(h, w, self.span_downsample())

    def validate(self) -> "ModelGraph":
        if not self.blocks or self.blocks[0].kind != "stem":
            raise GraphError("graph must start with a stem block", 0)
        for i, b in enumerate(self.blocks):
            if b.kind not in ("stem", "res") or (b.kind == "stem") != (i == 0):
                raise GraphError(f"unexpected block kind {b.kind!r}", i)
        ext = self.extents()
        if self.head not in (CLASSIFIER, HASHER):
            raise GraphError(f"unknown head {self.head!r}")
        if self.rm_span is None:
            return self
        a, b = self.rm_span
        if not 0 <= a <= b < len(self.blocks):
            raise GraphError(f"rm span {self.rm_span} outside blocks 0..{len(self.blocks) - 1}", a)
        if self.rm is None:
            raise GraphError("rm span given without an RmConfig", a)
        _, h, w = ext[a]
        if self.rm.rotate and self.rm.interp != BILINEAR and self.rm.theta_degrees % 180 and h != w:
            raise GraphError(f"quarter-turn RM needs square maps, got {h}x{w}", a)
        if self.rm.rotate and self.rm.interp == BILINEAR:
            s = self.span_downsample()
            if h % s or w % s:
                raise GraphError(f"span downsampling {s} does not divide extent {h}x{w}", a)
            d = self.canvas()
            if d % s:
                raise GraphError(f"span downsampling {s} does not divide canvas {d}", a)
        return self

    def describe(self) -> str:
        span = "none" if self.rm_span is None else f"{self.rm_span[0]}:{self.rm_span[1]}"
        return f"{self.label} RM-GAP span={span}" if self.rm_span else "baseline"


def rmnet_s(num_classes: int = 8, head: str = HASHER, rm_span=None, rm: RmConfig | None = None,
            input_size: int = 64, width: int = 16, stem_stride: int = 4, residual_scale: float = 0.0,
            **kw) -> ModelGraph:
    """Stem (width) then residual blocks (w, w, 2w stride 2, 2w)."""
    w = width
    blocks = (
        BlockSpec("stem", 3, w, stem_stride),
        BlockSpec("res", w, w, 1),
        BlockSpec("res", w, w, 1),
        BlockSpec("res", w, 2 * w, 2),
        BlockSpec("res", 2 * w, 2 * w, 1),
    )
    return ModelGraph(blocks, (3, input_size, input_size), num_classes, head,
                      rm_span=tuple(rm_span) if rm_span else None, rm=rm,
                      residual_scale=residual_scale, **kw)


def resnet_graph(n_blocks: int = 8, width: int = 8, input_size: int = 32, **kw) -> ModelGraph:
    """Stem plus ``n_blocks`` residual blocks in stages of two, doubling width each stage."""
    blocks = [BlockSpec("stem", 3, width, 1)]
    c = width
    for i in range(n_blocks):
        stride = 2 if i and i % 2 == 0 else 1
        cout = c * 2 if stride == 2 else c
        blocks.append(BlockSpec("res", c, cout, stride))
        c = cout
    return ModelGraph(tuple(blocks), (3, input_size, input_size), **kw)


PRESETS = {"rmnet-s": rmnet_s}


class Model(Layer):
    def __init__(self, graph: ModelGraph, seed: int = 0):
        graph.validate()
        self.graph = graph
        rng = np.random.default_rng(seed)
        self.blocks = []
        for spec in graph.blocks:
            if spec.kind == "stem":
                self.blocks.append(Stem(spec.cin, spec.cout, rng, stride=spec.stride))
            else:
                self.blocks.append(ResidualBlock(spec.cin, spec.cout, rng, stride=spec.stride,
                                                 residual_scale=graph.residual_scale))
        feat = graph.blocks[-1].cout
        if graph.head == HASHER:
            self.hash = Linear(feat, graph.hash_bits, rng)
            self.fc = Linear(graph.hash_bits, graph.num_classes, rng)
        else:
            self.hash = None
            self.fc = Linear(feat, graph.num_classes, rng)
        self.rm = None
        if graph.rm_span is not None:
            a, b = graph.rm_span
            span_out = graph.blocks[b].cout
            self.rm = RotationMeanout(Sequential(self.blocks[a:b + 1]), graph.rm, span_out, rng,
                                      canvas=graph.canvas())

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for i, blk in enumerate(self.blocks):
            out.extend(blk.named_parameters(f"{prefix}blocks.{i}."))
        if self.rm is not None:
            if self.rm.branches is not None:
                for j, br in enumerate(self.rm.branches, start=1):
                    out.extend(br.named_parameters(f"{prefix}rm.branch{j}."))
            if self.rm.embed_weight is not None:
                out.append((f"{prefix}rm.embed.weight", self.rm.embed_weight))
                out.append((f"{prefix}rm.embed.bias", self.rm.embed_bias))
        if self.hash is not None:
            out.extend(self.hash.named_parameters(f"{prefix}hash."))
        out.extend(self.fc.named_parameters(f"{prefix}fc."))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.asarray(state[name], dtype=p.dtype).copy()

    def astype(self, dtype) -> "Model":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        return self

    # forward pieces, also used by the invariance audit
    def span_input(self, x: Tensor) -> Tensor:
        """Feature maps entering the RM span."""
        a = self.graph.rm_span[0] if self.graph.rm_span else len(self.blocks)
        for blk in self.blocks[:a]:
            x = blk(x)
        return x

    def span_output(self, z: Tensor) -> Tensor:
        return self.rm(z)

    def after_span(self, z: Tensor) -> Tensor:
        b = self.graph.rm_span[1]
        for blk in self.blocks[b + 1:]:
            z = blk(z)
        return z

    def trunk(self, x: Tensor) -> Tensor:
        if self.rm is None:
            for blk in self.blocks:
                x = blk(x)
            return x
        return self.after_span(self.span_output(self.span_input(x)))

    def features(self, x: Tensor) -> Tensor:
        """Pooled trunk output (N, C)."""
        f = gap(self.trunk(x))
        return reshape(f, (f.shape[0], f.shape[1]))

    def head_from_features(self, f: Tensor) -> tuple[Tensor | None, Tensor]:
        emb = self.hash(f) if self.hash is not None else None
        return emb, self.fc(emb if emb is not None else f)

    def embed(self, x: Tensor) -> Tensor:
        if self.hash is None:
            raise ConfigError("model has a classifier head; embeddings need a hasher head")
        return self.hash(self.features(x))

    def __call__(self, x: Tensor) -> Tensor:
        return self.head_from_features(self.features(x))[1]


def build_model(graph: ModelGraph, seed: int = 0) -> Model:
    return Model(graph, seed)


def without_rm(graph: ModelGraph) -> ModelGraph:
    return replace(graph, rm_span=None, rm=None)
