"""Benchmarks: RM cost relative to its block, interpolation round-trip error, synthetic accuracy."""

from __future__ import annotations

import gc
import logging
import time
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .autodiff import Tensor, no_grad
from .data import SynthSpec, rotation_shift_dataset
from .metrics import map_at_10, mrr_at_10
from .model import build_model, rmnet_s
from .nn import ResidualBlock
from .retrieval import build_index, embed
from .rm import RmConfig, RotationMeanout
from .rotation import canvas_size, roundtrip_error
from .training import TrainConfig, accuracy, train

log = logging.getLogger(__name__)

# synthetic benchmark protocol
BENCH_N = 4000
BENCH_EPOCHS = 12
BENCH_DECAY_EVERY = 8
TRAIN_MAX_ANGLE = 45.0  # train/val orientations; the test split is uniform over 360
FULL_TRUNK = (0, 4)
SMOOTH_SIGMA = 2.0


def _best_times(fns, repeats: int) -> list[float]:
    """Best wall time of each callable, measured interleaved with the collector paused."""
    for fn in fns:
        fn()
    best = [float("inf")] * len(fns)
    enabled = gc.isenabled()
    gc.disable()
    try:
        for _ in range(repeats):
            for j, fn in enumerate(fns):
                t = time.perf_counter()
                fn()
                best[j] = min(best[j], time.perf_counter() - t)
    finally:
        if enabled:
            gc.enable()
    return best


def speed_ratio(k: int = 4, batch: int = 32, channels: int = 16, size: int = 32, repeats: int = 15,
                seed: int = 0) -> dict:
    """Forward time of an RM-wrapped residual block over the block alone (best of ``repeats``)."""
    rng = np.random.default_rng(seed)
    block = ResidualBlock(channels, channels, rng)
    rm = RotationMeanout(block, RmConfig.from_theta(360 / k), channels, rng)
    x = Tensor(rng.normal(size=(batch, channels, size, size)).astype(np.float32))
    with no_grad():
        solo, wrapped = _best_times([lambda: block(x), lambda: rm(x)], repeats)
    return {"k": k, "solo_s": solo, "rm_s": wrapped, "ratio": wrapped / solo}


def smooth_map(size: int = 32, seed: int = 0, sigma: float = SMOOTH_SIGMA) -> np.ndarray:
    """Gaussian-filtered white noise as a (1, 1, size, size) map."""
    noise = np.random.default_rng(seed).normal(size=(1, 1, size, size))
    return gaussian_filter(noise, sigma, axes=(2, 3))


def interpolation_errors(thetas=(90.0, 60.0, 45.0), size: int = 32, seed: int = 0) -> dict[float, float]:
    """Rotate-then-counter-rotate interior error of a smooth map, relative to its value range."""
    x = smooth_map(size, seed)
    d = canvas_size(size, size)
    return {float(t): roundtrip_error(x, t, d) for t in thetas}


@dataclass
class RunResult:
    label: str
    seed: int
    accuracy: float
    map10: float
    mrr10: float
    seconds: float

    def to_line(self) -> str:
        return (f"run={self.label} seed={self.seed} test_acc={self.accuracy:.4f} map10={self.map10:.4f} "
                f"mrr10={self.mrr10:.4f} seconds={self.seconds:.1f}")


def synthetic_run(seed: int, span=FULL_TRUNK, theta: float = 90.0, epochs: int = BENCH_EPOCHS,
                  decay_every: int = BENCH_DECAY_EVERY, n: int = BENCH_N, data=None) -> RunResult:
    """Train one rmnet-s model on the rotation-shift set and score it on uniformly rotated test images."""
    start = time.perf_counter()
    if data is None:
        data = rotation_shift_dataset(SynthSpec(n=n, seed=seed, max_angle=TRAIN_MAX_ANGLE), seed)
    rm = RmConfig.from_theta(theta) if span else None
    model = build_model(rmnet_s(num_classes=len(data.classes), rm_span=span, rm=rm), seed=seed)
    train(model, data, TrainConfig(epochs=epochs, decay_every=decay_every, seed=seed), evaluate=False)
    index = build_index(model, data.train, data.norm)
    ranked = index.search(embed(model, data.test, data.norm), data.test.labels)
    label = "baseline" if span is None else f"rm{span[0]}:{span[1]}@{theta:g}"
    res = RunResult(label, seed, accuracy(model, data.test, data.norm), map_at_10(ranked), mrr_at_10(ranked),
                    time.perf_counter() - start)
    log.info("%s", res.to_line())
    return res


def synthetic_benchmark(seeds=(0, 1, 2), thetas=(90.0,), train_max_angle: float = TRAIN_MAX_ANGLE,
                        baseline: bool = True, **kw) -> list[RunResult]:
    """Baseline and full-trunk RM runs for every seed, sharing each seed's dataset.

    Training orientations are drawn from [0, train_max_angle); 360 gives the plain
    uniformly rotated set, where train and test orientations agree.
    """
    out = []
    for seed in seeds:
        spec = SynthSpec(n=kw.get("n", BENCH_N), seed=seed, max_angle=train_max_angle)
        data = rotation_shift_dataset(spec, seed)
        if baseline:
            out.append(synthetic_run(seed, None, data=data, **kw))
        for theta in thetas:
            out.append(synthetic_run(seed, FULL_TRUNK, theta, data=data, **kw))
    return out


def summarize(results: list[RunResult]) -> dict[str, dict[str, float]]:
    """Seed-averaged accuracy and mAP@10 per run label."""
    groups: dict[str, list[RunResult]] = {}
    for r in results:
        groups.setdefault(r.label, []).append(r)
    return {label: {"accuracy": float(np.mean([r.accuracy for r in rs])),
                    "map10": float(np.mean([r.map10 for r in rs])),
                    "mrr10": float(np.mean([r.mrr10 for r in rs])),
                    "seeds": len(rs)}
            for label, rs in groups.items()}
