"""Image folders, label manifests, preprocessing and the synthetic rotated-shape set.

Layout on disk::

    <root>/<class>/<name>.ppm
    <root>/labels.csv      # header "path,label", paths relative to root
    <root>/spec.txt        # generator settings (synthetic sets only)
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SCALE_EDGE = 72
CROP = 64


# --------------------------------------------------------------------------- io

def write_ppm(path: Path, img: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as binary PPM."""
    h, w, c = img.shape
    if c != 3 or img.dtype != np.uint8:
        raise ValueError("PPM needs an (H, W, 3) uint8 image")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def _ppm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    return tokens, pos + 1


def read_ppm(path: Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _ppm_tokens(buf, 4)
    if magic != b"P6" or int(maxval) != 255:
        raise ValueError(f"{path}: only 8-bit binary PPM (P6) is supported")
    w, h = int(w), int(h)
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=offset)
    return data.reshape(h, w, 3)


def read_image(path: Path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise ValueError(f"{path}: non-PPM images need Pillow installed") from exc
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)


# --------------------------------------------------------------------- manifest

@dataclass
class Manifest:
    root: Path
    rows: list[tuple[str, str]]

    @property
    def classes(self) -> list[str]:
        return sorted({label for _, label in self.rows})

    def labels(self) -> np.ndarray:
        index = {c: i for i, c in enumerate(self.classes)}
        return np.array([index[label] for _, label in self.rows], dtype=np.int64)

    def paths(self) -> list[Path]:
        return [self.root / p for p, _ in self.rows]

    def save(self) -> Path:
        out = self.root / "labels.csv"
        with open(out, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["path", "label"])
            writer.writerows(self.rows)
        return out

    @classmethod
    def load(cls, root) -> "Manifest":
        root = Path(root)
        with open(root / "labels.csv", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["path", "label"]:
                raise ValueError(f"{root / 'labels.csv'}: expected header 'path,label', got {header}")
            rows = []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 2 or not row[1].strip():
                    raise ValueError(f"labels.csv line {lineno}: need 'path,label'")
                rows.append((row[0], row[1].strip()))
        for rel, _ in rows:
            if not (root / rel).is_file():
                raise FileNotFoundError(f"manifest entry {rel} does not exist under {root}")
        return cls(root, rows)


def split_indices(n: int, seed: int) -> dict[str, np.ndarray]:
    """Seeded 8:1:1 train/val/test partition of ``range(n)``."""
    perm = np.random.default_rng(seed).permutation(n)
    n_train, n_val = int(round(n * 0.8)), int(round(n * 0.1))
    return {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train:n_train + n_val]),
        "test": np.sort(perm[n_train + n_val:]),
    }


# ------------------------------------------------------------------ preprocess

def _resize_matrix(src: int, dst: int) -> np.ndarray:
    """Bilinear resampling weights (dst, src), half-pixel centres, edge clamped."""
    m = np.zeros((dst, src))
    pos = (np.arange(dst) + 0.5) * src / dst - 0.5
    pos = np.clip(pos, 0, src - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    m[np.arange(dst), lo] += 1 - frac
    m[np.arange(dst), hi] += frac
    return m


def scale_short_edge(imgs: np.ndarray, edge: int = SCALE_EDGE) -> np.ndarray:
    """Resize (N, H, W, 3) uint8 images so the short edge is ``edge``; returns float32 (N, 3, H', W') in [0, 1]."""
    n, h, w, _ = imgs.shape
    if min(h, w) < edge:
        warnings.warn(f"image {h}x{w} smaller than {edge}; upscaling", stacklevel=2)
    f = edge / min(h, w)
    nh, nw = max(edge, int(round(h * f))), max(edge, int(round(w * f)))
    x = imgs.astype(np.float32).transpose(0, 3, 1, 2) / 255.0
    if (nh, nw) == (h, w):
        return np.ascontiguousarray(x)
    rh, rw = _resize_matrix(h, nh).astype(np.float32), _resize_matrix(w, nw).astype(np.float32)
    return np.ascontiguousarray(np.einsum("ij,ncjk,lk->ncil", rh, x, rw, optimize=True))


@dataclass
class Normalizer:
    mean: np.ndarray  # (3,)
    std: np.ndarray

    @classmethod
    def fit(cls, scaled: np.ndarray) -> "Normalizer":
        mean = scaled.mean(axis=(0, 2, 3), dtype=np.float64)
        std = scaled.std(axis=(0, 2, 3), dtype=np.float64)
        return cls(mean.astype(np.float32), np.maximum(std, 1e-6).astype(np.float32))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean[None, :, None, None]) / self.std[None, :, None, None]


def crop_batch(scaled: np.ndarray, mode: str, rng: np.random.Generator | None = None,
               size: int = CROP) -> np.ndarray:
    """Train: random crop plus random horizontal/vertical flips.  Eval: centre crop.

    Rotation augmentation is deliberately absent.
    """
    n, c, h, w = scaled.shape
    if mode == "eval":
        top, left = (h - size) // 2, (w - size) // 2
        return np.ascontiguousarray(scaled[:, :, top:top + size, left:left + size])
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    out = np.empty((n, c, size, size), dtype=scaled.dtype)
    tops = rng.integers(0, h - size + 1, n)
    lefts = rng.integers(0, w - size + 1, n)
    hflip = rng.random(n) < 0.5
    vflip = rng.random(n) < 0.5
    for i in range(n):
        patch = scaled[i, :, tops[i]:tops[i] + size, lefts[i]:lefts[i] + size]
        if hflip[i]:
            patch = patch[:, :, ::-1]
        if vflip[i]:
            patch = patch[:, ::-1, :]
        out[i] = patch
    return out


def preprocess(img: np.ndarray, mode: str, norm: Normalizer, rng: np.random.Generator | None = None,
               edge: int = SCALE_EDGE, size: int = CROP) -> np.ndarray:
    """One (H, W, 3) uint8 image to a normalized (1, 3, size, size) float32 sample."""
    scaled = scale_short_edge(img[None], edge)
    return norm(crop_batch(scaled, mode, rng, size))


class ImageSet:
    """Decoded, rescaled images of one split held in memory."""

    def __init__(self, scaled: np.ndarray, labels: np.ndarray, ids: list[str] | None = None):
        self.scaled = scaled
        self.labels = np.asarray(labels, dtype=np.int64)
        self.ids = ids if ids is not None else [str(i) for i in range(len(labels))]

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx: np.ndarray) -> "ImageSet":
        return ImageSet(self.scaled[idx], self.labels[idx], [self.ids[i] for i in idx])

    def batches(self, batch: int, mode: str, norm: Normalizer, rng: np.random.Generator | None = None,
                shuffle: bool = False):
        order = rng.permutation(len(self)) if shuffle else np.arange(len(self))
        for start in range(0, len(order), batch):
            idx = order[start:start + batch]
            yield norm(crop_batch(self.scaled[idx], mode, rng)), self.labels[idx]


@dataclass
class Dataset:
    classes: list[str]
    train: ImageSet
    val: ImageSet
    test: ImageSet
    norm: Normalizer


def dataset_from_arrays(imgs: np.ndarray, labels: np.ndarray, classes: list[str], seed: int = 0,
                        ids: list[str] | None = None, edge: int = SCALE_EDGE) -> Dataset:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        scaled = scale_short_edge(imgs, edge)
    full = ImageSet(scaled, labels, ids)
    parts = {k: full.subset(v) for k, v in split_indices(len(full), seed).items()}
    norm = Normalizer.fit(parts["train"].scaled)
    return Dataset(classes, parts["train"], parts["val"], parts["test"], norm)


def load_dataset(root, seed: int = 0, edge: int = SCALE_EDGE) -> Dataset:
    man = Manifest.load(root)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        imgs = np.stack([read_image(p) for p in man.paths()])
        scaled = scale_short_edge(imgs, edge)
    if caught:
        log.warning("%s", caught[0].message)
    full = ImageSet(scaled, man.labels(), [p for p, _ in man.rows])
    parts = {k: full.subset(v) for k, v in split_indices(len(full), seed).items()}
    norm = Normalizer.fit(parts["train"].scaled)
    return Dataset(man.classes, parts["train"], parts["val"], parts["test"], norm)


# ------------------------------------------------------------------- synthetic

# Each class is a set of anisotropic Gaussian lobes, one tuple per lobe:
# (angle deg, distance from centre, radial sigma, tangential sigma, intensity).  Every template
# carries a small off-axis marker lobe (the last entry) so that no shape equals its
# mirror image: flips cannot stand in for rotations.
TEMPLATES: list[list[tuple[float, float, float, float, float]]] = [
    [(0, 11, 5.0, 3.0, 1.0), (180, 11, 5.0, 3.0, 1.0), (50, 15, 2.0, 2.0, 0.7)],
    [(0, 11, 4.0, 3.0, 1.0), (120, 11, 4.0, 3.0, 1.0), (240, 11, 4.0, 3.0, 1.0), (40, 16, 2.0, 2.0, 0.7)],
    [(0, 11, 4.0, 2.5, 1.0), (90, 11, 4.0, 2.5, 1.0), (180, 11, 4.0, 2.5, 1.0), (270, 11, 4.0, 2.5, 1.0),
     (25, 17, 2.0, 2.0, 0.7)],
    [(0, 11, 4.0, 3.0, 1.0), (90, 11, 4.0, 3.0, 1.0), (180, 11, 4.0, 3.0, 1.0), (60, 16, 2.0, 2.0, 0.7)],
    [(0, 11, 5.0, 3.0, 1.0), (90, 11, 5.0, 3.0, 1.0), (20, 16, 2.0, 2.0, 0.7)],
    [(0, 6, 7.0, 3.0, 1.0), (0, 17, 3.0, 3.0, 0.6), (180, 6, 4.0, 3.0, 0.8), (70, 14, 2.0, 2.0, 0.7)],
    [(a, 12, 3.5, 2.2, 1.0) for a in (0, 72, 144, 216, 288)] + [(20, 17, 2.0, 2.0, 0.7)],
    [(0, 10, 6.0, 4.0, 1.0), (180, 12, 3.0, 2.0, 0.7), (100, 13, 2.0, 2.0, 0.7)],
]


@dataclass(frozen=True)
class SynthSpec:
    n: int = 800
    classes: int = 8
    size: int = 64
    noise: float = 0.08
    seed: int = 0
    jitter: float = 0.1
    shift: float = 2.0
    min_angle: float = 0.0  # rotation distribution: uniform on [min_angle, max_angle)
    max_angle: float = 360.0

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())


def render_shape(template, angle: float, size: int = 64, scale: float = 1.0,
                 center=(0.0, 0.0), tint=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Render a lobe template rotated clockwise by ``angle`` degrees as float (H, W, 3) in [0, 1]."""
    ctr = (size - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(size) - ctr - center[0], np.arange(size) - ctr - center[1], indexing="ij")
    img = np.zeros((size, size))
    for a, dist, s_rad, s_tan, amp in template:
        phi = math.radians(a + angle)
        # clockwise in image coordinates: angle 0 points right, 90 points down
        uy, ux = math.sin(phi), math.cos(phi)
        dy, dx = yy - dist * scale * uy, xx - dist * scale * ux
        rad = dy * uy + dx * ux
        tan = -dy * ux + dx * uy
        lobe = amp * np.exp(-0.5 * ((rad / (s_rad * scale)) ** 2 + (tan / (s_tan * scale)) ** 2))
        img = np.maximum(img, lobe)
    return np.clip(img[..., None] * np.asarray(tint)[None, None, :], 0.0, 1.0)


def synth_samples(spec: SynthSpec):
    """Yield (class index, uint8 image) for a balanced, seeded synthetic set."""
    if spec.classes > len(TEMPLATES):
        raise ValueError(f"at most {len(TEMPLATES)} classes available")
    extent = max(d + 2 * max(sr, st) for tpl in TEMPLATES for _, d, sr, st, _ in tpl)
    if extent * (1 + spec.jitter) + spec.shift > spec.size / 2:
        raise ValueError(f"canvas {spec.size} too small for the shape templates")
    if not spec.min_angle <= spec.max_angle:
        raise ValueError("min_angle must not exceed max_angle")
    rng = np.random.default_rng(spec.seed)
    labels = np.arange(spec.n) % spec.classes
    for label in labels:
        angle = rng.uniform(spec.min_angle, spec.max_angle)
        scale = 1.0 + rng.uniform(-spec.jitter, spec.jitter)
        center = rng.uniform(-spec.shift, spec.shift, 2)
        tint = rng.uniform(0.7, 1.0, 3)
        img = render_shape(TEMPLATES[label], angle, spec.size, scale, center, tint)
        img = img + rng.normal(0.0, spec.noise, img.shape) + 0.1
        yield int(label), np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def class_name(i: int) -> str:
    return f"shape{i}"


def gen_synthetic(spec: SynthSpec, out, force: bool = False) -> Manifest:
    out = Path(out)
    if (out / "labels.csv").exists() and not force:
        raise FileExistsError(f"{out} already holds a dataset")
    rows = []
    counters = [0] * spec.classes
    for label, img in synth_samples(spec):
        cls = class_name(label)
        (out / cls).mkdir(parents=True, exist_ok=True)
        rel = f"{cls}/{counters[label]:05d}.ppm"
        counters[label] += 1
        write_ppm(out / rel, img)
        rows.append((rel, cls))
    man = Manifest(out, rows)
    man.save()
    (out / "spec.txt").write_text(spec.to_text())
    return man


def synthetic_arrays(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray]:
    """In-memory variant of :func:`gen_synthetic`: (N, H, W, 3) uint8 images and labels."""
    labels, imgs = zip(*synth_samples(spec))
    return np.stack(imgs), np.array(labels, dtype=np.int64)


def rotation_shift_dataset(spec: SynthSpec, split_seed: int = 0) -> Dataset:
    """Train and val follow ``spec``'s rotation range; the test split is re-rendered at uniform angles.

    Both renderings draw the same random stream, so a test image differs from its
    restricted twin only in orientation.
    """
    imgs, labels = synthetic_arrays(spec)
    uniform, _ = synthetic_arrays(replace(spec, min_angle=0.0, max_angle=360.0))
    classes = [class_name(i) for i in range(spec.classes)]
    ds = dataset_from_arrays(imgs, labels, classes, split_seed)
    test_idx = split_indices(len(labels), split_seed)["test"]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        scaled = scale_short_edge(uniform[test_idx])
    ds.test = ImageSet(scaled, labels[test_idx], ds.test.ids)
    return ds


# ----------------------------------------------------------- oracle classifier

def rotation_pooled_descriptor(img: np.ndarray, rings: int = 12, angles: int = 64, orders: int = 9) -> np.ndarray:
    """Angular Fourier magnitudes of polar rings around the intensity centroid.

    Magnitudes discard the phase, so the descriptor ignores rotations and mirror flips.
    """
    g = img.astype(np.float64).mean(axis=2)
    g = np.clip(g - np.median(g), 0, None)
    total = g.sum() or 1.0
    yy, xx = np.indices(g.shape)
    cy, cx = (g * yy).sum() / total, (g * xx).sum() / total
    radii = np.linspace(2, g.shape[0] / 2 - 4, rings)
    phis = np.linspace(0, 2 * np.pi, angles, endpoint=False)
    ry = cy + radii[:, None] * np.sin(phis)[None, :]
    rx = cx + radii[:, None] * np.cos(phis)[None, :]
    y0 = np.clip(np.floor(ry).astype(int), 0, g.shape[0] - 2)
    x0 = np.clip(np.floor(rx).astype(int), 0, g.shape[1] - 2)
    fy, fx = np.clip(ry - y0, 0, 1), np.clip(rx - x0, 0, 1)
    samples = (g[y0, x0] * (1 - fy) * (1 - fx) + g[y0 + 1, x0] * fy * (1 - fx)
               + g[y0, x0 + 1] * (1 - fy) * fx + g[y0 + 1, x0 + 1] * fy * fx)
    spec = np.abs(np.fft.rfft(samples, axis=1))[:, :orders] / angles
    return spec.ravel()


def nearest_neighbor_accuracy(train_imgs, train_labels, test_imgs, test_labels) -> float:
    a = np.stack([rotation_pooled_descriptor(im) for im in train_imgs])
    b = np.stack([rotation_pooled_descriptor(im) for im in test_imgs])
    mu, sd = a.mean(0), a.std(0) + 1e-9
    a, b = (a - mu) / sd, (b - mu) / sd
    d = (b * b).sum(1)[:, None] - 2 * b @ a.T + (a * a).sum(1)[None, :]
    pred = np.asarray(train_labels)[d.argmin(axis=1)]
    return float((pred == np.asarray(test_labels)).mean())
