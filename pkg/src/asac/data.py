"""Deterministic synthetic shape datasets.

Two families of 64x64 grayscale tasks: dot-cluster triangles (is the
triangle of cluster centroids equilateral?) and polygon outlines (are
all side lengths equal?), plus out-of-distribution variants, a
two-task relabeling of the triangle images, and pixel corruptions.

Every sample is a pure function of (seed, index, parameters); the
per-sample generator is seeded from the pair so generation is
order-independent and parallel-safe.  Coordinates are (x, y) with x
the pixel column and y the pixel row, so "upper half" means y below
size / 2.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, GenerationError

CLUSTER_SHAPES = ("circle", "triangle", "square")
DATASET_KINDS = ("triangles", "multitask", "polygons",
                 "triangles_ood", "polygons_ood")
CORRUPT_KINDS = ("gaussian", "salt_pepper", "blur")

MAX_ATTEMPTS = 1000
EQUILATERAL_TOL = 1.02   # max/min pairwise distance for a positive
NEGATIVE_MIN_RATIO = 1.25  # clearly above the 1.15 ambiguity margin
NEGATIVE_MAX_RATIO = 2.0
CENTER_JITTER = 3.0      # shape centering slack, px per axis
TRIANGLE_CIRC = 20.0     # triangle circumradius, px
TRIANGLE_ROT_STEPS = 8   # rotations drawn from a coarse uniform grid
POLYGON_CIRC_LO = 18.0   # polygon circumradius range, px
POLYGON_CIRC_HI = 22.0
OUTLINE_THICKNESS = 1.3  # half-width of polygon strokes, px
NOISE_GRAY_LO = 0.05
NOISE_GRAY_HI = 0.95


def irregular_min_ratio(vertices: int) -> float:
    """Worst side-length ratio an irregular polygon must reach.

    Rounder shapes need proportionally more distortion to look
    irregular, so the floor grows with the vertex count.  Always well
    above the 1.15 ambiguity margin.
    """
    return 1.4 + 0.1 * vertices


@dataclass
class ShapeMeta:
    """Geometry record sufficient to recompute any label."""
    vertex_centroids: list
    cluster_shape: str = "circle"
    cluster_size: float = 2.0
    filled: bool = True
    negative: bool = False
    noise_frac: float = 0.0


@dataclass
class SampleBatch:
    images: np.ndarray                 # [n, c, h, w] float64 in [0, 1]
    labels: np.ndarray                 # [n] or [n, k] int64
    task_ids: np.ndarray | None = None
    meta: list = field(default_factory=list)

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, idx) -> "SampleBatch":
        idx = np.asarray(idx)
        return SampleBatch(
            images=self.images[idx], labels=self.labels[idx],
            task_ids=None if self.task_ids is None else self.task_ids[idx],
            meta=[self.meta[i] for i in idx] if self.meta else [])


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, index)))


def _derived_seed(seed: int, tag: int, extra: int = 0) -> int:
    ss = np.random.SeedSequence((seed, tag, extra))
    return int(ss.generate_state(1, np.uint64)[0])


def _pairwise_ratio(points) -> float:
    pts = np.asarray(points, dtype=float)
    dists = []
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            dists.append(float(np.hypot(*(pts[i] - pts[j]))))
    return max(dists) / min(dists)


def _side_lengths(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    nxt = np.roll(pts, -1, axis=0)
    return np.hypot(nxt[:, 0] - pts[:, 0], nxt[:, 1] - pts[:, 1])


def is_equilateral(points) -> bool:
    return _pairwise_ratio(points) <= EQUILATERAL_TOL


# -- triangles --------------------------------------------------------------------


def _cluster_points(rng, shape: str, radius: float, filled: bool,
                    count: int) -> np.ndarray:
    """Jitter offsets within a small shape of the given circumradius."""
    if shape == "circle":
        ang = rng.uniform(0.0, 2 * np.pi, count)
        rad = radius * (np.sqrt(rng.uniform(0.0, 1.0, count)) if filled
                        else np.ones(count))
        return np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
    if shape == "square":
        half = radius / np.sqrt(2.0)
        if filled:
            return rng.uniform(-half, half, size=(count, 2))
        side = rng.integers(0, 4, count)
        t = rng.uniform(-half, half, count)
        edge = half * np.ones(count)
        xs = np.where(side < 2, t, np.where(side == 2, edge, -edge))
        ys = np.where(side >= 2, t, np.where(side == 0, edge, -edge))
        return np.stack([xs, ys], axis=1)
    if shape == "triangle":
        corners = radius * np.stack([np.cos([np.pi / 2, np.pi * 7 / 6, np.pi * 11 / 6]),
                                     np.sin([np.pi / 2, np.pi * 7 / 6, np.pi * 11 / 6])],
                                    axis=1)
        if filled:
            u = np.sqrt(rng.uniform(0.0, 1.0, count))
            v = rng.uniform(0.0, 1.0, count)
            a, b, c = corners
            return ((1 - u)[:, None] * a + (u * (1 - v))[:, None] * b
                    + (u * v)[:, None] * c)
        edge = rng.integers(0, 3, count)
        t = rng.uniform(0.0, 1.0, count)
        a = corners[edge]
        b = corners[(edge + 1) % 3]
        return a + t[:, None] * (b - a)
    raise ContractError(f"unknown cluster shape {shape!r}")


def _draw_clusters(img, rng, centroids, shape, radius, filled):
    size = img.shape[0]
    if filled:
        count = max(10, int(3 * radius * radius))
    else:
        count = max(10, int(6 * radius))
    for cx, cy in centroids:
        offs = _cluster_points(rng, shape, radius, filled, count)
        px = np.clip(np.rint(cx + offs[:, 0]).astype(int), 0, size - 1)
        py = np.clip(np.rint(cy + offs[:, 1]).astype(int), 0, size - 1)
        img[py, px] = 1.0


def _triangle_centroids(rng, size: int, positive: bool, margin: float):
    # Scale is fixed and rotation quantized: desk-scale sample counts
    # cannot buy scale or fine rotation invariance, so class identity
    # carries the variety (exact equilateral vs >= 25% side disparity).
    for _ in range(MAX_ATTEMPTS):
        circ = TRIANGLE_CIRC
        rot = (2 * np.pi / TRIANGLE_ROT_STEPS) \
            * rng.integers(0, TRIANGLE_ROT_STEPS)
        if positive:
            angles = rot + np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3])
            radii = np.full(3, circ)
        else:
            angles = rot + np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3]) \
                + np.concatenate([[0.0], rng.uniform(-0.5, 0.5, 2)])
            radii = circ * rng.uniform(0.75, 1.25, 3)
        offs = np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
        sides = _side_lengths(offs)
        if not positive:
            ratio = sides.max() / sides.min()
            if not (NEGATIVE_MIN_RATIO <= ratio <= NEGATIVE_MAX_RATIO):
                continue
            if sides.min() < 10.0:
                continue
        lo = margin - offs.min(axis=0)
        hi = (size - 1 - margin) - offs.max(axis=0)
        if (lo > hi).any():
            continue
        mid = np.full(2, (size - 1) / 2.0)
        center = np.clip(mid + rng.uniform(-CENTER_JITTER, CENTER_JITTER, 2),
                         lo, hi)
        return offs + center
    raise GenerationError(f"no valid triangle after {MAX_ATTEMPTS} attempts")


def gen_triangle(seed: int, index: int, size: int = 64, positive: bool = True,
                 cluster_shape: str = "circle", cluster_radius: float = 2.0,
                 filled: bool = True):
    """One triangle sample: three white dot clusters on black.

    Positive samples place the cluster centroids on an exact
    equilateral triangle; negatives keep the worst side-length ratio
    in [1.25, 2] so the classes never straddle the 2% tolerance.
    """
    if size < 16:
        raise ContractError(f"image size {size} below minimum 16")
    if cluster_shape not in CLUSTER_SHAPES:
        raise ContractError(f"unknown cluster shape {cluster_shape!r}")
    rng = _sample_rng(seed, index)
    margin = cluster_radius + 1.0
    centroids = _triangle_centroids(rng, size, positive, margin)
    img = np.zeros((size, size))
    _draw_clusters(img, rng, centroids, cluster_shape, cluster_radius, filled)
    meta = ShapeMeta(vertex_centroids=[tuple(map(float, c)) for c in centroids],
                     cluster_shape=cluster_shape, cluster_size=cluster_radius,
                     filled=filled)
    return img[None], int(positive), meta


def triangle_task_label(meta: ShapeMeta, task_id: int, size: int = 64) -> int:
    """Task 0: centroids form an equilateral triangle.
    Task 1: at least two centroids sit in the upper image half."""
    if task_id == 0:
        return int(is_equilateral(meta.vertex_centroids))
    if task_id == 1:
        top = sum(1 for _, y in meta.vertex_centroids if y < size / 2.0)
        return int(top >= 2)
    raise ContractError(f"invalid task id {task_id}")


# -- polygons ---------------------------------------------------------------------


def _polygon_vertices(rng, size: int, vertices: int, regular: bool):
    # Random rotation/center/radius, with ranges kept tight for the
    # same desk-scale reason as the triangle generator.
    margin = 2.0
    for _ in range(MAX_ATTEMPTS):
        circ = rng.uniform(POLYGON_CIRC_LO, POLYGON_CIRC_HI)
        rot = rng.uniform(0.0, 2 * np.pi)
        if regular:
            angles = rot + 2 * np.pi * np.arange(vertices) / vertices
        else:
            gaps = rng.uniform(0.3, 1.7, vertices)
            angles = rot + 2 * np.pi * np.cumsum(gaps) / gaps.sum()
        pts = circ * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        if not regular:
            sides = _side_lengths(pts)
            if sides.max() / sides.min() < irregular_min_ratio(vertices):
                continue
        lo = margin - pts.min(axis=0)
        hi = (size - 1 - margin) - pts.max(axis=0)
        if (lo > hi).any():
            continue
        mid = np.full(2, (size - 1) / 2.0)
        center = np.clip(mid + rng.uniform(-CENTER_JITTER, CENTER_JITTER, 2),
                         lo, hi)
        return pts + center
    raise GenerationError(f"no valid polygon after {MAX_ATTEMPTS} attempts")


def _render_outline(size: int, pts: np.ndarray, thickness: float = OUTLINE_THICKNESS):
    img = np.zeros((size, size))
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    k = len(pts)
    for j in range(k):
        x0, y0 = pts[j]
        x1, y1 = pts[(j + 1) % k]
        dx, dy = x1 - x0, y1 - y0
        t = np.clip(((xx - x0) * dx + (yy - y0) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
        d2 = (xx - (x0 + t * dx)) ** 2 + (yy - (y0 + t * dy)) ** 2
        img[d2 <= thickness * thickness] = 1.0
    return img


def gen_polygon(seed: int, index: int, size: int = 64, vertices: int = 5,
                noise_frac: float = 0.05, regular: bool = True,
                negative: bool = False):
    """One polygon-outline sample; label 1 iff the polygon is regular.

    ``negative`` inverts foreground and background photometrically.
    Noise positions and gray values are drawn before the inversion is
    applied, so the negative image equals 1 - positive at every
    noise-free pixel.
    """
    if size < 16:
        raise ContractError(f"image size {size} below minimum 16")
    if not 3 <= vertices <= 15:
        raise ContractError(f"vertex count {vertices} outside [3, 15]")
    if not 0.0 <= noise_frac <= 1.0:
        raise ContractError(f"noise_frac {noise_frac} outside [0, 1]")
    rng = _sample_rng(seed, index)
    pts = _polygon_vertices(rng, size, vertices, regular)
    clean = _render_outline(size, pts)
    background = np.flatnonzero(clean.reshape(-1) == 0.0)
    count = int(round(noise_frac * background.size))
    noise_at = rng.choice(background, size=count, replace=False)
    noise_val = rng.uniform(NOISE_GRAY_LO, NOISE_GRAY_HI, count)

    img = 1.0 - clean if negative else clean.copy()
    img.reshape(-1)[noise_at] = noise_val
    meta = ShapeMeta(vertex_centroids=[tuple(map(float, p)) for p in pts],
                     cluster_shape="circle", cluster_size=0.0, filled=False,
                     negative=negative, noise_frac=noise_frac)
    return img[None], int(regular), meta


# -- dataset builders -------------------------------------------------------------


def make_triangles(seed: int, n: int, size: int = 64) -> SampleBatch:
    """Alternating positive/negative, so class balance is exact."""
    images, labels, metas = [], [], []
    for i in range(n):
        img, label, meta = gen_triangle(seed, i, size, positive=(i % 2 == 0))
        images.append(img)
        labels.append(label)
        metas.append(meta)
    return SampleBatch(np.stack(images), np.array(labels, dtype=np.int64),
                       meta=metas)


def make_multitask(seed: int, n: int, size: int = 64) -> SampleBatch:
    """Interleaved two-task triangle set: even indices ask the
    equilateral question, odd indices the upper-half question.  The
    wanted label alternates per task, and upper-half samples are
    re-drawn until the geometry realizes the wanted label, keeping
    both tasks exactly balanced."""
    images, labels, tasks, metas = [], [], [], []
    for i in range(n):
        task = i % 2
        want = (i // 2) % 2
        if task == 0:
            img, _, meta = gen_triangle(seed, i, size, positive=(want == 1))
        else:
            img = meta = None
            for attempt in range(MAX_ATTEMPTS):
                sub = _derived_seed(seed, 0x7A5C, attempt)
                img, _, meta = gen_triangle(sub, i, size,
                                            positive=(attempt % 2 == 0))
                if triangle_task_label(meta, 1, size) == want:
                    break
            else:
                raise GenerationError("could not realize upper-half label "
                                      f"{want} after {MAX_ATTEMPTS} attempts")
        images.append(img)
        labels.append(triangle_task_label(meta, task, size))
        tasks.append(task)
        metas.append(meta)
    return SampleBatch(np.stack(images), np.array(labels, dtype=np.int64),
                       task_ids=np.array(tasks, dtype=np.int64), meta=metas)


POLYGON_TRAIN_VERTICES = (3, 4, 8)
POLYGON_TEST_VERTICES = (5, 6, 7)
POLYGON_TRAIN_NOISE = 0.05
POLYGON_TEST_NOISE = 0.25

OOD_TEST_RADII = (2.0, 3.0, 4.0)


def make_polygons(seed: int, n: int, size: int = 64,
                  vertex_choices=POLYGON_TRAIN_VERTICES,
                  noise_frac: float = POLYGON_TRAIN_NOISE) -> SampleBatch:
    images, labels, metas = [], [], []
    for i in range(n):
        img, label, meta = gen_polygon(
            seed, i, size, vertices=vertex_choices[i % len(vertex_choices)],
            noise_frac=noise_frac, regular=(i % 2 == 0))
        images.append(img)
        labels.append(label)
        metas.append(meta)
    return SampleBatch(np.stack(images), np.array(labels, dtype=np.int64),
                       meta=metas)


def _triangles_ood_test(seed: int, n: int, size: int) -> SampleBatch:
    images, labels, metas = [], [], []
    for i in range(n):
        img, label, meta = gen_triangle(
            seed, i, size, positive=(i % 2 == 0),
            cluster_shape=CLUSTER_SHAPES[i % 3],
            cluster_radius=OOD_TEST_RADII[(i // 3) % 3],
            filled=((i // 9) % 2 == 0))
        images.append(img)
        labels.append(label)
        metas.append(meta)
    return SampleBatch(np.stack(images), np.array(labels, dtype=np.int64),
                       meta=metas)


def _ood_half(kind: str, split: str, seed: int, n: int, size: int) -> SampleBatch:
    split_seed = _derived_seed(seed, 0 if split == "train" else 1)
    if kind == "triangles_ood":
        if split == "train":
            return make_triangles(split_seed, n, size)
        return _triangles_ood_test(split_seed, n, size)
    if split == "train":
        return make_polygons(split_seed, n, size,
                             POLYGON_TRAIN_VERTICES, POLYGON_TRAIN_NOISE)
    return make_polygons(split_seed, n, size,
                         POLYGON_TEST_VERTICES, POLYGON_TEST_NOISE)


def gen_ood_split(kind: str, seed: int, n: int, n_test: int | None = None,
                  size: int = 64):
    """Train/test pair where the test distribution shifts on purpose."""
    if kind not in ("triangles_ood", "polygons_ood"):
        raise ConfigError(f"unknown ood kind {kind!r}")
    if n_test is None:
        n_test = max(1, n // 4)
    return (_ood_half(kind, "train", seed, n, size),
            _ood_half(kind, "test", seed, n_test, size))


def build_dataset(kind: str, split: str, n: int, seed: int,
                  size: int = 64) -> SampleBatch:
    """Registry entry point used by the trainer and the CLI."""
    if split not in ("train", "test"):
        raise ConfigError(f"unknown split {split!r}")
    if kind in ("triangles_ood", "polygons_ood"):
        return _ood_half(kind, split, seed, n, size)
    split_seed = _derived_seed(seed, 0 if split == "train" else 1)
    if kind == "triangles":
        return make_triangles(split_seed, n, size)
    if kind == "multitask":
        return make_multitask(split_seed, n, size)
    if kind == "polygons":
        return make_polygons(split_seed, n, size)
    raise ConfigError(f"unknown dataset kind {kind!r}")


# -- corruption -------------------------------------------------------------------

GAUSSIAN_SIGMA = (0.04, 0.08, 0.12, 0.16, 0.20)
SALT_PEPPER_FRAC = (0.01, 0.02, 0.04, 0.08, 0.16)
BLUR_WIDTH = (1, 3, 3, 5, 5)
BLUR_REPEATS = (1, 1, 2, 2, 3)


def _box_blur(plane: np.ndarray, width: int) -> np.ndarray:
    if width == 1:
        return plane
    pad = width // 2
    padded = np.pad(plane, pad, mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (width, width))
    return windows.mean(axis=(2, 3))


def corrupt(image: np.ndarray, kind: str, severity: int, seed: int) -> np.ndarray:
    """Apply one corruption at the given severity; output in [0, 1]."""
    if kind not in CORRUPT_KINDS:
        raise ContractError(f"unknown corruption kind {kind!r}")
    if not 1 <= severity <= 5:
        raise ContractError(f"severity {severity} outside [1, 5]")
    rng = np.random.default_rng(
        np.random.SeedSequence((seed, CORRUPT_KINDS.index(kind), severity)))
    out = np.array(image, dtype=np.float64, copy=True)
    if kind == "gaussian":
        out += rng.normal(0.0, GAUSSIAN_SIGMA[severity - 1], out.shape)
    elif kind == "salt_pepper":
        flat = out.reshape(-1)
        count = int(round(SALT_PEPPER_FRAC[severity - 1] * flat.size))
        idx = rng.choice(flat.size, size=count, replace=False)
        flat[idx] = np.where(flat[idx] < 0.5, 1.0, 0.0)
    else:
        width = BLUR_WIDTH[severity - 1]
        planes = out.reshape(-1, out.shape[-2], out.shape[-1])
        for _ in range(BLUR_REPEATS[severity - 1]):
            for c in range(planes.shape[0]):
                planes[c] = _box_blur(planes[c], width)
        out = planes.reshape(out.shape)
    return np.clip(out, 0.0, 1.0)


# -- dataset file io --------------------------------------------------------------

DATA_MAGIC = b"ASDS"
DATA_VERSION = 1


def save_dataset(batch: SampleBatch, path) -> None:
    """Binary export: magic, u32 version, length-prefixed JSON header,
    u8 pixels (round(255 x)), then int64 labels and optional task ids.
    Geometry metadata is not persisted."""
    n, c, h, w = batch.images.shape
    header = {"count": n, "channels": c, "height": h, "width": w,
              "label_dims": list(batch.labels.shape),
              "has_task_ids": batch.task_ids is not None}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    pixels = np.rint(batch.images * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC)
        fh.write(struct.pack("<I", DATA_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(pixels.tobytes())
        fh.write(batch.labels.astype("<i8").tobytes())
        if batch.task_ids is not None:
            fh.write(batch.task_ids.astype("<i8").tobytes())


def load_dataset(path) -> SampleBatch:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != DATA_MAGIC:
        raise ContractError(f"{path}: not a dataset file (bad magic)")
    version = struct.unpack_from("<I", blob, 4)[0]
    if version != DATA_VERSION:
        raise ContractError(f"{path}: unsupported dataset version {version}")
    hdr_len = struct.unpack_from("<I", blob, 8)[0]
    off = 12
    header = json.loads(blob[off:off + hdr_len].decode("utf-8"))
    off += hdr_len
    n, c, h, w = (header[k] for k in ("count", "channels", "height", "width"))
    pix_count = n * c * h * w
    pixels = np.frombuffer(blob, dtype=np.uint8, count=pix_count, offset=off)
    off += pix_count
    images = pixels.reshape(n, c, h, w).astype(np.float64) / 255.0
    label_count = int(np.prod(header["label_dims"]))
    labels = np.frombuffer(blob, dtype="<i8", count=label_count, offset=off) \
        .reshape(header["label_dims"]).astype(np.int64)
    off += 8 * label_count
    task_ids = None
    if header["has_task_ids"]:
        task_ids = np.frombuffer(blob, dtype="<i8", count=n, offset=off) \
            .astype(np.int64)
    return SampleBatch(images=images, labels=labels, task_ids=task_ids)
