"""Dataset persistence and the synthetic shape generator.

The on-disk format (one file per split) is:

    magic "PMTC" | u32 version=1 | u32 class count |
    per class: u32 byte length, UTF-8 name |
    u32 sample count |
    per sample: u32 label | u32 N | N*3 little-endian float32 coordinates

Parsing is strict: bad magic or version, out-of-range labels, non-finite
coordinates, truncation, or trailing bytes all raise ParseError naming the
byte offset. Clouds are stored normalized; the loader re-normalizes only when
a file clearly is not, so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud, farthest_point_sample, normalize_cloud, random_rotation

MAGIC = b"PMTC"
FORMAT_VERSION = 1

SHAPE_CLASSES = ("sphere", "cube", "cylinder", "cone", "torus", "plane", "helix", "cross")


class ParseError(ValueError):
    """Malformed dataset file; the message names the failing byte offset."""


@dataclass
class Dataset:
    samples: list
    class_names: list
    split: str = "train"

    def __post_init__(self):
        # labels may be absent (inference-only data); present ones must be valid
        for s in self.samples:
            if s.label is not None and not 0 <= s.label < len(self.class_names):
                raise ValueError(f"label {s.label} out of range for {len(self.class_names)} classes")

    def __len__(self):
        return len(self.samples)

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)


@dataclass(frozen=True)
class SynthConfig:
    classes: tuple = SHAPE_CLASSES
    samples_per_class: int = 64
    points_per_cloud: int = 128
    noise_sigma: float = 0.02
    seed: int = 42

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ValueError("need at least two classes")
        unknown = set(self.classes) - set(SHAPE_CLASSES)
        if unknown:
            raise ValueError(f"unknown classes {sorted(unknown)}; choose from {SHAPE_CLASSES}")
        if self.points_per_cloud < 16:
            raise ValueError("points_per_cloud must be >= 16")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


# analytic surface samplers ----------------------------------------------------


def _sphere(n, rng):
    # antithetic pairs keep the sample centroid at exactly zero for even n
    half = (n + 1) // 2
    u = rng.normal(size=(half, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    pts = np.concatenate([u, -u], axis=0)
    return pts[:n]


def _cuboid_surface(n, rng, hx, hy, hz):
    areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy], dtype=float)
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    for f in range(6):
        m = faces == f
        axis, sign = divmod(f, 2)
        half = (hx, hy, hz)[axis]
        others = [a for a in range(3) if a != axis]
        pts[m, axis] = half if sign == 0 else -half
        pts[m, others[0]] = uv[m, 0] * (hx, hy, hz)[others[0]]
        pts[m, others[1]] = uv[m, 1] * (hx, hy, hz)[others[1]]
    return pts


def _cube(n, rng):
    return _cuboid_surface(n, rng, 1.0, 1.0, 1.0)


def _cylinder(n, rng, radius=0.6, half_height=1.0):
    lateral = 2 * np.pi * radius * (2 * half_height)
    cap = np.pi * radius ** 2
    part = rng.choice(3, size=n, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, n)
    pts = np.empty((n, 3))
    side = part == 0
    pts[side, 0] = radius * np.cos(theta[side])
    pts[side, 1] = radius * np.sin(theta[side])
    pts[side, 2] = rng.uniform(-half_height, half_height, side.sum())
    for p, z in ((1, half_height), (2, -half_height)):
        m = part == p
        r = radius * np.sqrt(rng.random(m.sum()))
        pts[m, 0] = r * np.cos(theta[m])
        pts[m, 1] = r * np.sin(theta[m])
        pts[m, 2] = z
    return pts


def _cone(n, rng, radius=0.8, height=1.8):
    apex_z = height / 2
    slant = np.pi * radius * np.sqrt(radius ** 2 + height ** 2)
    base = np.pi * radius ** 2
    part = rng.choice(2, size=n, p=np.array([slant, base]) / (slant + base))
    theta = rng.uniform(0, 2 * np.pi, n)
    pts = np.empty((n, 3))
    m = part == 0
    t = np.sqrt(rng.random(m.sum()))  # area-uniform distance fraction from apex
    pts[m, 0] = t * radius * np.cos(theta[m])
    pts[m, 1] = t * radius * np.sin(theta[m])
    pts[m, 2] = apex_z - t * height
    m = part == 1
    r = radius * np.sqrt(rng.random(m.sum()))
    pts[m, 0] = r * np.cos(theta[m])
    pts[m, 1] = r * np.sin(theta[m])
    pts[m, 2] = apex_z - height
    return pts


def _torus(n, rng, major=0.75, minor=0.3):
    u = rng.uniform(0, 2 * np.pi, n)
    v = np.empty(n)
    # rejection keeps the sampling area-uniform over the minor angle
    remaining = np.arange(n)
    while remaining.size:
        cand = rng.uniform(0, 2 * np.pi, remaining.size)
        accept = rng.random(remaining.size) < (major + minor * np.cos(cand)) / (major + minor)
        v[remaining[accept]] = cand[accept]
        remaining = remaining[~accept]
    ring = major + minor * np.cos(v)
    return np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1)


def _plane(n, rng):
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    return np.concatenate([uv, np.zeros((n, 1))], axis=1)


def _helix(n, rng, radius=0.8, pitch=0.25, turns=2.0):
    t = rng.uniform(-turns * np.pi, turns * np.pi, n)
    return np.stack([radius * np.cos(t), radius * np.sin(t), pitch * t], axis=1)


def _cross(n, rng):
    half = n // 2
    bar_x = _cuboid_surface(half, rng, 1.0, 0.2, 0.2)
    bar_y = _cuboid_surface(n - half, rng, 0.2, 1.0, 0.2)
    return np.concatenate([bar_x, bar_y], axis=0)


SHAPE_GENERATORS = {
    "sphere": _sphere,
    "cube": _cube,
    "cylinder": _cylinder,
    "cone": _cone,
    "torus": _torus,
    "plane": _plane,
    "helix": _helix,
    "cross": _cross,
}


def generate_synthetic(cfg: SynthConfig, split="train") -> Dataset:
    """Analytic surface sampling with jitter and a random rotation per cloud.

    A pure function of the config: every cloud draws from its own child seed,
    so the dataset is reproducible sample by sample.
    """
    children = np.random.SeedSequence(cfg.seed).spawn(len(cfg.classes) * cfg.samples_per_class)
    samples = []
    for ci, cls in enumerate(cfg.classes):
        gen = SHAPE_GENERATORS[cls]
        for s in range(cfg.samples_per_class):
            rng = np.random.default_rng(children[ci * cfg.samples_per_class + s])
            pts = gen(cfg.points_per_cloud, rng)
            pts = pts @ random_rotation(rng).T
            if cfg.noise_sigma > 0:
                pts = pts + rng.normal(0, cfg.noise_sigma, pts.shape)
            cloud = normalize_cloud(PointCloud(pts.astype(np.float32), label=ci))
            samples.append(PointCloud(cloud.coords.astype(np.float32), label=ci))
    return Dataset(samples, list(cfg.classes), split=split)


# binary persistence ------------------------------------------------------------


def save_dataset(dataset: Dataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(dataset.class_names)))
        for name in dataset.class_names:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        fh.write(struct.pack("<I", len(dataset.samples)))
        for sample in dataset.samples:
            fh.write(struct.pack("<I", sample.label))
            fh.write(struct.pack("<I", sample.coords.shape[0]))
            fh.write(np.ascontiguousarray(sample.coords, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.buf):
            raise ParseError(f"truncated while reading {what} at byte {self.off}")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def _is_normalized(coords: np.ndarray) -> bool:
    centroid = np.abs(coords.mean(axis=0)).max()
    radius = np.sqrt((coords.astype(np.float64) ** 2).sum(axis=1)).max()
    return centroid <= 1e-3 and (radius == 0.0 or abs(radius - 1.0) <= 1e-3)


def load_dataset(path, split="train") -> Dataset:
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise ParseError("bad magic at byte 0")
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported version {version} at byte 4")
    n_classes = r.u32("class count")
    if n_classes < 1:
        raise ParseError("class count must be >= 1 at byte 8")
    names = []
    for i in range(n_classes):
        at = r.off
        length = r.u32(f"class name {i} length")
        raw = r.take(length, f"class name {i}")
        try:
            names.append(raw.decode("utf-8"))
        except UnicodeDecodeError as err:
            raise ParseError(f"invalid UTF-8 in class name {i} at byte {at}") from err
    n_samples = r.u32("sample count")
    samples = []
    for i in range(n_samples):
        at = r.off
        label = r.u32(f"sample {i} label")
        if label >= n_classes:
            raise ParseError(f"label {label} out of range at byte {at}")
        n = r.u32(f"sample {i} point count")
        if n < 1:
            raise ParseError(f"empty sample {i} at byte {at}")
        raw = r.take(12 * n, f"sample {i} coordinates")
        coords = np.frombuffer(raw, dtype="<f4").reshape(n, 3).copy()
        if not np.isfinite(coords).all():
            raise ParseError(f"non-finite coordinates in sample {i} at byte {at}")
        if not _is_normalized(coords):
            coords = normalize_cloud(PointCloud(coords, label=int(label))).coords.astype(np.float32)
        samples.append(PointCloud(coords, label=int(label)))
    if r.off != len(buf):
        raise ParseError(f"trailing data at byte {r.off}")
    return Dataset(samples, names, split=split)


def resample(cloud: PointCloud, n: int, seed: int = 0) -> PointCloud:
    """Reduce with farthest-point sampling, or grow by seeded resampling with
    replacement when the cloud is smaller than ``n``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if cloud.coords.shape[0] >= n:
        idx = farthest_point_sample(cloud.coords, n)
    else:
        idx = np.random.default_rng(seed).integers(0, cloud.coords.shape[0], size=n)
    features = cloud.features[idx] if cloud.features is not None else None
    return PointCloud(cloud.coords[idx], features=features, label=cloud.label)


# OFF mesh ingestion ------------------------------------------------------------


def read_off(path):
    """Vertices and triangulated faces from an ASCII OFF mesh."""
    with open(path, encoding="utf-8", errors="replace") as fh:
        tokens = []
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                tokens.extend(line.replace("OFF", "OFF ").split())
    if not tokens or tokens[0] != "OFF":
        raise ParseError(f"{path}: missing OFF header")
    try:
        nv, nf = int(tokens[1]), int(tokens[2])
        pos = 4  # header counts include an edge count we ignore
        verts = np.array(tokens[pos:pos + 3 * nv], dtype=np.float64).reshape(nv, 3)
        pos += 3 * nv
        faces = []
        for _ in range(nf):
            arity = int(tokens[pos])
            ids = [int(t) for t in tokens[pos + 1:pos + 1 + arity]]
            pos += 1 + arity
            for j in range(1, arity - 1):  # fan-triangulate polygons
                faces.append((ids[0], ids[j], ids[j + 1]))
    except (ValueError, IndexError) as err:
        raise ParseError(f"{path}: malformed OFF body ({err})") from err
    return verts, np.array(faces, dtype=np.int64)


def sample_mesh_surface(verts: np.ndarray, faces: np.ndarray, n: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform sampling of a triangle mesh surface."""
    rng = np.random.default_rng(seed)
    a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    if areas.sum() <= 0:
        raise ValueError("mesh has no surface area")
    pick = rng.choice(len(faces), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))[:, None]
    r2 = rng.random(n)[:, None]
    return (1 - r1) * a[pick] + r1 * (1 - r2) * b[pick] + r1 * r2 * c[pick]


def import_off_directory(root, class_names=None, n_points=1024, seed=0, split="train") -> Dataset:
    """Ingest a ModelNet-style layout: <root>/<class>/<split>/*.off."""
    root = os.fspath(root)
    if class_names is None:
        class_names = sorted(d for d in os.listdir(root)
                             if os.path.isdir(os.path.join(root, d)))
    samples = []
    for label, cls in enumerate(class_names):
        folder = os.path.join(root, cls, split)
        if not os.path.isdir(folder):
            continue
        for i, fname in enumerate(sorted(os.listdir(folder))):
            if not fname.endswith(".off"):
                continue
            verts, faces = read_off(os.path.join(folder, fname))
            pts = sample_mesh_surface(verts, faces, n_points, seed=seed + label * 100003 + i)
            cloud = normalize_cloud(PointCloud(pts.astype(np.float32), label=label))
            samples.append(PointCloud(cloud.coords.astype(np.float32), label=label))
    return Dataset(samples, list(class_names), split=split)
