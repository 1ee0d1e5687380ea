"""Datasets: synthetic shape generation, file ingestion/emission, plotting.

Synthetic corpora stand in for the large mesh datasets at desk scale; the
xyz / ASCII-ply loaders accept real exports with the same semantics.  xyz is
the canonical interchange format for CLI outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gpm.validation import as_cloud

FAMILIES = ("sphere", "cube", "cylinder", "torus", "cone")


@dataclass
class SyntheticShapeSpec:
    family: str
    point_count: int = 1024
    scale_jitter: tuple[float, float] = (0.9, 1.1)
    rotation_jitter: float = np.pi  # max |z-rotation| in radians
    noise_sigma: float = 0.0
    minor_radius: float = 0.35     # torus only
    name: str | None = None        # class name; defaults to family

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown shape family '{self.family}'")
        if self.point_count < 1:
            raise ValueError("point_count must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.name is None:
            self.name = self.family


@dataclass
class DatasetItem:
    cloud_id: str
    cloud: np.ndarray
    label: int | None = None


@dataclass
class Dataset:
    items: list[DatasetItem] = field(default_factory=list)
    class_names: list[str] | None = None

    def __post_init__(self):
        ids = [it.cloud_id for it in self.items]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate cloud ids in dataset")
        if self.class_names is not None:
            for it in self.items:
                if it.label is not None and not 0 <= it.label < len(self.class_names):
                    raise ValueError(
                        f"label {it.label} of '{it.cloud_id}' out of range")

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]

    def clouds(self) -> list[np.ndarray]:
        return [it.cloud for it in self.items]

    def labels(self) -> np.ndarray:
        if any(it.label is None for it in self.items):
            raise ValueError("dataset has unlabeled items")
        return np.array([it.label for it in self.items], dtype=np.int64)


# ---------------------------------------------------------------------------
# analytic surface samplers; all return points on the canonical surface
# ---------------------------------------------------------------------------

def _sample_sphere(n: int, rng: np.random.Generator, _spec) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v


def _sample_cube(n: int, rng: np.random.Generator, _spec) -> np.ndarray:
    # six faces of [-1,1]^3, equal areas
    face = rng.integers(0, 6, n)
    uv = rng.uniform(-1, 1, (n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for a in range(3):
        rows = axis == a
        others = [i for i in range(3) if i != a]
        pts[rows, a] = sign[rows]
        pts[np.ix_(rows, others)] = uv[rows]
    return pts


def _sample_cylinder(n: int, rng: np.random.Generator, _spec) -> np.ndarray:
    # radius 1, z in [-1, 1]; lateral area 4*pi, two caps 2*pi total
    on_cap = rng.random(n) < (1.0 / 3.0)
    theta = rng.uniform(0, 2 * np.pi, n)
    pts = np.empty((n, 3))
    lat = ~on_cap
    pts[lat, 0] = np.cos(theta[lat])
    pts[lat, 1] = np.sin(theta[lat])
    pts[lat, 2] = rng.uniform(-1, 1, lat.sum())
    r = np.sqrt(rng.random(on_cap.sum()))
    pts[on_cap, 0] = r * np.cos(theta[on_cap])
    pts[on_cap, 1] = r * np.sin(theta[on_cap])
    pts[on_cap, 2] = np.where(rng.random(on_cap.sum()) < 0.5, 1.0, -1.0)
    return pts


def _sample_torus(n: int, rng: np.random.Generator, spec) -> np.ndarray:
    # major radius 1; uniform over the surface needs rejection on the
    # area element (1 + r*cos(phi))
    r = spec.minor_radius
    out = np.empty((0, 3))
    while out.shape[0] < n:
        draw = max(n - out.shape[0], 32)
        theta = rng.uniform(0, 2 * np.pi, 2 * draw)
        phi = rng.uniform(0, 2 * np.pi, 2 * draw)
        accept = rng.uniform(0, 1 + r, 2 * draw) < (1 + r * np.cos(phi))
        theta, phi = theta[accept], phi[accept]
        ring = 1 + r * np.cos(phi)
        pts = np.stack([ring * np.cos(theta), ring * np.sin(theta),
                        r * np.sin(phi)], axis=1)
        out = np.concatenate([out, pts], axis=0)
    return out[:n]


def _sample_cone(n: int, rng: np.random.Generator, _spec) -> np.ndarray:
    # base radius 1 at z=0, apex at z=1; lateral area pi*sqrt(2), base pi
    lat_frac = np.sqrt(2) / (np.sqrt(2) + 1)
    on_lat = rng.random(n) < lat_frac
    theta = rng.uniform(0, 2 * np.pi, n)
    pts = np.empty((n, 3))
    s = np.sqrt(rng.random(on_lat.sum()))  # slant fraction, area element ~ s
    pts[on_lat, 0] = s * np.cos(theta[on_lat])
    pts[on_lat, 1] = s * np.sin(theta[on_lat])
    pts[on_lat, 2] = 1.0 - s
    cap = ~on_lat
    r = np.sqrt(rng.random(cap.sum()))
    pts[cap, 0] = r * np.cos(theta[cap])
    pts[cap, 1] = r * np.sin(theta[cap])
    pts[cap, 2] = 0.0
    return pts


_SAMPLERS = {
    "sphere": _sample_sphere,
    "cube": _sample_cube,
    "cylinder": _sample_cylinder,
    "torus": _sample_torus,
    "cone": _sample_cone,
}


def synth_cloud(spec: SyntheticShapeSpec, rng: np.random.Generator) -> np.ndarray:
    """One jittered, optionally noised cloud from a shape spec."""
    pts = _SAMPLERS[spec.family](spec.point_count, rng, spec)
    lo, hi = spec.scale_jitter
    pts = pts * rng.uniform(lo, hi)
    if spec.rotation_jitter > 0:
        a = rng.uniform(-spec.rotation_jitter, spec.rotation_jitter)
        c, s = np.cos(a), np.sin(a)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        pts = pts @ rot.T
    if spec.noise_sigma > 0:
        pts = pts + rng.normal(0, spec.noise_sigma, pts.shape)
    return pts


def synth_dataset(specs: list[SyntheticShapeSpec], per_class: int,
                  seed: int = 0) -> Dataset:
    """per_class clouds per spec; label = spec index, stable item order."""
    if not specs:
        raise ValueError("need at least one shape spec")
    names = []
    for spec in specs:
        name = spec.name
        if name in names:  # same family twice -> disambiguate
            name = f"{name}{sum(n.startswith(spec.name) for n in names)}"
        names.append(name)
    items = []
    for ci, spec in enumerate(specs):
        for j in range(per_class):
            rng = np.random.default_rng([seed, ci, j])
            items.append(DatasetItem(f"{names[ci]}_{j:04d}",
                                     synth_cloud(spec, rng), ci))
    return Dataset(items, names)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def normalize_unit_sphere(cloud: np.ndarray) -> np.ndarray:
    """Center at the centroid and scale so the farthest point has norm 1."""
    cloud = as_cloud(cloud, "cloud")
    centered = cloud - cloud.mean(axis=0)
    radius = np.linalg.norm(centered, axis=1).max()
    if radius == 0:
        return centered
    return centered / radius


def sample_n(cloud: np.ndarray, n: int, seed: int = 0) -> np.ndarray:
    """n points: without replacement when the cloud is big enough; otherwise
    every point once plus replacement draws to top up."""
    cloud = as_cloud(cloud, "cloud")
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    big = cloud.shape[0]
    if big >= n:
        idx = rng.choice(big, size=n, replace=False)
    else:
        idx = np.concatenate([np.arange(big),
                              rng.choice(big, size=n - big, replace=True)])
    return cloud[idx]


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def write_cloud(path, cloud: np.ndarray):
    """xyz: one 'x y z' triple per line, %.6f."""
    cloud = as_cloud(cloud, "cloud")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for p in cloud:
            f.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}\n")


def _load_xyz(path) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) < 3:
                raise ValueError(f"{path}:{ln}: expected 3 coordinates, got {line!r}")
            try:
                rows.append([float(parts[0]), float(parts[1]), float(parts[2])])
            except ValueError as e:
                raise ValueError(f"{path}:{ln}: non-numeric field: {line!r}") from e
    if not rows:
        raise ValueError(f"{path}: no points")
    return np.asarray(rows, dtype=np.float64)


def _load_ply_ascii(path) -> np.ndarray:
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path}:1: not a ply file")
    n_vertex = None
    props: list[str] = []
    body_start = None
    in_vertex = False
    for ln, line in enumerate(lines[1:], 2):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            if tok[1] != "ascii":
                raise ValueError(f"{path}:{ln}: only ascii ply is supported")
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            props.append(tok[-1])
        elif tok[0] == "end_header":
            body_start = ln  # lines[ln] is the first body line (0-based ln)
            break
    if n_vertex is None or body_start is None:
        raise ValueError(f"{path}: ply header lacks a vertex element")
    if n_vertex < 1:
        raise ValueError(f"{path}: ply has no vertices")
    try:
        cols = [props.index(c) for c in ("x", "y", "z")]
    except ValueError:
        raise ValueError(f"{path}: vertex element lacks x/y/z properties") from None
    rows = []
    for ln in range(body_start, body_start + n_vertex):
        if ln >= len(lines):
            raise ValueError(f"{path}: truncated ply body "
                             f"({len(rows)} of {n_vertex} vertices)")
        parts = lines[ln].split()
        try:
            rows.append([float(parts[c]) for c in cols])
        except (ValueError, IndexError) as e:
            raise ValueError(f"{path}:{ln + 1}: bad vertex line: {lines[ln]!r}") from e
    return np.asarray(rows, dtype=np.float64)


def load_cloud(path, fmt: str | None = None) -> np.ndarray:
    path = Path(path)
    if fmt is None:
        fmt = "ply_ascii" if path.suffix.lower() == ".ply" else "xyz"
    if fmt == "xyz":
        return _load_xyz(path)
    if fmt == "ply_ascii":
        return _load_ply_ascii(path)
    raise ValueError(f"unknown cloud format '{fmt}'")


def write_svg_projections(cloud: np.ndarray, path):
    """Three orthographic scatter panels (XY, XZ, YZ) in one SVG.

    Panels share a symmetric scale around the origin, so (0,0,0) lands on
    every panel center.
    """
    cloud = as_cloud(cloud, "cloud")
    panel, margin, gap = 260, 30, 20
    width = 3 * panel + 2 * gap + 2 * margin
    height = panel + 2 * margin + 16
    extent = float(np.abs(cloud).max())
    if extent == 0:
        extent = 1.0
    half = panel / 2.0
    scale = (half - 6.0) / extent
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    axes = [("XY", 0, 1), ("XZ", 0, 2), ("YZ", 1, 2)]
    for i, (label, ax, ay) in enumerate(axes):
        x0 = margin + i * (panel + gap)
        y0 = margin
        cx, cy = x0 + half, y0 + half
        parts.append(f'<rect x="{x0}" y="{y0}" width="{panel}" height="{panel}" '
                     'fill="none" stroke="#888"/>')
        parts.append(f'<text x="{cx:.1f}" y="{y0 + panel + 14}" font-size="12" '
                     f'text-anchor="middle" fill="#333">{label}</text>')
        for p in cloud:
            px = cx + p[ax] * scale
            py = cy - p[ay] * scale
            parts.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="1.5" '
                         'fill="#1f77b4" fill-opacity="0.7"/>')
    parts.append("</svg>")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(parts), encoding="utf-8")
