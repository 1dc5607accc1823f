"""Point clouds: data model, text I/O, synthetic shapes, corruptions and voxel grids."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import se3
from .errors import (
    DegenerateInputError,
    InvalidArgumentError,
    ParseError,
    UnsupportedFormatError,
)

FORMATS = ("xyz", "off", "ply-ascii")
PRIMITIVES = ("sphere", "cube", "cylinder", "torus", "plane-with-bumps")
MIN_CORRUPTED_POINTS = 4


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    id: str = ""

    def __post_init__(self):
        pts = np.array(self.points, dtype=float, copy=True)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidArgumentError(f"points must be (N, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise DegenerateInputError("point cloud is empty")
        if not np.all(np.isfinite(pts)):
            raise InvalidArgumentError("point cloud has non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def with_points(self, points, id=None) -> "PointCloud":
        return PointCloud(points, self.id if id is None else id)

    def subset(self, indices, id=None) -> "PointCloud":
        return self.with_points(self.points[np.asarray(indices)], id)


def as_points(cloud) -> np.ndarray:
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)


@dataclass(frozen=True, eq=False)
class PairSpec:
    """A registration problem with known answer: ``gt`` maps ``source`` onto ``template``."""

    source: PointCloud
    template: PointCloud
    gt: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gt", se3.check_rigid(self.gt, "gt"))


# --------------------------------------------------------------------------
# file I/O
# --------------------------------------------------------------------------

_EXTENSIONS = {".xyz": "xyz", ".txt": "xyz", ".pts": "xyz", ".off": "off", ".ply": "ply-ascii"}


def infer_format(path) -> str:
    ext = os.path.splitext(str(path))[1].lower()
    try:
        return _EXTENSIONS[ext]
    except KeyError:
        raise UnsupportedFormatError(f"cannot infer point-cloud format from {path!r}") from None


def _floats(tokens, lineno):
    try:
        return [float(t) for t in tokens]
    except ValueError:
        raise ParseError(f"not a number in {' '.join(tokens)!r}", lineno) from None


def _content_lines(text):
    """Yield (1-based line number, tokens) for non-blank, non-comment lines."""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line.split()


def _parse_xyz(text):
    pts = []
    for lineno, tokens in _content_lines(text):
        if len(tokens) < 3:
            raise ParseError(f"expected at least 3 coordinates, got {len(tokens)}", lineno)
        pts.append(_floats(tokens[:3], lineno))
    return pts


def _parse_off(text):
    lines = _content_lines(text)
    try:
        lineno, tokens = next(lines)
    except StopIteration:
        raise ParseError("empty OFF file", 1) from None
    head = tokens[0]
    if not head.upper().startswith("OFF"):
        raise ParseError("missing OFF header", lineno)
    # some exporters glue the counts onto the header: "OFF8 12 0"
    rest = [head[3:]] + tokens[1:] if len(head) > 3 else tokens[1:]
    if not rest:
        try:
            lineno, rest = next(lines)
        except StopIteration:
            raise ParseError("missing OFF counts line", lineno + 1) from None
    if len(rest) < 1:
        raise ParseError("missing vertex count", lineno)
    try:
        n_vertices = int(rest[0])
    except ValueError:
        raise ParseError(f"bad vertex count {rest[0]!r}", lineno) from None
    pts = []
    for lineno, tokens in lines:
        if len(pts) == n_vertices:
            break
        if len(tokens) < 3:
            raise ParseError(f"expected 3 vertex coordinates, got {len(tokens)}", lineno)
        pts.append(_floats(tokens[:3], lineno))
    if len(pts) < n_vertices:
        raise ParseError(f"expected {n_vertices} vertices, found {len(pts)}", lineno)
    return pts


def _parse_ply(text):
    lines = list(_content_lines_raw(text))
    if not lines or lines[0][1] != ["ply"]:
        raise ParseError("missing ply magic", 1)
    n_vertices = None
    props: list[str] = []
    in_vertex = False
    body_start = None
    for i, (lineno, tokens) in enumerate(lines[1:], start=1):
        key = tokens[0]
        if key == "format":
            if len(tokens) < 2 or tokens[1] != "ascii":
                raise UnsupportedFormatError("only ASCII PLY is supported")
        elif key == "element":
            in_vertex = len(tokens) >= 3 and tokens[1] == "vertex"
            if in_vertex:
                try:
                    n_vertices = int(tokens[2])
                except ValueError:
                    raise ParseError(f"bad vertex count {tokens[2]!r}", lineno) from None
            elif n_vertices is None:
                raise UnsupportedFormatError("vertex element must come first in PLY")
        elif key == "property" and in_vertex:
            props.append(tokens[-1])
        elif key == "end_header":
            body_start = i + 1
            break
    if body_start is None:
        raise ParseError("missing end_header", lines[-1][0])
    if n_vertices is None:
        raise ParseError("no vertex element in PLY header", lines[0][0])
    try:
        cols = [props.index(a) for a in "xyz"]
    except ValueError:
        raise ParseError("PLY vertex element lacks x/y/z properties", lines[0][0]) from None
    body = lines[body_start : body_start + n_vertices]
    if len(body) < n_vertices:
        raise ParseError(f"expected {n_vertices} vertices, found {len(body)}", lines[-1][0])
    pts = []
    for lineno, tokens in body:
        if len(tokens) < len(props):
            raise ParseError(f"expected {len(props)} values, got {len(tokens)}", lineno)
        vals = _floats([tokens[c] for c in cols], lineno)
        pts.append(vals)
    return pts


def _content_lines_raw(text):
    # PLY has its own "comment" keyword; '#' is not special there
    for lineno, raw in enumerate(text.splitlines(), start=1):
        tokens = raw.split()
        if tokens and tokens[0] != "comment" and tokens[0] != "obj_info":
            yield lineno, tokens


_PARSERS = {"xyz": _parse_xyz, "off": _parse_off, "ply-ascii": _parse_ply}


def load(path, format: str | None = None) -> PointCloud:
    """Read a cloud from ``.xyz``, OFF or ASCII PLY (vertices only)."""
    fmt = format or infer_format(path)
    if fmt not in _PARSERS:
        raise UnsupportedFormatError(f"unsupported format {fmt!r}; expected one of {FORMATS}")
    with open(path, encoding="ascii", errors="strict") as fh:
        text = fh.read()
    pts = _PARSERS[fmt](text)
    if not pts:
        raise ParseError("file contains no points")
    return PointCloud(np.array(pts), id=os.path.basename(str(path)))


def save(cloud: PointCloud, path, format: str | None = None) -> None:
    fmt = format or infer_format(path)
    pts = as_points(cloud)
    rows = "\n".join(" ".join(f"{v:.9g}" for v in p) for p in pts)
    if fmt == "xyz":
        text = rows + "\n"
    elif fmt == "off":
        text = f"OFF\n{len(pts)} 0 0\n{rows}\n"
    elif fmt == "ply-ascii":
        header = [
            "ply",
            "format ascii 1.0",
            f"element vertex {len(pts)}",
            "property double x",
            "property double y",
            "property double z",
            "end_header",
        ]
        text = "\n".join(header) + "\n" + rows + "\n"
    else:
        raise UnsupportedFormatError(f"unsupported format {fmt!r}; expected one of {FORMATS}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write(text)


# --------------------------------------------------------------------------
# synthetic primitives
# --------------------------------------------------------------------------


def _unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample_box(rng, n, dims=(2.0, 2.0, 2.0)):
    a, b, c = dims
    # faces: +-x (area b*c), +-y (a*c), +-z (a*b)
    areas = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    half = np.array(dims) / 2.0
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    pts[np.arange(n), axis] = sign * half[axis]
    return pts


def _sample_cylinder(rng, n, radius=1.0, height=2.0):
    lateral = 2 * math.pi * radius * height
    cap = math.pi * radius**2
    which = rng.choice(3, size=n, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
    phi = rng.uniform(0, 2 * math.pi, n)
    # area-uniform radius on the caps
    r = np.where(which == 0, radius, radius * np.sqrt(rng.uniform(0, 1, n)))
    z = np.select(
        [which == 0, which == 1], [rng.uniform(-height / 2, height / 2, n), height / 2], -height / 2
    )
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def _rejection(rng, n, propose, density, bound):
    out = []
    have = 0
    while have < n:
        cand = propose(2 * (n - have) + 16)
        keep = rng.uniform(0, bound, len(cand)) < density(cand)
        out.append(cand[keep])
        have += int(keep.sum())
    return np.concatenate(out)[:n]


def _sample_torus(rng, n, major=1.0, minor=0.35):
    def propose(m):
        return rng.uniform(0, 2 * math.pi, size=(m, 2))

    def density(uv):
        return major + minor * np.cos(uv[:, 1])

    uv = _rejection(rng, n, propose, density, major + minor)
    u, v = uv[:, 0], uv[:, 1]
    ring = major + minor * np.cos(v)
    return np.column_stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)])


def _sample_bumpy_plane(rng, n, n_bumps=5):
    centers = rng.uniform(-0.8, 0.8, size=(n_bumps, 2))
    heights = rng.uniform(-0.5, 0.5, size=n_bumps)
    widths = rng.uniform(0.15, 0.4, size=n_bumps)

    def height(xy):
        d2 = ((xy[:, None, :] - centers[None]) ** 2).sum(-1)
        return (heights * np.exp(-d2 / (2 * widths**2))).sum(-1)

    def slope_norm(xy):
        d = xy[:, None, :] - centers[None]
        w = heights * np.exp(-(d**2).sum(-1) / (2 * widths**2)) / widths**2
        grad = -(w[..., None] * d).sum(1)
        return np.sqrt(1.0 + (grad**2).sum(-1))

    bound = 1.0 + float(np.sum(np.abs(heights) / widths)) * math.exp(-0.5)
    xy = _rejection(rng, n, lambda m: rng.uniform(-1, 1, size=(m, 2)), slope_norm, bound)
    return np.column_stack([xy, height(xy)])


def generate_primitive(kind: str, n_points: int, seed: int = 0) -> PointCloud:
    """Sample ``n_points`` uniformly over the surface of a canonical shape.

    Shapes are unnormalized: unit sphere, cube ``[-1, 1]^3``, cylinder of
    radius 1 and height 2 (with caps), torus (1, 0.35), and a bumpy patch
    over ``[-1, 1]^2`` whose bumps are drawn from ``seed``.
    """
    if kind not in PRIMITIVES:
        raise InvalidArgumentError(f"unknown primitive {kind!r}; expected one of {PRIMITIVES}")
    if n_points < 8:
        raise InvalidArgumentError("n_points must be at least 8")
    rng = np.random.default_rng(seed)
    if kind == "sphere":
        pts = _unit_vectors(rng, n_points)
    elif kind == "cube":
        pts = _sample_box(rng, n_points)
    elif kind == "cylinder":
        pts = _sample_cylinder(rng, n_points)
    elif kind == "torus":
        pts = _sample_torus(rng, n_points)
    else:
        pts = _sample_bumpy_plane(rng, n_points)
    return PointCloud(pts, id=f"{kind}-{seed}")


def generate_scene(n_points: int, seed: int = 0, n_objects: int = 3, kinds=PRIMITIVES) -> PointCloud:
    """Several randomly scaled, rotated and placed primitives, normalized to the unit box."""
    rng = np.random.default_rng(seed)
    counts = np.full(n_objects, n_points // n_objects)
    counts[: n_points - counts.sum()] += 1
    parts = []
    for i, count in enumerate(counts):
        kind = kinds[rng.integers(len(kinds))]
        obj = generate_primitive(kind, int(count), seed=int(rng.integers(2**31))).points
        axis = _unit_vectors(rng, 1)[0]
        R = se3.exp_twist(np.concatenate([axis * rng.uniform(0, math.pi), np.zeros(3)]))[:3, :3]
        obj = (obj * rng.uniform(0.25, 0.45, size=3)) @ R.T
        parts.append(obj + rng.uniform(-0.8, 0.8, size=3))
    return normalize_unit_box(PointCloud(np.concatenate(parts), id=f"scene-{seed}"))


def normalize_unit_box(cloud: PointCloud) -> PointCloud:
    """Center on the centroid and scale so the largest absolute coordinate is 0.5."""
    pts = as_points(cloud)
    centered = pts - pts.mean(axis=0)
    extent = np.abs(centered).max()
    if not extent > 0:
        raise DegenerateInputError("cloud has zero extent")
    out = centered * (0.5 / extent)
    out -= out.mean(axis=0)
    return cloud.with_points(out) if isinstance(cloud, PointCloud) else PointCloud(out)


def sample_perturbation(rng, max_rot_deg: float = 45.0, max_trans: float = 0.8) -> np.ndarray:
    """Random twist with uniform axis/angle and uniform direction/magnitude translation.

    The translation bound applies to the translation of the resulting rigid
    transform (not to the twist's linear part), so the returned twist is the
    logarithm of ``[R | t]``.
    """
    if not 0.0 <= max_rot_deg < 180.0:
        raise InvalidArgumentError("max_rot_deg must lie in [0, 180)")
    if max_trans < 0:
        raise InvalidArgumentError("max_trans must be non-negative")
    axis = _unit_vectors(rng, 1)[0]
    angle = math.radians(rng.uniform(0.0, max_rot_deg))
    direction = _unit_vectors(rng, 1)[0]
    t = direction * rng.uniform(0.0, max_trans)
    R = se3.exp_twist(np.concatenate([axis * angle, np.zeros(3)]))[:3, :3]
    if angle == 0.0 and not t.any():
        return np.zeros(6)
    return se3.log_transform(se3.from_rt(R, t))


def make_pair(source: PointCloud, gt) -> PairSpec:
    """Exact-correspondence pair: the template is the source moved by ``gt``."""
    gt = np.asarray(gt, dtype=float)
    if gt.shape == (6,):
        gt = se3.exp_twist(gt)
    template = source.with_points(se3.transform_points(gt, source.points), id=source.id + "/T")
    return PairSpec(source, template, gt)


# --------------------------------------------------------------------------
# corruptions
# --------------------------------------------------------------------------


def _check_fraction(keep_fraction, n):
    if not 0.0 < keep_fraction <= 1.0:
        raise InvalidArgumentError("keep_fraction must lie in (0, 1]")
    k = int(round(keep_fraction * n))
    if k < MIN_CORRUPTED_POINTS:
        raise DegenerateInputError(f"keep_fraction {keep_fraction} leaves {k} points")
    return k


def corrupt_noise(cloud: PointCloud, std: float, seed: int = 0) -> PointCloud:
    if std < 0:
        raise InvalidArgumentError("std must be non-negative")
    if std == 0:
        return cloud
    rng = np.random.default_rng(seed)
    return cloud.with_points(cloud.points + rng.normal(0.0, std, size=cloud.points.shape))


def corrupt_sparsify(cloud: PointCloud, keep_fraction: float, seed: int = 0) -> PointCloud:
    k = _check_fraction(keep_fraction, cloud.n)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(cloud.n, size=k, replace=False))
    return cloud.subset(idx)


def corrupt_halfspace(cloud: PointCloud, camera_dir, keep_fraction: float) -> PointCloud:
    """Keep the ``keep_fraction`` of points that project furthest along ``camera_dir``."""
    k = _check_fraction(keep_fraction, cloud.n)
    d = np.asarray(camera_dir, dtype=float).reshape(3)
    norm = np.linalg.norm(d)
    if not norm > 0:
        raise InvalidArgumentError("camera_dir must be non-zero")
    proj = cloud.points @ (d / norm)
    idx = np.sort(np.argsort(-proj, kind="stable")[:k])
    return cloud.subset(idx)


# --------------------------------------------------------------------------
# voxel partition
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Voxel:
    cell: int
    indices: np.ndarray
    center: np.ndarray


@dataclass(frozen=True, eq=False)
class VoxelPartition:
    voxels: list
    grid_dims: tuple
    bounds: np.ndarray  # (2, 3): lower and upper corner
    min_points: int = 16
    max_points_per_voxel: int | None = None
    seed: int = 0
    n_parent: int = field(default=0)

    def __len__(self):
        return len(self.voxels)

    @property
    def centers(self) -> np.ndarray:
        return np.array([v.center for v in self.voxels])

    def cells(self, points, clip: bool = False) -> np.ndarray:
        return bin_points(points, self.bounds, self.grid_dims, clip)

    def assign(self, points, clip: bool = False) -> list:
        """Bin other points on this grid; one (possibly empty, capped) index array per voxel.

        With ``clip`` points outside the bounds fall into the nearest border cell
        instead of being dropped.
        """
        cell_of = self.cells(points, clip)
        out = []
        for v in self.voxels:
            idx = np.flatnonzero(cell_of == v.cell)
            out.append(_cap(idx, self.max_points_per_voxel, self.seed, v.cell))
        return out


def bin_points(points, bounds, grid_dims, clip: bool = False) -> np.ndarray:
    """Flat cell id per point on an axis-aligned grid; -1 for points outside ``bounds``."""
    pts = as_points(points)
    lo, hi = np.asarray(bounds, dtype=float)
    dims = np.asarray(grid_dims, dtype=int)
    span = np.where(hi > lo, hi - lo, 1.0)
    rel = (pts - lo) / span
    inside = np.all((rel >= 0.0) & (rel <= 1.0), axis=1) | clip
    ijk = np.clip(np.floor(rel * dims), 0, dims - 1).astype(int)
    flat = np.ravel_multi_index(ijk.T, dims)
    return np.where(inside, flat, -1)


def _cap(idx, cap, seed, cell):
    if cap is None or len(idx) <= cap:
        return idx
    rng = np.random.default_rng([seed, cell])
    return np.sort(rng.choice(idx, size=cap, replace=False))


def voxelize(
    cloud,
    grid_dims=(2, 2, 2),
    min_points: int = 16,
    max_points_per_voxel: int | None = None,
    seed: int = 0,
    bounds=None,
) -> VoxelPartition:
    """Partition a cloud on a uniform grid over its bounding box.

    Cells with fewer than ``min_points`` points are dropped; larger cells are
    uniformly subsampled down to ``max_points_per_voxel``. Each voxel's
    center is the centroid of the points it keeps.
    """
    pts = as_points(cloud)
    dims = tuple(int(d) for d in grid_dims)
    if len(dims) != 3 or min(dims) < 1:
        raise InvalidArgumentError("grid_dims must be three integers >= 1")
    if min_points < 4:
        raise InvalidArgumentError("min_points must be at least 4")
    if max_points_per_voxel is not None and max_points_per_voxel < min_points:
        raise InvalidArgumentError("max_points_per_voxel must be >= min_points")
    if bounds is None:
        bounds = np.stack([pts.min(axis=0), pts.max(axis=0)])
    bounds = np.asarray(bounds, dtype=float)
    cell_of = bin_points(pts, bounds, dims)
    voxels = []
    for cell in np.unique(cell_of[cell_of >= 0]):
        idx = np.flatnonzero(cell_of == cell)
        if len(idx) < min_points:
            continue
        idx = _cap(idx, max_points_per_voxel, seed, int(cell))
        voxels.append(Voxel(int(cell), idx, pts[idx].mean(axis=0)))
    if not voxels:
        raise DegenerateInputError(f"every voxel of grid {dims} has fewer than {min_points} points")
    return VoxelPartition(voxels, dims, bounds, min_points, max_points_per_voxel, seed, len(pts))
