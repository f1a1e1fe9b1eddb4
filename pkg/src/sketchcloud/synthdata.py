"""Synthetic paired samples: analytic shapes -> (sketch, cloud, density map).

Shapes are unions of spheres, boxes, and cylinders, rotated about the z axis
to realize views (fixed orthographic camera looking along +z). Ground-truth
clouds are area-uniform surface samples; sketches are rendered from an
analytic depth buffer by marking depth discontinuities and object/background
transitions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import formats
from .geometry import (
    CameraModel,
    DensityMap,
    DepthMultisetMap,
    GridSpec,
    invproj,
    pixel_to_image,
    render_density,
    render_depth_multisets,
)

WORLD_LIMIT = 0.9
DEFAULT_TAU_EDGE = 0.05
_INSIDE_TOL = 1e-9
_BG_DEPTH = 1e9


@dataclass(frozen=True)
class Primitive:
    kind: str  # sphere | box | cylinder
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.0  # sphere, cylinder
    half_extents: tuple = (0.0, 0.0, 0.0)  # box
    half_height: float = 0.0  # cylinder
    axis: str = "z"  # cylinder

    def __post_init__(self):
        if self.kind == "sphere":
            if self.radius <= 0:
                raise ValueError(f"sphere radius must be positive, got {self.radius}")
        elif self.kind == "box":
            if min(self.half_extents) <= 0:
                raise ValueError(f"box half extents must be positive, got {self.half_extents}")
        elif self.kind == "cylinder":
            if self.radius <= 0 or self.half_height <= 0:
                raise ValueError("cylinder radius and half height must be positive")
            if self.axis not in ("x", "y", "z"):
                raise ValueError(f"cylinder axis must be x/y/z, got {self.axis!r}")
        else:
            raise ValueError(f"unknown primitive kind {self.kind!r}")

    def area(self) -> float:
        if self.kind == "sphere":
            return 4 * np.pi * self.radius**2
        if self.kind == "box":
            hx, hy, hz = self.half_extents
            return 8 * (hx * hy + hy * hz + hx * hz)
        lateral = 4 * np.pi * self.radius * self.half_height
        return lateral + 2 * np.pi * self.radius**2

    def reach_xy(self) -> float:
        cx, cy, _ = self.center
        c = float(np.hypot(cx, cy))
        if self.kind == "sphere":
            return c + self.radius
        if self.kind == "box":
            hx, hy, _ = self.half_extents
            return c + float(np.hypot(hx, hy))
        if self.axis == "z":
            return c + self.radius
        return c + float(np.hypot(self.half_height, self.radius))

    def reach_z(self) -> float:
        cz = abs(self.center[2])
        if self.kind == "sphere":
            return cz + self.radius
        if self.kind == "box":
            return cz + self.half_extents[2]
        return cz + (self.half_height if self.axis == "z" else self.radius)


@dataclass(frozen=True)
class ShapeSpec:
    primitives: tuple
    rotation_z: float = 0.0
    n_points: int = 2048

    def __post_init__(self):
        if self.n_points < 1:
            raise ValueError("surface sample count must be positive")
        for p in self.primitives:
            if p.reach_xy() > WORLD_LIMIT or p.reach_z() > WORLD_LIMIT:
                raise ValueError(
                    f"primitive {p.kind} reaches outside [-{WORLD_LIMIT}, {WORLD_LIMIT}]^3"
                )


@dataclass
class DatasetSample:
    sketch: np.ndarray  # (H, W) float in [0, 1]
    gt_cloud: np.ndarray  # (N, 3) float32
    gt_density: DensityMap
    gt_depths: DepthMultisetMap
    shape_id: int = 0
    view_id: int = 0
    class_name: str = ""


def _rot_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


_AXIS_PERM = {"z": (0, 1, 2), "x": (2, 0, 1), "y": (0, 2, 1)}


def _sample_primitive(p: Primitive, count: int, rng) -> np.ndarray:
    """Area-uniform samples of one primitive surface, unrotated frame."""
    if count == 0:
        return np.zeros((0, 3))
    c = np.asarray(p.center)
    if p.kind == "sphere":
        d = rng.normal(size=(count, 3))
        norms = np.linalg.norm(d, axis=1, keepdims=True)
        norms[norms < 1e-12] = 1.0
        return c + p.radius * d / norms
    if p.kind == "box":
        hx, hy, hz = p.half_extents
        face_areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
        faces = rng.choice(6, size=count, p=face_areas / face_areas.sum())
        ab = rng.uniform(-1, 1, size=(count, 2))
        pts = np.empty((count, 3))
        for f in range(6):
            m = faces == f
            axis = f // 2
            sign = 1.0 if f % 2 == 0 else -1.0
            others = [i for i in range(3) if i != axis]
            h = (hx, hy, hz)
            pts[m, axis] = sign * h[axis]
            pts[m, others[0]] = ab[m, 0] * h[others[0]]
            pts[m, others[1]] = ab[m, 1] * h[others[1]]
        return c + pts
    # cylinder, local frame with the axis along z
    lateral = 4 * np.pi * p.radius * p.half_height
    cap = np.pi * p.radius**2
    comp = rng.choice(3, size=count, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
    phi = rng.uniform(0, 2 * np.pi, size=count)
    u = rng.uniform(0, 1, size=count)
    local = np.empty((count, 3))
    side = comp == 0
    local[side, 0] = p.radius * np.cos(phi[side])
    local[side, 1] = p.radius * np.sin(phi[side])
    local[side, 2] = (2 * u[side] - 1) * p.half_height
    for comp_id, sign in ((1, 1.0), (2, -1.0)):
        m = comp == comp_id
        rho = p.radius * np.sqrt(u[m])
        local[m, 0] = rho * np.cos(phi[m])
        local[m, 1] = rho * np.sin(phi[m])
        local[m, 2] = sign * p.half_height
    perm = _AXIS_PERM[p.axis]
    return c + local[:, perm]


def _inside(p: Primitive, pts: np.ndarray) -> np.ndarray:
    """Strictly-interior test in the unrotated frame."""
    d = pts - np.asarray(p.center)
    if p.kind == "sphere":
        return (d**2).sum(axis=1) < max(p.radius - _INSIDE_TOL, 0.0) ** 2
    if p.kind == "box":
        h = np.asarray(p.half_extents) - _INSIDE_TOL
        return (np.abs(d) < h).all(axis=1)
    ax = {"x": 0, "y": 1, "z": 2}[p.axis]
    others = [i for i in range(3) if i != ax]
    radial = d[:, others[0]] ** 2 + d[:, others[1]] ** 2
    return (np.abs(d[:, ax]) < p.half_height - _INSIDE_TOL) & (
        radial < max(p.radius - _INSIDE_TOL, 0.0) ** 2
    )


def sample_surface(spec: ShapeSpec, n: int, seed) -> np.ndarray:
    """n area-uniform points on the union surface, world frame, float32."""
    if n < 1:
        raise ValueError(f"need at least one sample, got {n}")
    prims = spec.primitives
    if not prims:
        raise ValueError("shape has no primitives")
    areas = np.array([p.area() for p in prims])
    probs = areas / areas.sum()
    rng = np.random.default_rng(seed)
    accepted = []
    total = 0
    while total < n:
        chunk = max(256, n - total)
        idx = rng.choice(len(prims), size=chunk, p=probs)
        pts = np.empty((chunk, 3))
        for pi in range(len(prims)):
            m = idx == pi
            pts[m] = _sample_primitive(prims[pi], int(m.sum()), rng)
        keep = np.ones(chunk, dtype=bool)
        for pj, prim in enumerate(prims):
            keep &= ~(_inside(prim, pts) & (idx != pj))
        kept = pts[keep]
        accepted.append(kept)
        total += len(kept)
    pts = np.concatenate(accepted)[:n]
    return (pts @ _rot_z(spec.rotation_z).T).astype(np.float32)


def _depth_buffer(spec: ShapeSpec, cam: CameraModel, img_h: int, img_w: int) -> np.ndarray:
    """Front-surface depth per pixel; background pixels hold _BG_DEPTH."""
    grid = GridSpec(img_w, img_h)
    uu, vv = np.meshgrid(np.arange(img_w), np.arange(img_h))
    x_img, y_img = pixel_to_image(uu, vv, grid)
    x, y, _ = invproj(x_img, y_img, 0.0, cam)
    # rotate rays into the unrotated shape frame
    th = spec.rotation_z
    xr = np.cos(th) * x + np.sin(th) * y
    yr = -np.sin(th) * x + np.cos(th) * y

    depth = np.full((img_h, img_w), np.inf)
    for p in spec.primitives:
        cx, cy, cz = p.center
        if p.kind == "sphere":
            d2 = (xr - cx) ** 2 + (yr - cy) ** 2
            hit = d2 <= p.radius**2
            z = cz - np.sqrt(np.maximum(p.radius**2 - d2, 0.0))
        elif p.kind == "box":
            hx, hy, hz = p.half_extents
            hit = (np.abs(xr - cx) <= hx) & (np.abs(yr - cy) <= hy)
            z = np.full_like(xr, cz - hz)
        elif p.axis == "z":
            d2 = (xr - cx) ** 2 + (yr - cy) ** 2
            hit = d2 <= p.radius**2
            z = np.full_like(xr, cz - p.half_height)
        else:
            along = xr - cx if p.axis == "x" else yr - cy
            across = yr - cy if p.axis == "x" else xr - cx
            hit = (np.abs(along) <= p.half_height) & (np.abs(across) <= p.radius)
            z = cz - np.sqrt(np.maximum(p.radius**2 - across**2, 0.0))
        depth = np.where(hit & (z < depth), z, depth)
    return np.where(np.isfinite(depth), depth, _BG_DEPTH)


def render_sketch(
    spec: ShapeSpec,
    cam: CameraModel,
    img_h: int = 64,
    img_w: int = 64,
    tau_edge: float = DEFAULT_TAU_EDGE,
) -> np.ndarray:
    """Occluding-contour line drawing from the analytic depth buffer.

    A covered pixel becomes a stroke when any 4-neighbor changes coverage or
    differs in depth by more than tau_edge.
    """
    if not spec.primitives:
        return np.zeros((img_h, img_w), dtype=np.float32)
    z = _depth_buffer(spec, cam, img_h, img_w)
    covered = z < _BG_DEPTH / 2
    zp = np.pad(z, 1, constant_values=_BG_DEPTH)
    stroke = np.zeros((img_h, img_w), dtype=bool)
    for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        nb = zp[1 + dy : 1 + dy + img_h, 1 + dx : 1 + dx + img_w]
        stroke |= np.abs(z - nb) > tau_edge
    return (stroke & covered).astype(np.float32)


def is_valid_sketch(img: np.ndarray) -> bool:
    return bool((img > 0).any())


# ---------------------------------------------------------------------------
# dataset generation

DEFAULT_CLASSES = ("sphere", "box", "cylinder")


def random_shape(class_name: str, rng, n_points: int = 2048) -> ShapeSpec:
    """Randomized single-primitive shape of the given class (no rotation)."""
    center = tuple(rng.uniform(-0.1, 0.1, size=3))
    if class_name == "sphere":
        prim = Primitive("sphere", center, radius=float(rng.uniform(0.25, 0.55)))
    elif class_name == "box":
        prim = Primitive("box", center, half_extents=tuple(rng.uniform(0.15, 0.45, size=3)))
    elif class_name == "cylinder":
        prim = Primitive(
            "cylinder",
            center,
            radius=float(rng.uniform(0.15, 0.35)),
            half_height=float(rng.uniform(0.25, 0.5)),
            axis=str(rng.choice(["x", "y", "z"])),
        )
    else:
        raise ValueError(f"unknown shape class {class_name!r}")
    return ShapeSpec(primitives=(prim,), n_points=n_points)


def make_sample(
    spec: ShapeSpec,
    cam: CameraModel,
    grid: GridSpec,
    img_h: int,
    img_w: int,
    cloud_seed,
    tau_edge: float = DEFAULT_TAU_EDGE,
) -> DatasetSample:
    cloud = sample_surface(spec, spec.n_points, cloud_seed)
    sketch = render_sketch(spec, cam, img_h, img_w, tau_edge)
    density = render_density(cloud, grid, cam)
    depths = render_depth_multisets(cloud, grid, cam)
    return DatasetSample(sketch, cloud, density, depths)


def make_dataset(
    n_shapes: int,
    views_per_shape: int,
    seed: int,
    out_dir,
    n_surface_points: int = 2048,
    image_size: int = 64,
    grid: GridSpec | None = None,
    cam: CameraModel | None = None,
    tau_edge: float = DEFAULT_TAU_EDGE,
    classes=DEFAULT_CLASSES,
) -> Path:
    """Write sketch/cloud/density files plus a manifest; returns its path.

    Shapes are assigned round-robin to classes; every fifth shape goes to the
    test split. Sample generation is seeded per (shape, view) pair so the
    output is reproducible regardless of generation order.
    """
    if n_shapes < 1 or views_per_shape < 1:
        raise ValueError("need at least one shape and one view")
    grid = grid or GridSpec(image_size, image_size)
    cam = cam or CameraModel()
    out_dir = Path(out_dir)
    sample_dir = out_dir / "samples"
    sample_dir.mkdir(parents=True, exist_ok=True)

    entries = []
    for shape_idx in range(n_shapes):
        class_name = classes[shape_idx % len(classes)]
        shape_rng = np.random.default_rng(np.random.SeedSequence((seed, shape_idx)))
        base = random_shape(class_name, shape_rng, n_surface_points)
        split = "test" if shape_idx % 5 == 4 else "train"
        for view_idx in range(views_per_shape):
            view_rng = np.random.default_rng(np.random.SeedSequence((seed, shape_idx, view_idx)))
            spec = ShapeSpec(
                primitives=base.primitives,
                rotation_z=float(view_rng.uniform(0, 2 * np.pi)),
                n_points=n_surface_points,
            )
            sample = make_sample(
                spec,
                cam,
                grid,
                image_size,
                image_size,
                np.random.SeedSequence((seed, shape_idx, view_idx, 1)),
                tau_edge,
            )
            if not is_valid_sketch(sample.sketch):
                raise ValueError(f"shape {shape_idx} view {view_idx} rendered an empty sketch")
            stem = f"s{shape_idx:04d}_v{view_idx}"
            formats.write_pgm(sample_dir / f"{stem}.sketch.pgm", sample.sketch)
            formats.write_ply(sample_dir / f"{stem}.cloud.ply", sample.gt_cloud)
            formats.write_dmap(sample_dir / f"{stem}.density.dmap", sample.gt_density.values)
            entries.append(
                {
                    "id": stem,
                    "shape_id": shape_idx,
                    "view_id": view_idx,
                    "class": class_name,
                    "split": split,
                    "sketch": f"samples/{stem}.sketch.pgm",
                    "cloud": f"samples/{stem}.cloud.ply",
                    "density": f"samples/{stem}.density.dmap",
                }
            )

    manifest = {
        "seed": seed,
        "n_shapes": n_shapes,
        "views_per_shape": views_per_shape,
        "n_surface_points": n_surface_points,
        "image_size": image_size,
        "grid": {"width": grid.width, "height": grid.height},
        "camera": {"kind": cam.kind, "s": cam.s},
        "tau_edge": tau_edge,
        "samples": entries,
    }
    manifest_path = out_dir / "manifest.json"
    formats.write_manifest(manifest_path, manifest)
    return manifest_path


def load_manifest(path) -> dict:
    return formats.load_manifest(path)


def manifest_entries(manifest: dict, split: str | None = None):
    entries = manifest["samples"]
    if split is not None:
        entries = [e for e in entries if e["split"] == split]
    return entries


def load_sample(entry: dict, base_dir, grid: GridSpec, cam: CameraModel) -> DatasetSample:
    """Load one manifest entry; depth multisets are regenerated from the cloud."""
    base = Path(base_dir)
    sketch = formats.load_pgm(base / entry["sketch"])
    cloud = formats.load_ply(base / entry["cloud"])
    density = DensityMap(grid, formats.load_dmap(base / entry["density"]))
    depths = render_depth_multisets(cloud, grid, cam)
    return DatasetSample(
        sketch,
        cloud,
        density,
        depths,
        shape_id=entry.get("shape_id", 0),
        view_id=entry.get("view_id", 0),
        class_name=entry.get("class", ""),
    )
