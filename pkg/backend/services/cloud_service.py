"""
Point clouds, the perturbation pipelines of the clean/noisy/partial
protocols, file I/O (xyz, ASCII ply, OFF meshes) and analytic shapes.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, Field, model_validator

from exceptions import DataFormatError, ValidationError
from services.geometry_service import RigidTransform
from services.sampling_service import (
    DEFAULT_SEED,
    TransformSampleConfig,
    make_rng,
    sample_transform,
    sample_unit_axes,
)

logger = logging.getLogger(__name__)

PARTIAL_RETAIN_FRACTION = 0.70
PARTIAL_POINTS = 717
NOISE_SIGMA = 0.01
NOISE_CLIP = 0.05

ShapeKind = Literal["sphere", "box", "helix", "torus"]
SHAPE_KINDS = ("sphere", "box", "helix", "torus")


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValidationError(f"Point array must have shape (N, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise ValidationError("Point cloud must contain at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValidationError("Point coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def count(self) -> int:
        return int(self.points.shape[0])

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)


@dataclass(frozen=True)
class CloudPair:
    """Observed source/target plus the clean references used by the metrics.

    clean_source is complete, noiseless and pre-transform; clean_target is the
    complete, noiseless target-side sample already in the target frame.
    """

    source: PointCloud
    target: PointCloud
    clean_source: PointCloud
    gt: RigidTransform
    clean_target: Optional[PointCloud] = None

    def clean_target_or_default(self) -> PointCloud:
        if self.clean_target is not None:
            return self.clean_target
        return apply_transform(self.clean_source, self.gt)


class PerturbationConfig(BaseModel):
    n_points: int = Field(default=1024, ge=1)
    noise_sigma: float = Field(default=0.0, ge=0.0)
    noise_clip: float = Field(default=NOISE_CLIP, ge=0.0)
    independent_resample: bool = False
    crop_fraction: float = Field(default=1.0, gt=0.0, le=1.0)
    final_points: Optional[int] = Field(default=None, ge=1)
    crop_before_downsample: bool = True
    seed: int = DEFAULT_SEED

    @model_validator(mode="after")
    def _final_points_fit(self) -> "PerturbationConfig":
        if self.final_points is not None and self.final_points > self.n_points:
            raise ValueError("final_points cannot exceed n_points")
        return self

    @classmethod
    def clean(cls, n_points: int = 1024, seed: int = DEFAULT_SEED) -> "PerturbationConfig":
        return cls(n_points=n_points, seed=seed)

    @classmethod
    def noisy(cls, n_points: int = 1024, seed: int = DEFAULT_SEED) -> "PerturbationConfig":
        return cls(n_points=n_points, noise_sigma=NOISE_SIGMA, noise_clip=NOISE_CLIP,
                   independent_resample=True, seed=seed)

    @classmethod
    def partial(cls, n_points: int = 1024, seed: int = DEFAULT_SEED) -> "PerturbationConfig":
        final = min(PARTIAL_POINTS, math.ceil(PARTIAL_RETAIN_FRACTION * n_points - 1e-9))
        return cls(n_points=n_points, noise_sigma=NOISE_SIGMA, noise_clip=NOISE_CLIP,
                   independent_resample=True, crop_fraction=PARTIAL_RETAIN_FRACTION,
                   final_points=final, seed=seed)

    @classmethod
    def for_protocol(cls, protocol: str, n_points: int = 1024, seed: int = DEFAULT_SEED) -> "PerturbationConfig":
        presets = {"clean": cls.clean, "noisy": cls.noisy, "partial": cls.partial}
        if protocol not in presets:
            raise ValidationError(f"Unknown protocol '{protocol}' (expected clean, noisy or partial)")
        return presets[protocol](n_points=n_points, seed=seed)


def normalize_unit_sphere(c: PointCloud) -> PointCloud:
    """Center at the origin and scale so the farthest point has norm 1"""
    centered = c.points - c.centroid()
    radius = float(np.max(np.linalg.norm(centered, axis=1)))
    if radius == 0.0:
        return PointCloud(centered)
    return PointCloud(centered / radius)


def subsample(c: PointCloud, n: int, rng: np.random.Generator) -> PointCloud:
    """n points without replacement, in random order"""
    if n < 1 or n > c.count:
        raise ValidationError(f"Cannot draw {n} points from a cloud of {c.count}")
    return PointCloud(c.points[rng.choice(c.count, size=n, replace=False)])


def add_noise(c: PointCloud, sigma: float, clip: float, rng: np.random.Generator) -> PointCloud:
    """Independent Gaussian per coordinate, perturbation clamped to [−clip, clip]"""
    if sigma < 0 or clip < 0:
        raise ValidationError("Noise sigma and clip must be non-negative")
    if sigma == 0.0:
        return c
    perturbation = np.clip(rng.normal(0.0, sigma, size=c.points.shape), -clip, clip)
    return PointCloud(c.points + perturbation)


def retained_count(count: int, retain_fraction: float) -> int:
    return max(1, min(count, math.ceil(retain_fraction * count - 1e-9)))


def crop_plane(
    c: PointCloud,
    retain_fraction: float,
    rng: Optional[np.random.Generator] = None,
    normal: Optional[np.ndarray] = None,
) -> PointCloud:
    """Keep the ⌈fraction·count⌉ points farthest along a random plane normal.

    Equivalent to translating a plane through the origin along its normal
    until the retained half-space holds exactly that many points. Ties go to
    the lower index; kept points stay in input order.
    """
    if not (0.0 < retain_fraction <= 1.0):
        raise ValidationError(f"retain_fraction must lie in (0, 1], got {retain_fraction}")
    if normal is None:
        if rng is None:
            raise ValidationError("crop_plane needs an rng or an explicit normal")
        normal = sample_unit_axes(rng, 1)[0]
    if retain_fraction == 1.0:
        return c
    k = retained_count(c.count, retain_fraction)
    order = np.argsort(-(c.points @ np.asarray(normal, dtype=np.float64)), kind="stable")
    return PointCloud(c.points[np.sort(order[:k])])


def apply_transform(c: PointCloud, t: RigidTransform) -> PointCloud:
    return PointCloud(t.apply(c.points))


def _perturb_side(sample: PointCloud, pcfg: PerturbationConfig, rng: np.random.Generator) -> PointCloud:
    observed = add_noise(sample, pcfg.noise_sigma, pcfg.noise_clip, rng)

    def crop(cloud: PointCloud) -> PointCloud:
        if pcfg.crop_fraction < 1.0:
            return crop_plane(cloud, pcfg.crop_fraction, rng)
        return cloud

    def downsample(cloud: PointCloud) -> PointCloud:
        if pcfg.final_points is not None and cloud.count > pcfg.final_points:
            return subsample(cloud, pcfg.final_points, rng)
        return cloud

    if pcfg.crop_before_downsample:
        return downsample(crop(observed))
    return crop(downsample(observed))


def make_pair(
    shape: PointCloud,
    tcfg: TransformSampleConfig,
    pcfg: PerturbationConfig,
    rng: Optional[np.random.Generator] = None,
) -> CloudPair:
    """Build one registration problem from a shape.

    Draw order is fixed (transform, source sample, target sample, noise,
    crop) so the clean references do not depend on the perturbation settings.
    Without an explicit rng, one is seeded from pcfg.seed.
    """
    if rng is None:
        rng = make_rng(pcfg.seed)
    if shape.count < pcfg.n_points:
        raise ValidationError(f"Shape has {shape.count} points, protocol needs {pcfg.n_points}")

    gt = sample_transform(tcfg, rng)
    normalized = normalize_unit_sphere(shape)
    clean_source = subsample(normalized, pcfg.n_points, rng)
    if pcfg.independent_resample:
        target_sample = subsample(normalized, pcfg.n_points, rng)
    else:
        target_sample = clean_source

    source = _perturb_side(clean_source, pcfg, rng)
    target_observed = _perturb_side(target_sample, pcfg, rng)

    return CloudPair(
        source=source,
        target=apply_transform(target_observed, gt),
        clean_source=clean_source,
        gt=gt,
        clean_target=apply_transform(target_sample, gt),
    )


def sample_mesh_surface(vertices: np.ndarray, faces: np.ndarray, n: int, rng: np.random.Generator) -> PointCloud:
    """Area-weighted triangle choice, barycentric-uniform point inside the triangle"""
    tri = vertices[faces]
    areas = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    total = float(areas.sum())
    if total <= 0.0:
        raise ValidationError("Mesh has zero surface area")
    chosen = rng.choice(len(faces), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    t = tri[chosen]
    points = t[:, 0] + u[:, None] * (t[:, 1] - t[:, 0]) + v[:, None] * (t[:, 2] - t[:, 0])
    return PointCloud(points)


def synth_shape(
    kind: str,
    n: int,
    rng: np.random.Generator,
    params: Optional[Dict[str, float]] = None,
) -> PointCloud:
    """n surface samples of an analytic shape scaled to the unit sphere.

    Without params the shapes are normalized analytically (sphere of radius
    1, cube of half-side 1/√3, helix and torus touching the unit sphere).
    params jitters the proportions; jittered shapes are normalized from data.
    """
    if n < 1:
        raise ValidationError(f"Shape needs at least one point, got {n}")
    params = params or {}

    if kind == "sphere":
        axes = np.array([1.0, params.get("aspect_y", 1.0), params.get("aspect_z", 1.0)])
        points = sample_unit_axes(rng, n) * axes
    elif kind == "box":
        half = np.array([1.0, params.get("aspect_y", 1.0), params.get("aspect_z", 1.0)]) / math.sqrt(3.0)
        face_areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]]).repeat(2)
        faces = rng.choice(6, size=n, p=face_areas / face_areas.sum())
        points = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
        axis = faces // 2
        sign = np.where(faces % 2 == 0, 1.0, -1.0)
        points[np.arange(n), axis] = sign * half[axis]
    elif kind == "helix":
        turns = params.get("turns", 2.0)
        radius = params.get("radius", 0.6)
        half_height = params.get("half_height", math.sqrt(max(1.0 - radius ** 2, 0.0)))
        t = np.sort(rng.uniform(0.0, 2.0 * math.pi * turns, size=n))
        z = -half_height + 2.0 * half_height * t / (2.0 * math.pi * turns)
        points = np.column_stack([radius * np.cos(t), radius * np.sin(t), z])
    elif kind == "torus":
        major = params.get("major", 0.7)
        minor = params.get("minor", 0.3)
        # rejection keeps the density uniform over the surface area
        u_list: List[np.ndarray] = []
        v_list: List[np.ndarray] = []
        needed = n
        while needed > 0:
            u = rng.uniform(0.0, 2.0 * math.pi, size=2 * needed)
            v = rng.uniform(0.0, 2.0 * math.pi, size=2 * needed)
            keep = rng.random(2 * needed) < (major + minor * np.cos(v)) / (major + minor)
            u_list.append(u[keep][:needed])
            v_list.append(v[keep][:needed])
            needed -= int(min(keep.sum(), needed))
        u = np.concatenate(u_list)[:n]
        v = np.concatenate(v_list)[:n]
        ring = major + minor * np.cos(v)
        points = np.column_stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)])
    else:
        raise ValidationError(f"Unknown shape kind '{kind}' (expected one of {', '.join(SHAPE_KINDS)})")

    cloud = PointCloud(points)
    if params:
        return normalize_unit_sphere(cloud)
    return cloud


class CloudService:
    """Reads and writes point clouds; OFF meshes are sampled into clouds"""

    SUPPORTED_FORMATS = {"xyz", "ply_ascii", "off"}
    _EXTENSIONS = {".xyz": "xyz", ".txt": "xyz", ".ply": "ply_ascii", ".off": "off"}

    def __init__(self, mesh_samples: int = 2048, seed: int = DEFAULT_SEED):
        self.mesh_samples = mesh_samples
        self.rng = make_rng(seed)

    def detect_format(self, path: Path) -> str:
        fmt = self._EXTENSIONS.get(path.suffix.lower())
        if fmt is None:
            raise DataFormatError(f"Unsupported point-cloud format '{path.suffix}'", path=str(path))
        return fmt

    def read(self, path, fmt: Optional[str] = None, n_samples: Optional[int] = None) -> PointCloud:
        """Read a cloud; meshes are converted by area-weighted surface sampling"""
        path = Path(path)
        fmt = fmt or self.detect_format(path)
        if fmt not in self.SUPPORTED_FORMATS:
            raise DataFormatError(f"Unsupported point-cloud format '{fmt}'", path=str(path))
        if not path.exists():
            raise DataFormatError("File does not exist", path=str(path))
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
        logger.debug(f"Reading {fmt} cloud from {path} ({len(lines)} lines)")
        if fmt == "xyz":
            return self._parse_xyz(lines, str(path))
        if fmt == "ply_ascii":
            return self._parse_ply(lines, str(path))
        vertices, faces = self._parse_off(lines, str(path))
        return sample_mesh_surface(vertices, faces, n_samples or self.mesh_samples, self.rng)

    def write(self, cloud: PointCloud, path, fmt: Optional[str] = None) -> Path:
        """Write a cloud at full double precision (17 significant digits)"""
        path = Path(path)
        fmt = fmt or self.detect_format(path)
        if fmt == "off":
            raise DataFormatError("Writing OFF meshes is not supported; use xyz or ply_ascii", path=str(path))
        if fmt not in self.SUPPORTED_FORMATS:
            raise DataFormatError(f"Unsupported point-cloud format '{fmt}'", path=str(path))
        path.parent.mkdir(parents=True, exist_ok=True)
        body = "\n".join(" ".join(f"{x:.17g}" for x in p) for p in cloud.points)
        with open(path, "w", encoding="utf-8") as f:
            if fmt == "ply_ascii":
                f.write("ply\nformat ascii 1.0\n")
                f.write(f"element vertex {cloud.count}\n")
                f.write("property double x\nproperty double y\nproperty double z\nend_header\n")
            f.write(body + "\n")
        logger.info(f"Wrote {cloud.count} points to {path} ({fmt})")
        return path

    @staticmethod
    def _floats(line: str, expected: int, path: str, line_number: int) -> List[float]:
        fields = line.split()
        if len(fields) < expected:
            raise DataFormatError(f"Expected {expected} values, got '{line.strip()}'", path=path, line_number=line_number)
        try:
            return [float(x) for x in fields[:expected]]
        except ValueError:
            raise DataFormatError(f"Non-numeric value in '{line.strip()}'", path=path, line_number=line_number)

    def _parse_xyz(self, lines: List[str], path: str) -> PointCloud:
        points = []
        for number, line in enumerate(lines, start=1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            points.append(self._floats(line, 3, path, number))
        if not points:
            raise DataFormatError("No points found", path=path)
        return PointCloud(np.array(points))

    def _parse_ply(self, lines: List[str], path: str) -> PointCloud:
        if not lines or lines[0].strip() != "ply":
            raise DataFormatError("Missing 'ply' magic line", path=path, line_number=1)
        if len(lines) < 2 or lines[1].strip() != "format ascii 1.0":
            raise DataFormatError("Only 'format ascii 1.0' is supported", path=path, line_number=2)
        vertex_count = None
        header_end = None
        for number, line in enumerate(lines[2:], start=3):
            fields = line.split()
            if fields[:2] == ["element", "vertex"]:
                if len(fields) != 3 or not fields[2].isdigit():
                    raise DataFormatError(f"Malformed vertex element '{line.strip()}'", path=path, line_number=number)
                vertex_count = int(fields[2])
            elif fields == ["end_header"]:
                header_end = number
                break
        if vertex_count is None or header_end is None:
            raise DataFormatError("Header lacks 'element vertex' or 'end_header'", path=path, line_number=len(lines))
        if len(lines) < header_end + vertex_count:
            raise DataFormatError(f"Expected {vertex_count} vertices", path=path, line_number=len(lines))
        points = [
            self._floats(lines[header_end + i], 3, path, header_end + i + 1)
            for i in range(vertex_count)
        ]
        return PointCloud(np.array(points))

    def _parse_off(self, lines: List[str], path: str):
        content = [(number, line.strip()) for number, line in enumerate(lines, start=1)
                   if line.strip() and not line.strip().startswith("#")]
        if not content or not content[0][1].startswith("OFF"):
            raise DataFormatError("Missing 'OFF' header", path=path, line_number=content[0][0] if content else 1)
        number, header = content[0]
        # some exporters glue the counts onto the magic word ("OFF490 518 0")
        rest = header[3:].strip()
        if rest:
            counts_line, counts_number, body = rest, number, content[1:]
        elif len(content) > 1:
            counts_number, counts_line = content[1]
            body = content[2:]
        else:
            raise DataFormatError("Missing vertex/face counts", path=path, line_number=number)
        counts = counts_line.split()
        if len(counts) < 2 or not all(c.isdigit() for c in counts[:2]):
            raise DataFormatError(f"Malformed counts line '{counts_line}'", path=path, line_number=counts_number)
        n_vertices, n_faces = int(counts[0]), int(counts[1])
        if len(body) < n_vertices + n_faces:
            raise DataFormatError(f"Expected {n_vertices} vertices and {n_faces} faces", path=path, line_number=len(lines))
        vertices = np.array([self._floats(line, 3, path, num) for num, line in body[:n_vertices]])
        triangles = []
        for num, line in body[n_vertices:n_vertices + n_faces]:
            fields = line.split()
            try:
                size = int(fields[0])
                index = [int(x) for x in fields[1:1 + size]]
            except (ValueError, IndexError):
                raise DataFormatError(f"Malformed face '{line}'", path=path, line_number=num)
            if size < 3 or len(index) != size or max(index) >= n_vertices or min(index) < 0:
                raise DataFormatError(f"Malformed face '{line}'", path=path, line_number=num)
            # fan triangulation for polygons
            for k in range(1, size - 1):
                triangles.append([index[0], index[k], index[k + 1]])
        return vertices, np.array(triangles, dtype=np.int64)
