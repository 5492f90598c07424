"""Analytic ground-truth scenes for dynamic reconstruction experiments.

A scene is a handful of spheres and boxes inside the unit cube, all sharing
one motion (static, a straight translation that reflects off the cube walls,
or an orbit about an axis through the cube center). Frames are rendered by
an exact ray tracer: closed-form sphere and oriented-box intersection with
Lambertian shading under a headlight at the camera, so the images carry no
sampling noise and repeated runs are byte-identical.

Training cameras sit on a Fibonacci spiral over the upper hemisphere; eval
cameras sit on a separate ring at 45 degrees elevation, rotated half a golden
angle so they never coincide with training views.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .cameras import (
    Camera,
    FrameSequence,
    camera_rays,
    frame_dir,
    load_sequence,
    look_at,
    save_transforms,
    write_image,
)
from .errors import InvalidInputError, NotFoundError

CUBE_CENTER = np.array([0.5, 0.5, 0.5])
GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))
_EPS = 1e-6


@dataclass
class SceneObject:
    """A sphere (size = radius) or box (size = edge lengths) with flat albedo."""

    kind: str
    center: np.ndarray
    size: np.ndarray  # (1,) for sphere, (3,) for box
    albedo: np.ndarray

    @property
    def bound_radius(self) -> float:
        """Radius of the circumscribing sphere."""
        if self.kind == "sphere":
            return float(self.size[0])
        return float(np.linalg.norm(0.5 * self.size))

    @classmethod
    def from_dict(cls, d) -> "SceneObject":
        kind = d.get("kind")
        if kind not in ("sphere", "box"):
            raise InvalidInputError(f"object kind must be sphere or box, got {kind!r}")
        center = np.asarray(d["center"], np.float64)
        size = np.atleast_1d(np.asarray(d["size"], np.float64))
        if kind == "box" and size.shape == (1,):
            size = np.repeat(size, 3)
        want = (1,) if kind == "sphere" else (3,)
        if center.shape != (3,) or size.shape != want or (size <= 0).any():
            raise InvalidInputError(f"bad geometry for {kind}: center {d['center']}, size {d['size']}")
        albedo = np.asarray(d.get("albedo", (0.8, 0.8, 0.8)), np.float64)
        if albedo.shape != (3,) or (albedo < 0).any() or (albedo > 1).any():
            raise InvalidInputError(f"albedo must be 3 values in [0, 1], got {d.get('albedo')}")
        return cls(kind, center, size, albedo)

    def to_dict(self) -> dict:
        size = self.size.tolist()
        return {
            "kind": self.kind,
            "center": self.center.tolist(),
            "size": size[0] if self.kind == "sphere" else size,
            "albedo": self.albedo.tolist(),
        }


@dataclass
class Motion:
    """Scene-wide rigid motion, parameterized per frame."""

    kind: str = "static"
    cm_per_frame: np.ndarray = None  # translate: centimeters per frame
    degrees_per_frame: float = 0.0  # rotate
    axis: np.ndarray = None  # rotate: axis through the cube center

    @classmethod
    def from_dict(cls, d) -> "Motion":
        if d is None:
            return cls()
        kind = d.get("type", "static")
        if kind == "static":
            return cls()
        if kind == "translate":
            v = np.asarray(d["cm_per_frame"], np.float64)
            if v.shape != (3,) or not np.isfinite(v).all():
                raise InvalidInputError(f"cm_per_frame must be a finite 3-vector")
            return cls("translate", cm_per_frame=v)
        if kind == "rotate":
            rate = float(d["degrees_per_frame"])
            axis = np.asarray(d.get("axis", (0.0, 0.0, 1.0)), np.float64)
            norm = np.linalg.norm(axis)
            if axis.shape != (3,) or norm < _EPS or not np.isfinite(rate):
                raise InvalidInputError("rotate needs a finite rate and nonzero axis")
            return cls("rotate", degrees_per_frame=rate, axis=axis / norm)
        raise InvalidInputError(f"unknown motion type {kind!r}")

    def to_dict(self) -> dict:
        if self.kind == "translate":
            return {"type": "translate", "cm_per_frame": self.cm_per_frame.tolist()}
        if self.kind == "rotate":
            return {
                "type": "rotate",
                "degrees_per_frame": self.degrees_per_frame,
                "axis": self.axis.tolist(),
            }
        return {"type": "static"}


@dataclass
class SceneSpec:
    """Everything needed to synthesize one dynamic sequence."""

    objects: list
    motion: Motion = dataclass_field(default_factory=Motion)
    n_frames: int = 1
    train_cameras: int = 20
    eval_cameras: int = 10
    width: int = 200
    height: int = 200
    background: tuple = (1.0, 1.0, 1.0)
    camera_radius: float = 1.3
    camera_angle_x: float = 0.8

    _KEYS = frozenset(
        {
            "objects",
            "motion",
            "n_frames",
            "train_cameras",
            "eval_cameras",
            "resolution",
            "background",
            "camera_radius",
            "camera_angle_x",
        }
    )

    @classmethod
    def from_dict(cls, d) -> "SceneSpec":
        unknown = set(d) - cls._KEYS
        if unknown:
            raise InvalidInputError(f"unknown scene keys: {sorted(unknown)}")
        objects = [SceneObject.from_dict(o) for o in d.get("objects", [])]
        if not objects:
            raise InvalidInputError("scene needs at least one object")
        res = d.get("resolution", 200)
        width, height = (res, res) if np.isscalar(res) else (int(res[0]), int(res[1]))
        spec = cls(
            objects=objects,
            motion=Motion.from_dict(d.get("motion")),
            n_frames=int(d.get("n_frames", 1)),
            train_cameras=int(d.get("train_cameras", 20)),
            eval_cameras=int(d.get("eval_cameras", 10)),
            width=int(width),
            height=int(height),
            background=tuple(d.get("background", (1.0, 1.0, 1.0))),
            camera_radius=float(d.get("camera_radius", 1.3)),
            camera_angle_x=float(d.get("camera_angle_x", 0.8)),
        )
        check_scene_spec(spec)
        return spec

    def to_dict(self) -> dict:
        return {
            "objects": [o.to_dict() for o in self.objects],
            "motion": self.motion.to_dict(),
            "n_frames": self.n_frames,
            "train_cameras": self.train_cameras,
            "eval_cameras": self.eval_cameras,
            "resolution": [self.width, self.height],
            "background": list(self.background),
            "camera_radius": self.camera_radius,
            "camera_angle_x": self.camera_angle_x,
        }


def check_scene_spec(spec: SceneSpec) -> None:
    if spec.n_frames < 1 or spec.train_cameras < 1 or spec.eval_cameras < 0:
        raise InvalidInputError("need n_frames >= 1, train >= 1, eval >= 0 cameras")
    if spec.width < 1 or spec.height < 1:
        raise InvalidInputError("resolution must be positive")
    if not 0 < spec.camera_angle_x < np.pi:
        raise InvalidInputError("camera_angle_x must be in (0, pi)")
    for obj in spec.objects:
        r = obj.bound_radius
        if (obj.center - r < 0).any() or (obj.center + r > 1).any():
            raise InvalidInputError(f"object at {obj.center.tolist()} pokes out of the unit cube")
        if spec.motion.kind == "rotate":
            # The whole orbit must stay inside: orbit radius plus object radius
            # fits in the largest ball around the cube center.
            arm = obj.center - CUBE_CENTER
            arm -= spec.motion.axis * (arm @ spec.motion.axis)
            if np.linalg.norm(arm) + r > 0.5:
                raise InvalidInputError("orbit would carry an object outside the cube")


def load_scene_spec(path) -> SceneSpec:
    p = Path(path)
    if not p.is_file():
        raise NotFoundError(f"scene spec not found: {p}")
    return SceneSpec.from_dict(json.loads(p.read_text()))


# ---------------------------------------------------------------------------
# motion

def _reflect(x, lo, hi):
    """Fold a coordinate back into [lo, hi] as if bouncing off the walls."""
    span = hi - lo
    y = np.mod(x - lo, 2.0 * span)
    return lo + np.where(y > span, 2.0 * span - y, y)


def objects_at_frame(spec: SceneSpec, t: int) -> list:
    """Scene objects posed for frame t. Also returns each object's rotation."""
    out = []
    m = spec.motion
    for obj in spec.objects:
        center = obj.center
        rot = np.eye(3)
        if m.kind == "translate":
            raw = obj.center + 0.01 * m.cm_per_frame * t
            r = obj.bound_radius
            center = _reflect(raw, r, 1.0 - r)
        elif m.kind == "rotate":
            angle = np.deg2rad(m.degrees_per_frame) * t
            rot = Rotation.from_rotvec(angle * m.axis).as_matrix()
            center = CUBE_CENTER + rot @ (obj.center - CUBE_CENTER)
        out.append((SceneObject(obj.kind, center, obj.size, obj.albedo), rot))
    return out


# ---------------------------------------------------------------------------
# exact tracer

def _intersect_sphere(origins, dirs, center, radius):
    oc = origins - center
    b = np.einsum("ij,ij->i", oc, dirs)
    disc = b * b - (np.einsum("ij,ij->i", oc, oc) - radius * radius)
    safe = np.sqrt(np.maximum(disc, 0.0))
    t = -b - safe
    t = np.where((disc > 0) & (t > _EPS), t, np.inf)
    # inf * 0 in missed rays would warn; compute normals with a finite stand-in
    tf = np.where(np.isfinite(t), t, 0.0)
    normals = (origins + tf[:, None] * dirs - center) / radius
    return t, np.where(np.isfinite(t)[:, None], normals, 0.0)


def _intersect_box(origins, dirs, center, half, rot):
    # slab test in the box frame; rot columns are the box axes in the world
    o = (origins - center) @ rot
    d = dirs @ rot
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (-half - o) / d
        t1 = (half - o) / d
        lo = np.fmin(t0, t1)
        hi = np.fmax(t0, t1)
    lo = np.where(np.isnan(lo), -np.inf, lo)
    hi = np.where(np.isnan(hi), np.inf, hi)
    axis = np.argmax(lo, axis=1)
    tenter = lo[np.arange(len(lo)), axis]
    texit = hi.min(axis=1)
    t = np.where((tenter > _EPS) & (tenter <= texit), tenter, np.inf)
    local = np.zeros_like(o)
    rows = np.arange(len(o))
    local[rows, axis] = -np.sign(d[rows, axis])
    normals = local @ rot.T
    return t, np.where(np.isfinite(t)[:, None], normals, 0.0)


def trace_reference(origins, dirs, posed_objects, background) -> np.ndarray:
    """Nearest-hit shading for a ray batch: albedo times headlight Lambert."""
    n = len(origins)
    colors = np.broadcast_to(np.asarray(background, np.float64), (n, 3)).copy()
    best = np.full(n, np.inf)
    for obj, rot in posed_objects:
        if obj.kind == "sphere":
            t, normals = _intersect_sphere(origins, dirs, obj.center, obj.size[0])
        else:
            t, normals = _intersect_box(origins, dirs, obj.center, 0.5 * obj.size, rot)
        closer = t < best
        if closer.any():
            facing = np.maximum(-np.einsum("ij,ij->i", dirs, normals), 0.0)
            colors[closer] = obj.albedo * facing[closer, None]
            best = np.where(closer, t, best)
    return colors


def render_reference(camera: Camera, posed_objects, background) -> np.ndarray:
    origins, dirs = camera_rays(camera)
    img = trace_reference(origins, dirs, posed_objects, background)
    return img.reshape(camera.height, camera.width, 3)


# ---------------------------------------------------------------------------
# camera rigs

def fibonacci_hemisphere(n, offset=0.0) -> np.ndarray:
    """n area-uniform unit directions on the upper hemisphere (z > 0)."""
    i = np.arange(n)
    z = (i + 0.5) / n
    rho = np.sqrt(1.0 - z * z)
    phi = offset + i * GOLDEN_ANGLE
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)


def make_camera_rigs(spec: SceneSpec, seed=0):
    """(train, eval) camera lists shared by every frame of a sequence."""
    rng = np.random.Generator(np.random.Philox(key=[seed, 0x53594E54]))
    offset = rng.uniform(0.0, 2.0 * np.pi)
    train = []
    for d in fibonacci_hemisphere(spec.train_cameras, offset):
        pose = look_at(CUBE_CENTER + spec.camera_radius * d, CUBE_CENTER)
        train.append(
            Camera.from_angle_x(spec.width, spec.height, spec.camera_angle_x, pose)
        )
    evals = []
    elev = np.deg2rad(45.0)
    for k in range(spec.eval_cameras):
        phi = offset + 0.5 * GOLDEN_ANGLE + 2.0 * np.pi * k / max(spec.eval_cameras, 1)
        d = np.array(
            [np.cos(elev) * np.cos(phi), np.cos(elev) * np.sin(phi), np.sin(elev)]
        )
        pose = look_at(CUBE_CENTER + spec.camera_radius * d, CUBE_CENTER)
        evals.append(
            Camera.from_angle_x(spec.width, spec.height, spec.camera_angle_x, pose)
        )
    return train, evals


# ---------------------------------------------------------------------------
# sequence generation

def generate_synthetic_sequence(spec: SceneSpec, out, seed=0) -> FrameSequence:
    """Write a full frame_%04d/ sequence of traced PNGs and reload it."""
    check_scene_spec(spec)
    root = Path(out)
    train, evals = make_camera_rigs(spec, seed)
    for t in range(spec.n_frames):
        posed = objects_at_frame(spec, t)
        fdir = root / frame_dir(t)
        names = [f"r_{k}" for k in range(len(train))]
        save_transforms(fdir, train, names)
        for cam, name in zip(train, names):
            write_image(fdir / f"{name}.png", render_reference(cam, posed, spec.background))
        if evals:
            names = [f"e_{k}" for k in range(len(evals))]
            save_transforms(fdir / "eval", evals, names)
            for cam, name in zip(evals, names):
                write_image(
                    fdir / "eval" / f"{name}.png",
                    render_reference(cam, posed, spec.background),
                )
    (root / "scene.json").write_text(json.dumps(spec.to_dict(), indent=2))
    return load_sequence(root)
