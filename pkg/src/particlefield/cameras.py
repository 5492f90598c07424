"""Pinhole cameras, ray generation, and the transforms.json scene layout.

Poses follow the Blender/NeRF-synthetic convention: `transform_matrix` is
camera-to-world with x right, y up, and the camera looking along -z. Pixel
(u, v) is continuous with v growing downward; the principal-point pixel maps
to the -z axis. Image sizes come from the referenced images themselves, the
JSON only stores `camera_angle_x`.

A dynamic sequence is a directory of frame_0000/, frame_0001/, ... each
holding transforms.json plus r_*.png for the training cameras and an eval/
subdirectory with the same layout for held-out views.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    DecodeError,
    InvalidPoseError,
    InvalidShapeError,
    NotFoundError,
    OutOfBoundsError,
    WriteError,
)


class Ray(NamedTuple):
    origin: np.ndarray
    direction: np.ndarray  # unit length


@dataclass
class Camera:
    width: int
    height: int
    focal_x: float
    focal_y: float
    principal: np.ndarray  # (2,) pixel coordinates of the optical axis
    pose: np.ndarray  # (4, 4) camera-to-world

    @classmethod
    def from_angle_x(cls, width, height, angle_x, pose) -> "Camera":
        focal = 0.5 * width / np.tan(0.5 * angle_x)
        principal = np.array([0.5 * width, 0.5 * height])
        return cls(int(width), int(height), float(focal), float(focal), principal, pose)

    @property
    def angle_x(self) -> float:
        return 2.0 * np.arctan(0.5 * self.width / self.focal_x)


def check_camera(camera: Camera, pose_tol=1e-6) -> None:
    """Validate intrinsics and that the pose is a rigid transform."""
    if camera.width < 1 or camera.height < 1:
        raise InvalidPoseError("image dimensions must be positive")
    if camera.focal_x <= 0 or camera.focal_y <= 0:
        raise InvalidPoseError("focal lengths must be positive")
    pose = np.asarray(camera.pose)
    if pose.shape != (4, 4) or not np.isfinite(pose).all():
        raise InvalidPoseError(f"pose must be a finite (4, 4) matrix")
    rot = pose[:3, :3]
    if np.abs(rot @ rot.T - np.eye(3)).max() > pose_tol:
        raise InvalidPoseError("pose rotation is not orthonormal within tolerance")
    if np.abs(pose[3] - np.array([0.0, 0.0, 0.0, 1.0])).max() > pose_tol:
        raise InvalidPoseError("pose bottom row must be [0, 0, 0, 1]")


def generate_rays(camera: Camera, pixels):
    """World-space rays through continuous pixel coordinates, vectorized.

    Returns (origins, directions) with unit directions. The principal-point
    pixel under an identity pose maps to direction (0, 0, -1).
    """
    uv = np.atleast_2d(np.asarray(pixels, np.float64))
    if uv.ndim != 2 or uv.shape[1] != 2:
        raise InvalidShapeError(f"pixels must be (K, 2), got {uv.shape}")
    u, v = uv[:, 0], uv[:, 1]
    if (
        (u < 0).any()
        or (u >= camera.width).any()
        or (v < 0).any()
        or (v >= camera.height).any()
    ):
        raise OutOfBoundsError("pixel coordinates outside the image")
    cx, cy = camera.principal
    d_cam = np.stack(
        [
            (u - cx) / camera.focal_x,
            -(v - cy) / camera.focal_y,  # v grows downward, camera y points up
            -np.ones_like(u),
        ],
        axis=1,
    )
    rot = camera.pose[:3, :3]
    d_world = d_cam @ rot.T
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.pose[:3, 3], d_world.shape).copy()
    return origins, d_world


def generate_ray(camera: Camera, pixel) -> Ray:
    uv = np.asarray(pixel, np.float64)
    if uv.shape != (2,):
        raise InvalidShapeError(f"pixel must be shape (2,), got {uv.shape}")
    origins, dirs = generate_rays(camera, uv[None, :])
    return Ray(origins[0], dirs[0])


def camera_rays(camera: Camera):
    """Rays through every pixel center, row-major."""
    xs = np.arange(camera.width) + 0.5
    ys = np.arange(camera.height) + 0.5
    u, v = np.meshgrid(xs, ys)  # (H, W)
    uv = np.stack([u.ravel(), v.ravel()], axis=1)
    return generate_rays(camera, uv)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose for a camera at `eye` looking at `target`."""
    eye = np.asarray(eye, np.float64)
    fwd = np.asarray(target, np.float64) - eye
    z = -fwd / np.linalg.norm(fwd)  # camera looks along -z
    x = np.cross(np.asarray(up, np.float64), z)
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise InvalidPoseError("view direction is parallel to the up vector")
    x /= nx
    y = np.cross(z, x)
    pose = np.eye(4)
    pose[:3, 0] = x
    pose[:3, 1] = y
    pose[:3, 2] = z
    pose[:3, 3] = eye
    return pose


def read_image(path) -> np.ndarray:
    """Decode an image to float32 RGB in [0, 1]."""
    p = Path(path)
    if not p.exists():
        raise NotFoundError(f"image not found: {p}")
    try:
        with Image.open(p) as img:
            arr = np.asarray(img.convert("RGB"), np.float32)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DecodeError(f"cannot decode image {p}: {exc}") from exc
    return arr / 255.0


def write_image(path, image) -> None:
    """Write a float [0, 1] HxWx3 array as 8-bit PNG."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidShapeError(f"image must be (H, W, 3), got {arr.shape}")
    data = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    p = Path(path)
    try:
        p.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(data).save(p)
    except OSError as exc:
        raise WriteError(f"cannot write image {p}: {exc}") from exc


def _resolve_image_path(root: Path, file_path: str) -> Path:
    # blender-style file_path entries usually omit the extension
    candidate = root / file_path
    if candidate.suffix:
        return candidate
    withext = candidate.with_suffix(".png")
    return withext if withext.exists() or not candidate.exists() else candidate


def load_transforms(path):
    """Read a transforms.json and size its cameras from the first image.

    `path` is the JSON file or a directory containing transforms.json.
    Returns (cameras, image_paths) in file order.
    """
    p = Path(path)
    if p.is_dir():
        p = p / "transforms.json"
    if not p.exists():
        raise NotFoundError(f"no transforms.json at {p}")
    try:
        meta = json.loads(p.read_text())
        angle_x = float(meta["camera_angle_x"])
        entries = meta["frames"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DecodeError(f"malformed transforms file {p}: {exc}") from exc
    if not entries:
        raise DecodeError(f"transforms file {p} lists no frames")
    root = p.parent
    image_paths, poses = [], []
    for entry in entries:
        try:
            image_paths.append(_resolve_image_path(root, entry["file_path"]))
            poses.append(np.asarray(entry["transform_matrix"], np.float64))
        except (KeyError, TypeError, ValueError) as exc:
            raise DecodeError(f"malformed frame entry in {p}: {exc}") from exc
    first = read_image(image_paths[0])
    height, width = first.shape[:2]
    cameras = []
    for pose in poses:
        if pose.shape != (4, 4):
            raise InvalidPoseError(f"transform_matrix must be 4x4, got {pose.shape}")
        cam = Camera.from_angle_x(width, height, angle_x, pose)
        check_camera(cam, pose_tol=1e-3)
        cameras.append(cam)
    return cameras, image_paths


def camera_from_dict(d) -> Camera:
    """Build a standalone camera from a JSON-style dict.

    Needs `width`, `height`, `camera_angle_x`, `transform_matrix`; no image
    is consulted for sizing.
    """
    try:
        pose = np.asarray(d["transform_matrix"], np.float64)
        cam = Camera.from_angle_x(
            int(d["width"]), int(d["height"]), float(d["camera_angle_x"]), pose
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DecodeError(f"malformed camera dict: {exc}") from exc
    if pose.shape != (4, 4):
        raise InvalidPoseError(f"transform_matrix must be 4x4, got {pose.shape}")
    check_camera(cam, pose_tol=1e-3)
    return cam


def save_transforms(directory, cameras, names) -> Path:
    """Write a transforms.json for cameras sharing one field of view."""
    directory = Path(directory)
    meta = {
        "camera_angle_x": cameras[0].angle_x,
        "frames": [
            {"file_path": name, "transform_matrix": cam.pose.tolist()}
            for cam, name in zip(cameras, names)
        ],
    }
    try:
        directory.mkdir(parents=True, exist_ok=True)
        out = directory / "transforms.json"
        out.write_text(json.dumps(meta, indent=2))
    except OSError as exc:
        raise WriteError(f"cannot write transforms under {directory}: {exc}") from exc
    return out


@dataclass
class Frame:
    """One time step: cameras plus the images they captured."""

    index: int
    cameras: list
    image_paths: list
    time: float = 0.0  # seconds, informational


@dataclass
class FrameSequence:
    """An ordered dynamic capture with per-frame held-out eval views."""

    root: Path
    frames: list = field(default_factory=list)
    eval_frames: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.frames)


def frame_dir(index: int) -> str:
    return f"frame_{index:04d}"


def load_sequence(root) -> FrameSequence:
    """Scan frame_*/ directories into a FrameSequence."""
    rootp = Path(root)
    if not rootp.is_dir():
        raise NotFoundError(f"scene directory not found: {rootp}")
    dirs = sorted(d for d in rootp.iterdir() if d.is_dir() and d.name.startswith("frame_"))
    if not dirs:
        raise NotFoundError(f"no frame_* directories under {rootp}")
    seq = FrameSequence(rootp)
    for i, d in enumerate(dirs):
        cams, paths = load_transforms(d)
        seq.frames.append(Frame(i, cams, paths, time=float(i)))
        evaldir = d / "eval"
        if evaldir.is_dir():
            ecams, epaths = load_transforms(evaldir)
            seq.eval_frames.append(Frame(i, ecams, epaths))
    if seq.eval_frames and len(seq.eval_frames) != len(seq.frames):
        raise NotFoundError(f"eval views missing for some frames under {rootp}")
    return seq
