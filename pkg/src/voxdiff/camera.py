"""Pinhole cameras, ray generation and the spiral capture trajectory.

Camera frame convention: x right, y down, z forward (the viewing direction).
``rotation`` maps camera-frame vectors to world space, so its columns are the
camera's right, down and forward axes expressed in world coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch


@dataclass
class Camera:
    position: np.ndarray
    rotation: np.ndarray
    focal: float
    width: int
    height: int
    principal: tuple[float, float] | None = None

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if self.focal <= 0:
            raise ValueError(f"focal length must be positive, got {self.focal}")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        check_rotation(self.rotation, tol=1e-6)
        if self.principal is None:
            self.principal = (self.width / 2.0, self.height / 2.0)

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 2]

    def to_dict(self) -> dict:
        return {
            "position": self.position.tolist(),
            "rotation": self.rotation.reshape(-1).tolist(),
            "focal": float(self.focal),
            "width": int(self.width),
            "height": int(self.height),
            "principal": list(self.principal),
        }

    @classmethod
    def from_dict(cls, d: dict, tol: float = 1e-6) -> "Camera":
        rot = np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3)
        check_rotation(rot, tol=tol)
        rot = _orthonormalize(rot)
        return cls(
            position=d["position"],
            rotation=rot,
            focal=float(d["focal"]),
            width=int(d["width"]),
            height=int(d["height"]),
            principal=tuple(d["principal"]) if d.get("principal") is not None else None,
        )


def check_rotation(r: np.ndarray, tol: float = 1e-6) -> None:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {r.shape}")
    err = np.abs(r.T @ r - np.eye(3)).max()
    det = np.linalg.det(r)
    if err > tol or abs(det - 1.0) > tol:
        raise ValueError(
            f"rotation is not orthonormal with det +1 (|R^T R - I| = {err:.2e}, det = {det:.6f})"
        )


def _orthonormalize(r: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(r)
    return u @ vt


def look_at(position, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-8:
        # looking straight along the up axis; fall back to +y
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=1)


def default_focal(width: int) -> float:
    # a 2-unit wide slab at distance 2.5 spans 80% of the image
    return 0.8 * (width / 2.0) * 2.5


@dataclass
class Rays:
    origins: torch.Tensor
    directions: torch.Tensor
    near: torch.Tensor
    far: torch.Tensor
    hit: torch.Tensor = field(repr=False)

    def __len__(self) -> int:
        return int(self.origins.shape[0])


def slab_intersect(origins: np.ndarray, dirs: np.ndarray):
    """Entry/exit parameters against [-1, 1]^3, clipped at 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (-1.0 - origins) * inv
        t1 = (1.0 - origins) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    # axis-parallel rays: inside the slab -> unbounded, outside -> empty
    par = dirs == 0
    inside = np.abs(origins) <= 1.0
    tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
    near = np.maximum(tmin.max(axis=-1), 0.0)
    far = tmax.min(axis=-1)
    hit = far > near
    return near, far, hit


def pixel_rays(cam: Camera, pixels, dtype=torch.float32) -> Rays:
    """Rays through the centres of ``pixels`` given as (u, v) column/row indices."""
    pix = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    u, v = pix[:, 0], pix[:, 1]
    if np.any(u < 0) or np.any(u >= cam.width) or np.any(v < 0) or np.any(v >= cam.height):
        raise ValueError("pixel coordinates outside the image")
    cx, cy = cam.principal
    d_cam = np.stack(
        [(u + 0.5 - cx) / cam.focal, (v + 0.5 - cy) / cam.focal, np.ones_like(u)], axis=-1
    )
    dirs = d_cam @ cam.rotation.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(cam.position, dirs.shape).copy()
    near, far, hit = slab_intersect(origins, dirs)
    far = np.where(hit, far, near)
    return Rays(
        origins=torch.as_tensor(origins, dtype=dtype),
        directions=torch.as_tensor(dirs, dtype=dtype),
        near=torch.as_tensor(near, dtype=dtype),
        far=torch.as_tensor(far, dtype=dtype),
        hit=torch.as_tensor(hit),
    )


def all_pixels(cam: Camera) -> np.ndarray:
    """Every (u, v) in row-major order (v outer)."""
    vv, uu = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
    return np.stack([uu.reshape(-1), vv.reshape(-1)], axis=-1)


def image_rays(cam: Camera, dtype=torch.float32) -> Rays:
    return pixel_rays(cam, all_pixels(cam), dtype=dtype)


def project(cam: Camera, points) -> np.ndarray:
    """World points to (u, v) pixel indices; inverse of :func:`pixel_rays`."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    local = (pts - cam.position) @ cam.rotation
    cx, cy = cam.principal
    u = cam.focal * local[:, 0] / local[:, 2] + cx - 0.5
    v = cam.focal * local[:, 1] / local[:, 2] + cy - 0.5
    return np.stack([u, v], axis=-1)


def spiral_trajectory(
    n_views: int = 200,
    radius: float = 2.5,
    pitch_lo: float = -20.0,
    pitch_hi: float = 60.0,
    turns: float = 5.0,
    width: int = 128,
    height: int | None = None,
    focal: float | None = None,
) -> list[Camera]:
    """Cameras on an Archimedean spiral around the origin.

    Pitch (degrees above the xy-plane) sweeps linearly from ``pitch_lo`` to
    ``pitch_hi`` while the azimuth winds ``turns`` full revolutions.
    """
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    if radius <= 0:
        raise ValueError("radius must be positive")
    height = width if height is None else height
    focal = default_focal(width) if focal is None else focal
    cams = []
    for i in range(n_views):
        frac = i / (n_views - 1) if n_views > 1 else 0.0
        pitch = math.radians(pitch_lo + (pitch_hi - pitch_lo) * frac)
        azim = 2.0 * math.pi * turns * frac
        pos = radius * np.array(
            [math.cos(pitch) * math.cos(azim), math.cos(pitch) * math.sin(azim), math.sin(pitch)]
        )
        cams.append(Camera(pos, look_at(pos), focal, width, height))
    return cams
