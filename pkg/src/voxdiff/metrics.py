"""Geometry extraction and evaluation metrics (CD, COV, MMD, PSNR, mPSNR)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from skimage import measure

from .camera import Camera, image_rays
from .grid_field import ActivationConfig, activate_density, default_iso
from .renderer import RenderConfig, render_image

PSNR_CAP = 99.0
DEGENERATE_AREA = 1e-12


@dataclass
class Mesh:
    vertices: np.ndarray  # [V, 3]
    triangles: np.ndarray  # [F, 3] int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise ValueError("triangle index out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def areas(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=-1)

    def euler_characteristic(self) -> int:
        edges = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        n_edges = len(np.unique(edges, axis=0))
        used = len(np.unique(self.triangles))
        return used - n_edges + len(self.triangles)


def density_lattice(values, act: ActivationConfig = ActivationConfig()) -> np.ndarray:
    values = torch.as_tensor(values)
    with torch.no_grad():
        return activate_density(values[0].to(torch.float64), act).numpy()


def marching_cubes(values, iso: float | None = None, act: ActivationConfig = ActivationConfig()) -> Mesh:
    """Iso-surface of the activated density, vertices in scene coordinates (x, y, z).

    The lattice is padded with one layer of vacuum so surfaces touching the
    domain boundary are closed.
    """
    iso = default_iso(act) if iso is None else iso
    if iso <= 0:
        raise ValueError("iso must be positive")
    dens = density_lattice(values, act)
    n = dens.shape[0]
    if dens.max() < iso:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    padded = np.pad(dens, 1, constant_values=0.0)
    verts, faces, _, _ = measure.marching_cubes(padded, level=iso, method="lorensen")
    verts = _refine_on_edges(padded, verts.astype(np.float64), iso)
    # padded index i corresponds to voxel i - 1 whose centre is -1 + (i - 0.5) * 2 / n
    zyx = -1.0 + (verts - 0.5) * (2.0 / n)
    mesh = Mesh(zyx[:, ::-1].copy(), faces)
    keep = mesh.areas() > DEGENERATE_AREA
    return Mesh(mesh.vertices, mesh.triangles[keep])


def _refine_on_edges(lattice: np.ndarray, verts: np.ndarray, iso: float) -> np.ndarray:
    """Recompute each vertex's edge interpolation in float64.

    Every marching-cubes vertex lies on a lattice edge; the library reports
    positions in single precision, which is coarser than the edge model.
    """
    frac = np.abs(verts - np.round(verts))
    axis = np.argmax(frac, axis=1)
    rows = np.arange(len(verts))
    lo = np.round(verts).astype(np.int64)
    lo[rows, axis] = np.floor(verts[rows, axis]).astype(np.int64)
    lo = np.minimum(lo, np.array(lattice.shape) - 1)
    hi = lo.copy()
    hi[rows, axis] = np.minimum(lo[rows, axis] + 1, lattice.shape[0] - 1)
    d0 = lattice[lo[:, 0], lo[:, 1], lo[:, 2]]
    d1 = lattice[hi[:, 0], hi[:, 1], hi[:, 2]]
    with np.errstate(divide="ignore", invalid="ignore"):
        w = (iso - d0) / (d1 - d0)
    ok = np.isfinite(w) & (w >= 0) & (w <= 1) & (hi[rows, axis] > lo[rows, axis])
    out = lo.astype(np.float64)
    out[rows, axis] += np.where(ok, w, verts[rows, axis] - lo[rows, axis])
    return out


def normalize_points(points: np.ndarray) -> np.ndarray:
    """Centre on the centroid and scale each axis so that max |coord| = 1.

    Axes with zero extent are left unscaled.
    """
    pts = np.asarray(points, dtype=np.float64)
    pts = pts - pts.mean(axis=0)
    ext = np.abs(pts).max(axis=0)
    ext[ext == 0] = 1.0
    return pts / ext


def sample_surface(mesh: Mesh, n: int = 2048, rng: np.random.Generator | None = None, normalize: bool = True) -> np.ndarray:
    if mesh.is_empty:
        raise ValueError("cannot sample points from an empty mesh")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    areas = mesh.areas()
    tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    w = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=-1)
    v = mesh.vertices[mesh.triangles[tri]]
    pts = (w[:, :, None] * v).sum(axis=1)
    return normalize_points(pts) if normalize else pts


def _sq_dists(x: np.ndarray, y: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Exact pairwise squared distances (differences first, so equal points give 0)."""
    out = np.empty((len(x), len(y)))
    for i in range(0, len(x), chunk):
        diff = x[i : i + chunk, None, :] - y[None, :, :]
        out[i : i + chunk] = (diff * diff).sum(-1)
    return out


def chamfer(x, y) -> float:
    """Sum (not mean) of squared nearest-neighbour distances in both directions."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    y = np.asarray(y, dtype=np.float64).reshape(-1, 3)
    if len(x) == 0 or len(y) == 0:
        raise ValueError("chamfer distance needs two non-empty point sets")
    d = _sq_dists(x, y)
    return float(d.min(axis=1).sum() + d.min(axis=0).sum())


def cd_matrix(gen: list, ref: list) -> np.ndarray:
    """``[len(gen), len(ref)]`` matrix of pairwise Chamfer distances."""
    if not gen or not ref:
        raise ValueError("point-set collections must be non-empty")
    return np.array([[chamfer(g, r) for r in ref] for g in gen])


def coverage(gen: list, ref: list, cd: np.ndarray | None = None) -> float:
    cd = cd_matrix(gen, ref) if cd is None else cd
    # np.argmin returns the first minimum: ties go to the lowest reference index
    matched = set(np.argmin(cd, axis=1).tolist())
    return len(matched) / cd.shape[1]


def mmd(gen: list, ref: list, cd: np.ndarray | None = None) -> float:
    cd = cd_matrix(gen, ref) if cd is None else cd
    return float(cd.min(axis=0).mean())


def psnr(a, b) -> float:
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {list(a.shape)} vs {list(b.shape)}")
    mse = float(((a - b) ** 2).mean())
    return _psnr_from_mse(mse)


def _psnr_from_mse(mse: float) -> float:
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def unmasked_pixels(f_in, mask, cam: Camera, cfg: RenderConfig = RenderConfig()):
    """Pixels whose expected-depth termination point falls in a known (m = 0) voxel.

    Pixels with alpha < 0.5 (background) count as unmasked. Returns
    (``[H, W]`` bool, the render of ``f_in``).
    """
    img = render_image(f_in, cam, cfg)
    m = np.asarray(mask).reshape(np.asarray(mask).shape[-3:])
    n = m.shape[0]
    rays = image_rays(cam, dtype=torch.float64)
    depth = img.depth.reshape(-1).to(torch.float64)
    pts = (rays.origins + depth[:, None] * rays.directions).numpy()
    idx = np.clip(np.floor((pts + 1.0) * n / 2.0).astype(np.int64), 0, n - 1)
    term_masked = m[idx[:, 2], idx[:, 1], idx[:, 0]] > 0.5
    alpha = img.alpha.reshape(-1).numpy()
    keep = (alpha < 0.5) | ~term_masked
    return keep.reshape(cam.height, cam.width), img


def masked_psnr(f_out, f_in, mask, cameras: list[Camera], cfg: RenderConfig = RenderConfig()) -> float:
    """PSNR between renders of ``f_out`` and ``f_in`` over the unmasked pixels of all views."""
    if not cameras:
        raise ValueError("masked_psnr needs at least one camera")
    sq_err, count = 0.0, 0
    for cam in cameras:
        keep, ref = unmasked_pixels(f_in, mask, cam, cfg)
        if not keep.any():
            continue
        out = render_image(f_out, cam, cfg)
        k = torch.as_tensor(keep)
        diff = (out.rgb.to(torch.float64) - ref.rgb.to(torch.float64))[:, k]
        sq_err += float((diff**2).sum())
        count += diff.numel()
    if count == 0:
        raise ValueError("no unmasked pixels in any view; mPSNR is undefined")
    return _psnr_from_mse(sq_err / count)
