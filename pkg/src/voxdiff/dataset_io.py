"""On-disk formats: field files, scene manifests, images, meshes, synthetic datasets.

Field file layout (little endian)::

    b"VRF1" | u32 N | u32 C | C*N^3 float32 in [channel, z, y, x] order
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .camera import Camera, check_rotation, spiral_trajectory
from .renderer import RenderConfig, render_image

MAGIC = b"VRF1"
HEADER = struct.Struct("<4sII")


class DataError(ValueError):
    """Invalid or inconsistent input data."""


def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def field_file_size(n: int, channels: int = 4) -> int:
    return HEADER.size + 4 * channels * n**3


def encode_field(values) -> bytes:
    arr = np.asarray(torch.as_tensor(values).detach().cpu().numpy(), dtype="<f4")
    if arr.ndim == 3:
        arr = arr[None]
    c, n = arr.shape[0], arr.shape[1]
    if arr.shape[1:] != (n, n, n):
        raise DataError(f"field grid must be cubic, got {list(arr.shape)}")
    return HEADER.pack(MAGIC, n, c) + np.ascontiguousarray(arr).tobytes()


def save_field(path, values) -> None:
    _atomic_write(Path(path), encode_field(values))


def decode_field(data: bytes, expect_n: int | None = None, expect_channels: int | None = None) -> torch.Tensor:
    if len(data) < HEADER.size:
        raise DataError(f"field file truncated: {len(data)} bytes, header needs {HEADER.size}")
    magic, n, c = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise DataError(f"bad field file magic {magic!r}, expected {MAGIC!r}")
    want = field_file_size(n, c)
    if len(data) < want:
        raise DataError(f"field file truncated: {len(data)} bytes, expected {want}")
    if len(data) > want:
        raise DataError(f"field file has {len(data) - want} trailing bytes")
    if expect_n is not None and n != expect_n:
        raise DataError(f"field resolution {n} does not match expected {expect_n}")
    if expect_channels is not None and c != expect_channels:
        raise DataError(f"field has {c} channels, expected {expect_channels}")
    arr = np.frombuffer(data, dtype="<f4", offset=HEADER.size).reshape(c, n, n, n)
    return torch.from_numpy(arr.astype(np.float32))


def load_field(path, expect_n: int | None = None, expect_channels: int | None = 4) -> torch.Tensor:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"field file not found: {path}")
    return decode_field(path.read_bytes(), expect_n, expect_channels)


def save_mask(path, mask) -> None:
    m = torch.as_tensor(mask, dtype=torch.float32)
    save_field(path, m.reshape(1, *m.shape[-3:]))


def load_mask(path, expect_n: int | None = None) -> torch.Tensor:
    m = load_field(path, expect_n, expect_channels=1)[0]
    if not torch.all((m == 0) | (m == 1)):
        raise DataError(f"mask file {path} contains values other than 0 and 1")
    return m


def save_png(path, rgb) -> None:
    """Write a ``[3, H, W]`` image in [0, 1], linearly scaled to 8 bits."""
    arr = torch.as_tensor(rgb).detach().clamp(0, 1).permute(1, 2, 0).cpu().numpy()
    img = Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="RGB")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path)


def load_png(path) -> torch.Tensor:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"image file not found: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def load_gray_mask(path) -> torch.Tensor:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"mask image not found: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32)
    return torch.from_numpy((arr >= 128).astype(np.float32))


def save_obj(path, mesh) -> None:
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    _atomic_write(Path(path), ("\n".join(lines) + "\n").encode())


def load_camera(path) -> Camera:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"camera file not found: {path}")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed camera JSON {path}: {exc}") from exc
    try:
        return Camera.from_dict(d, tol=1e-4)
    except (KeyError, ValueError) as exc:
        raise DataError(f"invalid camera {path}: {exc}") from exc


def save_camera(path, cam: Camera) -> None:
    _atomic_write(Path(path), json.dumps(cam.to_dict(), indent=2).encode())


@dataclass
class Scene:
    cameras: list[Camera]
    images: torch.Tensor  # [V, 3, H, W]
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)


def load_scene(path) -> Scene:
    """Read a scene manifest (a file, or a directory holding ``manifest.json``)."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.is_file():
        raise DataError(f"scene manifest not found: {path}")
    try:
        man = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed scene manifest JSON {path}: {exc}") from exc
    try:
        width, height = int(man["width"]), int(man["height"])
        focal = float(man["focal"])
        views = man["views"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"scene manifest {path} lacks a required field: {exc}") from exc
    if not views:
        raise DataError(f"scene manifest {path} lists no views")
    cams, imgs = [], []
    for i, v in enumerate(views):
        img_path = path.parent / v["file"]
        if not img_path.is_file():
            raise DataError(f"view {i}: image file not found: {img_path}")
        rot = np.asarray(v["rotation"], dtype=np.float64)
        if rot.size != 9:
            raise DataError(f"view {i}: rotation must have 9 entries, got {rot.size}")
        try:
            check_rotation(rot.reshape(3, 3), tol=1e-4)
        except ValueError as exc:
            raise DataError(f"view {i}: orthonormality check failed: {exc}") from exc
        img = load_png(img_path)
        if img.shape[1:] != (height, width):
            raise DataError(
                f"view {i}: image dimension mismatch, {img_path.name} is "
                f"{img.shape[2]}x{img.shape[1]} but manifest declares {width}x{height}"
            )
        cams.append(
            Camera.from_dict(
                {
                    "position": v["position"],
                    "rotation": rot.tolist(),
                    "focal": focal,
                    "width": width,
                    "height": height,
                    "principal": man.get("principal"),
                },
                tol=1e-4,
            )
        )
        imgs.append(img)
    bg = tuple(man.get("background", (1.0, 1.0, 1.0)))
    return Scene(cams, torch.stack(imgs), bg)


def write_scene(directory, cameras: list[Camera], images, background=(1.0, 1.0, 1.0)) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    views = []
    for i, (cam, img) in enumerate(zip(cameras, images)):
        name = f"view_{i:03d}.png"
        save_png(directory / name, img)
        views.append(
            {"file": name, "position": cam.position.tolist(), "rotation": cam.rotation.reshape(-1).tolist()}
        )
    c0 = cameras[0]
    man = {
        "width": c0.width,
        "height": c0.height,
        "focal": c0.focal,
        "principal": list(c0.principal),
        "background": list(background),
        "views": views,
    }
    _atomic_write(directory / "manifest.json", json.dumps(man, indent=2).encode())
    return directory / "manifest.json"


# --- procedural shapes ---------------------------------------------------


def _sdf(prim: dict, p: np.ndarray) -> np.ndarray:
    c = np.asarray(prim.get("center", (0.0, 0.0, 0.0)), dtype=np.float64)
    kind = prim["type"]
    if kind == "sphere":
        return np.linalg.norm(p - c, axis=-1) - float(prim["radius"])
    if kind == "box":
        q = np.abs(p - c) - np.asarray(prim["half_extents"], dtype=np.float64)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        return outside + np.minimum(q.max(axis=-1), 0.0)
    raise DataError(f"unknown primitive type {kind!r}")


def analytic_field(primitives: list[dict], n: int) -> torch.Tensor:
    """Pre-activated field of a union of primitives.

    Density ramps linearly from +1 inside to -1 outside across one voxel on
    either side of the surface; colour comes from the closest primitive.
    """
    if not primitives:
        raise DataError("shape has no primitives")
    h = 2.0 / n
    c = -1.0 + (np.arange(n) + 0.5) * h
    z, y, x = np.meshgrid(c, c, c, indexing="ij")
    p = np.stack([x, y, z], axis=-1)
    sd = np.stack([_sdf(pr, p) for pr in primitives])
    nearest = sd.argmin(axis=0)
    dens = np.clip(-sd.min(axis=0) / h, -1.0, 1.0)
    colors = np.asarray([pr.get("color", (0.5, 0.5, 0.5)) for pr in primitives], dtype=np.float64)
    rgb = 2.0 * colors[nearest] - 1.0
    out = np.concatenate([dens[None], np.moveaxis(rgb, -1, 0)], axis=0)
    return torch.from_numpy(out.astype(np.float32))


def _random_shape(rng: np.random.Generator, idx: int) -> dict:
    prims = []
    for _ in range(int(rng.integers(1, 3))):
        color = rng.uniform(0.1, 0.9, size=3).round(3).tolist()
        center = rng.uniform(-0.25, 0.25, size=3).round(3).tolist()
        if rng.random() < 0.5:
            prims.append({"type": "sphere", "center": center, "radius": round(float(rng.uniform(0.3, 0.55)), 3), "color": color})
        else:
            half = rng.uniform(0.2, 0.5, size=3).round(3).tolist()
            prims.append({"type": "box", "center": center, "half_extents": half, "color": color})
    return {"name": f"random_{idx:03d}", "primitives": prims}


DEFAULT_SPEC = {
    "resolution": 32,
    "image_size": 64,
    "n_views": 50,
    "n_steps": 92,
    "radius": 2.5,
    "pitch": [-20.0, 60.0],
    "turns": 5.0,
    "shapes": [],
    "random_shapes": 0,
}


def resolve_spec(spec: dict) -> dict:
    unknown = set(spec) - set(DEFAULT_SPEC)
    if unknown:
        raise DataError(f"unknown dataset spec keys: {sorted(unknown)}")
    out = {**DEFAULT_SPEC, **spec}
    if not out["shapes"] and not out["random_shapes"]:
        raise DataError("dataset spec lists no shapes")
    return out


def make_synthetic_dataset(spec: dict, out_dir, seed: int = 0) -> list[Path]:
    """Build analytic fields, spiral renders and manifests for every shape.

    Writes ``<out>/<name>/{manifest.json, view_*.png, analytic.vrf}`` and an
    index ``<out>/dataset.json``. Returns the scene directories.
    """
    spec = resolve_spec(spec)
    rng = np.random.default_rng(seed)
    shapes = list(spec["shapes"]) + [_random_shape(rng, i) for i in range(int(spec["random_shapes"]))]
    out_dir = Path(out_dir)
    n = int(spec["resolution"])
    cams = spiral_trajectory(
        int(spec["n_views"]),
        float(spec["radius"]),
        float(spec["pitch"][0]),
        float(spec["pitch"][1]),
        float(spec["turns"]),
        width=int(spec["image_size"]),
    )
    cfg = RenderConfig(n_steps=int(spec["n_steps"]))
    dirs = []
    for shape in shapes:
        name = shape["name"]
        values = analytic_field(shape["primitives"], n)
        with torch.no_grad():
            imgs = [render_image(values, c, cfg).rgb for c in cams]
        d = out_dir / name
        write_scene(d, cams, imgs, cfg.background)
        save_field(d / "analytic.vrf", values)
        _atomic_write(d / "shape.json", json.dumps(shape, indent=2).encode())
        dirs.append(d)
    index = {"spec": spec, "seed": seed, "scenes": [d.name for d in dirs]}
    _atomic_write(out_dir / "dataset.json", json.dumps(index, indent=2).encode())
    return dirs
