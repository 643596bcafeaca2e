"""``voxdiff`` command line: data generation, fitting, training, sampling and evaluation.

Every command merges three layers of settings: built-in defaults, an optional
flat JSON file (``--config``) and explicit flags, in increasing priority. The
resolved settings are logged to stderr and written next to the outputs, so a
run can be repeated from that file alone. Machine-readable results only go to
files.

Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 numerical
failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .camera import Camera, spiral_trajectory
from .dataset_io import (
    DataError,
    _atomic_write,
    load_camera,
    load_field,
    load_gray_mask,
    load_mask,
    load_png,
    load_scene,
    make_synthetic_dataset,
    save_camera,
    save_field,
    save_obj,
    save_png,
)
from .denoiser import DenoiserConfig
from .diffusion import TrainingConfig
from .fitter import FitConfig, evaluate_views, fit_field
from .grid_field import default_iso
from .metrics import cd_matrix, coverage, marching_cubes, masked_psnr, mmd, sample_surface
from .renderer import RenderConfig, render_image
from .samplers import GuidanceTarget, complete_masked, sample_guided, sample_unconditional
from .schedule import NoiseSchedule
from .training import Trainer, load_checkpoint, samples_from_scenes

log = logging.getLogger("voxdiff")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


class Outputs:
    """Paths a command creates; removed again if the command fails."""

    def __init__(self):
        self._created: list[Path] = []

    def claim(self, path) -> Path:
        path = Path(path)
        top = None
        probe = path
        while not probe.exists():
            top = probe
            if probe.parent == probe:
                break
            probe = probe.parent
        if top is not None and top not in self._created:
            self._created.append(top)
        return path

    def rollback(self) -> None:
        for p in reversed(self._created):
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            elif p.exists():
                p.unlink()
            # _atomic_write temp files are cleaned by the writer itself


# --- settings ------------------------------------------------------------

RENDER_KEYS = {"n_steps": 92}
# variance None keeps the checkpoint's schedule
SAMPLER_KEYS = {"clip_denoised": True, "variance": None}

COMMANDS: dict[str, dict] = {
    "make-data": {"spec": None, "out": None, "seed": 0},
    "fit": {
        "scene": None,
        "out": None,
        "res": 32,
        "iters": 2000,
        "lr": 0.1,
        "final_lr": 0.005,
        "pixels": 8192,
        "views": 4,
        "tv": 1e-4,
        "seed": 0,
        **RENDER_KEYS,
    },
    "train": {
        "data": None,
        "out": None,
        "field_source": "auto",
        "iters": 1000,
        "batch": 8,
        "lr": 1e-4,
        "final_lr": None,
        "lambda_rgb": 1.0,
        "views": 4,
        "pixels": 8192,
        "base_channels": 64,
        "channel_mults": [1, 2, 4],
        "blocks": 2,
        "attention_levels": [4],
        "head_channels": 64,
        "ckpt_every": 0,
        "seed": 0,
        **RENDER_KEYS,
    },
    "sample": {
        "ckpt": None,
        "n": 8,
        "out": None,
        "seed": 0,
        "turntable_views": 8,
        "image_size": 64,
        **SAMPLER_KEYS,
        **RENDER_KEYS,
    },
    "complete": {"ckpt": None, "in": None, "mask": None, "out": None, "resample": 0, "seed": 0, **SAMPLER_KEYS},
    "guide": {
        "ckpt": None,
        "image": None,
        "camera": None,
        "fgmask": None,
        "lambda": 0.1,
        "out": None,
        "seed": 0,
        **SAMPLER_KEYS,
        **RENDER_KEYS,
    },
    "render": {"field": None, "camera": None, "spiral": False, "n_views": 8, "image_size": 64, "out": None, **RENDER_KEYS},
    "mesh": {"field": None, "iso": None, "out": None},
    "eval": {"gen": None, "ref": None, "out": None, "points": 2048, "seed": 0},
    "eval-mpsnr": {
        "out": None,
        "in": None,
        "mask": None,
        "cameras": None,
        "n_views": 8,
        "image_size": 64,
        "report": None,
        **RENDER_KEYS,
    },
}

REQUIRED = {
    "make-data": ("spec", "out"),
    "fit": ("scene", "out"),
    "train": ("data", "out"),
    "sample": ("ckpt", "out"),
    "complete": ("ckpt", "in", "mask", "out"),
    "guide": ("ckpt", "image", "camera", "fgmask", "out"),
    "render": ("field", "out"),
    "mesh": ("field", "out"),
    "eval": ("gen", "ref", "out"),
    "eval-mpsnr": ("out", "in", "mask", "report"),
}

FLAG_HELP = {
    "spec": "dataset spec JSON",
    "out": "output path",
    "seed": "random seed",
    "res": "field resolution N",
    "iters": "optimisation steps",
    "lambda_rgb": "rendering-loss weight",
    "field_source": "auto (fitted.vrf, else analytic.vrf), fitted or analytic",
    "ckpt_every": "also write a checkpoint every K steps (0: final only)",
    "lambda": "guidance weight",
    "spiral": "render a spiral trajectory instead of --camera",
    "cameras": "camera JSON files or scene directories",
    "report": "where mPSNR results are written",
    "in": "input field",
    "clip_denoised": "re-derive each noise prediction from the denoised estimate clamped to [-1, 1]",
    "variance": "reverse-step variance: reduced or posterior (default: the checkpoint's)",
}


def _add_flags(p: argparse.ArgumentParser, defaults: dict) -> None:
    p.add_argument("--config", help="flat JSON file of settings; flags override it")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    for key, default in defaults.items():
        flag = "--" + key.replace("_", "-")
        help_ = FLAG_HELP.get(key)
        if isinstance(default, bool):
            p.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction, default=None, help=help_)
        elif isinstance(default, list):
            p.add_argument(flag, dest=key, type=int, nargs="+", default=None, help=help_)
        elif key == "cameras":
            p.add_argument(flag, dest=key, nargs="+", default=None, help=help_)
        elif isinstance(default, int):
            p.add_argument(flag, dest=key, type=int, default=None, help=help_)
        elif isinstance(default, float) or key in ("final_lr", "iso"):
            p.add_argument(flag, dest=key, type=float, default=None, help=help_)
        else:
            p.add_argument(flag, dest=key, default=None, help=help_)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="voxdiff", description="Diffusion over voxel radiance fields.")
    parser.add_argument("--version", action="version", version=f"voxdiff {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, defaults in COMMANDS.items():
        _add_flags(sub.add_parser(name), defaults)
    return parser


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(COMMANDS[command])
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError(f"config file {path} must hold a JSON object")
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise UsageError(f"unknown keys for '{command}' in {path}: {unknown}; allowed: {sorted(cfg)}")
        cfg.update(loaded)
    for key in COMMANDS[command]:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    missing = [k for k in REQUIRED[command] if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError(f"'{command}' needs " + ", ".join("--" + k.replace("_", "-") for k in missing))
    return cfg


def _write_config(path: Path, command: str, cfg: dict, outputs: Outputs) -> None:
    outputs.claim(path)
    _atomic_write(path, json.dumps({"command": command, **cfg}, indent=2, sort_keys=True).encode())


def _config_path_for(out: Path) -> Path:
    """Resolved settings sit inside an output directory or beside an output file."""
    return out / "config.json" if not out.suffix else out.with_name(out.name + ".config.json")


# --- helpers -------------------------------------------------------------


def _render_cfg(cfg: dict) -> RenderConfig:
    return RenderConfig(n_steps=int(cfg["n_steps"]))


def _load_model(path, variance=None):
    ck = load_checkpoint(path)
    n = ck.meta.get("resolution")
    if n is None:
        raise DataError(f"checkpoint {path} does not record a field resolution")
    if variance is not None:
        ck.schedule = NoiseSchedule(ck.schedule.beta, variance=variance)
    return ck, int(n)


def _scene_dirs(root: Path) -> list[Path]:
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    dirs = sorted(d for d in root.iterdir() if (d / "manifest.json").is_file())
    if not dirs:
        raise DataError(f"no scene directories (with manifest.json) under {root}")
    return dirs


def _scene_field(d: Path, source: str = "auto") -> Path:
    fitted, analytic = d / "fitted.vrf", d / "analytic.vrf"
    options = {"auto": [fitted, analytic], "fitted": [fitted], "analytic": [analytic]}
    if source not in options:
        raise DataError(f"field_source must be auto, fitted or analytic, got {source!r}")
    for p in options[source]:
        if p.is_file():
            return p
    raise DataError(f"scene {d} has no {' or '.join(p.name for p in options[source])}")


def _field_files(root: Path) -> list[Path]:
    """Field files of a directory: its *.vrf files, or one per scene subdirectory."""
    if root.is_file():
        return [root]
    if not root.is_dir():
        raise DataError(f"not found: {root}")
    files = sorted(root.glob("*.vrf"))
    if files:
        return files
    return [_scene_field(d) for d in _scene_dirs(root)]


def _turntable(values: torch.Tensor, n_views: int, size: int, rc: RenderConfig) -> list[np.ndarray]:
    cams = spiral_trajectory(n_views, pitch_lo=20.0, pitch_hi=20.0, turns=1.0 - 1.0 / n_views, width=size)
    with torch.no_grad():
        return [render_image(values, c, rc).rgb.numpy() for c in cams]


def _gather_cameras(entries, cfg: dict) -> list[Camera]:
    if not entries:
        return spiral_trajectory(int(cfg["n_views"]), width=int(cfg["image_size"]))
    cams = []
    for e in entries:
        p = Path(e)
        if p.is_dir():
            cams.extend(load_scene(p).cameras)
        else:
            cams.append(load_camera(p))
    return cams


# --- commands ------------------------------------------------------------


def cmd_make_data(cfg, outputs):
    spec_path = Path(cfg["spec"])
    if not spec_path.is_file():
        raise DataError(f"dataset spec not found: {spec_path}")
    try:
        spec = json.loads(spec_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed dataset spec {spec_path}: {exc}") from exc
    out = outputs.claim(cfg["out"])
    dirs = make_synthetic_dataset(spec, out, seed=int(cfg["seed"]))
    log.info("wrote %d scenes to %s", len(dirs), out)
    return out / "config.json"


def cmd_fit(cfg, outputs):
    scene = load_scene(cfg["scene"])
    fc = FitConfig(
        iterations=int(cfg["iters"]),
        learning_rate=float(cfg["lr"]),
        final_learning_rate=float(cfg["final_lr"]),
        pixels_per_step=int(cfg["pixels"]),
        views_per_step=int(cfg["views"]),
        tv_weight=float(cfg["tv"]),
        resolution=int(cfg["res"]),
        render=RenderConfig(n_steps=int(cfg["n_steps"]), background=scene.background, jitter=True),
    )
    values = fit_field(scene, fc, seed=int(cfg["seed"]))
    out = outputs.claim(cfg["out"])
    save_field(out, values)
    rc = RenderConfig(n_steps=int(cfg["n_steps"]), background=scene.background)
    log.info("fitted %s: mean training-view PSNR %.2f dB", out, float(np.mean(evaluate_views(values, scene.cameras, scene.images, rc))))
    return _config_path_for(out)


def cmd_train(cfg, outputs):
    from .plotting import plot_loss_curve

    dirs = _scene_dirs(Path(cfg["data"]))
    fields, scenes = [], []
    for d in dirs:
        fp = _scene_field(d, cfg["field_source"])
        fields.append(load_field(fp))
        scenes.append(load_scene(d))
        log.info("scene %s: field %s", d.name, fp.name)
    n = fields[0].shape[-1]
    for d, f in zip(dirs, fields):
        if f.shape[-1] != n:
            raise DataError(f"scene {d.name} has resolution {f.shape[-1]}, expected {n} like {dirs[0].name}")
    net_cfg = DenoiserConfig(
        base_channels=int(cfg["base_channels"]),
        channel_multipliers=tuple(int(c) for c in cfg["channel_mults"]),
        resnet_blocks_per_level=int(cfg["blocks"]),
        attention_levels=tuple(int(a) for a in cfg["attention_levels"]),
        attention_head_channels=int(cfg["head_channels"]),
    )
    net_cfg.check_resolution(n)
    tc = TrainingConfig(
        lambda_rgb=float(cfg["lambda_rgb"]),
        views_per_step=int(cfg["views"]),
        pixels_per_step=int(cfg["pixels"]),
        batch_size=int(cfg["batch"]),
        learning_rate=float(cfg["lr"]),
        final_learning_rate=None if cfg["final_lr"] is None else float(cfg["final_lr"]),
        iterations=int(cfg["iters"]),
        seed=int(cfg["seed"]),
        render=RenderConfig(n_steps=int(cfg["n_steps"]), background=scenes[0].background),
    )
    trainer = Trainer(samples_from_scenes(fields, scenes), net_cfg, tc)
    out = outputs.claim(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    meta = {"resolution": n, "scenes": [d.name for d in dirs]}
    every = int(cfg["ckpt_every"])
    report_every = max(1, tc.iterations // 20)

    def on_step(rec):
        if rec["step"] % report_every == 0:
            log.info("step %d  loss_rf %.5f  loss_rgb %.5f", rec["step"], rec["loss_rf"], rec["loss_rgb"])
        if every and rec["step"] % every == 0 and rec["step"] < tc.iterations:
            trainer.save(outputs.claim(out / f"checkpoint_{rec['step']:06d}.ckpt"), meta)

    trainer.train(callback=on_step)
    trainer.save(outputs.claim(out / "final.ckpt"), meta)
    hist = trainer.history
    with open(outputs.claim(out / "loss.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss_rf", "loss_rgb", "total"])
        for r in hist:
            w.writerow([r["step"], repr(r["loss_rf"]), repr(r["loss_rgb"]), repr(r["total"])])
    series = {"loss_rf": [r["loss_rf"] for r in hist], "loss_rgb": [r["loss_rgb"] for r in hist]}
    plot_loss_curve([r["step"] for r in hist], series, outputs.claim(out / "loss.png"))
    return out / "config.json"


def cmd_sample(cfg, outputs):
    from .plotting import plot_turntable

    ck, n = _load_model(cfg["ckpt"], cfg["variance"])
    k = int(cfg["n"])
    if k < 1:
        raise DataError("--n must be at least 1")
    g = torch.Generator().manual_seed(int(cfg["seed"]))
    with torch.no_grad():
        samples = sample_unconditional(ck.net, ck.schedule, g, n, n_samples=k, clip_denoised=bool(cfg["clip_denoised"]))
    out = outputs.claim(cfg["out"])
    rc = _render_cfg(cfg)
    for i, f in enumerate(samples):
        save_field(outputs.claim(out / f"sample_{i:03d}.vrf"), f)
        views = _turntable(f, int(cfg["turntable_views"]), int(cfg["image_size"]), rc)
        plot_turntable(views, outputs.claim(out / f"turntable_{i:03d}.png"), title=f"sample {i}")
    log.info("wrote %d samples to %s", k, out)
    return out / "config.json"


def cmd_complete(cfg, outputs):
    ck, n = _load_model(cfg["ckpt"], cfg["variance"])
    f_in = load_field(cfg["in"], expect_n=n)
    mask = load_mask(cfg["mask"], expect_n=n)
    g = torch.Generator().manual_seed(int(cfg["seed"]))
    with torch.no_grad():
        out_field = complete_masked(
            ck.net, ck.schedule, f_in, mask, g, resample=int(cfg["resample"]), clip_denoised=bool(cfg["clip_denoised"])
        )[0]
    out = outputs.claim(cfg["out"])
    save_field(out, out_field)
    log.info("completed %d masked voxels into %s", int(mask.sum()), out)
    return _config_path_for(out)


def cmd_guide(cfg, outputs):
    ck, n = _load_model(cfg["ckpt"], cfg["variance"])
    cam = load_camera(cfg["camera"])
    img = load_png(cfg["image"])
    fg = load_gray_mask(cfg["fgmask"])
    target = GuidanceTarget(img, cam, fg, float(cfg["lambda"]))
    g = torch.Generator().manual_seed(int(cfg["seed"]))
    field = sample_guided(ck.net, ck.schedule, target, g, n, _render_cfg(cfg), clip_denoised=bool(cfg["clip_denoised"]))[0]
    out = outputs.claim(cfg["out"])
    save_field(out, field.detach())
    return _config_path_for(out)


def cmd_render(cfg, outputs):
    from .plotting import plot_turntable

    values = load_field(cfg["field"])
    if cfg["camera"] and cfg["spiral"]:
        raise UsageError("give either --camera or --spiral, not both")
    if cfg["camera"]:
        cams = [load_camera(cfg["camera"])]
    elif cfg["spiral"]:
        cams = spiral_trajectory(int(cfg["n_views"]), width=int(cfg["image_size"]))
    else:
        raise UsageError("'render' needs --camera or --spiral")
    rc = _render_cfg(cfg)
    out = outputs.claim(cfg["out"])
    images = []
    with torch.no_grad():
        for i, cam in enumerate(cams):
            rgb = render_image(values, cam, rc).rgb
            save_png(outputs.claim(out / f"view_{i:03d}.png"), rgb)
            save_camera(outputs.claim(out / f"camera_{i:03d}.json"), cam)
            images.append(rgb.numpy())
    if len(images) > 1:
        plot_turntable(images, outputs.claim(out / "overview.png"))
    return out / "config.json"


def cmd_mesh(cfg, outputs):
    values = load_field(cfg["field"])
    iso = default_iso() if cfg["iso"] is None else float(cfg["iso"])
    mesh = marching_cubes(values, iso)
    if mesh.is_empty:
        log.warning("density never crosses iso %.4g; writing an empty mesh", iso)
    out = outputs.claim(cfg["out"])
    save_obj(out, mesh)
    log.info("mesh: %d vertices, %d triangles", len(mesh.vertices), len(mesh.triangles))
    return _config_path_for(out)


def _point_sets(files: list[Path], n_points: int, seed: int, allow_empty: bool):
    sets = []
    for i, f in enumerate(files):
        mesh = marching_cubes(load_field(f))
        if mesh.is_empty:
            if not allow_empty:
                raise DataError(f"reference field {f} has an empty surface")
            sets.append(None)
            continue
        sets.append(sample_surface(mesh, n_points, np.random.default_rng([seed, i])))
    return sets


def cmd_eval(cfg, outputs):
    from .plotting import plot_cd_matrix

    gen_files = _field_files(Path(cfg["gen"]))
    ref_files = _field_files(Path(cfg["ref"]))
    seed, n_points = int(cfg["seed"]), int(cfg["points"])
    gen = _point_sets(gen_files, n_points, seed, allow_empty=True)
    # streams are keyed by (seed, position), so gen = ref gives identical point sets
    ref = _point_sets(ref_files, n_points, seed, allow_empty=False)
    live = [i for i, g in enumerate(gen) if g is not None]
    cd = np.full((len(gen), len(ref)), np.inf)
    if live:
        cd[live] = cd_matrix([gen[i] for i in live], ref)
    cov = coverage(None, None, cd[live]) if live else 0.0
    mmd_val = mmd(None, None, cd) if live else float("inf")

    def name(p: Path) -> str:
        return p.parent.name if p.name in ("fitted.vrf", "analytic.vrf") else p.stem

    gen_names = [name(p) for p in gen_files]
    ref_names = [name(p) for p in ref_files]
    report = {
        "coverage": cov,
        "mmd": mmd_val,
        "points_per_shape": n_points,
        "generated": [str(p) for p in gen_files],
        "reference": [str(p) for p in ref_files],
        "empty_generated": [str(gen_files[i]) for i in range(len(gen)) if gen[i] is None],
        "cd": [[None if not np.isfinite(v) else float(v) for v in row] for row in cd],
    }
    out = outputs.claim(cfg["out"])
    _atomic_write(out, json.dumps(report, indent=2).encode())
    if live:
        plot_cd_matrix(cd[live], [gen_names[i] for i in live], ref_names, outputs.claim(out.with_name(out.stem + "_cd.png")))
    log.info("COV %.3f  MMD %.5f", cov, mmd_val)
    return _config_path_for(out)


def cmd_eval_mpsnr(cfg, outputs):
    f_out = load_field(cfg["out"])
    n = f_out.shape[-1]
    f_in = load_field(cfg["in"], expect_n=n)
    mask = load_mask(cfg["mask"], expect_n=n)
    cams = _gather_cameras(cfg["cameras"], cfg)
    value = masked_psnr(f_out, f_in, mask, cams, _render_cfg(cfg))
    report = outputs.claim(cfg["report"])
    _atomic_write(report, json.dumps({"mpsnr": value, "views": len(cams), "masked_voxels": int(mask.sum())}, indent=2).encode())
    log.info("mPSNR %.3f dB over %d views", value, len(cams))
    return _config_path_for(report)


HANDLERS = {
    "make-data": cmd_make_data,
    "fit": cmd_fit,
    "train": cmd_train,
    "sample": cmd_sample,
    "complete": cmd_complete,
    "guide": cmd_guide,
    "render": cmd_render,
    "mesh": cmd_mesh,
    "eval": cmd_eval,
    "eval-mpsnr": cmd_eval_mpsnr,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required; see voxdiff --help")
        logging.basicConfig(level=args.log_level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s", force=True)
        cfg = resolve_config(args.command, args)
    except UsageError as exc:
        print(f"voxdiff: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    log.info("resolved config for %s: %s", args.command, json.dumps(cfg, sort_keys=True))
    outputs = Outputs()
    try:
        cfg_path = HANDLERS[args.command](cfg, outputs)
        _write_config(cfg_path, args.command, cfg, outputs)
    except UsageError as exc:
        outputs.rollback()
        print(f"voxdiff: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        outputs.rollback()
        print(f"voxdiff: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        outputs.rollback()
        print(f"voxdiff: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except BaseException:
        outputs.rollback()
        raise
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
