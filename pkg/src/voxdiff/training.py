"""Training loop and checkpoints for the denoiser.

Checkpoint layout (little endian)::

    b"VDCK" | u32 header_len | JSON header | float32 tensor data

The header carries the denoiser and training configs, the noise schedule, the
step counter, the generator state and a directory of tensors (layer path,
shape, byte offset). Parameters live under ``param/<path>``, Adam moments
under ``adam/exp_avg/<path>`` and ``adam/exp_avg_sq/<path>``.
"""

from __future__ import annotations

import base64
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .dataset_io import DataError, _atomic_write
from .denoiser import DenoiserConfig, UNet3D, build_denoiser
from .diffusion import TrainingConfig, TrainingSample, train_step
from .renderer import RenderConfig
from .schedule import NoiseSchedule, linear_schedule

CKPT_MAGIC = b"VDCK"


def training_config_to_dict(cfg: TrainingConfig) -> dict:
    d = asdict(cfg)
    d["render"] = {"n_steps": cfg.render.n_steps, "background": list(cfg.render.background), "jitter": cfg.render.jitter}
    return d


def training_config_from_dict(d: dict) -> TrainingConfig:
    d = dict(d)
    r = d.pop("render", {})
    render = RenderConfig(
        n_steps=int(r.get("n_steps", 92)),
        background=tuple(r.get("background", (1.0, 1.0, 1.0))),
        jitter=bool(r.get("jitter", False)),
    )
    return TrainingConfig(render=render, **d)


class Trainer:
    def __init__(
        self,
        data: list[TrainingSample],
        net_cfg: DenoiserConfig = DenoiserConfig(),
        cfg: TrainingConfig = TrainingConfig(),
        schedule: NoiseSchedule | None = None,
    ):
        if not data:
            raise ValueError("no training samples")
        self.data = data
        self.cfg = cfg
        self.schedule = schedule if schedule is not None else linear_schedule()
        self.net = build_denoiser(net_cfg, seed=cfg.seed)
        self.optimizer = torch.optim.Adam(self.net.parameters(), lr=cfg.learning_rate)
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.step = 0
        self.history: list[dict] = []

    def next_batch(self) -> list[TrainingSample]:
        idx = torch.randint(0, len(self.data), (self.cfg.batch_size,), generator=self.generator)
        return [self.data[i] for i in idx.tolist()]

    def train(self, iterations: int | None = None, callback=None) -> list[dict]:
        iterations = self.cfg.iterations if iterations is None else iterations
        self.net.train()
        for _ in range(iterations):
            self._set_lr()
            rec = train_step(self.next_batch(), self.net, self.optimizer, self.schedule, self.cfg, self.generator)
            self.step += 1
            rec["step"] = self.step
            self.history.append(rec)
            if callback is not None:
                callback(rec)
        return self.history

    def learning_rate(self, step: int) -> float:
        """Rate used for the update that follows `step` completed updates."""
        cfg = self.cfg
        if cfg.final_learning_rate is None or cfg.iterations <= 1:
            return cfg.learning_rate
        frac = min(step / (cfg.iterations - 1), 1.0)
        return cfg.learning_rate * (cfg.final_learning_rate / cfg.learning_rate) ** frac

    def _set_lr(self) -> None:
        lr = self.learning_rate(self.step)
        for group in self.optimizer.param_groups:
            group["lr"] = lr

    def save(self, path, meta: dict | None = None) -> None:
        save_checkpoint(path, self.net, self.schedule, self.optimizer, self.generator, self.step, self.cfg, meta)

    @classmethod
    def resume(cls, path, data: list[TrainingSample]) -> "Trainer":
        ck = load_checkpoint(path)
        tr = cls(data, ck.net.cfg, ck.training, ck.schedule)
        tr.net.load_state_dict(ck.net.state_dict())
        tr.optimizer = torch.optim.Adam(tr.net.parameters(), lr=tr.cfg.learning_rate)
        if ck.adam:
            tr.optimizer.load_state_dict(_adam_state(tr.net, tr.optimizer, ck.adam))
        tr.generator.set_state(ck.rng_state)
        tr.step = ck.step
        return tr


def _adam_state(net, optimizer, adam: dict) -> dict:
    sd = optimizer.state_dict()
    names = [n for n, _ in net.named_parameters()]
    state = {}
    for i, name in enumerate(names):
        if f"exp_avg/{name}" in adam:
            state[i] = {
                "step": torch.tensor(float(adam["steps"][name])),
                "exp_avg": adam[f"exp_avg/{name}"],
                "exp_avg_sq": adam[f"exp_avg_sq/{name}"],
            }
    sd["state"] = state
    return sd


def save_checkpoint(path, net: UNet3D, schedule: NoiseSchedule, optimizer=None, generator=None, step: int = 0, training: TrainingConfig | None = None, meta: dict | None = None) -> None:
    tensors: list[tuple[str, torch.Tensor]] = [(f"param/{n}", p.detach()) for n, p in net.named_parameters()]
    steps = {}
    if optimizer is not None:
        pid = {id(p): n for n, p in net.named_parameters()}
        for p, st in optimizer.state.items():
            name = pid[id(p)]
            tensors.append((f"adam/exp_avg/{name}", st["exp_avg"]))
            tensors.append((f"adam/exp_avg_sq/{name}", st["exp_avg_sq"]))
            steps[name] = float(st["step"])
    directory, blobs, offset = [], [], 0
    for key, t in tensors:
        arr = np.ascontiguousarray(t.cpu().numpy().astype("<f4"))
        directory.append({"key": key, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "denoiser": net.cfg.to_dict(),
        "schedule": schedule.to_dict(),
        "training": training_config_to_dict(training) if training is not None else None,
        "step": step,
        "adam_steps": steps,
        "rng_state": base64.b64encode(generator.get_state().numpy().tobytes()).decode() if generator is not None else None,
        "meta": meta or {},
        "tensors": directory,
    }
    hb = json.dumps(header).encode()
    _atomic_write(Path(path), CKPT_MAGIC + struct.pack("<I", len(hb)) + hb + b"".join(blobs))


class Checkpoint:
    def __init__(self, net, schedule, training, step, adam, rng_state, meta=None):
        self.net = net
        self.meta = meta or {}
        self.schedule = schedule
        self.training = training
        self.step = step
        self.adam = adam
        self.rng_state = rng_state


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise DataError(f"{path} is not a checkpoint (bad magic)")
    if len(data) < 8:
        raise DataError(f"checkpoint {path} is truncated")
    (hlen,) = struct.unpack_from("<I", data, 4)
    try:
        header = json.loads(data[8 : 8 + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DataError(f"checkpoint {path} has a corrupt header: {exc}") from exc
    base = 8 + hlen
    cfg = DenoiserConfig.from_dict(header["denoiser"])
    net = UNet3D(cfg)
    params, adam = {}, {"steps": header.get("adam_steps", {})}
    for ent in header["tensors"]:
        count = int(np.prod(ent["shape"])) if ent["shape"] else 1
        start = base + ent["offset"]
        if start + 4 * count > len(data):
            raise DataError(f"checkpoint {path} is truncated")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=start).reshape(ent["shape"])
        t = torch.from_numpy(arr.astype(np.float32))
        kind, name = ent["key"].split("/", 1)
        if kind == "param":
            params[name] = t
        else:
            adam[name] = t
    missing = set(dict(net.named_parameters())) - set(params)
    if missing:
        raise DataError(f"checkpoint {path} lacks parameters: {sorted(missing)[:3]}")
    with torch.no_grad():
        for n, p in net.named_parameters():
            if tuple(p.shape) != tuple(params[n].shape):
                raise DataError(f"checkpoint parameter {n} has shape {list(params[n].shape)}, expected {list(p.shape)}")
            p.copy_(params[n])
    net.eval()
    training = training_config_from_dict(header["training"]) if header.get("training") else None
    rng = None
    if header.get("rng_state"):
        rng = torch.from_numpy(np.frombuffer(base64.b64decode(header["rng_state"]), dtype=np.uint8).copy())
    return Checkpoint(net, NoiseSchedule.from_dict(header["schedule"]), training, int(header["step"]), adam if len(adam) > 1 else None, rng, header.get("meta"))


def samples_from_scenes(fields: list[torch.Tensor], scenes) -> list[TrainingSample]:
    return [TrainingSample(f, sc.cameras, sc.images) for f, sc in zip(fields, scenes)]
