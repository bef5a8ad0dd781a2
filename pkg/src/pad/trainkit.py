"""Training loop for the joint denoiser."""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import PadConfig
from .datastore import Episode, TrainingExample, mixed_batch
from .diffusion import LossWeights, NoiseSchedule, build_schedule, combined_loss, ddpm_loss, lambda_schedule, q_sample
from .numcore import backward
from .padnet import Batch, PadNet, build_model, encode_image, pose_to_latent

__all__ = [
    "TrainConfig",
    "TrainingError",
    "METRICS_HEADER",
    "collate",
    "make_optimizer",
    "weights_at",
    "train_step",
    "train",
    "train_pipeline",
]

log = logging.getLogger(__name__)

METRICS_HEADER = ["step", "loss_I", "loss_A", "loss_E", "loss_total", "lambda_A", "lambda_E", "wall_ms"]


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 5000
    batch: int = 16
    lr: float = 1e-4
    weight_decay: float = 0.0
    video_fraction: float = 0.25
    ramp_steps: int | None = None  # defaults to total_steps
    lambda_final: float = 2.0
    seed: int = 0
    ckpt_every: int = 1000
    phase: str = "adapt"  # pretrain | adapt
    no_img: bool = False
    ema: bool = False

    def __post_init__(self):
        if self.total_steps < 1 or self.batch < 1:
            raise ValueError("total_steps and batch must be positive")
        if not 0.0 <= self.video_fraction <= 1.0:
            raise ValueError("video_fraction must lie in [0, 1]")
        if self.phase not in ("pretrain", "adapt"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.ema:
            raise NotImplementedError("weight EMA is not supported")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


def collate(examples: list[TrainingExample], cfg: PadConfig, dtype=torch.float32) -> Batch:
    """Encode a list of windows into network-ready tensors."""
    if not examples:
        raise ValueError("empty batch")
    k, d = cfg.k, cfg.latent_size
    B = len(examples)

    def img(x):
        return encode_image(torch.from_numpy(np.asarray(x, dtype=np.float32) / 255.0), d)

    cond_I = img(np.stack([e.cond_frame for e in examples]))
    tgt = img(np.stack([e.target_frames for e in examples]))  # [B, k, c, d, d]
    target_I = tgt.reshape(B, k * cfg.img_channels, d, d)
    batch = Batch(cond_I=cond_I, target_I=target_I, instr=torch.tensor([e.instr for e in examples]))

    has_A = torch.tensor([e.has_A for e in examples])
    if bool(has_A.any()):
        cond_A = torch.zeros(B, cfg.pose_dim)
        target_A = torch.zeros(B, k * cfg.pose_dim)
        for j, e in enumerate(examples):
            if e.has_A:
                cond_A[j] = torch.from_numpy(e.cond_pose[: cfg.pose_dim])
                target_A[j] = pose_to_latent(torch.from_numpy(e.target_poses[:, : cfg.pose_dim])).reshape(-1)
        batch.cond_A, batch.target_A, batch.has_A = cond_A, target_A, has_A

    if cfg.depth_enabled:
        has_E = torch.tensor([e.has_E for e in examples])
        if bool(has_E.any()):
            dE = cfg.depth_size
            cond_E = torch.zeros(B, 1, dE, dE)
            target_E = torch.zeros(B, k, dE, dE)
            for j, e in enumerate(examples):
                if e.has_E:
                    cond_E[j] = encode_image(torch.from_numpy(e.cond_depth), dE)
                    target_E[j] = encode_image(torch.from_numpy(e.target_depths), dE).reshape(k, dE, dE)
            batch.cond_E, batch.target_E, batch.has_E = cond_E, target_E, has_E
    return batch.to(dtype)


def make_optimizer(params, run: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=run.lr, betas=(0.9, 0.999), weight_decay=run.weight_decay)


def weights_at(step: int, run: TrainConfig) -> LossWeights:
    if run.phase == "pretrain":
        w = LossWeights(1.0, 0.0, 0.0)
    else:
        w = lambda_schedule(step, run.ramp_steps or run.total_steps, run.lambda_final)
    if run.no_img:
        w = dataclasses.replace(w, lambda_I=0.0)
    return w


def _masked_mse(pred: torch.Tensor, target: torch.Tensor, rows: torch.Tensor) -> torch.Tensor:
    if bool(rows.all()):
        return ddpm_loss(pred, target)
    return ddpm_loss(pred[rows], target[rows])


def train_step(
    model: PadNet,
    batch: Batch,
    sched: NoiseSchedule,
    weights: LossWeights,
    opt: torch.optim.Optimizer,
    gen: torch.Generator,
    no_img: bool = False,
) -> dict[str, float]:
    """One optimizer update; returns per-modality and combined losses."""
    if batch.size == 0:
        raise ValueError("empty batch")
    B = batch.size
    t = torch.randint(1, sched.T + 1, (B,), generator=gen)
    targets = batch.targets()
    noise = {m: torch.randn(z.shape, generator=gen, dtype=z.dtype) for m, z in targets.items()}
    noised = {m: q_sample(z, t, noise[m], sched) for m, z in targets.items()}

    eps_hat = model(batch, noised, t)
    present = {m: m in targets for m in ("I", "A", "E")}
    if no_img:
        present["I"] = False
    losses = {}
    for m in targets:
        if present[m]:
            losses[m] = _masked_mse(eps_hat[m], noise[m], batch.present(m))
    total = combined_loss(losses, weights, present)
    if not torch.isfinite(total):
        detail = {m: float(v.detach()) for m, v in losses.items()}
        raise TrainingError(f"non-finite loss {float(total.detach())}; per-modality {detail}")

    opt.zero_grad(set_to_none=True)
    if total.requires_grad:
        backward(total)
        opt.step()
    return {
        "loss_I": float(losses["I"].detach()) if "I" in losses else 0.0,
        "loss_A": float(losses["A"].detach()) if "A" in losses else 0.0,
        "loss_E": float(losses["E"].detach()) if "E" in losses else 0.0,
        "loss_total": float(total.detach()),
        "lambda_A": weights.lambda_A,
        "lambda_E": weights.lambda_E,
    }


def _step_streams(seed: int, step: int) -> tuple[np.random.Generator, torch.Generator]:
    """Per-step RNGs derived from (seed, step) so resumed runs replay exactly."""
    rng = np.random.default_rng([seed, step, 0])
    gen = torch.Generator().manual_seed(int(np.random.default_rng([seed, step, 1]).integers(2**62)))
    return rng, gen


def _fmt(x: float) -> str:
    return repr(float(x))


def train(
    run: TrainConfig,
    model_cfg: PadConfig,
    robot: list[Episode],
    video: list[Episode],
    out_dir: str | Path,
    init_from: str | Path | None = None,
    resume: bool = True,
    sched: NoiseSchedule | None = None,
) -> Path:
    """Run one phase; writes ``metrics.csv`` and checkpoints into ``out_dir``.

    ``init_from`` seeds the weights (e.g. the pretrain result) with a fresh
    optimizer. With ``resume``, an existing ``last.padc`` in ``out_dir``
    continues the run, appending to the metrics file.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sched = sched or build_schedule(model_cfg.T)
    last = out / "last.padc"
    metrics_path = out / "metrics.csv"
    start = 0

    def factory(params):
        return make_optimizer(params, run)

    if resume and last.exists():
        model, opt, meta = load_checkpoint(last, factory)
        start = int(meta["train_step"])
        _truncate_metrics(metrics_path, start)
    else:
        if init_from is not None:
            model, _, _ = load_checkpoint(init_from)
        else:
            model = build_model(model_cfg, seed=run.seed)
        opt = factory(model.parameters())
        with open(metrics_path, "w", newline="") as f:
            csv.writer(f).writerow(METRICS_HEADER)

    if model.cfg != model_cfg:
        raise TrainingError("checkpoint config differs from the requested model config")
    fraction = 1.0 if run.phase == "pretrain" else run.video_fraction
    robot_src = [] if run.phase == "pretrain" else robot
    video_src = video if run.phase == "pretrain" or fraction > 0 else []
    if run.phase == "pretrain" and not video:
        raise TrainingError("pretraining needs video episodes")

    model.train()
    with open(metrics_path, "a", newline="") as f:
        writer = csv.writer(f)
        for step in range(start, run.total_steps):
            t0 = time.perf_counter()
            rng, gen = _step_streams(run.seed, step)
            examples = mixed_batch(robot_src, video_src, run.batch, fraction, rng, model_cfg.k, model_cfg.frame_interval)
            batch = collate(examples, model_cfg)
            w = weights_at(step, run)
            m = train_step(model, batch, sched, w, opt, gen, no_img=run.no_img)
            wall = (time.perf_counter() - t0) * 1000.0
            writer.writerow([step] + [_fmt(m[key]) for key in METRICS_HEADER[1:-1]] + [f"{wall:.1f}"])
            if (step + 1) % run.ckpt_every == 0 or step + 1 == run.total_steps:
                f.flush()
                save_checkpoint(last, model, opt, {"train_step": step + 1, "phase": run.phase, "seed": run.seed})
            if step % 500 == 0:
                log.info("%s step %d loss %.4f", run.phase, step, m["loss_total"])
    final = out / "final.padc"
    save_checkpoint(final, model)
    return final


def _truncate_metrics(path: Path, upto: int) -> None:
    """Drop rows at or past ``upto`` so a resumed run appends cleanly."""
    if not path.exists():
        with open(path, "w", newline="") as f:
            csv.writer(f).writerow(METRICS_HEADER)
        return
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    keep = [rows[0]] + [r for r in rows[1:] if r and int(r[0]) < upto]
    with open(path, "w", newline="") as f:
        csv.writer(f).writerows(keep)


def train_pipeline(
    model_cfg: PadConfig,
    robot: list[Episode],
    video: list[Episode],
    out_dir: str | Path,
    pretrain_steps: int = 3000,
    adapt: TrainConfig | None = None,
) -> Path:
    """Video-only pretraining followed by mixed adaptation.

    ``pretrain_steps = 0`` skips the first phase.
    """
    adapt = adapt or TrainConfig()
    out = Path(out_dir)
    init = None
    if pretrain_steps > 0:
        pre = adapt.replace(phase="pretrain", total_steps=pretrain_steps, ramp_steps=None)
        init = train(pre, model_cfg, [], video, out / "pretrain")
    return train(adapt, model_cfg, robot, video, out / "adapt", init_from=init)
