"""Closed-loop execution, evaluation, ablations and scaling sweeps."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
import torch

from . import blockworld as bw
from .config import PadConfig, estimate_flops, preset
from .datagen import expert_dataset, to_u8
from .diffusion import NoiseSchedule, build_schedule, ddim_step, make_ddim_ladder
from .padnet import Batch, PadNet, decode_image, encode_image, latent_to_pose, parameter_count
from .trainkit import TrainConfig, train_pipeline

__all__ = [
    "PlanResult",
    "EpisodeLog",
    "EvalReport",
    "REPORT_HEADER",
    "SCALING_HEADER",
    "Policy",
    "PadPolicy",
    "ExpertPolicy",
    "HoldPolicy",
    "plan",
    "rollout",
    "rollout_many",
    "evaluate",
    "ExperimentConfig",
    "ablate",
    "scaling_sweep",
    "config_hash",
]

REPORT_HEADER = ["task", "trials", "successes", "rate", "mean_len", "config_hash"]
SCALING_HEADER = ["preset", "params", "gflops", "success_rate"]


@dataclass
class PlanResult:
    frames: np.ndarray  # [k, H, W, 3] decoded pixels in [0, 1]
    poses: np.ndarray  # [k, pose_dim], inside the workspace
    depths: np.ndarray | None  # [k, H, W, 1]
    n_steps: int


@dataclass
class Observation:
    frame: np.ndarray  # [32, 32, 3] float in [0, 1]
    pose: np.ndarray
    instr: int
    depth: np.ndarray | None = None


def observe(state: bw.EnvState, with_depth: bool = False) -> Observation:
    frame = to_u8(bw.render_rgb(state)).astype(np.float32) / 255.0
    return Observation(frame, state.pose.astype(np.float32), state.task.instr_id,
                       bw.render_depth(state) if with_depth else None)


@torch.no_grad()
def plan_batch(
    model: PadNet,
    obs: list[Observation],
    seeds: list[int],
    sched: NoiseSchedule | None = None,
    n_steps: int | None = None,
) -> list[PlanResult]:
    """Joint DDIM denoising of future frames, poses (and depths) for each observation."""
    cfg = model.cfg
    sched = sched or build_schedule(cfg.T)
    n_steps = n_steps or cfg.n_ddim
    B = len(obs)
    d, k, c = cfg.latent_size, cfg.k, cfg.img_channels
    dtype = next(model.parameters()).dtype
    if sched.T != cfg.T:
        raise ValueError("schedule length does not match the model config")

    frames = torch.from_numpy(np.stack([o.frame for o in obs]).astype(np.float32))
    if frames.shape[1] != cfg.img_size:
        raise ValueError(f"observation size {frames.shape[1]} != configured {cfg.img_size}")
    batch = Batch(
        cond_I=encode_image(frames, d),
        target_I=None,
        instr=torch.tensor([o.instr for o in obs]),
        cond_A=torch.from_numpy(np.stack([o.pose[: cfg.pose_dim] for o in obs]).astype(np.float32)),
        has_A=torch.ones(B, dtype=torch.bool),
    )
    shapes = {"I": (k * c, d, d), "A": (k * cfg.pose_dim,)}
    if cfg.depth_enabled:
        if any(o.depth is None for o in obs):
            raise ValueError("depth-enabled model needs depth observations")
        dE = cfg.depth_size
        batch.cond_E = encode_image(torch.from_numpy(np.stack([o.depth for o in obs])), dE)
        batch.has_E = torch.ones(B, dtype=torch.bool)
        shapes["E"] = (k, dE, dE)
    batch = batch.to(dtype)

    z = {m: torch.empty(B, *s, dtype=dtype) for m, s in shapes.items()}
    for j, seed in enumerate(seeds):
        g = torch.Generator().manual_seed(int(seed))
        for m, s in shapes.items():
            z[m][j] = torch.randn(s, generator=g, dtype=torch.float32).to(dtype)

    ladder = make_ddim_ladder(sched.T, n_steps)
    for t, t_prev in ladder:
        eps = model(batch, z, torch.full((B,), t, dtype=torch.long))
        z = {m: ddim_step(z[m], t, t_prev, eps[m], sched) for m in z}

    out = []
    for j in range(B):
        fr = decode_image(z["I"][j].reshape(k, c, d, d).float(), cfg.img_size).numpy()
        poses = latent_to_pose(z["A"][j].reshape(k, cfg.pose_dim).float()).numpy()
        depths = None
        if "E" in z:
            depths = decode_image(z["E"][j].reshape(k, 1, cfg.depth_size, cfg.depth_size).float(),
                                  cfg.depth_size).numpy()
        out.append(PlanResult(fr, poses, depths, len(ladder)))
    return out


def plan(model: PadNet, obs: Observation, seed: int = 0, sched: NoiseSchedule | None = None) -> PlanResult:
    return plan_batch(model, [obs], [seed], sched)[0]


# ---------------------------------------------------------------------------
# policies


class Policy(Protocol):
    with_depth: bool

    def act(self, obs: list[Observation], states: list[bw.EnvState], plan_index: list[int],
            env_seeds: list[int]) -> list[tuple[np.ndarray, PlanResult | None]]: ...


class PadPolicy:
    """Plans with the network and hands back the first predicted pose."""

    def __init__(self, model: PadNet, base_seed: int = 0, sched: NoiseSchedule | None = None):
        self.model = model.eval()
        self.base_seed = base_seed
        self.sched = sched or build_schedule(model.cfg.T)
        self.with_depth = model.cfg.depth_enabled

    def act(self, obs, states, plan_index, env_seeds):
        seeds = [(self.base_seed ^ (s * 7919)) ^ i for s, i in zip(env_seeds, plan_index)]
        plans = plan_batch(self.model, obs, seeds, self.sched)
        return [(p.poses[0].astype(np.float64), p) for p in plans]


class ExpertPolicy:
    """Scripted expert behind the policy interface."""

    with_depth = False

    def act(self, obs, states, plan_index, env_seeds):
        return [(bw.expert_action(s), None) for s in states]


class HoldPolicy:
    """Always asks for the current pose."""

    with_depth = False

    def act(self, obs, states, plan_index, env_seeds):
        return [(s.pose.copy(), None) for s in states]


@dataclass
class EpisodeLog:
    task: str
    seed: int
    success: bool
    length: int
    poses: list = field(default_factory=list)
    frames: list = field(default_factory=list)
    plans: list = field(default_factory=list)  # (env step index, condition frame, PlanResult)


def rollout_many(
    policy: Policy,
    jobs: list[tuple[int, bw.TaskSpec]],
    max_steps: int = 60,
    n_distractors: int = 1,
    keep_frames: bool = False,
) -> list[EpisodeLog]:
    """Receding-horizon rollouts; environments needing a plan are batched together.

    Each cycle renders the current observation, asks the policy for a pose,
    then steps toward it for at most ceil(dist / V_MAX) + 2 env steps, until
    reached or stalled, before planning again.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    states = [bw.reset(seed, task, n_distractors) for seed, task in jobs]
    logs = [EpisodeLog(task.instruction, seed, False, 0) for seed, task in jobs]
    plan_idx = [0] * len(jobs)
    active = list(range(len(jobs)))
    for j in active:
        logs[j].poses.append(states[j].pose.copy())
        if keep_frames:
            logs[j].frames.append(bw.render_rgb(states[j]))

    while active:
        obs = [observe(states[j], policy.with_depth) for j in active]
        acts = policy.act(obs, [states[j] for j in active], [plan_idx[j] for j in active],
                          [jobs[j][0] for j in active])
        still = []
        for j, (target, pr) in zip(active, acts):
            plan_idx[j] += 1
            st = states[j]
            if keep_frames and pr is not None:
                logs[j].plans.append((st.steps, obs[active.index(j)].frame, pr))
            target = np.clip(np.asarray(target, dtype=np.float64), 0.0, 1.0)
            budget = math.ceil(float(np.linalg.norm(target[:3] - st.pose[:3])) / bw.V_MAX) + 2
            done = False
            for _ in range(budget):
                prev = st.pose.copy()
                st = bw.step(st, target)
                logs[j].poses.append(st.pose.copy())
                if keep_frames:
                    logs[j].frames.append(bw.render_rgb(st))
                if bw.check_success(st):
                    logs[j].success = True
                    done = True
                    break
                if st.steps >= max_steps:
                    done = True
                    break
                reached = np.allclose(st.pose[:3], target[:3], atol=1e-9)
                stalled = np.array_equal(prev, st.pose)
                if reached or stalled:
                    break
            states[j] = st
            logs[j].length = st.steps
            if not done:
                still.append(j)
        active = still
    return logs


def rollout(env_seed: int, task: bw.TaskSpec, policy: Policy, max_steps: int = 60,
            n_distractors: int = 1, keep_frames: bool = False) -> tuple[bool, int, EpisodeLog]:
    log = rollout_many(policy, [(env_seed, task)], max_steps, n_distractors, keep_frames)[0]
    return log.success, log.length, log


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    rows: list[dict]
    episodes: list[EpisodeLog]
    config_hash: str

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=REPORT_HEADER, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow(r)
        return path

    def write_episodes(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["task", "seed", "success", "length"])
            for e in self.episodes:
                w.writerow([e.task, e.seed, int(e.success), e.length])
        return path

    @property
    def overall_rate(self) -> float:
        trials = sum(r["trials"] for r in self.rows)
        return sum(r["successes"] for r in self.rows) / trials if trials else 0.0


def config_hash(*parts) -> str:
    blob = json.dumps([_jsonable(p) for p in parts], sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _jsonable(x):
    if dataclasses.is_dataclass(x):
        return dataclasses.asdict(x)
    return x


def evaluate(
    policy: Policy,
    tasks: list[bw.TaskSpec],
    n_trials: int,
    seeds: list[int] | None = None,
    max_steps: int = 60,
    n_distractors: int = 1,
    cfg_hash: str = "",
    jobs: int = 1,
) -> EvalReport:
    """``n_trials`` rollouts per task; seeds default to 0..n_trials-1."""
    seeds = list(range(n_trials)) if seeds is None else list(seeds)[:n_trials]
    if len(seeds) < n_trials:
        raise ValueError("fewer seeds than trials")
    all_jobs = [(s, t) for t in tasks for s in seeds]
    if not all_jobs:
        return EvalReport([], [], cfg_hash)
    logs = _run_jobs(policy, all_jobs, max_steps, n_distractors, jobs)
    rows = []
    for t in tasks:
        eps = [e for e in logs if e.task == t.instruction]
        succ = sum(e.success for e in eps)
        rows.append({
            "task": t.instruction,
            "trials": len(eps),
            "successes": succ,
            "rate": repr(succ / len(eps)),
            "mean_len": repr(float(np.mean([e.length for e in eps]))),
            "config_hash": cfg_hash,
        })
    return EvalReport(rows, logs, cfg_hash)


def _run_jobs(policy, all_jobs, max_steps, n_distractors, jobs):
    if jobs <= 1:
        return rollout_many(policy, all_jobs, max_steps, n_distractors)
    from concurrent.futures import ThreadPoolExecutor

    chunks = [all_jobs[i::jobs] for i in range(jobs)]
    with ThreadPoolExecutor(jobs) as ex:
        parts = list(ex.map(lambda c: rollout_many(policy, c, max_steps, n_distractors), chunks))
    # restore the original job order
    by_key = {(e.seed, e.task): e for part in parts for e in part}
    return [by_key[(s, t.instruction)] for s, t in all_jobs]


# ---------------------------------------------------------------------------
# experiments


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce a train + eval run."""

    preset: str = "mini"
    model: dict = field(default_factory=dict)  # PadConfig overrides
    families: list[str] = field(default_factory=lambda: ["reach"])
    colors: list[str] = field(default_factory=lambda: ["red", "blue"])
    episodes: int = 200
    video_episodes: int = 200
    n_distractors: int = 1
    disturb_video: bool = True
    data_seed: int = 0
    pretrain_steps: int = 3000
    train: dict = field(default_factory=lambda: {"total_steps": 5000, "batch": 16, "video_fraction": 0.25})
    eval_trials: int = 25
    eval_seed: int = 10_000
    max_steps: int = 60
    plan_seed: int = 0

    def model_config(self) -> PadConfig:
        return preset(self.preset, **self.model)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train)

    def tasks(self) -> list[bw.TaskSpec]:
        return [bw.make_task(f, c) for f in self.families for c in self.colors]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(**d)


VARIANTS = ("full", "no_img", "no_cotrain", "with_depth")


def variant_config(variant: str, exp: ExperimentConfig) -> ExperimentConfig:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    exp = dataclasses.replace(exp, model=dict(exp.model), train=dict(exp.train))
    if variant == "no_img":
        exp.train["no_img"] = True
    elif variant == "no_cotrain":
        exp.pretrain_steps = 0
        exp.train["video_fraction"] = 0.0
    elif variant == "with_depth":
        exp.model["depth_enabled"] = True
    return exp


def build_data(exp: ExperimentConfig):
    depth = exp.model_config().depth_enabled
    robot = expert_dataset(exp.families, exp.colors, exp.episodes, exp.data_seed,
                           exp.n_distractors, with_depth=depth)
    video = expert_dataset(exp.families, exp.colors, exp.video_episodes, exp.data_seed + 1,
                           exp.n_distractors, video_only=True, disturb=exp.disturb_video)
    return robot, video


def run_experiment(exp: ExperimentConfig, out_dir: str | Path, robot=None, video=None) -> EvalReport:
    """Generate data (unless given), train both phases, evaluate, write the report."""
    from .checkpoint import load_checkpoint

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if robot is None or video is None:
        robot, video = build_data(exp)
    cfg = exp.model_config()
    ckpt = train_pipeline(cfg, robot, video, out, exp.pretrain_steps, exp.train_config())
    model, _, _ = load_checkpoint(ckpt)
    seeds = [exp.eval_seed + j for j in range(exp.eval_trials)]
    report = evaluate(PadPolicy(model, exp.plan_seed), exp.tasks(), exp.eval_trials, seeds,
                      exp.max_steps, exp.n_distractors, config_hash(exp.to_dict()))
    report.write_csv(out / "eval_report.csv")
    report.write_episodes(out / "episodes.csv")
    return report


def ablate(variant: str, exp: ExperimentConfig, out_dir: str | Path) -> EvalReport:
    return run_experiment(variant_config(variant, exp), Path(out_dir) / variant)


def scaling_sweep(presets: list[str], exp: ExperimentConfig, out_dir: str | Path,
                  train_and_eval: bool = True) -> list[dict]:
    """(preset, params, gflops, success_rate) rows, also written as ``scaling.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    robot = video = None
    for name in presets:
        cfg = preset(name)
        row = {"preset": name, "params": parameter_count(PadNet(cfg)), "gflops": repr(estimate_flops(cfg)),
               "success_rate": ""}
        if train_and_eval:
            e = dataclasses.replace(exp, preset=name, model={})
            if robot is None:
                robot, video = build_data(e)
            report = run_experiment(e, out / name.replace("/", "_"), robot, video)
            row["success_rate"] = repr(report.overall_rate)
        rows.append(row)
    with open(out / "scaling.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SCALING_HEADER, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return rows


def save_strip(log: EpisodeLog, path: str | Path, interval: int = 4) -> Path | None:
    """PNG per plan: condition | k predicted frames | k realized frames."""
    from PIL import Image

    if not log.plans or not log.frames:
        return None
    rows = []
    for step_idx, cond, pr in log.plans:
        k = len(pr.frames)
        real = [log.frames[min(step_idx + (j + 1) * interval, len(log.frames) - 1)] for j in range(k)]
        rows.append(np.concatenate([cond, *pr.frames, *real], axis=1))
    img = to_u8(np.concatenate(rows, axis=0))
    Image.fromarray(img).resize((img.shape[1] * 4, img.shape[0] * 4), Image.NEAREST).save(path)
    return Path(path)
