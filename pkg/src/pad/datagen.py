"""Scripted demonstrations recorded as episodes."""

from __future__ import annotations

import numpy as np

from . import blockworld as bw
from .datastore import Episode

__all__ = ["to_u8", "record_expert", "expert_dataset"]


def to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def _disturb(img: np.ndarray, tint: np.ndarray) -> np.ndarray:
    """Recolor background pixels; emulates a camera/background domain gap."""
    out = img.copy()
    bg = np.all(np.isclose(img, bw.BACKGROUND, atol=1e-6), axis=-1)
    out[bg] = np.clip(np.asarray(bw.BACKGROUND) + tint, 0.0, 1.0)
    return out


def record_expert(
    seed: int,
    task: bw.TaskSpec,
    n_distractors: int = 1,
    max_steps: int = 60,
    with_depth: bool = False,
    video_only: bool = False,
    disturb: bool = False,
) -> Episode:
    """Roll out the scripted expert and keep every observed frame and pose."""
    state = bw.reset(seed, task, n_distractors)
    tint = np.random.default_rng([seed, 7]).uniform(-0.15, 0.15, size=3) if disturb else None
    frames, poses, depths = [], [], []

    def observe(s):
        img = bw.render_rgb(s)
        frames.append(to_u8(_disturb(img, tint) if disturb else img))
        poses.append(s.pose.astype(np.float32))
        depths.append(bw.render_depth(s))

    observe(state)
    for _ in range(max_steps):
        state = bw.step(state, bw.expert_action(state, task))
        observe(state)
        if bw.check_success(state, task):
            break
    if video_only:
        return Episode(task.instr_id, np.stack(frames))
    return Episode(
        task.instr_id,
        np.stack(frames),
        poses=np.stack(poses),
        depths=np.stack(depths) if with_depth else None,
    )


def expert_dataset(
    families: list[str],
    colors: list[str],
    n_episodes: int,
    seed: int,
    n_distractors: int = 1,
    with_depth: bool = False,
    video_only: bool = False,
    disturb: bool = False,
) -> list[Episode]:
    """``n_episodes`` episodes cycling over (family, color) pairs."""
    tasks = [bw.make_task(f, c) for f in families for c in (colors if f in ("reach", "pick", "place", "push") else ["red"])]
    # dedupe families that ignore color
    seen, uniq = set(), []
    for t in tasks:
        if t.instruction not in seen:
            seen.add(t.instruction)
            uniq.append(t)
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**31 - 1, size=n_episodes)
    return [
        record_expert(int(s), uniq[n % len(uniq)], n_distractors, with_depth=with_depth,
                      video_only=video_only, disturb=disturb)
        for n, s in enumerate(seeds)
    ]
