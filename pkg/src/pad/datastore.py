"""Episode files, training windows and the robot/video batch mixer.

On-disk layout of one ``.pade`` episode (all little-endian)::

    b"PADE" | u32 version | u32 instruction id | u32 T | u8 flags
    RGB   u8  [T, 32, 32, 3]
    depth f32 [T, 32, 32, 1]      if flags & HAS_DEPTH
    poses f32 [T, pose_dim]       if flags & HAS_POSE

``pose_dim`` is implied by the remaining byte count.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "Episode",
    "TrainingExample",
    "EpisodeFormatError",
    "HAS_POSE",
    "HAS_DEPTH",
    "write_episode",
    "read_episode",
    "episode_bytes",
    "window_indices",
    "sample_window",
    "mixed_batch",
    "save_dataset",
    "load_dataset",
]

MAGIC = b"PADE"
VERSION = 1
HAS_POSE = 1
HAS_DEPTH = 2
FRAME_SHAPE = (32, 32, 3)
DEPTH_SHAPE = (32, 32, 1)
_HEADER = struct.Struct("<4sIIIB")


class EpisodeFormatError(ValueError):
    """A ``.pade`` payload is malformed."""


@dataclass
class Episode:
    instr: int
    frames: np.ndarray  # uint8 [T, 32, 32, 3]
    poses: np.ndarray | None = None  # float32 [T, pose_dim]
    depths: np.ndarray | None = None  # float32 [T, 32, 32, 1]

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.uint8)
        T = len(self.frames)
        if T < 2:
            raise ValueError("an episode needs at least 2 frames")
        if self.frames.shape[1:] != FRAME_SHAPE:
            raise ValueError(f"frames must be [T, 32, 32, 3], got {self.frames.shape}")
        if self.poses is not None:
            self.poses = np.ascontiguousarray(self.poses, dtype=np.float32)
            if self.poses.ndim != 2 or len(self.poses) != T:
                raise ValueError("poses must be [T, pose_dim]")
        if self.depths is not None:
            self.depths = np.ascontiguousarray(self.depths, dtype=np.float32)
            if self.depths.shape != (T, *DEPTH_SHAPE):
                raise ValueError("depths must be [T, 32, 32, 1]")

    @property
    def length(self) -> int:
        return len(self.frames)

    @property
    def is_video(self) -> bool:
        return self.poses is None

    def video_only(self) -> "Episode":
        """Copy without pose or depth streams."""
        return Episode(self.instr, self.frames.copy())

    def __eq__(self, other) -> bool:
        if not isinstance(other, Episode):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and a.tobytes() == b.tobytes()

        return (
            self.instr == other.instr
            and same(self.frames, other.frames)
            and same(self.poses, other.poses)
            and same(self.depths, other.depths)
        )


def episode_bytes(ep: Episode) -> bytes:
    flags = (HAS_POSE if ep.poses is not None else 0) | (HAS_DEPTH if ep.depths is not None else 0)
    chunks = [_HEADER.pack(MAGIC, VERSION, ep.instr, ep.length, flags), ep.frames.tobytes()]
    if ep.depths is not None:
        chunks.append(ep.depths.astype("<f4").tobytes())
    if ep.poses is not None:
        chunks.append(ep.poses.astype("<f4").tobytes())
    return b"".join(chunks)


def write_episode(ep: Episode, path: str | os.PathLike) -> None:
    Path(path).write_bytes(episode_bytes(ep))


def parse_episode(buf: bytes) -> Episode:
    if len(buf) < _HEADER.size:
        raise EpisodeFormatError("truncated header")
    magic, version, instr, T, flags = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise EpisodeFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise EpisodeFormatError(f"unsupported version {version}")
    if flags & ~(HAS_POSE | HAS_DEPTH):
        raise EpisodeFormatError(f"unknown flag bits {flags:#x}")
    off = _HEADER.size
    n_rgb = T * int(np.prod(FRAME_SHAPE))
    n_depth = T * int(np.prod(DEPTH_SHAPE)) * 4 if flags & HAS_DEPTH else 0
    rest = len(buf) - off - n_rgb - n_depth
    if rest < 0:
        raise EpisodeFormatError("truncated payload")
    frames = np.frombuffer(buf, np.uint8, n_rgb, off).reshape(T, *FRAME_SHAPE)
    off += n_rgb
    depths = poses = None
    if flags & HAS_DEPTH:
        depths = np.frombuffer(buf, "<f4", n_depth // 4, off).reshape(T, *DEPTH_SHAPE).astype(np.float32)
        off += n_depth
    if flags & HAS_POSE:
        if rest == 0 or rest % (4 * T):
            raise EpisodeFormatError("pose chunk length is not a multiple of 4*T")
        pose_dim = rest // (4 * T)
        poses = np.frombuffer(buf, "<f4", T * pose_dim, off).reshape(T, pose_dim).astype(np.float32)
    elif rest:
        raise EpisodeFormatError(f"{rest} trailing bytes")
    try:
        return Episode(instr, frames.copy(), poses, depths)
    except ValueError as e:
        raise EpisodeFormatError(str(e)) from e


def read_episode(path: str | os.PathLike) -> Episode:
    return parse_episode(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# windows


@dataclass
class TrainingExample:
    instr: int
    cond_frame: np.ndarray  # uint8 [32, 32, 3]
    target_frames: np.ndarray  # uint8 [k, 32, 32, 3]
    cond_pose: np.ndarray | None = None
    target_poses: np.ndarray | None = None  # [k, pose_dim]
    cond_depth: np.ndarray | None = None
    target_depths: np.ndarray | None = None  # [k, 32, 32, 1]
    start: int = 0
    indices: tuple[int, ...] = ()

    @property
    def has_A(self) -> bool:
        return self.target_poses is not None

    @property
    def has_E(self) -> bool:
        return self.target_depths is not None


def window_indices(s: int, k: int, i: int, T_ep: int) -> list[int]:
    """Targets s+i, ..., s+k*i, clamped to the final frame."""
    if k < 1 or i < 1:
        raise ValueError("k and i must be >= 1")
    if T_ep < 1:
        raise ValueError("empty episode")
    if not 0 <= s < T_ep:
        raise ValueError(f"start {s} outside [0, {T_ep - 1}]")
    return [min(s + j * i, T_ep - 1) for j in range(1, k + 1)]


def sample_window(ep: Episode, k: int, i: int, rng: np.random.Generator, start: int | None = None) -> TrainingExample:
    s = int(rng.integers(ep.length)) if start is None else int(start)
    idx = window_indices(s, k, i, ep.length)
    ex = TrainingExample(ep.instr, ep.frames[s], ep.frames[idx], start=s, indices=tuple(idx))
    if ep.poses is not None:
        ex.cond_pose, ex.target_poses = ep.poses[s], ep.poses[idx]
    if ep.depths is not None:
        ex.cond_depth, ex.target_depths = ep.depths[s], ep.depths[idx]
    return ex


def mixed_batch(
    robot_ds: list[Episode],
    video_ds: list[Episode],
    batch: int,
    video_fraction: float,
    rng: np.random.Generator,
    k: int = 3,
    i: int = 4,
) -> list[TrainingExample]:
    """Exactly floor(batch * video_fraction) video-only examples, rest robot; shuffled."""
    if not 0.0 <= video_fraction <= 1.0:
        raise ValueError("video_fraction must lie in [0, 1]")
    n_video = int(batch * video_fraction)
    n_robot = batch - n_video
    if n_video and not video_ds:
        raise ValueError("video share requested but the video dataset is empty")
    if n_robot and not robot_ds:
        raise ValueError("robot share requested but the robot dataset is empty")
    out = []
    for _ in range(n_robot):
        out.append(sample_window(robot_ds[int(rng.integers(len(robot_ds)))], k, i, rng))
    for _ in range(n_video):
        ep = video_ds[int(rng.integers(len(video_ds)))]
        ex = sample_window(ep, k, i, rng)
        # video examples never carry action or depth streams
        ex.cond_pose = ex.target_poses = ex.cond_depth = ex.target_depths = None
        out.append(ex)
    order = rng.permutation(batch)
    return [out[j] for j in order]


# ---------------------------------------------------------------------------
# directories


def save_dataset(root: str | os.PathLike, episodes: list[Episode], prefix: str = "ep") -> list[dict]:
    """Write episodes plus ``index.json``; appends to an existing index."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    index_path = root / "index.json"
    entries = json.loads(index_path.read_text())["episodes"] if index_path.exists() else []
    for n, ep in enumerate(episodes):
        name = f"{prefix}_{n:05d}.pade"
        write_episode(ep, root / name)
        entries.append({"file": name, "type": "video" if ep.is_video else "robot"})
    index_path.write_text(json.dumps({"episodes": entries}, indent=1, sort_keys=True) + "\n")
    return entries


def load_dataset(root: str | os.PathLike) -> tuple[list[Episode], list[Episode]]:
    """(robot episodes, video-only episodes) listed in ``index.json``."""
    root = Path(root)
    index = json.loads((root / "index.json").read_text())
    robot, video = [], []
    for entry in index["episodes"]:
        ep = read_episode(root / entry["file"])
        (video if entry["type"] == "video" else robot).append(ep)
    return robot, video
