"""Model configuration, named presets, and token / FLOP accounting."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

__all__ = ["PadConfig", "PRESETS", "preset", "count_tokens", "estimate_flops"]


@dataclass(frozen=True)
class PadConfig:
    img_size: int = 32  # pixels per side of rendered frames
    img_channels: int = 3  # latent channels per frame
    latent_size: int = 32  # side of the encoded latent grid
    patch_I: int = 4
    k: int = 3
    pose_dim: int = 4
    depth_enabled: bool = False
    depth_size: int = 32
    patch_E: int = 8
    hidden: int = 128
    n_layers: int = 6
    n_heads: int = 4
    mlp_ratio: int = 4
    T: int = 1000
    n_ddim: int = 75
    instr_vocab_size: int = 24
    frame_interval: int = 4
    t_embed_dim: int = 128

    def __post_init__(self):
        if self.latent_size % self.patch_I:
            raise ValueError(f"latent_size {self.latent_size} not divisible by patch_I {self.patch_I}")
        if self.img_size % self.latent_size:
            raise ValueError("img_size must be a multiple of latent_size")
        if self.depth_enabled and self.depth_size % self.patch_E:
            raise ValueError(f"depth_size {self.depth_size} not divisible by patch_E {self.patch_E}")
        if self.hidden % self.n_heads:
            raise ValueError(f"hidden {self.hidden} not divisible by n_heads {self.n_heads}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 1 <= self.n_ddim <= self.T:
            raise ValueError("n_ddim must lie in [1, T]")

    # derived sizes
    @property
    def cond_channels_I(self) -> int:
        return (self.k + 1) * self.img_channels

    @property
    def action_input_len(self) -> int:
        return (self.k + 1) * self.pose_dim

    @property
    def n_tokens(self) -> int:
        return count_tokens(self)[3]

    def replace(self, **kw) -> "PadConfig":
        return dataclasses.replace(self, **kw)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "PadConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown PadConfig fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, s: str) -> "PadConfig":
        return cls.from_dict(json.loads(s))


# 256px frames -> 32x32x4 latent, 7-d poses, k = 3.
_BIG = dict(img_size=256, img_channels=4, latent_size=32, k=3, pose_dim=7, frame_interval=4)

PRESETS: dict[str, PadConfig] = {
    "XL/2": PadConfig(**_BIG, patch_I=2, hidden=1152, n_layers=28, n_heads=16),
    "XL/4": PadConfig(**_BIG, patch_I=4, hidden=1152, n_layers=28, n_heads=16),
    "XL/8": PadConfig(**_BIG, patch_I=8, hidden=1152, n_layers=28, n_heads=16),
    "L/2": PadConfig(**_BIG, patch_I=2, hidden=1024, n_layers=24, n_heads=16),
    "B/2": PadConfig(**_BIG, patch_I=2, hidden=768, n_layers=12, n_heads=12),
    # desk-scale models trained end to end on the block world
    "mini": PadConfig(),
    "mini-64": PadConfig(hidden=64, n_heads=4),
    "mini-256": PadConfig(hidden=256, n_heads=4),
    "mini-depth": PadConfig(depth_enabled=True),
    "tiny": PadConfig(img_size=8, latent_size=8, patch_I=4, hidden=16, n_layers=2, n_heads=2, t_embed_dim=16,
                      instr_vocab_size=4, depth_size=8, patch_E=4),
}


def preset(name: str, **overrides) -> PadConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return cfg.replace(**overrides) if overrides else cfg


def count_tokens(cfg: PadConfig) -> tuple[int, int, int, int]:
    """(image, action, depth, total) token counts for the fixed combined layout."""
    t_i = (cfg.latent_size // cfg.patch_I) ** 2
    t_a = 1
    t_e = (cfg.depth_size // cfg.patch_E) ** 2 if cfg.depth_enabled else 0
    return t_i, t_a, t_e, t_i + t_a + t_e


def estimate_flops(cfg: PadConfig) -> float:
    """Transformer trunk GFLOPs per forward, one multiply-add counted once.

    Per layer: attention 4*n*h^2 + 2*n^2*h, MLP 2*mlp_ratio*n*h^2.
    """
    n = cfg.n_tokens
    h = cfg.hidden
    attn = 4 * n * h * h + 2 * n * n * h
    mlp = 2 * cfg.mlp_ratio * n * h * h
    return cfg.n_layers * (attn + mlp) / 1e9
