"""The joint image/action(/depth) denoising transformer.

Condition latents are stacked channel-wise with the noised future latents,
each modality is turned into tokens, and one masked DiT trunk predicts the
noise for every present modality at once. Absent modalities keep their slots
in the token layout but are masked out of attention and dropped on output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import PadConfig, count_tokens
from .numcore import gelu, layer_norm, silu, softmax

__all__ = [
    "Batch",
    "TokenSeq",
    "PadNet",
    "encode_image",
    "decode_image",
    "pose_to_latent",
    "latent_to_pose",
    "patchify",
    "unpatchify",
    "concat_condition",
    "init_weights",
    "timestep_embedding",
    "sincos_2d",
    "action_path_parameters",
]


# ---------------------------------------------------------------------------
# fixed encoders (stand-ins for the frozen VAE)


def encode_image(img: Tensor, latent_size: int) -> Tensor:
    """Pixels ``[..., H, W, C]`` in [0, 1] -> latent ``[..., C, d, d]`` in [-1, 1].

    Patch-mean downsampling by ``H // latent_size`` followed by ``2x - 1``.
    """
    if img.dim() < 3 or img.shape[-3] != img.shape[-2]:
        raise ValueError(f"expected [..., H, H, C] pixels, got {tuple(img.shape)}")
    size = img.shape[-2]
    if size % latent_size:
        raise ValueError(f"image side {size} not a multiple of latent size {latent_size}")
    f = size // latent_size
    x = img.movedim(-1, -3).to(torch.float32) if not img.is_floating_point() else img.movedim(-1, -3)
    if f > 1:
        lead = x.shape[:-3]
        x = x.reshape(-1, *x.shape[-3:])
        x = F.avg_pool2d(x, f)
        x = x.reshape(*lead, *x.shape[-3:])
    return 2.0 * x - 1.0


def decode_image(latent: Tensor, img_size: int) -> Tensor:
    """Inverse of :func:`encode_image` at grid resolution (nearest upsampling)."""
    d = latent.shape[-1]
    f = img_size // d
    x = (latent + 1.0) / 2.0
    if f > 1:
        x = x.repeat_interleave(f, dim=-1).repeat_interleave(f, dim=-2)
    return x.clamp(0.0, 1.0).movedim(-3, -1)


def pose_to_latent(pose: Tensor) -> Tensor:
    # workspace coordinates live in [0, 1]
    return 2.0 * pose - 1.0


def latent_to_pose(latent: Tensor) -> Tensor:
    return ((latent + 1.0) / 2.0).clamp(0.0, 1.0)


# ---------------------------------------------------------------------------
# layout


def patchify(x: Tensor, p: int) -> Tensor:
    """``[B, C, d, d]`` -> ``[B, (d/p)^2, C*p*p]`` with channel-major patch vectors."""
    B, C, d, _ = x.shape
    if d % p:
        raise ValueError(f"grid {d} not divisible by patch {p}")
    g = d // p
    x = x.reshape(B, C, g, p, g, p).permute(0, 2, 4, 1, 3, 5)
    return x.reshape(B, g * g, C * p * p)


def unpatchify(tokens: Tensor, p: int, C: int) -> Tensor:
    B, n, width = tokens.shape
    if width != C * p * p:
        raise ValueError(f"token width {width} != C*p*p = {C * p * p}")
    g = math.isqrt(n)
    if g * g != n:
        raise ValueError(f"{n} tokens do not form a square grid")
    x = tokens.reshape(B, g, g, C, p, p).permute(0, 3, 1, 4, 2, 5)
    return x.reshape(B, C, g * p, g * p)


@dataclass
class Batch:
    """Encoded conditions and targets for a batch; one row per example.

    Rows whose action/depth flag is False hold zero placeholders that the
    network never reads.
    """

    cond_I: Tensor  # [B, c, d, d]
    target_I: Tensor  # [B, k*c, d, d]
    instr: Tensor  # [B] long
    cond_A: Tensor | None = None  # [B, pose_dim]
    target_A: Tensor | None = None  # [B, k*pose_dim]
    has_A: Tensor | None = None  # [B] bool
    cond_E: Tensor | None = None  # [B, 1, dE, dE]
    target_E: Tensor | None = None  # [B, k, dE, dE]
    has_E: Tensor | None = None

    @property
    def size(self) -> int:
        return self.cond_I.shape[0]

    def present(self, m: str) -> Tensor:
        B = self.size
        if m == "I":
            return torch.ones(B, dtype=torch.bool)
        flag = self.has_A if m == "A" else self.has_E
        return torch.zeros(B, dtype=torch.bool) if flag is None else flag

    def targets(self) -> dict[str, Tensor]:
        out = {"I": self.target_I}
        if self.target_A is not None and bool(self.present("A").any()):
            out["A"] = self.target_A
        if self.target_E is not None and bool(self.present("E").any()):
            out["E"] = self.target_E
        return out

    def to(self, dtype) -> "Batch":
        def cv(x):
            return x.to(dtype) if x is not None and x.is_floating_point() else x

        return Batch(**{k: cv(v) for k, v in self.__dict__.items()})


@dataclass
class TokenSeq:
    tokens: Tensor  # [B, n, h]
    attn_mask: Tensor  # [B, n] bool, True = real token
    spans: dict[str, tuple[int, int]] = field(default_factory=dict)


def concat_condition(cond: Tensor, noised: Tensor) -> Tensor:
    """Stack condition latent and noised future latent along dim 1."""
    if cond.shape[0] != noised.shape[0] or cond.shape[2:] != noised.shape[2:]:
        raise ValueError(f"cannot stack {tuple(cond.shape)} with {tuple(noised.shape)}")
    return torch.cat([cond, noised], dim=1)


def timestep_embedding(t: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


# ---------------------------------------------------------------------------
# network


class PoseMLP(nn.Module):
    """One hidden layer of width ``hidden`` with SiLU."""

    def __init__(self, d_in: int, hidden: int, d_out: int):
        super().__init__()
        self.fc1 = nn.Linear(d_in, hidden)
        self.fc2 = nn.Linear(hidden, d_out)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(silu(self.fc1(x)))


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class DiTBlock(nn.Module):
    def __init__(self, h: int, n_heads: int, mlp_ratio: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(h, 3 * h)
        self.proj = nn.Linear(h, h)
        self.fc1 = nn.Linear(h, mlp_ratio * h)
        self.fc2 = nn.Linear(mlp_ratio * h, h)
        self.ada = nn.Linear(h, 6 * h)

    def attention(self, x: Tensor, key_mask: Tensor) -> Tensor:
        B, n, h = x.shape
        nh = self.n_heads
        q, k, v = self.qkv(x).reshape(B, n, 3, nh, h // nh).permute(2, 0, 3, 1, 4)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(h // nh)
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        w = softmax(scores, axis=-1)
        out = (w @ v).transpose(1, 2).reshape(B, n, h)
        return self.proj(out)

    def forward(self, x: Tensor, c: Tensor, key_mask: Tensor) -> Tensor:
        s1, sc1, g1, s2, sc2, g2 = self.ada(silu(c)).chunk(6, dim=-1)
        x = x + g1.unsqueeze(1) * self.attention(modulate(layer_norm(x), s1, sc1), key_mask)
        x = x + g2.unsqueeze(1) * self.fc2(gelu(self.fc1(modulate(layer_norm(x), s2, sc2))))
        return x


class PadNet(nn.Module):
    def __init__(self, cfg: PadConfig):
        super().__init__()
        self.cfg = cfg
        h = cfg.hidden
        c, k, p = cfg.img_channels, cfg.k, cfg.patch_I
        self.T_I, self.T_A, self.T_E, self.n_tokens = count_tokens(cfg)
        self.spans = {"I": (0, self.T_I), "A": (self.T_I, self.T_I + 1)}
        if cfg.depth_enabled:
            self.spans["E"] = (self.T_I + 1, self.n_tokens)

        self.embed_I = nn.Linear((k + 1) * c * p * p, h)
        self.pose_enc = PoseMLP(cfg.pose_dim, h, cfg.pose_dim)
        self.embed_A = nn.Linear(cfg.action_input_len, h)
        if cfg.depth_enabled:
            self.embed_E = nn.Linear((k + 1) * cfg.patch_E**2, h)
        self.pos = nn.Parameter(torch.zeros(self.n_tokens, h))

        self.t_fc1 = nn.Linear(cfg.t_embed_dim, h)
        self.t_fc2 = nn.Linear(h, h)
        self.instr = nn.Embedding(cfg.instr_vocab_size, h)
        self.instr_proj = nn.Linear(h, h)

        self.blocks = nn.ModuleList(DiTBlock(h, cfg.n_heads, cfg.mlp_ratio) for _ in range(cfg.n_layers))
        self.final_ada = nn.Linear(h, 2 * h)
        self.out_I = nn.Linear(h, k * c * p * p)
        self.pose_dec = PoseMLP(h, h, k * cfg.pose_dim)
        if cfg.depth_enabled:
            self.out_E = nn.Linear(h, k * cfg.patch_E**2)

    # -- conditioning -------------------------------------------------------
    def condition(self, t: Tensor, instr: Tensor) -> Tensor:
        if bool((t < 1).any()) or bool((t > self.cfg.T).any()):
            raise ValueError(f"timestep outside [1, {self.cfg.T}]")
        if bool((instr < 0).any()) or bool((instr >= self.cfg.instr_vocab_size).any()):
            raise ValueError("instruction id outside vocabulary")
        dtype = self.t_fc1.weight.dtype
        te = timestep_embedding(t, self.cfg.t_embed_dim).to(dtype)
        te = self.t_fc2(silu(self.t_fc1(te)))
        return te + self.instr_proj(self.instr(instr))

    def encode_pose(self, pose: Tensor) -> Tensor:
        return self.pose_enc(pose_to_latent(pose))

    # -- tokens ---------------------------------------------------------------
    def tokenize(self, batch: Batch, noised: dict[str, Tensor]) -> TokenSeq:
        cfg = self.cfg
        B = batch.size
        h = cfg.hidden
        L_I = concat_condition(batch.cond_I, noised["I"])
        parts = [self.embed_I(patchify(L_I, cfg.patch_I))]
        masks = [torch.ones(B, self.T_I, dtype=torch.bool)]

        has_A = batch.present("A")
        if "A" in noised and bool(has_A.any()):
            L_A = torch.cat([self.encode_pose(batch.cond_A), noised["A"]], dim=-1)
            parts.append(self.embed_A(L_A).unsqueeze(1))
        else:
            parts.append(torch.zeros(B, 1, h, dtype=parts[0].dtype))
            has_A = torch.zeros(B, dtype=torch.bool)
        masks.append(has_A[:, None])

        if cfg.depth_enabled:
            has_E = batch.present("E")
            if "E" in noised and bool(has_E.any()):
                L_E = concat_condition(batch.cond_E, noised["E"])
                parts.append(self.embed_E(patchify(L_E, cfg.patch_E)))
            else:
                parts.append(torch.zeros(B, self.T_E, h, dtype=parts[0].dtype))
                has_E = torch.zeros(B, dtype=torch.bool)
            masks.append(has_E[:, None].expand(B, self.T_E))

        mask = torch.cat(masks, dim=1)
        tokens = torch.cat(parts, dim=1) + self.pos
        tokens = tokens * mask.unsqueeze(-1).to(tokens.dtype)
        return TokenSeq(tokens, mask, dict(self.spans))

    def trunk(self, tokens: Tensor, key_mask: Tensor, c: Tensor) -> Tensor:
        x = tokens
        for blk in self.blocks:
            x = blk(x, c, key_mask)
        shift, scale = self.final_ada(silu(c)).chunk(2, dim=-1)
        return modulate(layer_norm(x), shift, scale)

    def detokenize(self, out: TokenSeq) -> dict[str, Tensor]:
        cfg = self.cfg
        x, mask = out.tokens, out.attn_mask
        a, b = self.spans["I"]
        res = {"I": unpatchify(self.out_I(x[:, a:b]), cfg.patch_I, cfg.k * cfg.img_channels)}
        a, b = self.spans["A"]
        if bool(mask[:, a].any()):
            res["A"] = self.pose_dec(x[:, a])
        if "E" in self.spans:
            a, b = self.spans["E"]
            if bool(mask[:, a].any()):
                res["E"] = unpatchify(self.out_E(x[:, a:b]), cfg.patch_E, cfg.k)
        return res

    def forward(self, batch: Batch, noised: dict[str, Tensor], t: Tensor) -> dict[str, Tensor]:
        """Noise predictions for every modality present in at least one row."""
        seq = self.tokenize(batch, noised)
        c = self.condition(t, batch.instr)
        seq.tokens = self.trunk(seq.tokens, seq.attn_mask, c)
        return self.detokenize(seq)


def action_path_parameters(model: PadNet) -> dict[str, nn.Parameter]:
    """Parameters touched only by the action modality."""
    return {n: p for n, p in model.named_parameters() if n.split(".")[0] in ("pose_enc", "embed_A", "pose_dec")}


def sincos_2d(dim: int, grid: int) -> Tensor:
    """[grid*grid, dim] fixed 2-D sin-cos table in patchify (row-major) order.

    The first half of the channels encodes the column, the second the row;
    channels beyond a multiple of 4 stay zero.
    """
    q = dim // 4
    out = torch.zeros(grid * grid, dim, dtype=torch.float64)
    if q == 0:
        return out
    omega = 1.0 / 10000 ** (torch.arange(q, dtype=torch.float64) / q)
    rows, cols = torch.meshgrid(torch.arange(grid), torch.arange(grid), indexing="ij")
    for j, coord in enumerate((cols.reshape(-1), rows.reshape(-1))):
        ang = coord[:, None].double() * omega[None]
        out[:, 2 * j * q : (2 * j + 1) * q] = torch.sin(ang)
        out[:, (2 * j + 1) * q : (2 * j + 2) * q] = torch.cos(ang)
    return out


@torch.no_grad()
def init_weights(model: PadNet, seed: int = 0) -> PadNet:
    """Deterministic initialization.

    Plain linears get N(0, 1/fan_in) weights and zero biases. The image
    tokenizer is one single-frame projection replicated over the k+1 channel
    groups. The instruction table (the text-encoder stand-in) gets unit
    normal rows; the projection that feeds it into the conditioning, the adaLN
    modulations, pose encoder/decoder outputs and all final output projections
    start at zero. Positional
    embeddings are learned, but image and depth slots start from a fixed 2-D
    sin-cos grid so every patch knows where it sits from the first step.
    """
    cfg = model.cfg
    g = torch.Generator().manual_seed(seed)

    def normal_(lin: nn.Linear):
        fan_in = lin.weight.shape[1]
        lin.weight.copy_(torch.randn(lin.weight.shape, generator=g, dtype=torch.float64) / math.sqrt(fan_in))
        lin.bias.zero_()

    def zero_(lin: nn.Linear):
        lin.weight.zero_()
        lin.bias.zero_()

    for mod in model.modules():
        if isinstance(mod, nn.Linear):
            normal_(mod)

    # image tokenizer: replicate one frame's projection across k + 1 groups
    c, p, h = cfg.img_channels, cfg.patch_I, cfg.hidden
    base = torch.randn(h, c * p * p, generator=g, dtype=torch.float64) / math.sqrt(c * p * p)
    model.embed_I.weight.copy_(base.repeat(1, cfg.k + 1))
    if cfg.depth_enabled:
        base = torch.randn(h, cfg.patch_E**2, generator=g, dtype=torch.float64) / math.sqrt(cfg.patch_E**2)
        model.embed_E.weight.copy_(base.repeat(1, cfg.k + 1))

    # image/depth slots start from a 2-D sin-cos grid, the action slot from small noise
    model.pos.copy_(0.02 * torch.randn(model.pos.shape, generator=g, dtype=torch.float64))
    a, b = model.spans["I"]
    model.pos[a:b] = sincos_2d(h, cfg.latent_size // cfg.patch_I)
    if cfg.depth_enabled:
        a, b = model.spans["E"]
        model.pos[a:b] = sincos_2d(h, cfg.depth_size // cfg.patch_E)
    model.instr.weight.copy_(torch.randn(model.instr.weight.shape, generator=g, dtype=torch.float64))
    zero_(model.instr_proj)
    for blk in model.blocks:
        zero_(blk.ada)
    zero_(model.final_ada)
    zero_(model.out_I)
    zero_(model.pose_enc.fc2)
    zero_(model.pose_dec.fc2)
    if cfg.depth_enabled:
        zero_(model.out_E)
    return model


def build_model(cfg: PadConfig, seed: int = 0, dtype=torch.float32) -> PadNet:
    return init_weights(PadNet(cfg), seed).to(dtype)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
