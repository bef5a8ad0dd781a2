"""Quick invariant suite shipped with the package (``pad selftest``)."""

from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import blockworld as bw
from . import numcore as nc
from .checkpoint import load_checkpoint, save_checkpoint
from .config import preset
from .datagen import expert_dataset
from .datastore import mixed_batch, read_episode, write_episode
from .diffusion import build_schedule, ddim_step, make_ddim_ladder, posterior_mean, q_sample
from .padnet import Batch, action_path_parameters, build_model

D = torch.float64


@dataclass
class Check:
    name: str
    ok: bool
    detail: str
    seconds: float


def _randomize(model, seed):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(0.3 * torch.randn(p.shape, generator=g, dtype=D).to(p.dtype))
    return model


def _batch(cfg, B, seed, has_A, has_E=None):
    g = torch.Generator().manual_seed(seed)
    d, k, c = cfg.latent_size, cfg.k, cfg.img_channels
    b = Batch(
        cond_I=torch.randn(B, c, d, d, generator=g, dtype=D),
        target_I=torch.randn(B, k * c, d, d, generator=g, dtype=D),
        instr=torch.randint(0, cfg.instr_vocab_size, (B,), generator=g),
        cond_A=torch.rand(B, cfg.pose_dim, generator=g, dtype=D),
        target_A=torch.randn(B, k * cfg.pose_dim, generator=g, dtype=D),
        has_A=torch.as_tensor(has_A),
    )
    if cfg.depth_enabled:
        dE = cfg.depth_size
        b.cond_E = torch.randn(B, 1, dE, dE, generator=g, dtype=D)
        b.target_E = torch.randn(B, k, dE, dE, generator=g, dtype=D)
        b.has_E = torch.as_tensor(has_E)
    return b


def check_primitives() -> tuple[bool, str]:
    g = torch.Generator().manual_seed(0)
    worst = 0.0
    ops = {
        "matmul": lambda a, b: nc.matmul(a, b).sum(),
        "softmax": lambda a, b: (nc.softmax(a) * b).sum(),
        "layer_norm": lambda a, b: (nc.layer_norm(a) * b).sum(),
        "gelu": lambda a, b: (nc.gelu(a) * b).sum(),
        "silu": lambda a, b: (nc.silu(a) * b).sum(),
    }
    for name, f in ops.items():
        for _ in range(5):
            a = torch.randn(3, 4, generator=g, dtype=D)
            b = torch.randn(4, 2, generator=g, dtype=D) if name == "matmul" else torch.randn(3, 4, generator=g, dtype=D)
            worst = max(worst, nc.grad_check(f, a, b))
    return worst <= 1e-4, f"max rel err {worst:.2e}"


def check_diffusion() -> tuple[bool, str]:
    sched = build_schedule()
    g = torch.Generator().manual_seed(0)
    z0 = torch.randn(64, generator=g, dtype=D)
    eps = torch.randn(64, generator=g, dtype=D)
    rt = max(float((posterior_mean(q_sample(z0, t, eps, sched), t, eps, sched) - z0).abs().max())
             for t in range(1, sched.T + 1))
    z = q_sample(z0, sched.T, eps, sched)
    for t, t_prev in make_ddim_ladder(sched.T, 75):
        e = (z - sched.abar(t).sqrt() * z0) / (1 - sched.abar(t)).sqrt()
        z = ddim_step(z, t, t_prev, e, sched)
    ddim = float((z - z0).abs().max())
    return max(rt, ddim) <= 1e-5, f"round trip {rt:.1e}, ddim {ddim:.1e}"


@torch.no_grad()
def check_masking() -> tuple[bool, str]:
    worst = 0.0
    for seed in range(5):
        cfg = preset("tiny", depth_enabled=seed % 2 == 0)
        model = _randomize(build_model(cfg, seed=seed).double(), seed)
        b = _batch(cfg, 3, seed, [True, False, seed % 3 == 0], [False, True, True])
        t = torch.tensor([1, 500, 1000])
        seq = model.tokenize(b, b.targets())
        c = model.condition(t, b.instr)
        full = model.trunk(seq.tokens, seq.attn_mask, c)
        for j in range(3):
            idx = seq.attn_mask[j].nonzero().squeeze(1)
            one = model.trunk(seq.tokens[j : j + 1, idx], torch.ones(1, len(idx), dtype=torch.bool), c[j : j + 1])
            worst = max(worst, float((one[0] - full[j, idx]).abs().max()))
    return worst <= 1e-5, f"max gap {worst:.1e}"


def check_isolation() -> tuple[bool, str]:
    cfg = preset("tiny")
    model = _randomize(build_model(cfg).double(), 3)
    b = _batch(cfg, 4, 0, [False] * 4)
    out = model(b, b.targets(), torch.tensor([3, 30, 300, 900]))
    out["I"].square().mean().backward()
    leaks = [n for n, p in action_path_parameters(model).items() if p.grad is not None and bool(p.grad.ne(0).any())]
    return not leaks, f"nonzero action-path grads: {leaks or 'none'}"


def check_arithmetic() -> tuple[bool, str]:
    from .config import count_tokens

    tokens = [count_tokens(preset(n))[3] for n in ("XL/2", "XL/4", "XL/8")]
    xl = preset("XL/2")
    ok = tokens == [257, 65, 17] and xl.cond_channels_I == 16 and xl.action_input_len == 28
    return ok, f"tokens {tokens}"


def check_data() -> tuple[bool, str]:
    robot = expert_dataset(["reach"], ["red"], 2, seed=0)
    video = [e.video_only() for e in robot]
    rng = np.random.default_rng(0)
    counts = {sum(not e.has_A for e in mixed_batch(robot, video, 16, 0.25, rng)) for _ in range(200)}
    with tempfile.TemporaryDirectory() as tmp:
        write_episode(robot[0], Path(tmp) / "e.pade")
        same = read_episode(Path(tmp) / "e.pade") == robot[0]
        model = _randomize(build_model(preset("tiny")), 1)
        a = save_checkpoint(Path(tmp) / "a.padc", model).read_bytes()
        b = save_checkpoint(Path(tmp) / "b.padc", load_checkpoint(Path(tmp) / "a.padc")[0]).read_bytes()
    return counts == {4} and same and a == b, f"video rows per batch {sorted(counts)}"


def check_expert() -> tuple[bool, str]:
    wins = 0
    for fam in bw.FAMILIES:
        for seed in range(10):
            st = bw.reset(seed, bw.make_task(fam), 1)
            for _ in range(60):
                st = bw.step(st, bw.expert_action(st))
                if bw.check_success(st):
                    wins += 1
                    break
    n = 10 * len(bw.FAMILIES)
    return wins == n, f"{wins}/{n} expert successes"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "primitive gradients": check_primitives,
    "diffusion identities": check_diffusion,
    "mask equivalence": check_masking,
    "co-training isolation": check_isolation,
    "token arithmetic": check_arithmetic,
    "data and checkpoint formats": check_data,
    "scripted expert": check_expert,
}


def run_all() -> list[Check]:
    out = []
    for name, fn in CHECKS.items():
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as e:  # a crash is a failed check, not a crashed suite
            ok, detail = False, f"{type(e).__name__}: {e}"
        out.append(Check(name, bool(ok), detail, time.perf_counter() - t0))
    return out
