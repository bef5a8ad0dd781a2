import numpy as np
import pytest
import torch

from pad.config import PadConfig, preset
from pad.padnet import Batch, PadNet, build_model


def randomize(model: torch.nn.Module, seed: int = 0, scale: float = 0.3) -> torch.nn.Module:
    """Overwrite every parameter with N(0, scale^2) so no path is zero-initialized."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(scale * torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype))
    return model


def random_batch(cfg: PadConfig, B: int, seed: int = 0, has_A=None, has_E=None, dtype=torch.float32) -> Batch:
    g = torch.Generator().manual_seed(seed)
    d, k, c = cfg.latent_size, cfg.k, cfg.img_channels

    def r(*s):
        return torch.randn(*s, generator=g, dtype=dtype)

    batch = Batch(
        cond_I=r(B, c, d, d),
        target_I=r(B, k * c, d, d),
        instr=torch.randint(0, cfg.instr_vocab_size, (B,), generator=g),
        cond_A=torch.rand(B, cfg.pose_dim, generator=g, dtype=dtype),
        target_A=r(B, k * cfg.pose_dim),
        has_A=torch.ones(B, dtype=torch.bool) if has_A is None else torch.as_tensor(has_A),
    )
    if cfg.depth_enabled:
        dE = cfg.depth_size
        batch.cond_E = r(B, 1, dE, dE)
        batch.target_E = r(B, k, dE, dE)
        batch.has_E = torch.ones(B, dtype=torch.bool) if has_E is None else torch.as_tensor(has_E)
    return batch


def noise_for(batch: Batch, seed: int = 1) -> dict:
    g = torch.Generator().manual_seed(seed)
    return {m: torch.randn(z.shape, generator=g, dtype=z.dtype) for m, z in batch.targets().items()}


@pytest.fixture
def tiny_cfg() -> PadConfig:
    return preset("tiny")


@pytest.fixture
def tiny_model(tiny_cfg) -> PadNet:
    return build_model(tiny_cfg, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# acceptance criteria record their outcome here; printed once at the end of the run
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'}: {name} ({detail})")
