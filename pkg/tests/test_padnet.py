import itertools

import pytest
import torch

from conftest import noise_for, randomize, random_batch
from pad.config import PRESETS, PadConfig, count_tokens, estimate_flops, preset
from pad.diffusion import LossWeights, build_schedule, combined_loss, ddpm_loss, q_sample
from pad.numcore import grad_check
from pad.padnet import (
    Batch,
    PadNet,
    PoseMLP,
    action_path_parameters,
    build_model,
    concat_condition,
    decode_image,
    encode_image,
    init_weights,
    latent_to_pose,
    patchify,
    pose_to_latent,
    sincos_2d,
    unpatchify,
)

D = torch.float64


class TestImageCodec:
    def test_black_and_white(self):
        assert torch.equal(encode_image(torch.zeros(32, 32, 3), 32), -torch.ones(3, 32, 32))
        assert torch.equal(encode_image(torch.ones(64, 64, 3), 32), torch.ones(3, 32, 32))

    def test_checkerboard_at_grid_scale(self):
        cells = (torch.arange(4)[:, None] + torch.arange(4)[None]) % 2
        img = cells.repeat_interleave(2, 0).repeat_interleave(2, 1).float()[..., None].expand(8, 8, 3)
        lat = encode_image(img, 4)
        assert torch.equal(lat[0], 2 * cells.float() - 1)

    def test_decode_inverts_at_grid_resolution(self):
        g = torch.Generator().manual_seed(0)
        grid = torch.rand(2, 8, 8, 3, generator=g)
        img = grid.repeat_interleave(4, 1).repeat_interleave(4, 2)
        assert torch.allclose(decode_image(encode_image(img, 8), 32), img, atol=1e-6)

    def test_wrong_shape(self):
        with pytest.raises(ValueError):
            encode_image(torch.zeros(30, 32, 3), 32)
        with pytest.raises(ValueError):
            encode_image(torch.zeros(30, 30, 3), 32)

    def test_pose_latent_bounds(self):
        p = torch.tensor([0.0, 0.5, 1.0, 0.25])
        assert torch.equal(pose_to_latent(p), torch.tensor([-1.0, 0.0, 1.0, -0.5]))
        assert torch.equal(latent_to_pose(torch.tensor([-3.0, 3.0])), torch.tensor([0.0, 1.0]))


class TestPoseMLP:
    def test_shapes(self):
        enc = PoseMLP(7, 32, 7)
        assert enc(torch.zeros(5, 7)).shape == (5, 7)

    def test_zero_weights_zero_latent(self):
        enc = PoseMLP(4, 16, 4)
        with torch.no_grad():
            for p in enc.parameters():
                p.zero_()
        assert torch.equal(enc(torch.randn(3, 4)), torch.zeros(3, 4))

    def test_gradcheck(self):
        enc = randomize(PoseMLP(4, 8, 4).double(), seed=2)
        x = torch.rand(3, 4, dtype=D)
        assert grad_check(lambda v: (enc(v) ** 2).sum(), x) <= 1e-4
        w = enc.fc1.weight.detach().clone()

        def by_weight(wt):
            h = torch.nn.functional.silu(x @ wt.T + enc.fc1.bias)
            return (enc.fc2(h) ** 2).sum()

        assert grad_check(by_weight, w) <= 1e-4

    def test_model_encode_pose_zero_at_init(self, tiny_model):
        assert torch.equal(tiny_model.encode_pose(torch.rand(2, 4)), torch.zeros(2, 4))


class TestConcatCondition:
    def test_image_channels(self):
        cfg = PadConfig(img_channels=3, k=3)
        L = concat_condition(torch.zeros(2, 3, 32, 32), torch.zeros(2, 9, 32, 32))
        assert L.shape[1] == 12 == cfg.cond_channels_I

    @pytest.mark.parametrize("pose_dim,expected", [(7, 28), (4, 16)])
    def test_action_length(self, pose_dim, expected):
        assert PadConfig(pose_dim=pose_dim, k=3).action_input_len == expected

    def test_xl_action_input(self):
        assert PRESETS["XL/2"].action_input_len == 28
        assert PRESETS["XL/2"].cond_channels_I == 16  # 32*32*(4*4)

    def test_mismatch(self):
        with pytest.raises(ValueError):
            concat_condition(torch.zeros(2, 3, 8, 8), torch.zeros(2, 9, 4, 4))


class TestTokenArithmetic:
    @pytest.mark.parametrize(
        "name,expected",
        [("XL/2", (256, 1, 0, 257)), ("XL/4", (64, 1, 0, 65)), ("XL/8", (16, 1, 0, 17)),
         ("L/2", (256, 1, 0, 257)), ("B/2", (256, 1, 0, 257))],
    )
    def test_presets(self, name, expected):
        assert count_tokens(PRESETS[name]) == expected

    def test_desk_mini(self):
        assert count_tokens(preset("mini")) == (64, 1, 0, 65)
        assert count_tokens(preset("mini", depth_enabled=True)) == (64, 1, 16, 81)

    @pytest.mark.parametrize(
        "name,layers,hidden,heads",
        [("XL/2", 28, 1152, 16), ("XL/4", 28, 1152, 16), ("XL/8", 28, 1152, 16), ("L/2", 24, 1024, 16),
         ("B/2", 12, 768, 12)],
    )
    def test_preset_rows(self, name, layers, hidden, heads):
        cfg = PRESETS[name]
        assert (cfg.n_layers, cfg.hidden, cfg.n_heads) == (layers, hidden, heads)

    def test_invalid_patch(self):
        with pytest.raises(ValueError):
            PadConfig(latent_size=32, patch_I=5)
        with pytest.raises(ValueError):
            PadConfig(hidden=130, n_heads=4)

    def test_token_count_ignores_presence(self):
        cfg = preset("tiny", depth_enabled=True)
        model = build_model(cfg)
        for has_A, has_E in itertools.product([True, False], repeat=2):
            b = random_batch(cfg, 2, has_A=[has_A] * 2, has_E=[has_E] * 2)
            noised = {m: z for m, z in b.targets().items()}
            seq = model.tokenize(b, noised)
            assert seq.tokens.shape[1] == cfg.n_tokens


class TestFlops:
    def test_formula(self):
        cfg = PRESETS["XL/2"]
        n, h = 257, 1152
        assert estimate_flops(cfg) == pytest.approx(28 * (12 * n * h * h + 2 * n * n * h) / 1e9)

    def test_xl2_near_reported(self):
        assert abs(estimate_flops(PRESETS["XL/2"]) - 119.1) <= 0.2 * 119.1

    def test_monotone(self):
        base = preset("mini")
        assert estimate_flops(base.replace(hidden=256)) > estimate_flops(base)
        assert estimate_flops(base.replace(n_layers=7)) > estimate_flops(base)
        assert estimate_flops(base.replace(patch_I=2)) > estimate_flops(base)
        assert estimate_flops(base.replace(depth_enabled=True)) > estimate_flops(base)


class TestLayout:
    def test_patchify_round_trip(self):
        x = torch.randn(3, 12, 8, 8)
        assert torch.equal(unpatchify(patchify(x, 4), 4, 12), x)
        assert patchify(x, 4).shape == (3, 4, 12 * 16)

    def test_patch_vector_is_channel_major(self):
        x = torch.arange(2 * 4 * 4).float().reshape(1, 2, 4, 4)
        tok = patchify(x, 2)
        assert tok[0, 0].tolist() == [0, 1, 4, 5, 16, 17, 20, 21]

    def test_bad_layout(self):
        with pytest.raises(ValueError):
            unpatchify(torch.zeros(1, 4, 10), 2, 3)
        with pytest.raises(ValueError):
            patchify(torch.zeros(1, 1, 6, 6), 4)

    def test_output_shapes_and_video_only(self, tiny_cfg):
        model = randomize(build_model(tiny_cfg), 0)
        b = random_batch(tiny_cfg, 3)
        out = model(b, b.targets(), torch.tensor([1, 2, 3]))
        assert out["I"].shape == (3, tiny_cfg.k * tiny_cfg.img_channels, 8, 8)
        assert out["A"].shape == (3, tiny_cfg.k * tiny_cfg.pose_dim)
        b.has_A = torch.zeros(3, dtype=torch.bool)
        out = model(b, b.targets(), torch.tensor([1, 2, 3]))
        assert set(out) == {"I"}


class TestInit:
    def test_zero_output(self, tiny_cfg, tiny_model):
        b = random_batch(tiny_cfg, 4)
        out = tiny_model(b, b.targets(), torch.tensor([5, 50, 500, 1000]))
        assert all(bool((v == 0).all()) for v in out.values())

    def test_zero_output_single_layer(self):
        cfg = preset("tiny", n_layers=1, depth_enabled=True)
        model = build_model(cfg)
        b = random_batch(cfg, 2)
        out = model(b, b.targets(), torch.tensor([3, 4]))
        assert set(out) == {"I", "A", "E"} and all(bool((v == 0).all()) for v in out.values())

    def test_initial_loss_is_noise_energy(self, tiny_cfg, tiny_model):
        sched = build_schedule(tiny_cfg.T)
        b = random_batch(tiny_cfg, 16)
        noise = noise_for(b, 3)
        t = torch.randint(1, 1001, (16,), generator=torch.Generator().manual_seed(0))
        noised = {m: q_sample(z, t, noise[m], sched) for m, z in b.targets().items()}
        out = tiny_model(b, noised, t)
        assert noise["I"].numel() >= 1024
        assert ddpm_loss(out["I"], noise["I"]).item() == pytest.approx(1.0, rel=0.05)

    def test_position_table_follows_patch_order(self):
        cfg = preset("tiny", depth_enabled=True)
        model = build_model(cfg, seed=0)
        p, g = cfg.patch_I, cfg.latent_size // cfg.patch_I
        for r, c in [(0, 1), (1, 0), (1, 1)]:
            img = torch.zeros(1, 1, cfg.latent_size, cfg.latent_size)
            img[0, 0, r * p, c * p] = 1.0
            idx = int(patchify(img, p)[0].abs().sum(-1).nonzero())
            assert idx == r * g + c
            row = sincos_2d(cfg.hidden, g)[idx]
            q = cfg.hidden // 4
            assert row[0] == 0.0 if c == 0 else row[0] == pytest.approx(torch.sin(torch.tensor(float(c))).item())
            assert row[2 * q] == 0.0 if r == 0 else row[2 * q] == pytest.approx(torch.sin(torch.tensor(float(r))).item())
        a, b = model.spans["I"]
        assert torch.equal(model.pos[a:b].double(), sincos_2d(cfg.hidden, g).float().double())
        a, b = model.spans["E"]
        assert torch.equal(model.pos[a:b].double(), sincos_2d(cfg.hidden, cfg.depth_size // cfg.patch_E).float().double())
        act = model.pos[model.spans["A"][0]]
        assert 0 < act.abs().max() < 0.2

    def test_sincos_table_is_distinct(self):
        table = sincos_2d(16, 4)
        assert table.shape == (16, 16)
        assert torch.cdist(table, table).add(torch.eye(16)).min() > 0.1
        assert torch.equal(sincos_2d(6, 2)[:, 4:], torch.zeros(4, 2))

    def test_replicated_tokenizer(self):
        cfg = preset("tiny")
        model = build_model(cfg, seed=3).double()
        c, p = cfg.img_channels, cfg.patch_I
        frame_patch = torch.randn(1, c * p * p, dtype=D)
        stacked = frame_patch.repeat(1, cfg.k + 1)
        W = model.embed_I.weight
        single = frame_patch @ W[:, : c * p * p].T
        assert torch.allclose(stacked @ W.T, (cfg.k + 1) * single, atol=1e-12)

    def test_zero_rules(self, tiny_model):
        assert bool((tiny_model.instr_proj.weight == 0).all()) and bool((tiny_model.instr_proj.bias == 0).all())
        assert tiny_model.instr.weight.std() > 0.5
        assert bool((tiny_model.out_I.weight == 0).all())
        assert bool((tiny_model.pose_dec.fc2.weight == 0).all())
        assert bool((tiny_model.pose_enc.fc2.weight == 0).all())
        assert all(bool((b.ada.weight == 0).all()) for b in tiny_model.blocks)
        assert tiny_model.t_fc1.weight.std() > 0

    def test_instruction_silent_at_init(self, tiny_model, tiny_cfg):
        t = torch.full((tiny_cfg.instr_vocab_size,), 100)
        c = tiny_model.condition(t, torch.arange(tiny_cfg.instr_vocab_size))
        assert torch.equal(c, c[:1].expand_as(c))

    def test_seeded(self, tiny_cfg):
        a = build_model(tiny_cfg, seed=4)
        b = build_model(tiny_cfg, seed=4)
        c = build_model(tiny_cfg, seed=5)
        pa = [p.detach().numpy().tobytes() for p in a.parameters()]
        assert pa == [p.detach().numpy().tobytes() for p in b.parameters()]
        assert pa != [p.detach().numpy().tobytes() for p in c.parameters()]

    def test_fan_in_scale(self):
        cfg = preset("mini")
        model = build_model(cfg, seed=0)
        w = model.blocks[0].fc1.weight
        assert w.std().item() == pytest.approx(1 / cfg.hidden**0.5, rel=0.05)


class TestForwardErrors:
    def test_bad_t_and_instr(self, tiny_cfg, tiny_model):
        b = random_batch(tiny_cfg, 2)
        with pytest.raises(ValueError):
            tiny_model(b, b.targets(), torch.tensor([0, 1]))
        with pytest.raises(ValueError):
            tiny_model(b, b.targets(), torch.tensor([1, 1001]))
        b.instr = torch.tensor([0, tiny_cfg.instr_vocab_size])
        with pytest.raises(ValueError):
            tiny_model(b, b.targets(), torch.tensor([1, 1]))


def _trunk_outputs(model, batch, noised, t):
    seq = model.tokenize(batch, noised)
    c = model.condition(t, batch.instr)
    return seq, c, model.trunk(seq.tokens, seq.attn_mask, c)


def mask_equivalence_error(cfg: PadConfig, seed: int) -> float:
    """Max gap between padded+masked and compact-sequence trunk outputs."""
    model = randomize(build_model(cfg, seed=seed), seed).double()
    g = torch.Generator().manual_seed(seed)
    B = 3
    has_A = torch.rand(B, generator=g) < 0.5
    has_E = torch.rand(B, generator=g) < 0.5
    batch = random_batch(cfg, B, seed, has_A=has_A, has_E=has_E, dtype=D)
    t = torch.randint(1, cfg.T + 1, (B,), generator=g)
    seq, c, full = _trunk_outputs(model, batch, batch.targets(), t)
    worst = 0.0
    for j in range(B):
        idx = seq.attn_mask[j].nonzero().squeeze(1)
        compact = model.trunk(seq.tokens[j : j + 1, idx], torch.ones(1, len(idx), dtype=torch.bool), c[j : j + 1])
        worst = max(worst, (compact[0] - full[j, idx]).abs().max().item())
    return worst


def random_small_config(seed: int) -> PadConfig:
    g = torch.Generator().manual_seed(seed)

    def pick(options):
        return options[int(torch.randint(len(options), (1,), generator=g))]

    heads = pick([1, 2, 4])
    return PadConfig(
        img_size=8, latent_size=8, img_channels=pick([1, 3]), patch_I=pick([2, 4]), k=pick([1, 2, 3]),
        pose_dim=pick([4, 7]), depth_enabled=pick([True, False]), depth_size=8, patch_E=4,
        hidden=heads * pick([4, 8]), n_layers=pick([1, 2]), n_heads=heads, t_embed_dim=8, instr_vocab_size=5,
    )


class TestMasking:
    @pytest.mark.parametrize("seed", range(10))
    def test_padded_equals_compact(self, seed):
        assert mask_equivalence_error(random_small_config(seed), seed) <= 1e-5

    def test_permuting_masked_padding(self):
        cfg = preset("tiny", depth_enabled=True)
        model = randomize(build_model(cfg), 1)
        b = random_batch(cfg, 2, has_A=[True, True], has_E=[False, False])
        seq = model.tokenize(b, b.targets())
        c = model.condition(torch.tensor([10, 20]), b.instr)
        base = model.trunk(seq.tokens, seq.attn_mask, c)
        a, e = model.spans["E"]
        tokens = seq.tokens.clone()
        tokens[:, a:e] = torch.randn(2, e - a, cfg.hidden)  # arbitrary garbage in padding
        perm = tokens.clone()
        perm[:, [a, a + 1]] = tokens[:, [a + 1, a]]
        out1 = model.trunk(tokens, seq.attn_mask, c)
        out2 = model.trunk(perm, seq.attn_mask, c)
        keep = seq.attn_mask[0]
        assert torch.equal(out1[:, keep], out2[:, keep])
        assert torch.equal(out1[:, keep], base[:, keep])

    def test_masked_positions_carry_zeros(self):
        cfg = preset("tiny", depth_enabled=True)
        model = randomize(build_model(cfg), 1)
        b = random_batch(cfg, 2, has_A=[False, True], has_E=[False, False])
        seq = model.tokenize(b, b.targets())
        assert bool((seq.tokens[~seq.attn_mask] == 0).all())
        assert seq.attn_mask[:, : model.T_I].all()
        assert seq.attn_mask[:, model.T_I].tolist() == [False, True]


def full_loss_fn(cfg, model, batch, noise, t, sched):
    names = [n for n, _ in model.named_parameters()]
    params = dict(model.named_parameters())

    def f(*flat):
        p = dict(zip(names, flat))
        noised = {m: q_sample(z, t, noise[m], sched) for m, z in batch.targets().items()}
        out = torch.func.functional_call(model, p, (batch, noised, t))
        losses = {m: ddpm_loss(out[m], noise[m]) for m in out}
        return combined_loss(losses, LossWeights(1.0, 2.0, 2.0), {m: True for m in out})

    return f, [params[n] for n in names]


def test_full_model_gradcheck():
    cfg = preset("tiny")
    model = randomize(build_model(cfg), 7, scale=0.2).double()
    sched = build_schedule(cfg.T)
    batch = random_batch(cfg, 2, seed=3, dtype=D)
    noise = noise_for(batch, 4)
    t = torch.tensor([30, 700])
    f, params = full_loss_fn(cfg, model, batch, noise, t, sched)
    err = grad_check(f, *params, max_coords=40)
    assert err <= 1e-3, err


def test_action_path_isolated_on_video_batch(tiny_cfg):
    model = randomize(build_model(tiny_cfg), 2)
    b = random_batch(tiny_cfg, 4, has_A=[False] * 4)
    noise = noise_for(b)
    out = model(b, noise, torch.tensor([1, 5, 9, 13]))
    assert set(out) == {"I"}
    ddpm_loss(out["I"], torch.zeros_like(out["I"])).backward()
    for name, p in action_path_parameters(model).items():
        assert p.grad is None or bool((p.grad == 0).all()), name
    assert bool((model.pos.grad[model.T_I] == 0).all())
