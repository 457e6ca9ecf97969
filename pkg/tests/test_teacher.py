import statistics

import pytest
import torch

from sida.analytic import PRESETS, gmm_denoiser, gmm_sample
from sida.diffmath import DTYPE
from sida.presets import preset
from sida.schedule import diffuse, draw_at_sigma, make_schedule, sample_fakescore_time
from sida.teacher import Teacher, copy_teacher_net, make_teacher, pretrain_teacher, teacher_oracle
from sida.trainer import build_data, build_teacher, load_teacher, save_teacher

SCHED = make_schedule(sigma_max=5.0)
KW = dict(width=64, emb_dim=16, sigma_data=0.7, batch_size=256, lr=3e-3, eval_samples=1024)


@pytest.fixture(scope="module")
def learned():
    return pretrain_teacher(PRESETS["gauss"](), SCHED, 100_000, torch.Generator().manual_seed(0), **KW)


def held_out(data, n=400, seed=5):
    gen = torch.Generator().manual_seed(seed)
    x0 = gmm_sample(data, n, gen)
    draw = sample_fakescore_time(gen, SCHED, n)
    return diffuse(x0, draw, torch.randn(x0.shape, generator=gen, dtype=DTYPE)), draw, x0


def test_exact_delegates_bit_exactly():
    data = PRESETS["ring-8"]()
    x_t, draw, _ = held_out(data)
    assert torch.equal(teacher_oracle(make_teacher("exact", data), x_t, draw), gmm_denoiser(data, x_t, draw))


def test_zero_corruption_is_exact():
    data = PRESETS["ring-8"]()
    x_t, draw, _ = held_out(data)
    t = make_teacher("corrupted", data, 0.0, seed=3)
    assert torch.allclose(t(x_t, draw), gmm_denoiser(data, x_t, draw), atol=1e-14)


def test_bad_modes():
    with pytest.raises(ValueError):
        make_teacher("learned", PRESETS["gauss"]())
    with pytest.raises(ValueError):
        Teacher("other", PRESETS["gauss"]())
    with pytest.raises(ValueError):
        pretrain_teacher(PRESETS["gauss"](), SCHED, 999, torch.Generator().manual_seed(0))


def test_learned_matches_conjugate_closed_form(learned):
    data = learned.data
    gen = torch.Generator().manual_seed(11)
    per_sigma = []
    for s in torch.logspace(-1.3, 0.7, 9, dtype=DTYPE):
        x0 = gmm_sample(data, 200, gen)
        draw = draw_at_sigma(SCHED, torch.full((200,), float(s), dtype=DTYPE))
        x_t = x0 + s * torch.randn(x0.shape, generator=gen, dtype=DTYPE)
        with torch.no_grad():
            exact = gmm_denoiser(data, x_t, draw)
            err = (learned(x_t, draw) - exact).norm(dim=1) / exact.norm(dim=1)
        per_sigma.append(err.median().item())
    assert statistics.median(per_sigma) < 0.05


def test_learned_is_frozen_and_passes_gradients_through_input(learned):
    x_t, draw, _ = held_out(learned.data, 16)
    x_t = x_t.clone().requires_grad_(True)
    out = learned(x_t, draw)
    assert torch.equal(out, learned(x_t, draw))
    assert all(not p.requires_grad for p in learned.net.parameters())
    (g,) = torch.autograd.grad(out.sum(), x_t)
    assert g.abs().sum() > 0


def test_gap_shrinks_with_budget():
    data = PRESETS["gauss"]()
    small, large = [], []
    for seed in range(5):
        for budget, out in ((1000, small), (30_000, large)):
            t = pretrain_teacher(data, SCHED, budget, torch.Generator().manual_seed(seed), net_seed=seed, **KW)
            out.append(t.report["denoising_gap"])
    assert statistics.median(small) > statistics.median(large)


def test_copy_into_psi_reproduces_teacher(learned):
    psi = copy_teacher_net(learned)
    assert all(p.requires_grad for p in psi.parameters())
    x_t, draw, x0 = held_out(learned.data, 2000, seed=8)
    with torch.no_grad():
        a = psi(x_t, draw).denoised
        b = learned(x_t, draw)
    assert torch.equal(a, b)
    loss = (draw.gamma * ((a - x0) ** 2).sum(1)).mean().item()
    per = draw.gamma * ((a - x0) ** 2).sum(1)
    noise = per.std().item() / len(per) ** 0.5
    assert abs(loss - learned.report["final_loss"]) < 3 * noise + 0.1 * learned.report["final_loss"]
    # the copy is independent of the teacher
    with torch.no_grad():
        next(psi.parameters()).add_(1.0)
    assert not torch.equal(psi(x_t, draw).denoised, learned(x_t, draw))


def test_teacher_checkpoint_roundtrip(tmp_path, learned):
    cfg = preset("gauss-linear-exact").replace(
        **{"nets.score_width": 64, "nets.emb_dim": 16, "nets.sigma_data": 0.7}
    )
    path = tmp_path / "teacher.ckpt"
    save_teacher(learned, path)
    back = load_teacher(path, cfg, learned.data)
    x_t, draw, _ = held_out(learned.data, 32)
    assert torch.equal(back(x_t, draw), learned(x_t, draw))
    assert back.report == learned.report
    via_cfg = build_teacher(cfg.replace(**{"teacher.mode": "learned", "teacher.path": str(path)}), build_data(cfg))
    assert torch.equal(via_cfg(x_t, draw), learned(x_t, draw))
