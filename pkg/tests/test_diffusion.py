import json
import math
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from torch import nn

from hyperdiff import diffusion as D
from hyperdiff import hsio, ndk, ssdn, synth
from fdcheck import check_gradients

# Cumulative product of (1 - beta) for the linear 1e-4 -> 0.02, T=500 schedule,
# computed once with a plain Python loop over float64 values.
ABAR_500 = 0.006352710797015061


def loop_alpha_bars(T, b0, b1):
    out, acc = [], 1.0
    for i in range(T):
        beta = b0 + (b1 - b0) * i / (T - 1) if T > 1 else b0
        acc *= 1.0 - beta
        out.append(acc)
    return out


def oracle_net(x0):
    """Known-noise network: recovers the exact epsilon from x_t and the true x0."""
    def net(x_t, t, sched):
        abar = torch.tensor(sched._abar[t.numpy()], dtype=x_t.dtype).view(-1, *[1] * (x_t.dim() - 1))
        return (x_t - abar.sqrt() * x0) / (1 - abar).sqrt()
    return net


class TestSchedule:
    def test_single_step(self):
        s = D.make_schedule(1, 0.1, 0.1)
        assert s.alpha(1) == pytest.approx(0.9) and s.alpha_bar(1) == pytest.approx(0.9)

    def test_two_term_product(self):
        s = D.NoiseSchedule(np.array([0.9, 0.8]))
        assert s.alpha_bar(2) == pytest.approx(0.72, abs=1e-15)
        assert s.alpha_bar(0) == 1.0

    def test_default_schedule_against_loop(self):
        s = D.make_schedule(500, 1e-4, 0.02)
        np.testing.assert_allclose(s.alpha_bars, loop_alpha_bars(500, 1e-4, 0.02), rtol=1e-12)
        assert s.alpha_bar(500) == pytest.approx(ABAR_500, rel=1e-12)
        assert s.alpha_bar(500) < 0.01
        assert (np.diff(s.alpha_bars) < 0).all()

    def test_ratio_identity(self):
        s = D.make_schedule(500, 1e-4, 0.02)
        ratio = s._abar[1:] / s._abar[:-1]
        # float64 division of a running product: equal up to rounding (a few ulp)
        np.testing.assert_allclose(ratio, s.alphas, rtol=4 * np.finfo(np.float64).eps, atol=0)

    def test_invalid(self):
        with pytest.raises(ValueError):
            D.make_schedule(0, 1e-4, 0.02)
        with pytest.raises(ValueError):
            D.make_schedule(10, 0.02, 1e-4)
        with pytest.raises(ValueError):
            D.NoiseSchedule(np.array([0.5, 0.0]))
        with pytest.raises(ValueError):
            D.DiffusionConfig(beta_end=1.0)


class TestForward:
    sched = D.make_schedule(500, 1e-4, 0.02)

    def test_zero_noise(self, gen):
        x0 = torch.randn(3, 4, generator=gen)
        got = D.forward_sample(x0, 100, torch.zeros_like(x0), self.sched)
        assert torch.allclose(got, math.sqrt(self.sched.alpha_bar(100)) * x0)

    def test_first_step(self, gen):
        x0, eps = torch.randn(5, generator=gen), torch.randn(5, generator=gen)
        a = self.sched.alpha(1)
        want = math.sqrt(a) * x0 + math.sqrt(1 - a) * eps
        assert torch.allclose(D.forward_sample(x0, 1, eps, self.sched), want)

    def test_per_instance_timesteps(self, gen):
        x0, eps = torch.randn(3, 2, generator=gen), torch.randn(3, 2, generator=gen)
        t = torch.tensor([1, 50, 500])
        got = D.forward_sample(x0, t, eps, self.sched)
        for i in range(3):
            assert torch.allclose(got[i], D.forward_sample(x0[i], int(t[i]), eps[i], self.sched))

    @pytest.mark.parametrize("t", [1, 10, 100, 500])
    def test_monte_carlo_moments(self, gen, t):
        n = 10_000
        x0 = torch.full((n,), 0.7)
        xt = D.forward_sample(x0, t, torch.randn(n, generator=gen), self.sched)
        abar = self.sched.alpha_bar(t)
        assert xt.mean().item() == pytest.approx(math.sqrt(abar) * 0.7, rel=0.05, abs=0.02)
        assert xt.var().item() == pytest.approx(1 - abar, rel=0.05)

    def test_stepwise_chain_matches_closed_form(self, gen):
        # compose single-step noising with a one-step schedule per alpha_t
        n, t_end = 10_000, 60
        x = torch.ones(n)
        for t in range(1, t_end + 1):
            one = D.NoiseSchedule(np.array([self.sched.alpha(t)]))
            x = D.forward_sample(x, 1, torch.randn(n, generator=gen), one)
        abar = self.sched.alpha_bar(t_end)
        assert x.mean().item() == pytest.approx(math.sqrt(abar), rel=0.05)
        assert x.var().item() == pytest.approx(1 - abar, rel=0.05)

    def test_errors(self):
        x = torch.zeros(2)
        with pytest.raises(ValueError):
            D.forward_sample(x, 0, x, self.sched)
        with pytest.raises(ValueError):
            D.forward_sample(x, 501, x, self.sched)
        with pytest.raises(ValueError):
            D.forward_sample(x, 1, torch.zeros(3), self.sched)


class TestPosterior:
    def test_variance_cases(self):
        s = D.NoiseSchedule(np.array([0.9, 0.8]))
        assert D.posterior_variance(1, s) == 0.0
        assert D.posterior_variance(2, s) == pytest.approx(0.1 / 0.28 * 0.2, abs=1e-9)
        assert D.posterior_variance(2, s) == pytest.approx(0.0714285714, abs=1e-9)
        assert D.posterior_variance(2, D.NoiseSchedule(np.array([0.9, 1.0]))) == 0.0
        big = D.make_schedule(500, 1e-4, 0.02)
        assert all(D.posterior_variance(t, big) >= 0 for t in range(1, 501))

    def test_mean_true_noise_inverts_first_step(self, gen):
        s = D.make_schedule(500, 1e-4, 0.02)
        x0, eps = torch.randn(4, 4, generator=gen), torch.randn(4, 4, generator=gen)
        mu = D.posterior_mean(D.forward_sample(x0, 1, eps, s), eps, 1, s)
        assert (mu - x0).abs().max() < 1e-5

    def test_mean_zero_eps(self, gen):
        s = D.make_schedule(500, 1e-4, 0.02)
        x = torch.randn(6, generator=gen)
        assert torch.allclose(D.posterior_mean(x, torch.zeros(6), 300, s), x / math.sqrt(s.alpha(300)))

    def test_mean_against_scalar_evaluation(self, rng):
        s = D.make_schedule(500, 1e-4, 0.02)
        for t in [1, 2, 77, 250, 500]:
            x = rng.standard_normal(8)
            e = rng.standard_normal(8)
            a, abar = 1 - (1e-4 + (0.02 - 1e-4) * (t - 1) / 499), loop_alpha_bars(500, 1e-4, 0.02)[t - 1]
            want = [(xi - (1 - a) / math.sqrt(1 - abar) * ei) / math.sqrt(a) for xi, ei in zip(x, e)]
            got = D.posterior_mean(torch.tensor(x, dtype=torch.float32), torch.tensor(e, dtype=torch.float32), t, s)
            np.testing.assert_allclose(got.numpy(), want, atol=1e-6, rtol=1e-6)


class TestReverse:
    def test_t1_is_deterministic_mean(self, gen):
        s = D.make_schedule(50, 1e-4, 0.02)
        x = torch.randn(2, 3, generator=gen)
        net = lambda xt, t: 0.5 * xt
        a = D.reverse_step(x, 1, net, s, ndk.generator(0))
        b = D.reverse_step(x, 1, net, s, ndk.generator(99))
        assert torch.equal(a, b)
        assert torch.allclose(a, D.posterior_mean(x, 0.5 * x, 1, s))

    def test_seeded_trajectory_repeats(self, gen):
        s = D.make_schedule(50, 1e-4, 0.02)
        x0 = torch.randn(2, 3, generator=gen)
        net = lambda xt, t: 0.1 * xt
        a = D.reconstruct(x0, 30, net, s, ndk.generator(5))
        b = D.reconstruct(x0, 30, net, s, ndk.generator(5))
        assert torch.equal(a, b)

    def test_shape_mismatch(self):
        s = D.make_schedule(5, 1e-4, 0.02)
        with pytest.raises(ValueError):
            D.reverse_step(torch.zeros(2, 3), 2, lambda x, t: torch.zeros(2, 4), s, ndk.generator(0))

    def test_oracle_chain_recovers_x0(self, gen):
        s = D.make_schedule(50, 1e-4, 0.02)
        x0 = torch.rand(4, 3, 3, 8, generator=gen)
        oracle = oracle_net(x0)
        x = D.forward_sample(x0, 50, torch.randn(x0.shape, generator=gen), s)
        for t in range(50, 0, -1):
            x = D.reverse_step(x, t, lambda xt, tt: oracle(xt, tt, s), s, gen)
        assert (x - x0).abs().max() < 0.05

    def test_reconstruct_from_one_with_oracle(self, gen):
        s = D.make_schedule(500, 1e-4, 0.02)
        x0 = torch.rand(2, 4, generator=gen)
        oracle = oracle_net(x0)
        out = D.reconstruct(x0, 1, lambda xt, t: oracle(xt, t, s), s, gen)
        assert (out - x0).abs().max() < 1e-5

    def test_reconstruct_zero_network_against_loop(self, gen):
        s = D.make_schedule(500, 1e-4, 0.02)
        x0 = torch.rand(3, 5, generator=gen)
        eps = torch.randn(3, 5, generator=gen)
        out = D.reconstruct(x0, 20, lambda xt, t: torch.zeros_like(xt), s, ndk.generator(11), eps=eps)
        g = ndk.generator(11)
        x = math.sqrt(s.alpha_bar(20)) * x0 + math.sqrt(1 - s.alpha_bar(20)) * eps
        for t in range(20, 0, -1):
            x = x / math.sqrt(s.alpha(t))
            if t > 1:
                x = x + math.sqrt(D.posterior_variance(t, s)) * torch.randn(x.shape, generator=g)
        assert torch.allclose(out, x, atol=1e-5)

    def test_reconstruct_zero_network_noiseless_closed_form(self, gen):
        s = D.make_schedule(500, 1e-4, 0.02)
        x0, eps = torch.rand(3, 5, generator=gen), torch.zeros(3, 5)
        out = D.reconstruct(x0, 1, lambda xt, t: torch.zeros_like(xt), s, gen, eps=eps)
        assert torch.allclose(out, math.sqrt(s.alpha_bar(1)) * x0 / math.sqrt(s.alpha(1)))

    def test_reconstruction_error_grows_with_start(self, gen):
        # Bayes-optimal denoiser for x0 ~ N(m, s^2): it does not know x0, so the
        # more noise is injected, the further the reconstruction drifts from it
        s = D.make_schedule(500, 1e-4, 0.02)
        m, sd = 0.5, 0.2
        x0 = m + sd * torch.randn(256, 8, generator=gen)

        def gaussian_net(xt, t):
            abar = torch.tensor(s._abar[t.numpy()], dtype=xt.dtype)[:, None]
            return (1 - abar).sqrt() * (xt - abar.sqrt() * m) / (abar * sd**2 + 1 - abar)

        mse = [((D.reconstruct(x0, st, gaussian_net, s, ndk.generator(st)) - x0) ** 2).mean().item()
               for st in [400, 200, 100, 50, 10, 5]]
        assert all(a > b for a, b in zip(mse, mse[1:])), mse


class TestLoss:
    sched = D.make_schedule(500, 1e-4, 0.02)

    def test_oracle_loss_is_zero(self, gen):
        x0 = torch.rand(16, 2, 2, 4, generator=gen)
        oracle = oracle_net(x0)
        loss = D.diffusion_loss(x0, lambda xt, t: oracle(xt, t, self.sched), self.sched, gen)
        assert loss.item() < 1e-5

    def test_zero_network_expectation(self, gen):
        x0 = torch.rand(512, 4, 4, 8, generator=gen)
        loss = D.diffusion_loss(x0, lambda xt, t: torch.zeros_like(xt), self.sched, gen)
        assert loss.item() == pytest.approx(math.sqrt(2 / math.pi), rel=0.02)

    def test_empty_batch(self, gen):
        with pytest.raises(ValueError):
            D.diffusion_loss(torch.zeros(0, 3), lambda x, t: x, self.sched, gen)

    def test_gradient_against_finite_differences(self, gen):
        w = ndk.Parameter(torch.randn(6, generator=gen))
        b = ndk.Parameter(torch.randn(6, generator=gen))
        x0 = torch.rand(8, 6, generator=gen)
        net = lambda xt, t: xt * w + b + 1e-3 * t[:, None]
        fn = lambda: D.diffusion_loss(x0, net, self.sched, ndk.generator(3))
        assert check_gradients(fn, [w, b], h=1e-3) < 1e-2


# --------------------------------------------------------------------------
# training


class _Affine(nn.Module):
    """Smallest trainable 'denoiser' with the attributes train_diffusion expects."""

    def __init__(self, k, bands, value=0.0):
        super().__init__()
        self.config = SimpleNamespace(patch_size=k)
        self.w = ndk.Parameter(torch.full((bands,), value))

    def forward(self, x, t):
        return x * self.w


def tiny_cube(h=16, w=16, b=8, seed=0):
    cube, _, _ = synth.generate(synth.SynthParams(height=h, width=w, bands=b, seed=seed))
    return hsio.normalize_bands(cube).data


def test_zero_learning_rate_keeps_parameters():
    net = ssdn.build_ssdn(ssdn.SsdnConfig(patch_size=4, bands=8, base_channels=2))
    before = {k: v.clone() for k, v in ndk.named_trainable(net).items()}
    D.train_diffusion(tiny_cube(), net, D.DiffusionConfig(batch_size=4, max_steps=3, learning_rate=0.0))
    for k, v in ndk.named_trainable(net).items():
        assert torch.equal(v, before[k]), k


def test_resume_reproduces_uninterrupted_run(tmp_path):
    cube = tiny_cube()
    cfg = ssdn.SsdnConfig(patch_size=4, bands=8, base_channels=2)
    full = D.train_diffusion(cube, ssdn.build_ssdn(cfg),
                             D.DiffusionConfig(batch_size=4, max_steps=12, learning_rate=1e-3),
                             tmp_path / "full")
    D.train_diffusion(cube, ssdn.build_ssdn(cfg),
                      D.DiffusionConfig(batch_size=4, max_steps=6, learning_rate=1e-3), tmp_path / "part")
    resumed = D.train_diffusion(cube, ssdn.build_ssdn(cfg),
                                D.DiffusionConfig(batch_size=4, max_steps=12, learning_rate=1e-3),
                                tmp_path / "part")
    assert resumed == full
    a, _ = ndk.load_checkpoint(tmp_path / "full" / "model.ckpt")
    b, _ = ndk.load_checkpoint(tmp_path / "part" / "model.ckpt")
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_training_artifacts(tmp_path):
    D.train_diffusion(tiny_cube(), _Affine(4, 8), D.DiffusionConfig(batch_size=4, max_steps=5,
                                                                    checkpoint_every=2), tmp_path)
    assert json.loads((tmp_path / "schedule.json").read_text()) == {"T": 500, "beta_start": 1e-4, "beta_end": 0.02}
    assert len(D.load_loss_history(tmp_path / "loss.csv")) == 5
    assert D.load_schedule(tmp_path / "schedule.json").T == 500
    assert json.loads((tmp_path / "train_state.json").read_text())["step"] == 5


def test_divergence_restores_checkpoint(tmp_path):
    net = _Affine(4, 8, value=0.5)
    D.train_diffusion(tiny_cube(), net, D.DiffusionConfig(batch_size=4, max_steps=2), tmp_path)
    good = net.w.detach().clone()
    with torch.no_grad():
        net.w.fill_(float("nan"))
    with pytest.raises(D.DivergenceError):
        D.train_diffusion(tiny_cube(), net, D.DiffusionConfig(batch_size=4, max_steps=4), tmp_path, resume=False)
    assert torch.equal(net.w.detach(), good)


def test_plateau_stops_early():
    losses = D.train_diffusion(tiny_cube(), _Affine(4, 8),
                               D.DiffusionConfig(batch_size=4, max_steps=400, learning_rate=0.0,
                                                 plateau_window=20))
    assert len(losses) < 400


@pytest.mark.slow
def test_training_halves_smoothed_loss():
    net = ssdn.build_ssdn(ssdn.SsdnConfig(patch_size=4, bands=8, base_channels=4))
    losses = D.train_diffusion(tiny_cube(), net, D.DiffusionConfig(batch_size=16, max_steps=2000,
                                                                    learning_rate=1e-3))
    first, last = np.mean(losses[:200]), np.mean(losses[-200:])
    assert last <= 0.5 * first, (first, last)
