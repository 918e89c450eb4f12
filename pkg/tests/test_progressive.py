import csv

import numpy as np
import pytest
import torch

from bpa.imaging import load_png
from bpa.progressive import (
    ProgressiveDiscriminator,
    ProgressiveGAN,
    ProgressiveGenerator,
    ProgressiveStage,
    fade_in,
    generate_bulk,
    generator_adversarial_loss,
    sample_latent,
    stage_schedule,
)
from bpa.toy import render_batch

from oracles import central_difference, nearest_upsample

TINY = dict(latent_dim=16, target_resolution=16, fmap_base=32, fmap_max=16, images_per_stage=32, batch_size=8)


@pytest.fixture(scope="module")
def toy_pool():
    return render_batch(16, 16, seed=0) * 2 - 1


@pytest.fixture(scope="module")
def fitted(toy_pool):
    return ProgressiveGAN(**TINY, seed=1).fit(toy_pool)


def test_stage_schedule():
    assert stage_schedule(32) == [4, 8, 16, 32]
    assert stage_schedule(256) == [4, 8, 16, 32, 64, 128, 256]
    for bad in (2, 24, 100):
        with pytest.raises(ValueError):
            stage_schedule(bad)


def test_stage_validation():
    assert ProgressiveStage(3).resolution == 32
    with pytest.raises(ValueError):
        ProgressiveStage(1, alpha=1.5)


def test_sample_latent():
    assert sample_latent(0, 512, 1).shape == (0, 512)
    assert np.array_equal(sample_latent(5, 512, 7), sample_latent(5, 512, 7))
    z = sample_latent(1000, 512, 7)
    assert np.abs(z.mean(axis=0)).max() <= 0.1 + 0.05  # per-coordinate, loose across 512 coords
    assert abs(z.mean()) <= 0.1
    assert np.abs(z.var(axis=0) - 1).mean() <= 0.15
    with pytest.raises(ValueError):
        sample_latent(1, 0, 0)


def test_fade_in_blend():
    low = torch.randn(2, 3, 4, 4)
    high = torch.randn(2, 3, 8, 8)
    up = torch.as_tensor(np.stack([nearest_upsample(x) for x in low.numpy()]), dtype=torch.float32)
    assert torch.allclose(fade_in(low, high, 0.0), up)
    assert torch.allclose(fade_in(low, high, 1.0), high)
    assert torch.allclose(fade_in(low, high, 0.25), 0.75 * up + 0.25 * high)


def test_generator_alpha_identities():
    torch.manual_seed(0)
    G = ProgressiveGenerator(latent_dim=16, target_resolution=32, fmap_base=64, fmap_max=16)
    z = torch.randn(3, 16)
    with torch.no_grad():
        for k in range(1, 4):
            prev = G(z, k - 1, 1.0).numpy()
            up = np.stack([nearest_upsample(x) for x in prev])
            assert np.abs(G(z, k, 0.0).numpy() - up).max() <= 1e-5
            assert torch.allclose(G(z, k, 1.0), G(z, k, 1.0 - 0.0))
        for k, r in enumerate(stage_schedule(32)):
            out = G(z, k, 0.5 if k else 1.0)
            assert out.shape == (3, 3, r, r)
            assert out.abs().max() <= 1.0


def test_fit_runs_every_stage_and_logs(fitted, tmp_path):
    assert fitted.done_
    assert set(fitted.stage_iterations_) == {"0", "1", "2"}
    assert all(np.isfinite([r["loss_d"], r["loss_g"], r["grad_penalty"]]).all() for r in fitted.log_)
    imgs = fitted.sample(5, seed=3)
    assert imgs.shape == (5, 16, 16, 3) and np.abs(imgs).max() <= 1.0
    fitted.write_log(tmp_path / "log.csv")
    with open(tmp_path / "log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["step", "stage", "alpha", "loss_g", "loss_d", "grad_penalty"]
    assert len(rows) == fitted.step_


def test_fit_rejects_wrong_resolution(toy_pool):
    with pytest.raises(ValueError, match="expected 32x32"):
        ProgressiveGAN(**{**TINY, "target_resolution": 32}).fit(toy_pool)
    with pytest.raises(ValueError, match="empty"):
        ProgressiveGAN(**TINY).fit(np.zeros((0, 16, 16, 3)))


def test_identical_seeds_identical_traces(toy_pool):
    a = ProgressiveGAN(**TINY, seed=5).fit(toy_pool, max_steps=6)
    b = ProgressiveGAN(**TINY, seed=5).fit(toy_pool, max_steps=6)
    assert a.log_ == b.log_


def test_checkpoint_round_trip_and_resume(toy_pool, tmp_path):
    full = ProgressiveGAN(**TINY, seed=2).fit(toy_pool, max_steps=8)
    half = ProgressiveGAN(**TINY, seed=2, warm_start=True).fit(toy_pool, max_steps=4)
    half.save(tmp_path / "g.ckpt")
    resumed = ProgressiveGAN.load(tmp_path / "g.ckpt")
    for p, q in zip(half.generator_.parameters(), resumed.generator_.parameters()):
        assert torch.equal(p, q)
    resumed.save(tmp_path / "g2.ckpt")
    assert (tmp_path / "g.ckpt").read_bytes() == (tmp_path / "g2.ckpt").read_bytes()
    resumed.fit(toy_pool, max_steps=4)
    assert resumed.log_ == full.log_


def test_generate_bulk(fitted, tmp_path):
    assert generate_bulk(fitted, 0, 1, tmp_path / "none") == []
    a = generate_bulk(fitted, 12, 4, tmp_path / "a", batch_size=5)
    b = generate_bulk(fitted, 12, 4, tmp_path / "b")
    assert len(a) == 12 == len({r.id for r in a})
    assert [r.id for r in a] == [r.id for r in b]
    assert all(r.provenance == "generated_phase1" and r.pool == "nevusG" and r.label_structure is False for r in a)
    assert open(a[0].path, "rb").read() == open(b[0].path, "rb").read()
    assert load_png(a[0].path).shape == (16, 16, 3)
    # unbounded by the training pool size (16 images here)
    assert len(generate_bulk(fitted, 40, 5, tmp_path / "c")) == 40


def test_adversarial_loss_gradient_matches_finite_differences():
    torch.manual_seed(0)
    G = ProgressiveGenerator(latent_dim=8, target_resolution=8, fmap_base=16, fmap_max=8).double()
    D = ProgressiveDiscriminator(target_resolution=8, fmap_base=16, fmap_max=8).double()
    z = torch.randn(4, 8, dtype=torch.float64)

    loss = generator_adversarial_loss(G, D, z, 1, 0.7)
    params = [p for p in G.parameters()]
    grads = torch.autograd.grad(loss, params)
    rng = np.random.default_rng(0)

    def f():
        with torch.no_grad():
            return generator_adversarial_loss(G, D, z, 1, 0.7).item()

    for _ in range(10):
        k = int(rng.integers(len(params)))
        flat = params[k].data.view(-1)
        i = int(rng.integers(flat.numel()))
        numeric = central_difference(f, flat, i, 1e-6)
        analytic = grads[k].view(-1)[i].item()
        denom = max(abs(numeric), abs(analytic), 1e-8)
        assert abs(numeric - analytic) / denom <= 1e-3, (k, i, numeric, analytic)


@pytest.mark.slow
def test_desk_scale_run_keeps_losses_finite():
    pool = render_batch(64, 32, seed=11) * 2 - 1
    model = ProgressiveGAN(latent_dim=128, target_resolution=32, fmap_base=128, fmap_max=32,
                           images_per_stage=2000, batch_size=16, seed=0).fit(pool)
    assert model.done_ and len(model.stage_iterations_) == 4
    assert all(np.isfinite(r["loss_d"]) for r in model.log_)
