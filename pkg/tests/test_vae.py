import math

import pytest
import torch

from mobiledit.dit import DiTConfig
from mobiledit.errors import InvalidArgument
from mobiledit.vae import (PSNR_CAP, TABLE3_SPECS, CompressionSpec, StudyConfig, build_autoencoder, eval_psnr, psnr,
                           scaling_study, study_latencies, token_count, total_ratio, train_autoencoder)


def test_latent_shape_arithmetic():
    assert CompressionSpec(8, 32, 32).latent_shape(32, 64, 64) == (16, 4, 2, 2)
    with pytest.raises(InvalidArgument):
        CompressionSpec(8, 32, 32).latent_shape(12, 64, 64)


@pytest.mark.parametrize("r", [(3, 16, 16), (4, 0, 16), (4, 16, 12)])
def test_ratios_must_be_powers_of_two(r):
    with pytest.raises(InvalidArgument):
        CompressionSpec(*r)


@pytest.mark.parametrize("spec", TABLE3_SPECS)
def test_autoencoder_shapes(spec):
    spec = CompressionSpec(*spec, latent_channels=4)
    enc, dec = build_autoencoder(spec, seed=0, width=8)
    x = torch.rand(2, 3, 8, 64, 64)
    z = enc(x)
    assert z.shape == (2, *spec.latent_shape(8, 64, 64))
    y = dec(z)
    assert y.shape == x.shape and torch.isfinite(y).all()
    with pytest.raises(InvalidArgument):
        enc(torch.rand(1, 3, 6, 64, 64))


def test_autoencoder_deterministic():
    spec = CompressionSpec(4, 16, 16)
    a, b = build_autoencoder(spec, 3, 8), build_autoencoder(spec, 3, 8)
    for m1, m2 in zip(a, b):
        for p, q in zip(m1.parameters(), m2.parameters()):
            assert torch.equal(p, q)


def test_total_ratio():
    assert [total_ratio(CompressionSpec(*s)) for s in TABLE3_SPECS] == [1024, 4096, 8192, 32768]


def test_psnr():
    x = torch.full((1, 3, 2, 4, 4), 0.5, dtype=torch.float64)
    assert psnr(x, x) == PSNR_CAP >= 100
    y = x + 0.1  # mse 0.01
    assert psnr(x, y) == pytest.approx(20.0, abs=1e-9)
    g = torch.Generator().manual_seed(0)
    a, b = torch.rand(2, 3, 2, 4, 4, generator=g), torch.rand(2, 3, 2, 4, 4, generator=g)
    assert psnr(a, b) == psnr(b, a)
    assert psnr(a, a) > psnr(a, (a + 0.01).clamp(0, 1))
    with pytest.raises(InvalidArgument):
        psnr(a, b[:1])


def test_token_count():
    assert token_count(32, 512, 512, CompressionSpec(8, 32, 32), (1, 1, 1)) == 1024
    s = CompressionSpec(8, 32, 32)
    assert token_count(32, 1024, 512, s) == 2 * token_count(32, 512, 512, s)
    assert token_count(32, 512, 512, s) == 4 * token_count(32, 512, 512, CompressionSpec(8, 64, 64))
    assert token_count(32, 512, 512, s, (1, 2, 2)) == 256
    with pytest.raises(InvalidArgument):
        token_count(32, 512, 512, s, (1, 3, 1))


@pytest.mark.parametrize("spec", TABLE3_SPECS)
def test_tokens_times_ratio_identity(spec):
    spec = CompressionSpec(*spec)
    T, H, W = 32, 256, 256
    for patch in [(1, 1, 1), (1, 2, 2)]:
        if (H // spec.r_h) % patch[1]:
            continue
        assert token_count(T, H, W, spec, patch) * total_ratio(spec) * math.prod(patch) == T * H * W


def test_training_reduces_loss():
    from mobiledit.data import clip_batch

    clips, _ = clip_batch(8, (8, 32, 32), seed=0)
    spec = CompressionSpec(4, 16, 16, latent_channels=8)
    enc, dec = build_autoencoder(spec, seed=0, width=16)
    before = eval_psnr(enc, dec, clips)
    curve = train_autoencoder(enc, dec, clips, iters=40, seed=0)
    assert curve[-1]["recon_loss"] < curve[0]["recon_loss"]
    assert eval_psnr(enc, dec, clips) > before


def test_scaling_study_smoke():
    dit = DiTConfig(num_blocks=1, hidden_dim=16, num_heads=2, head_dim=8, ffn_dim=16)
    study = StudyConfig(clip_shape=(8, 64, 64), bench_shape=(8, 64, 64), n_train=4, n_eval=2, vae_iters=3,
                        vae_width=8, dit_iters=2, bench_runs=3, latent_channels=4)
    rep = scaling_study(TABLE3_SPECS, dit, study, seed=0, measure_latency=False)
    assert rep.schema == "vae_study" and len(rep.rows) == 4
    assert rep.column("tokens") == [32, 8, 4, 1]
    assert all(math.isnan(v) for v in rep.column("latency_ms_median"))
    lat = study_latencies(TABLE3_SPECS, dit, study)
    assert len(lat) == 4 and all(v > 0 for v in lat)
    with pytest.raises(InvalidArgument):
        scaling_study(TABLE3_SPECS[:1], dit, study)
