"""Toy 3D-convolutional video autoencoders and the compression-ratio scaling study."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .bench import bench_latency
from .data import PALETTE, clip_batch
from .dit import DiTConfig, build_model
from .errors import InvalidArgument
from .flow import cfm_loss, noisify, sample_timesteps
from .report import ExperimentReport, config_hash

TABLE3_SPECS = ((4, 16, 16), (4, 32, 32), (8, 32, 32), (8, 64, 64))
PSNR_CAP = 100.0


@dataclass(frozen=True)
class CompressionSpec:
    r_t: int
    r_h: int
    r_w: int
    latent_channels: int = 16

    def __post_init__(self):
        for r in (self.r_t, self.r_h, self.r_w):
            if r < 1 or r & (r - 1):
                raise InvalidArgument(f"compression ratios must be powers of two, got {r}")
        if self.latent_channels < 1:
            raise InvalidArgument("latent_channels must be >= 1")

    @property
    def ratios(self) -> tuple[int, int, int]:
        return self.r_t, self.r_h, self.r_w

    def latent_shape(self, T: int, H: int, W: int) -> tuple[int, int, int, int]:
        if T % self.r_t or H % self.r_h or W % self.r_w:
            raise InvalidArgument(f"clip {(T, H, W)} not divisible by compression {self.ratios}")
        return self.latent_channels, T // self.r_t, H // self.r_h, W // self.r_w


def total_ratio(spec: CompressionSpec) -> int:
    return spec.r_t * spec.r_h * spec.r_w


class Encoder(nn.Module):
    """Patch encoder: one strided conv with kernel = stride = compression ratios,
    followed by a residual 3x3x3 mix in latent space."""

    def __init__(self, spec: CompressionSpec, width: int = 64):
        super().__init__()
        self.spec = spec
        self.down = nn.Conv3d(3, width, kernel_size=spec.ratios, stride=spec.ratios)
        self.mix = nn.Conv3d(width, width, 3, padding=1)
        self.out = nn.Conv3d(width, spec.latent_channels, 1)

    def forward(self, x: Tensor) -> Tensor:
        self.spec.latent_shape(*x.shape[2:])
        h = self.down(x - 0.5)
        return self.out(h + F.silu(self.mix(h)))


class Decoder(nn.Module):
    def __init__(self, spec: CompressionSpec, width: int = 64):
        super().__init__()
        self.inp = nn.Conv3d(spec.latent_channels, width, 1)
        self.mix = nn.Conv3d(width, width, 3, padding=1)
        self.up = nn.ConvTranspose3d(width, 3, kernel_size=spec.ratios, stride=spec.ratios)

    def forward(self, z: Tensor) -> Tensor:
        h = self.inp(z)
        h = h + F.silu(self.mix(h))
        # unbounded during training; clamp to [0, 1] only when measuring
        return self.up(h) + 0.5


def build_autoencoder(spec: CompressionSpec, seed: int = 0, width: int = 64) -> tuple[Encoder, Decoder]:
    state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        return Encoder(spec, width), Decoder(spec, width)
    finally:
        torch.random.set_rng_state(state)


def psnr(x: Tensor, y: Tensor) -> float:
    """PSNR in dB for signals in [0, 1]; identical inputs report ``PSNR_CAP``."""
    if x.shape != y.shape:
        raise InvalidArgument(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    mse = float((x.double() - y.double()).pow(2).mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def token_count(T: int, H: int, W: int, spec: CompressionSpec, patch=(1, 1, 1)) -> int:
    _, t, h, w = spec.latent_shape(T, H, W)
    pt, ph, pw = patch
    if t % pt or h % ph or w % pw:
        raise InvalidArgument(f"latent {(t, h, w)} not divisible by patch {tuple(patch)}")
    return (t // pt) * (h // ph) * (w // pw)


def train_autoencoder(enc: Encoder, dec: Decoder, clips: Tensor, iters: int, batch_size: int = 4,
                      lr: float = 2e-3, latent_reg: float = 1e-4, seed: int = 0) -> list[dict]:
    """L2 reconstruction plus a small latent-magnitude penalty."""
    g = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam([*enc.parameters(), *dec.parameters()], lr=lr)
    curve = []
    for it in range(iters):
        idx = torch.randint(len(clips), (batch_size,), generator=g)
        x = clips[idx]
        z = enc(x)
        loss = F.mse_loss(dec(z), x) + latent_reg * z.pow(2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.append({"iter": it, "recon_loss": loss.item()})
    return curve


@torch.no_grad()
def eval_psnr(enc: Encoder, dec: Decoder, clips: Tensor, batch_size: int = 4) -> float:
    recon = torch.cat([dec(enc(clips[i:i + batch_size])).clamp(0, 1) for i in range(0, len(clips), batch_size)])
    return psnr(recon, clips)


@dataclass
class StudyConfig:
    clip_shape: tuple[int, int, int] = (16, 64, 64)
    bench_shape: tuple[int, int, int] = (32, 256, 256)
    n_train: int = 32
    n_eval: int = 8
    vae_iters: int = 300
    vae_width: int = 64
    dit_iters: int = 30
    bench_runs: int = 11
    latent_channels: int = 16


def _encode_all(enc: Encoder, clips: Tensor, batch_size: int = 8) -> Tensor:
    with torch.no_grad():
        return torch.cat([enc(clips[i:i + batch_size]) for i in range(0, len(clips), batch_size)])


def _short_dit_run(cfg: DiTConfig, latents: Tensor, ids: Tensor, eval_latents: Tensor, eval_ids: Tensor,
                   iters: int, seed: int) -> float:
    model = build_model(cfg, seed)
    g = torch.Generator().manual_seed(seed)
    scale = latents.std().clamp_min(1e-6)
    x_all, ev = latents / scale, eval_latents / scale
    opt = torch.optim.AdamW(model.parameters(), lr=1e-3, betas=(0.9, 0.999), weight_decay=0.0)
    for _ in range(iters):
        idx = torch.randint(len(x_all), (8,), generator=g)
        x0 = x_all[idx]
        eps = torch.randn(x0.shape, generator=g)
        t = sample_timesteps(len(idx), g)
        loss = cfm_loss(model(noisify(x0, eps, t), t, ids[idx]), x0, eps)
        opt.zero_grad()
        loss.backward()
        opt.step()
    ge = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        eps = torch.randn(ev.shape, generator=ge)
        t = torch.rand(len(ev), generator=ge)
        return float(cfm_loss(model(noisify(ev, eps, t), t, eval_ids), ev, eps))


def _as_specs(specs, latent_channels: int) -> list[CompressionSpec]:
    return [s if isinstance(s, CompressionSpec) else CompressionSpec(*s, latent_channels=latent_channels)
            for s in specs]


def study_latencies(specs, dit_cfg: DiTConfig, study: StudyConfig = StudyConfig(), seed: int = 0) -> list[float]:
    """Median one-step latency of the study's DiT on each spec's latent at ``bench_shape``.

    Must not run concurrently with other heavy work, or the medians are meaningless.
    """
    out = []
    for spec in _as_specs(specs, study.latent_channels):
        model = build_model(replace(dit_cfg, latent_channels=spec.latent_channels, patch=(1, 1, 1)), seed)
        out.append(bench_latency(model, (1, *spec.latent_shape(*study.bench_shape)), runs=study.bench_runs))
    return out


def scaling_study(specs, dit_cfg: DiTConfig, study: StudyConfig = StudyConfig(), seed: int = 0,
                  cfg_hash: str = "", measure_latency: bool = True) -> ExperimentReport:
    """Train a toy autoencoder per compression spec and measure PSNR, tokens, latency and DiT loss.

    With ``measure_latency=False`` the latency column is NaN; fill it later via :func:`study_latencies`.
    """
    specs = _as_specs(specs, study.latent_channels)
    if len(specs) < 2:
        raise InvalidArgument("a scaling study needs at least two specs")
    report = ExperimentReport("vae-study", cfg_hash or config_hash({"specs": [s.ratios for s in specs],
                                                                    "dit": dit_cfg.to_dict(), "seed": seed}),
                              "vae_study")
    prompts = min(len(PALETTE), dit_cfg.cond_vocab)
    train, train_ids = clip_batch(study.n_train, study.clip_shape, seed, prompts)
    held, held_ids = clip_batch(study.n_eval, study.clip_shape, seed + 7919, prompts)
    T, H, W = study.clip_shape
    latencies = study_latencies(specs, dit_cfg, study, seed) if measure_latency else [math.nan] * len(specs)
    for spec, latency in zip(specs, latencies):
        enc, dec = build_autoencoder(spec, seed, study.vae_width)
        curve = train_autoencoder(enc, dec, train, study.vae_iters, seed=seed)
        report.curves[f"vae_{spec.r_t}x{spec.r_h}x{spec.r_w}"] = curve
        cfg = replace(dit_cfg, latent_channels=spec.latent_channels, patch=(1, 1, 1))
        eval_loss = _short_dit_run(cfg, _encode_all(enc, train), train_ids, _encode_all(enc, held), held_ids,
                                   study.dit_iters, seed)
        report.add_row(r_t=spec.r_t, r_h=spec.r_h, r_w=spec.r_w, total_ratio=total_ratio(spec),
                       psnr_db=eval_psnr(enc, dec, held), tokens=token_count(T, H, W, spec),
                       latency_ms_median=latency, eval_loss=eval_loss)
    report.notes.append(f"latent channels fixed at {study.latent_channels} for every variant")
    report.notes.append(f"latency measured at clip size {study.bench_shape}; PSNR at {study.clip_shape}")
    return report
