"""Adversarial step distillation with a timestep-aware DiT discriminator.

Sign convention. By default the hinge losses follow the mirrored form where
the discriminator drives real logits below -1 and fake logits above +1, and
the generator minimises the mean fake logit. ``convention="standard"`` flips
both to the usual SN-GAN form.
"""

from __future__ import annotations

import copy
import math
import random
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .dit import DiT, DiTBlock, RMSNorm, param_hash, patchify, rope_tables, timestep_embedding
from .errors import InvalidArgument, NumericFailure
from .flow import TimestepSchedule, euler_step, noisify, predict_x0


@dataclass
class AdvTrainConfig:
    k: int = 4
    K: int = 2
    L: int = 2
    ema_rate: float = 0.95
    c: float = 0.03
    lr_gen: float = 1e-4
    lr_disc: float = 1e-4
    lambda_adv: float = 1.0
    batch_size: int = 16
    head: str = "dit"
    convention: str = "mirrored"

    def __post_init__(self):
        if not 0.0 <= self.ema_rate < 1.0:
            raise InvalidArgument("ema_rate must lie in [0, 1)")
        if self.c <= 0:
            raise InvalidArgument("c must be > 0")
        if self.K < 1 or self.L < 1 or self.k < 2:
            raise InvalidArgument("need K >= 1, L >= 1 and k >= 2")
        if self.convention not in ("mirrored", "standard"):
            raise InvalidArgument(f"unknown convention {self.convention!r}")


# -- discriminator -----------------------------------------------------------

class DiTHead(nn.Module):
    """Learnable DiT blocks, token mean-pool, then an MLP with SiLU."""

    def __init__(self, gen_cfg, L: int):
        super().__init__()
        d = gen_cfg.hidden_dim
        self.blocks = nn.ModuleList(DiTBlock(gen_cfg, gen_cfg.num_heads, gen_cfg.ffn_dim) for _ in range(L))
        self.norm = RMSNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, 1))

    def forward(self, h: Tensor, t_mod: Tensor, cond: Tensor, rope, grid) -> Tensor:
        for blk in self.blocks:
            h = blk(h, t_mod, cond, rope)
        return self.mlp(self.norm(h).mean(1)).squeeze(-1)


def _to_grid(h: Tensor, grid) -> Tensor:
    B, N, d = h.shape
    return h.transpose(1, 2).reshape(B, d, *grid)


class ResBlock2DTemporalHead(nn.Module):
    """Per-frame 2D residual conv followed by temporal self-attention at each pixel."""

    def __init__(self, gen_cfg, L: int, heads: int = 4):
        super().__init__()
        d = gen_cfg.hidden_dim
        self.convs = nn.ModuleList(
            nn.Sequential(nn.GroupNorm(1, d), nn.SiLU(), nn.Conv3d(d, d, (1, 3, 3), padding=(0, 1, 1)))
            for _ in range(L))
        heads = heads if d % heads == 0 else 1
        self.temporal = nn.MultiheadAttention(d, heads, batch_first=True)
        self.mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, 1))

    def forward(self, h, t_mod, cond, rope, grid):
        x = _to_grid(h, grid)
        for conv in self.convs:
            x = x + conv(x)
        B, d, T, H, W = x.shape
        seq = x.permute(0, 3, 4, 2, 1).reshape(B * H * W, T, d)
        seq = seq + self.temporal(seq, seq, seq, need_weights=False)[0]
        return self.mlp(seq.mean(1).view(B, H * W, d).mean(1)).squeeze(-1)


class Conv3DResHead(nn.Module):
    """Lightweight 3D-conv residual head."""

    def __init__(self, gen_cfg, L: int):
        super().__init__()
        d = gen_cfg.hidden_dim
        self.convs = nn.ModuleList(
            nn.Sequential(nn.GroupNorm(1, d), nn.SiLU(), nn.Conv3d(d, d, 3, padding=1)) for _ in range(L))
        self.out = nn.Linear(d, 1)

    def forward(self, h, t_mod, cond, rope, grid):
        x = _to_grid(h, grid)
        for conv in self.convs:
            x = x + conv(x)
        return self.out(x.mean((2, 3, 4))).squeeze(-1)


HEADS = {"dit": DiTHead, "resblock2d_temporal": ResBlock2DTemporalHead, "conv3d": Conv3DResHead}


class Discriminator(nn.Module):
    """Frozen copy of the generator's stem and first K blocks, plus a learnable head."""

    def __init__(self, gen: DiT, K: int, L: int, head: str = "dit"):
        super().__init__()
        if not 1 <= K <= gen.cfg.num_blocks:
            raise InvalidArgument(f"K must lie in [1, {gen.cfg.num_blocks}], got {K}")
        if L < 1:
            raise InvalidArgument("L must be >= 1")
        if head not in HEADS:
            raise InvalidArgument(f"unknown discriminator head {head!r}")
        self.cfg = gen.cfg
        self.K = K
        # stem + blocks inherited from the generator; never trained
        self.prefix = nn.ModuleDict({
            "patch_embed": copy.deepcopy(gen.patch_embed),
            "time_mlp": copy.deepcopy(gen.time_mlp),
            "t_block": copy.deepcopy(gen.t_block),
            "blocks": copy.deepcopy(gen.blocks[:K]),
        })
        self.prompt_table = nn.Parameter(gen.prompt_table.detach().clone(), requires_grad=False)
        self.register_buffer("prefix_block_mask", gen.block_mask[:K].clone())
        self.head = HEADS[head](gen.cfg, L)
        for p in self.prefix.parameters():
            p.requires_grad_(False)

    def frozen_parameters(self):
        yield self.prompt_table
        yield from self.prefix.parameters()

    def trainable_parameters(self):
        return self.head.parameters()

    def prefix_hash(self) -> str:
        return param_hash(self.prefix) + param_hash(nn.ParameterList([self.prompt_table]))

    def forward(self, x: Tensor, t, cond: Tensor) -> Tensor:
        B = x.shape[0]
        pt, ph, pw = self.cfg.patch
        grid = (x.shape[2] // pt, x.shape[3] // ph, x.shape[4] // pw)
        if cond.dtype in (torch.int64, torch.int32):
            cond = self.prompt_table[cond]
        if not isinstance(t, Tensor):
            t = torch.tensor(float(t))
        t = t.to(x.dtype).reshape(-1).expand(B) if t.numel() == 1 else t.to(x.dtype).reshape(B)
        h = self.prefix["patch_embed"](patchify(x, self.cfg.patch))
        t_emb = self.prefix["time_mlp"](timestep_embedding(t).to(x.dtype))
        t_mod = self.prefix["t_block"](t_emb).view(B, 6, -1)
        rope = rope_tables(grid, self.cfg.head_dim, x.device, x.dtype) if self.cfg.rope else None
        for m, blk in zip(self.prefix_block_mask, self.prefix["blocks"]):
            if m.item() != 0:
                h = blk(h, t_mod, cond, rope)
        return self.head(h, t_mod, cond, rope, grid)


def build_discriminator(gen: DiT, K: int, L: int, seed: int = 0, head: str = "dit") -> Discriminator:
    state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        disc = Discriminator(gen, K, L, head)
    finally:
        torch.random.set_rng_state(state)
    return disc


# -- losses ------------------------------------------------------------------

def disc_loss(d_real: Tensor, d_fake: Tensor, convention: str = "mirrored") -> Tensor:
    if convention == "mirrored":
        return F.relu(1 + d_real).mean() + F.relu(1 - d_fake).mean()
    return F.relu(1 - d_real).mean() + F.relu(1 + d_fake).mean()


def pseudo_huber(x_hat: Tensor, x: Tensor, c: float) -> Tensor:
    """Per-sample ``sqrt(mse + c^2) - c``."""
    mse = (x_hat - x).pow(2).flatten(1).mean(1)
    return torch.sqrt(mse + c * c) - c


def gen_losses(d_fake: Tensor, x0_hat: Tensor, x0: Tensor, c: float, lambda_adv: float = 1.0,
               convention: str = "mirrored") -> tuple[Tensor, Tensor, Tensor]:
    if c <= 0:
        raise InvalidArgument("c must be > 0")
    adv = d_fake.mean() if convention == "mirrored" else -d_fake.mean()
    recon = pseudo_huber(x0_hat, x0, c).mean()
    return adv, recon, lambda_adv * adv + recon


# -- EMA ---------------------------------------------------------------------

@torch.no_grad()
def ema_update(ema, live, rate: float):
    """``ema <- rate * ema + (1 - rate) * live`` for modules or tensor sequences."""
    if not 0.0 <= rate < 1.0:
        raise InvalidArgument("rate must lie in [0, 1)")
    e_params = list(ema.parameters()) if isinstance(ema, nn.Module) else list(ema)
    l_params = list(live.parameters()) if isinstance(live, nn.Module) else list(live)
    if len(e_params) != len(l_params):
        raise InvalidArgument("ema and live parameter lists differ in length")
    for e, l in zip(e_params, l_params):
        if e.shape != l.shape:
            raise InvalidArgument(f"shape mismatch {tuple(e.shape)} vs {tuple(l.shape)}")
        e.mul_(rate).add_(l.detach(), alpha=1 - rate)
    return ema


def ema_coefficients(rate, n: int) -> list:
    """Weights of live snapshots theta_0..theta_n in the EMA after ``n`` updates from theta_0."""
    return [rate**n] + [(1 - rate) * rate ** (n - i) for i in range(1, n + 1)]


# -- sample construction -----------------------------------------------------

def timestep_pairs(schedule: TimestepSchedule) -> list[tuple[float, float]]:
    steps = schedule.steps
    return [(a, b) for i, a in enumerate(steps) for b in steps[i + 1:]]


def make_fake_real(x0: Tensor, eps: Tensor, t: float, t_next: float, gen, cond=None,
                   generator: torch.Generator | None = None, eps_real: Tensor | None = None):
    """Fake: one generator Euler step from x_t to x_t'. Real: forward-noised data at t'."""
    if not t_next < t:
        raise InvalidArgument(f"need t_next < t, got t={t}, t_next={t_next}")
    xt = noisify(x0, eps, t)
    fake = euler_step(xt, gen(xt, t, cond), t, t_next)
    if eps_real is None:
        eps_real = torch.randn(x0.shape, generator=generator)
    real = noisify(x0, eps_real, t_next)
    return fake, real


# -- training ----------------------------------------------------------------

def _check(val: Tensor, it: int, which: str) -> None:
    if not math.isfinite(val.item()):
        raise NumericFailure(f"non-finite {which} at iteration {it}", step=it, which=which)


def d_step(gen: DiT, disc: Discriminator, opt_d, x0: Tensor, ids: Tensor, t: float, t_next: float,
           g: torch.Generator, convention: str = "mirrored") -> Tensor:
    """One discriminator update; the generator only produces samples under no_grad."""
    eps = torch.randn(x0.shape, generator=g)
    with torch.no_grad():
        fake, real = make_fake_real(x0, eps, t, t_next, gen, ids, generator=g)
    loss = disc_loss(disc(real, t_next, ids), disc(fake, t_next, ids), convention)
    opt_d.zero_grad()
    loss.backward()
    opt_d.step()
    return loss.detach()


def g_step(gen: DiT, disc: Discriminator, opt_g, x0: Tensor, ids: Tensor, t: float, t_next: float,
           g: torch.Generator, cfg: AdvTrainConfig) -> tuple[Tensor, Tensor]:
    """One generator update with fresh noise; discriminator weights are held fixed."""
    eps = torch.randn(x0.shape, generator=g)
    xt = noisify(x0, eps, t)
    v = gen(xt, t, ids)
    fake = euler_step(xt, v, t, t_next)
    for p in disc.trainable_parameters():
        p.requires_grad_(False)
    try:
        adv, recon, total = gen_losses(disc(fake, t_next, ids), predict_x0(xt, v, t), x0, cfg.c,
                                       cfg.lambda_adv, cfg.convention)
    finally:
        for p in disc.trainable_parameters():
            p.requires_grad_(True)
    opt_g.zero_grad()
    total.backward()
    opt_g.step()
    return adv.detach(), recon.detach()


def make_optimizers(gen: DiT, disc: Discriminator, cfg: AdvTrainConfig):
    opt_g = torch.optim.AdamW(gen.parameters(), lr=cfg.lr_gen, betas=(0.9, 0.999), weight_decay=0.0)
    opt_d = torch.optim.AdamW(disc.trainable_parameters(), lr=cfg.lr_disc, betas=(0.9, 0.999), weight_decay=0.0)
    return opt_g, opt_d


def train_adversarial(gen: DiT, disc: Discriminator, schedule: TimestepSchedule, task, cfg: AdvTrainConfig,
                      iters: int, seed: int = 0, track: str | None = None):
    """Alternating D/G updates on schedule timestep pairs.

    Returns ``(ema_generator, curve, history)``; ``history`` holds snapshots of
    the live parameter named ``track`` (initial value first) when requested.
    """
    if len(schedule) != cfg.k:
        raise InvalidArgument(f"schedule has {len(schedule)} steps, config says k={cfg.k}")
    pairs = timestep_pairs(schedule)
    rng = random.Random(seed)
    g = torch.Generator().manual_seed(seed)
    ema = copy.deepcopy(gen)
    for p in ema.parameters():
        p.requires_grad_(False)
    opt_g, opt_d = make_optimizers(gen, disc, cfg)
    live = dict(gen.named_parameters())
    history = [live[track].detach().clone()] if track else []
    curve = []
    for it in range(iters):
        x0, ids = task.sample(cfg.batch_size, g)
        t, t_next = pairs[rng.randrange(len(pairs))]
        loss_d = d_step(gen, disc, opt_d, x0, ids, t, t_next, g, cfg.convention)
        _check(loss_d, it, "loss_d")
        adv, recon = g_step(gen, disc, opt_g, x0, ids, t, t_next, g, cfg)
        _check(adv, it, "loss_g_adv")
        _check(recon, it, "loss_recon")
        ema_update(ema, gen, cfg.ema_rate)
        if track:
            history.append(live[track].detach().clone())
        curve.append({"iter": it, "loss_d": loss_d.item(), "loss_g_adv": adv.item(), "loss_recon": recon.item()})
    return ema, curve, history


def manifold_distance(samples: Tensor, reference: Tensor, c: float) -> Tensor:
    """Per-sample pseudo-Huber distance to the nearest reference point."""
    mse = torch.cdist(samples.flatten(1), reference.flatten(1)).pow(2) / samples[0].numel()
    return (torch.sqrt(mse + c * c) - c).min(1).values
