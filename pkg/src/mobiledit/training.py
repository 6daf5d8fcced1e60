"""Plain flow-matching training loop shared by the pretrain and finetune stages."""

from __future__ import annotations

import math

import torch

from .errors import NumericFailure
from .flow import cfm_loss, noisify, sample_timesteps


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def train_flow_matching(model, task, iters: int, batch_size: int = 16, lr: float = 1e-3, seed: int = 0,
                        t_mode: str = "uniform", weight_decay: float = 0.0, log_every: int = 1) -> list[dict]:
    """AdamW on the CFM objective; returns the per-iteration loss curve."""
    g = torch.Generator().manual_seed(seed)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, betas=(0.9, 0.999), weight_decay=weight_decay)
    curve = []
    model.train()
    for it in range(iters):
        x0, ids = task.sample(batch_size, g)
        eps = torch.randn(x0.shape, generator=g)
        t = sample_timesteps(batch_size, g, t_mode)
        loss = cfm_loss(model(noisify(x0, eps, t), t, ids), x0, eps)
        if not math.isfinite(loss.item()):
            raise NumericFailure(f"non-finite fm loss at iteration {it}", step=it, which="fm_loss")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if it % log_every == 0:
            curve.append({"iter": it, "fm_loss": loss.item()})
    return curve
