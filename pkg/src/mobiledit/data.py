"""Synthetic corpora: moving-pattern video clips and structured toy latents.

Everything is driven by explicit seeds; nothing reads the global RNG.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import torch
from torch import Tensor

from .errors import InvalidArgument

# eight well-separated RGB colours, indexed by prompt id
PALETTE = torch.tensor([
    [0.90, 0.15, 0.15], [0.15, 0.75, 0.20], [0.20, 0.30, 0.90], [0.95, 0.85, 0.15],
    [0.85, 0.25, 0.85], [0.15, 0.85, 0.85], [0.95, 0.55, 0.10], [0.55, 0.55, 0.55],
])
SHAPES = ("square", "disk", "bar", "ring")


def _shape_mask(kind: str, yy: Tensor, xx: Tensor, cy: Tensor, cx: Tensor, size: float) -> Tensor:
    dy, dx = yy - cy, xx - cx
    if kind == "square":
        return ((dy.abs() <= size) & (dx.abs() <= size)).float()
    if kind == "disk":
        return (dy**2 + dx**2 <= size**2).float()
    if kind == "bar":
        return ((dy.abs() <= size * 0.4) & (dx.abs() <= size * 1.6)).float()
    r = (dy**2 + dx**2).sqrt()
    return ((r <= size) & (r >= size * 0.55)).float()


def render_clip(prompt_id: int, shape: tuple[int, int, int], g: torch.Generator) -> Tensor:
    """One [3, T, H, W] clip: a coloured shape translating over a textured background."""
    T, H, W = shape
    color = PALETTE[prompt_id % len(PALETTE)]
    kind = SHAPES[(prompt_id // len(PALETTE) + prompt_id) % len(SHAPES)]
    size = (0.12 + 0.06 * torch.rand((), generator=g).item()) * min(H, W)
    pos = torch.rand(2, generator=g) * torch.tensor([H, W])
    vel = (torch.rand(2, generator=g) - 0.5) * torch.tensor([H, W]) * 0.08
    phase = torch.rand((), generator=g).item() * 2 * math.pi
    yy = torch.arange(H, dtype=torch.float32)[:, None]
    xx = torch.arange(W, dtype=torch.float32)[None, :]
    # background: low-contrast gradient whose orientation depends on the prompt
    angle = prompt_id * 0.7
    bg = 0.25 + 0.1 * torch.sin((yy * math.cos(angle) + xx * math.sin(angle)) * 2 * math.pi / max(H, W) * 2 + phase)
    frames = []
    for f in range(T):
        c = pos + vel * f
        cy, cx = c[0] % H, c[1] % W
        m = _shape_mask(kind, yy, xx, cy, cx, size)
        img = bg[None].expand(3, H, W) * (1 - m) + color[:, None, None] * m
        frames.append(img)
    return torch.stack(frames, dim=1).clamp(0.0, 1.0)


def make_synthetic_dataset(n: int, shape: tuple[int, int, int], seed: int, num_prompts: int = 8
                           ) -> Iterator[tuple[Tensor, int]]:
    """Deterministic stream of ``(clip [3,T,H,W], prompt_id)`` pairs."""
    if n < 0 or len(shape) != 3 or min(shape) < 1:
        raise InvalidArgument(f"bad dataset request n={n} shape={shape}")
    g = torch.Generator().manual_seed(seed)
    for _ in range(n):
        pid = int(torch.randint(num_prompts, (), generator=g))
        yield render_clip(pid, shape, g), pid


def clip_batch(n: int, shape: tuple[int, int, int], seed: int, num_prompts: int = 8) -> tuple[Tensor, Tensor]:
    clips, ids = zip(*make_synthetic_dataset(n, shape, seed, num_prompts))
    return torch.stack(clips), torch.tensor(ids)


@dataclass
class LatentTask:
    """Class-conditional toy latents with a few discrete modes per class.

    Each prompt owns ``modes`` smooth prototype patterns; a sample is one
    prototype plus small isotropic jitter. The multimodality is what makes
    few-step Euler sampling of an imperfect velocity field blur between modes.
    """

    shape: tuple[int, int, int, int] = (8, 2, 8, 8)
    num_prompts: int = 4
    modes: int = 2
    jitter: float = 0.05
    seed: int = 0

    def __post_init__(self):
        g = torch.Generator().manual_seed(10_000 + self.seed)
        c, t, h, w = self.shape
        tt = torch.linspace(0, 1, t)[:, None, None]
        yy = torch.linspace(0, 1, h)[None, :, None]
        xx = torch.linspace(0, 1, w)[None, None, :]
        protos = []
        for _ in range(self.num_prompts * self.modes):
            chans = []
            for _ in range(c):
                fy, fx, ft = (torch.randint(1, 3, (3,), generator=g)).float()
                ph = torch.rand(3, generator=g) * 2 * math.pi
                amp = 0.6 + 0.8 * torch.rand((), generator=g)
                chans.append(amp * torch.sin(2 * math.pi * fy * yy + ph[0]) * torch.cos(2 * math.pi * fx * xx + ph[1])
                             * torch.cos(math.pi * ft * tt + ph[2]))
            protos.append(torch.stack(chans))
        self.prototypes = torch.stack(protos).view(self.num_prompts, self.modes, *self.shape)

    def sample(self, n: int, generator: torch.Generator, prompt_ids: Tensor | None = None) -> tuple[Tensor, Tensor]:
        if prompt_ids is None:
            prompt_ids = torch.randint(self.num_prompts, (n,), generator=generator)
        mode = torch.randint(self.modes, (n,), generator=generator)
        x = self.prototypes[prompt_ids, mode]
        return x + self.jitter * torch.randn(x.shape, generator=generator), prompt_ids

    def batches(self, n_batches: int, batch_size: int, seed: int) -> list[tuple[Tensor, Tensor, Tensor, Tensor]]:
        """Fixed evaluation stream of ``(x0, eps, t, prompt_ids)`` tuples."""
        g = torch.Generator().manual_seed(seed)
        out = []
        for _ in range(n_batches):
            x0, ids = self.sample(batch_size, g)
            eps = torch.randn(x0.shape, generator=g)
            t = torch.rand(batch_size, generator=g)
            out.append((x0, eps, t, ids))
        return out
