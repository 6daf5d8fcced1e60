"""Rectified-flow primitives: interpolation, CFM loss, x0 recovery and Euler sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import torch
from torch import Tensor

from .errors import InvalidArgument, NumericFailure

VelocityField = Callable[[float, Tensor, Tensor], Tensor]


def _same_shape(*tensors: Tensor) -> None:
    shape = tensors[0].shape
    for x in tensors[1:]:
        if x.shape != shape:
            raise InvalidArgument(f"shape mismatch: {tuple(shape)} vs {tuple(x.shape)}")


def _as_time(t, batch: int) -> Tensor | float:
    if isinstance(t, Tensor) and t.ndim > 0:
        if t.shape[0] != batch:
            raise InvalidArgument(f"per-sample t has {t.shape[0]} entries for batch {batch}")
        return t.view(-1, *([1] * 4))
    return float(t)


@dataclass(frozen=True)
class TimestepSchedule:
    steps: tuple[float, ...]

    def __post_init__(self):
        steps = tuple(float(s) for s in self.steps)
        object.__setattr__(self, "steps", steps)
        if not steps:
            raise InvalidArgument("schedule must have at least one step")
        if steps[0] != 1.0:
            raise InvalidArgument(f"schedule must start at 1.0, got {steps[0]}")
        if any(b >= a for a, b in zip(steps, steps[1:])):
            raise InvalidArgument(f"schedule must be strictly decreasing: {steps}")
        if steps[-1] <= 0.0:
            raise InvalidArgument("last schedule step must be > 0")

    def __len__(self) -> int:
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)


def make_schedule(k: int) -> TimestepSchedule:
    """Uniform schedule ``1, 1 - 1/k, ..., 1/k``."""
    if k < 1:
        raise InvalidArgument(f"k must be >= 1, got {k}")
    return TimestepSchedule(tuple(1.0 - i / k for i in range(k)))


def noisify(x0: Tensor, eps: Tensor, t) -> Tensor:
    """``(1 - t) * x0 + t * eps``. ``t`` may be a scalar or a per-sample tensor."""
    _same_shape(x0, eps)
    if isinstance(t, Tensor):
        if ((t < 0) | (t > 1)).any():
            raise InvalidArgument("t must lie in [0, 1]")
    elif not 0.0 <= t <= 1.0:
        raise InvalidArgument(f"t must lie in [0, 1], got {t}")
    # endpoints are returned exactly, without rounding through the blend
    if not isinstance(t, Tensor):
        if t == 0.0:
            return x0.clone()
        if t == 1.0:
            return eps.clone()
    tt = _as_time(t, x0.shape[0])
    return (1 - tt) * x0 + tt * eps


def cfm_loss(v_pred: Tensor, x0: Tensor, eps: Tensor) -> Tensor:
    _same_shape(v_pred, x0, eps)
    return ((v_pred - (eps - x0)) ** 2).mean()


def predict_x0(xt: Tensor, v: Tensor, t) -> Tensor:
    _same_shape(xt, v)
    return xt - _as_time(t, xt.shape[0]) * v


def euler_step(xt: Tensor, v: Tensor, t: float, t_next: float) -> Tensor:
    _same_shape(xt, v)
    if not (0.0 <= t_next < t <= 1.0):
        raise InvalidArgument(f"need 0 <= t_next < t <= 1, got t={t}, t_next={t_next}")
    return xt + (t_next - t) * v


def sample(field: VelocityField, schedule: TimestepSchedule | Sequence[float], noise: Tensor,
           cond: Tensor | None = None) -> Tensor:
    """Deterministic k-step Euler sampler; the last step jumps to t=0 through ``predict_x0``."""
    if not isinstance(schedule, TimestepSchedule):
        schedule = TimestepSchedule(tuple(schedule))
    if not torch.isfinite(noise).all():
        raise InvalidArgument("noise must be finite")
    steps = schedule.steps
    x = noise
    for i, t in enumerate(steps):
        v = field(t, x, cond)
        if not torch.isfinite(v).all():
            raise NumericFailure(f"non-finite velocity at step {i} (t={t})", step=i)
        if i + 1 < len(steps):
            x = euler_step(x, v, t, steps[i + 1])
        else:
            x = predict_x0(x, v, t)
    return x


def sample_timesteps(n: int, generator: torch.Generator | None = None, mode: str = "uniform",
                     m: float = -1.0, s: float = 1.0) -> Tensor:
    """Training-time timestep draws. ``logit_normal`` is sigmoid(N(m, s^2))."""
    if mode == "uniform":
        return torch.rand(n, generator=generator)
    if mode == "logit_normal":
        return torch.sigmoid(m + s * torch.randn(n, generator=generator))
    raise InvalidArgument(f"unknown timestep sampler {mode!r}")


def logit_normal_mean(m: float = -1.0, s: float = 1.0, n: int = 4001) -> float:
    # quadrature helper used only for sanity checks of the sampler
    z = torch.linspace(-8, 8, n, dtype=torch.float64)
    w = torch.exp(-0.5 * z**2) / math.sqrt(2 * math.pi)
    vals = torch.sigmoid(m + s * z)
    return float(torch.trapezoid(w * vals, z))
