"""Feature-alignment knowledge distillation from a supernet teacher to a pruned student."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .dit import DiT, param_hash
from .errors import InvalidArgument, NumericFailure
from .flow import cfm_loss, noisify, sample_timesteps

ALIGNER_PREFIX = "kd_aligners."


@dataclass(frozen=True)
class GroupSpec:
    """Group endpoints (1-based block counts) for student and teacher."""

    student_ends: tuple[int, ...]
    teacher_ends: tuple[int, ...]

    def __post_init__(self):
        if not self.student_ends or len(self.student_ends) != len(self.teacher_ends):
            raise InvalidArgument("group spec needs matching, nonempty endpoint lists")
        for ends in (self.student_ends, self.teacher_ends):
            if ends[0] < 1 or any(b <= a for a, b in zip(ends, ends[1:])):
                raise InvalidArgument(f"group endpoints must be positive and increasing: {ends}")

    @property
    def n(self) -> int:
        return len(self.student_ends)

    @classmethod
    def proportional(cls, n_student: int, n_teacher: int, n_groups: int) -> "GroupSpec":
        """Student groups split evenly; each endpoint pairs with the teacher block at the same depth fraction."""
        if not 1 <= n_groups <= min(n_student, n_teacher):
            raise InvalidArgument(f"need 1 <= groups <= min({n_student}, {n_teacher}), got {n_groups}")
        # round half up with integer arithmetic
        s = tuple((2 * i * n_student + n_groups) // (2 * n_groups) for i in range(1, n_groups + 1))
        t = tuple((2 * e * n_teacher + n_student) // (2 * n_student) for e in s)
        return cls(s, t)


def group_features(teacher_feats: list[Tensor], student_feats: list[Tensor], spec: GroupSpec
                   ) -> list[tuple[Tensor, Tensor]]:
    """Pairs ``(teacher, student)`` outputs of the last block in each group."""
    if spec.student_ends[-1] != len(student_feats) or spec.teacher_ends[-1] != len(teacher_feats):
        raise InvalidArgument(
            f"group spec covers {spec.student_ends[-1]}/{spec.teacher_ends[-1]} blocks, "
            f"got {len(student_feats)} student and {len(teacher_feats)} teacher features")
    return [(teacher_feats[t - 1], student_feats[s - 1]) for s, t in zip(spec.student_ends, spec.teacher_ends)]


class FeatureAligner(nn.Linear):
    """Affine student-to-teacher feature map, initialised to a padded identity."""

    def __init__(self, d_student: int, d_teacher: int):
        super().__init__(d_student, d_teacher)
        with torch.no_grad():
            self.weight.zero_()
            k = min(d_student, d_teacher)
            self.weight[:k, :k] = torch.eye(k)
            self.bias.zero_()


def make_aligners(d_student: int, d_teacher: int, n: int) -> nn.ModuleList:
    return nn.ModuleList(FeatureAligner(d_student, d_teacher) for _ in range(n))


def cosine_sim_loss(y_teacher: Tensor, y_aligned: Tensor) -> Tensor:
    return -F.cosine_similarity(y_aligned, y_teacher, dim=-1, eps=1e-8).mean()


def l2_sim_loss(y_teacher: Tensor, y_aligned: Tensor) -> Tensor:
    return (y_aligned - y_teacher).pow(2).sum(-1).mean()


SIMILARITIES = {"cosine": cosine_sim_loss, "l2": l2_sim_loss}


def feature_distill_loss(pairs, aligners, sim: str = "cosine") -> Tensor:
    """Mean over groups of sim(teacher, aligner(student)); cosine variant lies in [-1, 1]."""
    if len(pairs) != len(aligners) or not pairs:
        raise InvalidArgument(f"{len(pairs)} feature pairs but {len(aligners)} aligners")
    fn = SIMILARITIES[sim]
    total = 0.0
    for (y_t, y_s), align in zip(pairs, aligners):
        y = align(y_s)
        if y.shape != y_t.shape:
            raise InvalidArgument(f"aligned student features {tuple(y.shape)} vs teacher {tuple(y_t.shape)}")
        total = total + fn(y_t, y)
    return total / len(pairs)


def total_loss(fm_loss, distill_loss, alpha: float = 0.01):
    if alpha < 0:
        raise InvalidArgument("alpha must be >= 0")
    return fm_loss + alpha * distill_loss


def aligner_state(aligners: nn.ModuleList) -> dict[str, Tensor]:
    return {ALIGNER_PREFIX + k: v for k, v in aligners.state_dict().items()}


def train_kd(teacher: DiT, student: DiT, spec: GroupSpec, task, iters: int, alpha: float = 0.01,
             lr: float = 1e-3, aligner_lr: float | None = None, batch_size: int = 16, seed: int = 0,
             sim: str = "cosine") -> tuple[DiT, nn.ModuleList, list[dict]]:
    """Finetune ``student`` on CFM + alpha * feature distillation; the teacher stays frozen.

    Returns the student, its aligners and the per-iteration loss curve.
    """
    g = torch.Generator().manual_seed(seed)
    aligners = make_aligners(student.cfg.hidden_dim, teacher.cfg.hidden_dim, spec.n)
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    before = param_hash(teacher)
    opt = torch.optim.AdamW([{"params": student.parameters(), "lr": lr},
                             {"params": aligners.parameters(), "lr": aligner_lr or lr}],
                            betas=(0.9, 0.999), weight_decay=0.0)
    curve = []
    student.train()
    try:
        for it in range(iters):
            x0, ids = task.sample(batch_size, g)
            eps = torch.randn(x0.shape, generator=g)
            t = sample_timesteps(batch_size, g)
            xt = noisify(x0, eps, t)
            with torch.no_grad():
                _, t_feats = teacher(xt, t, ids, capture=True)
            v, s_feats = student(xt, t, ids, capture=True)
            fm = cfm_loss(v, x0, eps)
            dl = feature_distill_loss(group_features(t_feats, s_feats, spec), aligners, sim)
            loss = total_loss(fm, dl, alpha)
            for name, val in (("fm_loss", fm), ("distill_loss", dl)):
                if not math.isfinite(val.item()):
                    raise NumericFailure(f"non-finite {name} at iteration {it}", step=it, which=name)
            opt.zero_grad()
            loss.backward()
            opt.step()
            curve.append({"iter": it, "fm_loss": fm.item(), "distill_loss": dl.item(), "total": loss.item()})
    finally:
        for p in teacher.parameters():
            p.requires_grad_(True)
    assert param_hash(teacher) == before, "teacher parameters changed during distillation"
    return student, aligners, curve
