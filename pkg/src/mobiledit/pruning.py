"""Tri-level structured pruning: block, attention-head and FFN-channel masks.

Masks live in the model's buffers (``block_mask`` on the model, ``head_mask``
and ``ffn_mask`` on each block) so a masked supernet is just a normal forward.
``densify`` turns a masked supernet into a smaller dense model with the same
outputs.
"""

from __future__ import annotations

import copy
import itertools
import json
import math
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
from torch import Tensor

from .bench import bench_latency
from .dit import DiT, DiTConfig, count_flops, count_params, tokens_for
from .errors import InfeasibleBudget, InvalidArgument
from .flow import cfm_loss, noisify
from .report import ExperimentReport, config_hash

AXES = ("blocks", "heads", "ffn")


@dataclass
class MaskSet:
    block_mask: list[int]
    head_masks: list[list[int]]
    ffn_masks: list[list[int]]

    @classmethod
    def ones(cls, cfg: DiTConfig) -> "MaskSet":
        return cls([1] * cfg.num_blocks,
                   [[1] * cfg.heads_of(i) for i in range(cfg.num_blocks)],
                   [[1] * cfg.ffn_of(i) for i in range(cfg.num_blocks)])

    def validate(self, cfg: DiTConfig) -> None:
        if len(self.block_mask) != cfg.num_blocks:
            raise InvalidArgument(f"block mask has {len(self.block_mask)} entries, model has {cfg.num_blocks} blocks")
        if len(self.head_masks) != cfg.num_blocks or len(self.ffn_masks) != cfg.num_blocks:
            raise InvalidArgument("need one head mask and one FFN mask per block")
        vals = set(self.block_mask)
        for i in range(cfg.num_blocks):
            if len(self.head_masks[i]) != cfg.heads_of(i):
                raise InvalidArgument(f"block {i}: head mask length {len(self.head_masks[i])} != {cfg.heads_of(i)}")
            if len(self.ffn_masks[i]) != cfg.ffn_of(i):
                raise InvalidArgument(f"block {i}: ffn mask length {len(self.ffn_masks[i])} != {cfg.ffn_of(i)}")
            vals |= set(self.head_masks[i]) | set(self.ffn_masks[i])
            if self.block_mask[i] and (sum(self.head_masks[i]) == 0 or sum(self.ffn_masks[i]) == 0):
                raise InvalidArgument(f"block {i} is kept but has no active heads or FFN channels")
        if not vals <= {0, 1}:
            raise InvalidArgument(f"mask entries must be 0/1, found {sorted(vals)}")
        if sum(self.block_mask) == 0:
            raise InvalidArgument("at least one block must stay active")

    def key(self) -> tuple:
        return (tuple(self.block_mask), tuple(map(tuple, self.head_masks)), tuple(map(tuple, self.ffn_masks)))

    def flat(self) -> tuple[int, ...]:
        return tuple(self.block_mask) + sum(map(tuple, self.head_masks), ()) + sum(map(tuple, self.ffn_masks), ())

    def __eq__(self, other) -> bool:
        return isinstance(other, MaskSet) and self.key() == other.key()

    def __hash__(self) -> int:
        return hash(self.key())

    # canonical names mirror the model's buffer names
    def to_dict(self) -> dict[str, list[int]]:
        d = {"block_mask": list(self.block_mask)}
        for i, (h, f) in enumerate(zip(self.head_masks, self.ffn_masks)):
            d[f"blocks.{i}.head_mask"] = list(h)
            d[f"blocks.{i}.ffn_mask"] = list(f)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MaskSet":
        n = len(d["block_mask"])
        return cls(list(d["block_mask"]), [list(d[f"blocks.{i}.head_mask"]) for i in range(n)],
                   [list(d[f"blocks.{i}.ffn_mask"]) for i in range(n)])

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def loads(cls, text: str) -> "MaskSet":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "MaskSet":
        return cls.loads(Path(path).read_text())


@dataclass
class PruneBudget:
    max_params: int
    blocks_to_prune: int | None = None
    heads_to_prune: int | None = None  # per block
    ffn_keep_fraction: float | None = None

    def __post_init__(self):
        if self.max_params <= 0:
            raise InvalidArgument("max_params must be > 0")


@dataclass
class CandidateSet:
    candidates: list[MaskSet]
    groups: dict[str, list[tuple[int, int, int]]] = field(default_factory=dict)  # axis -> (start, stop, prunes)
    space_size: int = 0

    def __len__(self) -> int:
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)


# -- applying masks --------------------------------------------------------

def apply_block_mask(model: DiT, block_mask: Sequence[int]) -> DiT:
    mask = torch.as_tensor(list(block_mask), dtype=torch.float32)
    if mask.numel() != model.cfg.num_blocks:
        raise InvalidArgument(f"block mask length {mask.numel()} != {model.cfg.num_blocks}")
    if not ((mask == 0) | (mask == 1)).all():
        raise InvalidArgument("block mask must be binary")
    if mask.sum() == 0:
        raise InvalidArgument("all-zero block mask would remove every block")
    model.block_mask.copy_(mask)
    return model


class ChannelMasked(nn.Module):
    """Wraps a linear layer and zeroes the masked output channels."""

    def __init__(self, layer: nn.Linear, mask: Sequence[int] | Tensor):
        super().__init__()
        mask = torch.as_tensor(mask, dtype=torch.float32).flatten()
        if mask.numel() != layer.out_features:
            raise InvalidArgument(f"mask length {mask.numel()} != output dim {layer.out_features}")
        self.layer = layer
        self.register_buffer("mask", mask)

    def forward(self, x: Tensor) -> Tensor:
        return self.layer(x) * self.mask.to(x.dtype)


def apply_channel_mask(layer: nn.Linear, mask) -> ChannelMasked:
    return ChannelMasked(layer, mask)


def head_mask_as_channels(head_mask: Sequence[int], head_dim: int) -> Tensor:
    """Expand a per-head mask to the channel mask over the attention output width."""
    return torch.as_tensor(list(head_mask), dtype=torch.float32).repeat_interleave(head_dim)


def apply_masks(model: DiT, masks: MaskSet) -> DiT:
    masks.validate(model.cfg)
    apply_block_mask(model, masks.block_mask)
    for blk, h, f in zip(model.blocks, masks.head_masks, masks.ffn_masks):
        blk.head_mask.copy_(torch.tensor(h, dtype=torch.float32))
        blk.ffn_mask.copy_(torch.tensor(f, dtype=torch.float32))
    return model


def read_masks(model: DiT) -> MaskSet:
    return MaskSet([int(v) for v in model.block_mask.tolist()],
                   [[int(v) for v in b.head_mask.tolist()] for b in model.blocks],
                   [[int(v) for v in b.ffn_mask.tolist()] for b in model.blocks])


def mask_overrides(masks: MaskSet) -> dict:
    """Masks as forward-time overrides; leaves the model's buffers untouched."""
    return {"block": torch.tensor(masks.block_mask, dtype=torch.float32),
            "heads": [torch.tensor(h, dtype=torch.float32) for h in masks.head_masks],
            "ffn": [torch.tensor(f, dtype=torch.float32) for f in masks.ffn_masks]}


def masked_config(cfg: DiTConfig, masks: MaskSet) -> DiTConfig:
    keep = [i for i, m in enumerate(masks.block_mask) if m]
    heads = tuple(sum(masks.head_masks[i]) for i in keep)
    ffn = tuple(sum(masks.ffn_masks[i]) for i in keep)
    return replace(cfg, num_blocks=len(keep), block_heads=heads, block_ffn=ffn).normalized()


# -- combinatorics -----------------------------------------------------------

def count_configurations(n: int, k: int) -> int:
    """Number of ways to prune ``k`` of ``n`` units."""
    if n < 0 or k < 0 or k > n:
        raise InvalidArgument(f"need 0 <= k <= n, got n={n}, k={k}")
    return math.comb(n, k)


def split_counts(total: int, n_groups: int) -> list[int]:
    q, r = divmod(total, n_groups)
    return [q + 1 if i < r else q for i in range(n_groups)]


def _axis_groups(length: int, group_size: int, prunes: int) -> list[tuple[int, int, int]]:
    if prunes == 0:
        return [(0, length, 0)]
    if group_size < 1 or length % group_size:
        raise InvalidArgument(f"group size {group_size} does not divide axis length {length}")
    n_groups = length // group_size
    counts = split_counts(prunes, n_groups)
    if max(counts) > group_size:
        raise InvalidArgument(f"cannot prune {prunes} of {length} units")
    return [(g * group_size, (g + 1) * group_size, c) for g, c in enumerate(counts)]


def group_space_size(groups: list[tuple[int, int, int]]) -> int:
    return math.prod(count_configurations(stop - start, k) for start, stop, k in groups)


def plan_targets(cfg: DiTConfig, max_params: int) -> PruneBudget:
    """Least-pruned uniform configuration under ``max_params``.

    Heads are cut before FFN channels and FFN before whole blocks.
    """
    best = None
    for b in range(cfg.num_blocks):
        for h in range(cfg.num_heads):
            for keep in (1.0, 0.875, 0.75, 0.625, 0.5, 0.375, 0.25):
                f = max(1, round(cfg.ffn_dim * keep))
                n = count_params(replace(cfg, num_blocks=cfg.num_blocks - b, num_heads=cfg.num_heads - h,
                                         ffn_dim=f, block_heads=None, block_ffn=None))
                if n > max_params:
                    continue
                score = (n, -b, -(1 - keep), -h)
                if best is None or score > best[0]:
                    best = (score, PruneBudget(max_params, b, h, keep))
    if best is None:
        raise InfeasibleBudget(f"no uniform configuration of {cfg} fits in {max_params} parameters")
    return best[1]


def enumerate_candidates(cfg: DiTConfig, budget: PruneBudget, group_size: int | dict, seed: int = 0,
                         cap: int = 64, axes: Sequence[str] = AXES, base: MaskSet | None = None) -> CandidateSet:
    """Group-wise candidate masks.

    Each prunable axis is cut into contiguous groups with a fixed prune count
    per group, so the search space is a product of small per-group subspaces.
    Axes not listed in ``axes`` are copied from ``base`` (all-ones by default).
    When the product exceeds ``cap`` a seeded sample of distinct candidates is
    returned instead of the full enumeration.
    """
    if cfg.block_heads is not None or cfg.block_ffn is not None:
        raise InvalidArgument("candidate enumeration needs a uniform supernet config")
    if budget.blocks_to_prune is None or budget.heads_to_prune is None or budget.ffn_keep_fraction is None:
        budget = plan_targets(cfg, budget.max_params)
    gs = group_size if isinstance(group_size, dict) else {a: group_size for a in AXES}
    base = base or MaskSet.ones(cfg)
    base.validate(cfg)
    N, H, Fd = cfg.num_blocks, cfg.num_heads, cfg.ffn_dim
    ffn_prune = Fd - max(1, round(Fd * budget.ffn_keep_fraction))
    if budget.blocks_to_prune >= N or budget.heads_to_prune >= H or ffn_prune >= Fd:
        raise InfeasibleBudget("per-axis targets would remove an entire axis")

    groups: dict[str, list[tuple[int, int, int]]] = {}
    # each entry of `slots` is (axis, block index or None, start, stop, prunes)
    slots = []
    if "blocks" in axes:
        groups["blocks"] = _axis_groups(N, gs["blocks"], budget.blocks_to_prune)
        slots += [("blocks", None, *g) for g in groups["blocks"]]
    if "heads" in axes:
        groups["heads"] = _axis_groups(H, gs["heads"], budget.heads_to_prune)
        slots += [("heads", i, *g) for i in range(N) for g in groups["heads"]]
    if "ffn" in axes:
        groups["ffn"] = _axis_groups(Fd, gs["ffn"], ffn_prune)
        slots += [("ffn", i, *g) for i in range(N) for g in groups["ffn"]]

    choices = [list(itertools.combinations(range(start, stop), k)) for _, _, start, stop, k in slots]
    sizes = [len(c) for c in choices]
    total = math.prod(sizes)

    def build(index: tuple[int, ...]) -> MaskSet:
        m = copy.deepcopy(base)
        if "blocks" in axes:
            m.block_mask = [1] * N
        if "heads" in axes:
            m.head_masks = [[1] * H for _ in range(N)]
        if "ffn" in axes:
            m.ffn_masks = [[1] * Fd for _ in range(N)]
        for (axis, blk, *_), opts, j in zip(slots, choices, index):
            target = m.block_mask if axis == "blocks" else (m.head_masks if axis == "heads" else m.ffn_masks)[blk]
            for p in opts[j]:
                target[p] = 0
        return m

    if total <= cap:
        indices = list(itertools.product(*[range(s) for s in sizes]))
    else:
        rng = random.Random(seed)
        seen: set[int] = set()
        indices = []
        while len(indices) < cap:
            r = rng.randrange(total)
            if r in seen:
                continue
            seen.add(r)
            idx = []
            for s in reversed(sizes):
                r, j = divmod(r, s)
                idx.append(j)
            indices.append(tuple(reversed(idx)))
        indices.sort()

    cands = [build(ix) for ix in indices]
    for c in cands:
        c.validate(cfg)
    if cands and count_params(masked_config(cfg, cands[0])) > budget.max_params:
        raise InfeasibleBudget(
            f"targets {budget} leave {count_params(masked_config(cfg, cands[0]))} params > {budget.max_params}")
    return CandidateSet(cands, groups, total)


# -- scoring and optimization ------------------------------------------------

@torch.no_grad()
def eval_loss(model: DiT, data, masks: MaskSet | dict | None = None) -> float:
    """Mean CFM loss over a fixed stream of ``(x0, eps, t, prompt_ids)`` batches."""
    overrides = mask_overrides(masks) if isinstance(masks, MaskSet) else masks
    total, n = 0.0, 0
    for x0, eps, t, ids in data:
        xt = noisify(x0, eps, t)
        v = model(xt, t, ids, masks=overrides)
        total += float(cfm_loss(v, x0, eps)) * x0.shape[0]
        n += x0.shape[0]
    return total / n


def score_candidates(model: DiT, candidates: CandidateSet | Sequence[MaskSet], data, workers: int = 1) -> list[float]:
    """Evaluation loss per candidate, in candidate order."""
    cands = list(candidates)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(lambda m: eval_loss(model, data, m), cands))
    return [eval_loss(model, data, m) for m in cands]


def select_best(cfg: DiTConfig, candidates: Sequence[MaskSet], scores: Sequence[float]) -> int:
    # ties: fewer parameters, then lexicographically smallest mask
    keyed = [(s, count_params(masked_config(cfg, m)), m.flat(), i) for i, (m, s) in enumerate(zip(candidates, scores))]
    return min(keyed)[3]


def _topk_st(logits: Tensor, groups: list[tuple[int, int, int]]) -> Tensor:
    """Straight-through top-k: hard keep-mask forward, sigmoid gradient backward."""
    soft = torch.sigmoid(logits)
    hard = torch.ones_like(logits)
    for start, stop, k in groups:
        if k:
            drop = torch.topk(-logits[start:stop].detach(), k).indices + start
            hard[drop] = 0.0
    return hard + soft - soft.detach()


def learn_masks(model: DiT, cfg: DiTConfig, groups: dict, data, iters: int, lr: float = 0.05,
                seed: int = 0) -> MaskSet:
    """Train per-unit mask logits (model frozen) and return the final hard mask."""
    g = torch.Generator().manual_seed(seed)
    N, H, Fd = cfg.num_blocks, cfg.num_heads, cfg.ffn_dim
    logits = {"blocks": (1.0 + 0.01 * torch.randn(N, generator=g)).requires_grad_()}
    if "heads" in groups:
        logits["heads"] = (1.0 + 0.01 * torch.randn(N, H, generator=g)).requires_grad_()
    if "ffn" in groups:
        logits["ffn"] = (1.0 + 0.01 * torch.randn(N, Fd, generator=g)).requires_grad_()
    opt = torch.optim.Adam(list(logits.values()), lr=lr)
    for p in model.parameters():
        p.requires_grad_(False)

    def current():
        block = _topk_st(logits["blocks"], groups["blocks"]) if "blocks" in groups else torch.ones(N)
        heads = [(_topk_st(logits["heads"][i], groups["heads"]) if "heads" in groups else torch.ones(H)) for i in range(N)]
        ffn = [(_topk_st(logits["ffn"][i], groups["ffn"]) if "ffn" in groups else torch.ones(Fd)) for i in range(N)]
        return {"block": block, "heads": heads, "ffn": ffn}

    try:
        for it in range(iters):
            x0, eps, t, ids = data[it % len(data)]
            xt = noisify(x0, eps, t)
            loss = cfm_loss(model(xt, t, ids, masks=current()), x0, eps)
            opt.zero_grad()
            loss.backward()
            opt.step()
    finally:
        for p in model.parameters():
            p.requires_grad_(True)
    with torch.no_grad():
        m = current()
    return MaskSet([int(v) for v in m["block"].round().tolist()],
                   [[int(v) for v in h.round().tolist()] for h in m["heads"]],
                   [[int(v) for v in f.round().tolist()] for f in m["ffn"]])


def nearest_candidate(target: MaskSet, candidates: Sequence[MaskSet]) -> int:
    flat = torch.tensor(target.flat())
    dists = [(int((torch.tensor(c.flat()) != flat).sum()), c.flat(), i) for i, c in enumerate(candidates)]
    return min(dists)[2]


def optimize_masks(supernet: DiT, candidates: CandidateSet, data, iters: int = 0, mode: str = "enumerate",
                   lr: float = 0.05, seed: int = 0, workers: int = 1) -> MaskSet:
    """Pick the candidate mask with the lowest evaluation CFM loss.

    ``mode="learn"`` trains straight-through mask logits for ``iters`` steps
    first and returns the candidate nearest (Hamming) to the learned mask.
    """
    cands = list(candidates)
    if not cands:
        raise InvalidArgument("candidate set is empty")
    cfg = supernet.cfg
    if mode == "enumerate":
        scores = score_candidates(supernet, cands, data, workers)
        return copy.deepcopy(cands[select_best(cfg, cands, scores)])
    if mode == "learn":
        learned = learn_masks(supernet, cfg, candidates.groups, data, iters, lr=lr, seed=seed)
        return copy.deepcopy(cands[nearest_candidate(learned, cands)])
    raise InvalidArgument(f"unknown mask optimization mode {mode!r}")


def coarse_to_fine(supernet: DiT, budget: PruneBudget, group_size, data, seed: int = 0, cap: int = 64,
                   mode: str = "enumerate", iters: int = 0, workers: int = 1) -> tuple[MaskSet, dict]:
    """Sequential search: blocks first, then heads, then FFN channels."""
    cfg = supernet.cfg
    if budget.blocks_to_prune is None or budget.heads_to_prune is None or budget.ffn_keep_fraction is None:
        budget = plan_targets(cfg, budget.max_params)
    current = MaskSet.ones(cfg)
    history = {}
    for axis in AXES:
        # intermediate stages only need the final budget to hold at the end
        stage_budget = replace(budget, max_params=10**18)
        cands = enumerate_candidates(cfg, stage_budget, group_size, seed=seed, cap=cap, axes=(axis,), base=current)
        current = optimize_masks(supernet, cands, data, iters=iters, mode=mode, seed=seed, workers=workers)
        history[axis] = {"candidates": len(cands), "space": cands.space_size}
    n = count_params(masked_config(cfg, current))
    if n > budget.max_params:
        raise InfeasibleBudget(f"selected mask has {n} params > {budget.max_params}")
    return current, history


# -- densify -----------------------------------------------------------------

def _kept(mask: Sequence[int]) -> Tensor:
    return torch.tensor([i for i, m in enumerate(mask) if m], dtype=torch.long)


def _head_rows(heads: Tensor, head_dim: int, width: int, parts: int) -> Tensor:
    per_head = (heads[:, None] * head_dim + torch.arange(head_dim)[None]).flatten()
    return torch.cat([per_head + p * width for p in range(parts)])


@torch.no_grad()
def densify(supernet: DiT, masks: MaskSet | None = None) -> tuple[DiT, DiTConfig]:
    """Physically remove masked blocks, heads and FFN channels."""
    cfg = supernet.cfg
    masks = read_masks(supernet) if masks is None else masks
    masks.validate(cfg)
    new_cfg = masked_config(cfg, masks)
    dense = DiT(new_cfg).to(next(supernet.parameters()).dtype)
    src, dst = supernet.state_dict(), dense.state_dict()
    for name in dst:
        if not name.startswith("blocks.") and name != "block_mask":
            dst[name].copy_(src[name])
    hd = cfg.head_dim
    for j, i in enumerate(i for i, m in enumerate(masks.block_mask) if m):
        heads, chans = _kept(masks.head_masks[i]), _kept(masks.ffn_masks[i])
        width = cfg.heads_of(i) * hd
        rows1, rows2, rows3 = (_head_rows(heads, hd, width, p) for p in (1, 2, 3))
        s, d = f"blocks.{i}.", f"blocks.{j}."
        take = {
            "attn.qkv.weight": lambda w: w[rows3], "attn.qkv.bias": lambda w: w[rows3],
            "attn.out.weight": lambda w: w[:, rows1],
            "cross_attn.q.weight": lambda w: w[rows1], "cross_attn.q.bias": lambda w: w[rows1],
            "cross_attn.kv.weight": lambda w: w[rows2], "cross_attn.kv.bias": lambda w: w[rows2],
            "cross_attn.out.weight": lambda w: w[:, rows1],
            "ffn.fc1.weight": lambda w: w[chans], "ffn.fc1.bias": lambda w: w[chans],
            "ffn.fc2.weight": lambda w: w[:, chans],
            "head_mask": lambda w: torch.ones(len(heads)), "ffn_mask": lambda w: torch.ones(len(chans)),
        }
        for key in [k[len(d):] for k in dst if k.startswith(d)]:
            fn = take.get(key, lambda w: w)
            dst[d + key].copy_(fn(src[s + key]))
    dense.load_state_dict(dst)
    return dense, new_cfg


# -- sensitivity sweep ---------------------------------------------------------

def magnitude_masks(model: DiT, axis: str, keep_fraction: float) -> MaskSet:
    """Uniform keep-fraction mask along one axis, keeping the largest-norm units."""
    cfg = model.cfg
    masks = MaskSet.ones(cfg)
    if axis == "blocks":
        keep = max(1, round(cfg.num_blocks * keep_fraction))
        idx = torch.linspace(0, cfg.num_blocks - 1, keep).round().long().unique().tolist()
        masks.block_mask = [int(i in idx) for i in range(cfg.num_blocks)]
    elif axis == "heads":
        for i, blk in enumerate(model.blocks):
            h = cfg.heads_of(i)
            keep = max(1, round(h * keep_fraction))
            w = blk.attn.out.weight.detach().view(cfg.hidden_dim, h, cfg.head_dim)
            score = w.pow(2).sum((0, 2))
            top = set(torch.topk(score, keep).indices.tolist())
            masks.head_masks[i] = [int(k in top) for k in range(h)]
    elif axis == "ffn":
        for i, blk in enumerate(model.blocks):
            f = cfg.ffn_of(i)
            keep = max(1, round(f * keep_fraction))
            score = blk.ffn.fc1.weight.detach().norm(dim=1) * blk.ffn.fc2.weight.detach().norm(dim=0)
            top = set(torch.topk(score, keep).indices.tolist())
            masks.ffn_masks[i] = [int(k in top) for k in range(f)]
    else:
        raise InvalidArgument(f"unknown axis {axis!r}")
    return masks


def sensitivity_sweep(model: DiT, axis: str, fractions: Sequence[float], data, latent_shape,
                      bench_runs: int = 11, cfg_hash: str = "") -> ExperimentReport:
    cfg = model.cfg
    if any(not 0 < f <= 1 for f in fractions):
        raise InvalidArgument("keep fractions must lie in (0, 1]")
    report = ExperimentReport("sensitivity", cfg_hash or config_hash(cfg.to_dict()), "sensitivity")
    n_tokens = tokens_for(cfg, latent_shape)
    for frac in sorted(fractions):
        masks = magnitude_masks(model, axis, frac)
        dense, new_cfg = densify(model, masks)
        report.add_row(axis=axis, keep_fraction=float(frac), params=count_params(new_cfg),
                       flops=count_flops(new_cfg, n_tokens),
                       latency_ms_median=bench_latency(dense, (1, *latent_shape), runs=bench_runs),
                       eval_loss=eval_loss(dense, data))
    return report


def compare_ffn_vs_heads(model: DiT, data, keep_fraction: float = 0.5) -> dict:
    """Eval loss after pruning FFN vs heads by the same fraction, with parameter counts."""
    out = {}
    for axis in ("ffn", "heads"):
        dense, new_cfg = densify(model, magnitude_masks(model, axis, keep_fraction))
        out[axis] = {"params": count_params(new_cfg), "eval_loss": eval_loss(dense, data)}
    out["ffn_hurts_more"] = out["ffn"]["eval_loss"] > out["heads"]["eval_loss"]
    return out
