"""Miniature latent-video diffusion transformer.

Blocks use adaLN-single modulation (one shared timestep MLP, a learned
per-block shift/scale/gate table), RMSNorm everywhere, QK-norm and a 3D
axis-factorized RoPE on self-attention. Every block carries mask buffers for
block, head and FFN-channel pruning; the pruning module drives them.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .errors import InvalidArgument

TIME_FREQ_DIM = 256


@dataclass(frozen=True)
class DiTConfig:
    num_blocks: int = 8
    hidden_dim: int = 128
    num_heads: int = 8
    head_dim: int = 16
    ffn_dim: int = 512
    patch: tuple[int, int, int] = (1, 2, 2)
    latent_channels: int = 8
    cond_dim: int = 64
    cond_vocab: int = 16
    cond_tokens: int = 4
    rope: bool = True
    # per-block widths after non-uniform pruning; None means uniform
    block_heads: tuple[int, ...] | None = None
    block_ffn: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "patch", tuple(int(p) for p in self.patch))
        for name in ("num_blocks", "hidden_dim", "num_heads", "head_dim", "ffn_dim",
                     "latent_channels", "cond_dim", "cond_vocab", "cond_tokens"):
            if int(getattr(self, name)) < 1:
                raise InvalidArgument(f"DiTConfig.{name} must be >= 1, got {getattr(self, name)}")
        if len(self.patch) != 3 or min(self.patch) < 1:
            raise InvalidArgument(f"patch must be three positive ints, got {self.patch}")
        if self.rope and (self.head_dim % 2 or self.head_dim < 6):
            raise InvalidArgument("RoPE needs an even head_dim >= 6")
        for name in ("block_heads", "block_ffn"):
            val = getattr(self, name)
            if val is None:
                continue
            val = tuple(int(v) for v in val)
            object.__setattr__(self, name, val)
            if len(val) != self.num_blocks or min(val) < 1:
                raise InvalidArgument(f"{name} must list a positive width per block")

    def heads_of(self, i: int) -> int:
        return self.block_heads[i] if self.block_heads is not None else self.num_heads

    def ffn_of(self, i: int) -> int:
        return self.block_ffn[i] if self.block_ffn is not None else self.ffn_dim

    @property
    def patch_volume(self) -> int:
        return self.patch[0] * self.patch[1] * self.patch[2]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DiTConfig":
        d = dict(d)
        d["patch"] = tuple(d["patch"])
        for key in ("block_heads", "block_ffn"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)

    def normalized(self) -> "DiTConfig":
        """Collapse per-block widths back to the scalar fields when they are uniform."""
        cfg = self
        if cfg.block_heads is not None and len(set(cfg.block_heads)) == 1:
            cfg = replace(cfg, num_heads=cfg.block_heads[0], block_heads=None)
        if cfg.block_ffn is not None and len(set(cfg.block_ffn)) == 1:
            cfg = replace(cfg, ffn_dim=cfg.block_ffn[0], block_ffn=None)
        return cfg


def patchify(x: Tensor, patch) -> Tensor:
    """[B, C, T, H, W] -> [B, n_tokens, C * patch volume], tokens in (t, h, w) raster order."""
    B, C, T, H, W = x.shape
    pt, ph, pw = patch
    gt, gh, gw = T // pt, H // ph, W // pw
    x = x.reshape(B, C, gt, pt, gh, ph, gw, pw).permute(0, 2, 4, 6, 1, 3, 5, 7)
    return x.reshape(B, gt * gh * gw, C * pt * ph * pw)


def unpatchify(tokens: Tensor, shape, patch) -> Tensor:
    B, C, T, H, W = shape
    pt, ph, pw = patch
    gt, gh, gw = T // pt, H // ph, W // pw
    x = tokens.reshape(B, gt, gh, gw, C, pt, ph, pw).permute(0, 4, 1, 5, 2, 6, 3, 7)
    return x.reshape(shape)


class RMSNorm(nn.Module):
    def __init__(self, dim: int, affine: bool = True, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim)) if affine else None

    def forward(self, x: Tensor) -> Tensor:
        y = x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps)
        return y * self.weight if self.weight is not None else y


def timestep_embedding(t: Tensor, dim: int = TIME_FREQ_DIM, max_period: float = 10000.0) -> Tensor:
    # t in [0, 1] is scaled to [0, 1000] so the low frequencies are resolved
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = (t.float() * 1000.0)[:, None] * freqs[None].to(t.device)
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def rope_axis_dims(head_dim: int) -> tuple[int, int, int]:
    hw = (head_dim // 3) // 2 * 2
    return head_dim - 2 * hw, hw, hw


def rope_tables(grid: tuple[int, int, int], head_dim: int, device=None, dtype=torch.float32,
                theta: float = 10000.0) -> tuple[Tensor, Tensor]:
    """cos/sin tables of shape [n_tokens, head_dim // 2] for a (t, h, w) token grid."""
    coords = torch.stack(torch.meshgrid(*[torch.arange(n) for n in grid], indexing="ij"), -1).reshape(-1, 3)
    angles = []
    for axis, d in enumerate(rope_axis_dims(head_dim)):
        if d == 0:
            continue
        inv = 1.0 / theta ** (torch.arange(0, d, 2, dtype=torch.float64) / d)
        angles.append(coords[:, axis, None].double() * inv[None])
    ang = torch.cat(angles, -1)
    return ang.cos().to(device=device, dtype=dtype), ang.sin().to(device=device, dtype=dtype)


def apply_rope(x: Tensor, cos: Tensor, sin: Tensor) -> Tensor:
    # x: [B, H, N, D]; rotate interleaved pairs
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)
    return out.flatten(-2)


class Attention(nn.Module):
    """Multi-head attention whose heads can be masked before the output projection."""

    def __init__(self, dim: int, heads: int, head_dim: int, kv_dim: int | None = None):
        super().__init__()
        self.heads, self.head_dim = heads, head_dim
        width = heads * head_dim
        self.cross = kv_dim is not None
        if self.cross:
            self.q = nn.Linear(dim, width)
            self.kv = nn.Linear(kv_dim, 2 * width)
        else:
            self.qkv = nn.Linear(dim, 3 * width)
        self.q_norm = RMSNorm(head_dim)
        self.k_norm = RMSNorm(head_dim)
        self.out = nn.Linear(width, dim)

    def forward(self, x: Tensor, context: Tensor | None = None, rope=None, head_mask: Tensor | None = None) -> Tensor:
        B, N, _ = x.shape
        H, D = self.heads, self.head_dim
        if self.cross:
            q = self.q(x).view(B, N, H, D)
            k, v = self.kv(context).view(B, context.shape[1], 2, H, D).unbind(2)
        else:
            q, k, v = self.qkv(x).view(B, N, 3, H, D).unbind(2)
        q, k, v = (a.transpose(1, 2) for a in (q, k, v))
        q, k = self.q_norm(q), self.k_norm(k)
        if rope is not None:
            q, k = apply_rope(q, *rope), apply_rope(k, *rope)
        attn = torch.softmax((q @ k.transpose(-1, -2)) / math.sqrt(D), dim=-1)
        o = attn @ v  # [B, H, N, D]
        if head_mask is not None:
            o = o * head_mask.to(o.dtype).view(1, H, 1, 1)
        return self.out(o.transpose(1, 2).reshape(B, N, H * D))


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: Tensor, channel_mask: Tensor | None = None) -> Tensor:
        h = self.fc1(x)
        if channel_mask is not None:
            h = h * channel_mask.to(h.dtype)
        return self.fc2(F.gelu(h, approximate="tanh"))


class DiTBlock(nn.Module):
    def __init__(self, cfg: DiTConfig, heads: int, ffn: int):
        super().__init__()
        d = cfg.hidden_dim
        self.scale_shift_table = nn.Parameter(torch.randn(6, d) / math.sqrt(d))
        self.norm1 = RMSNorm(d, affine=False)
        self.attn = Attention(d, heads, cfg.head_dim)
        self.norm_cross = RMSNorm(d)
        self.cross_attn = Attention(d, heads, cfg.head_dim, kv_dim=cfg.cond_dim)
        self.norm2 = RMSNorm(d, affine=False)
        self.ffn = FeedForward(d, ffn)
        self.register_buffer("head_mask", torch.ones(heads))
        self.register_buffer("ffn_mask", torch.ones(ffn))

    def forward(self, x: Tensor, t_mod: Tensor, cond: Tensor, rope=None,
                head_mask: Tensor | None = None, ffn_mask: Tensor | None = None) -> Tensor:
        head_mask = self.head_mask if head_mask is None else head_mask
        ffn_mask = self.ffn_mask if ffn_mask is None else ffn_mask
        shift1, scale1, gate1, shift2, scale2, gate2 = (self.scale_shift_table[None] + t_mod).unbind(1)
        h = self.norm1(x) * (1 + scale1[:, None]) + shift1[:, None]
        x = x + gate1[:, None] * self.attn(h, rope=rope, head_mask=head_mask)
        x = x + self.cross_attn(self.norm_cross(x), context=cond, head_mask=head_mask)
        h = self.norm2(x) * (1 + scale2[:, None]) + shift2[:, None]
        return x + gate2[:, None] * self.ffn(h, channel_mask=ffn_mask)


class DiT(nn.Module):
    def __init__(self, cfg: DiTConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden_dim
        self.patch_embed = nn.Linear(cfg.latent_channels * cfg.patch_volume, d)
        self.prompt_table = nn.Parameter(torch.randn(cfg.cond_vocab, cfg.cond_tokens, cfg.cond_dim))
        self.time_mlp = nn.Sequential(nn.Linear(TIME_FREQ_DIM, d), nn.SiLU(), nn.Linear(d, d))
        self.t_block = nn.Sequential(nn.SiLU(), nn.Linear(d, 6 * d))
        self.blocks = nn.ModuleList(DiTBlock(cfg, cfg.heads_of(i), cfg.ffn_of(i)) for i in range(cfg.num_blocks))
        self.final_table = nn.Parameter(torch.randn(2, d) / math.sqrt(d))
        self.final_norm = RMSNorm(d, affine=False)
        self.final = nn.Linear(d, cfg.latent_channels * cfg.patch_volume)
        self.register_buffer("block_mask", torch.ones(cfg.num_blocks))

    # -- conditioning -----------------------------------------------------
    def embed_prompts(self, prompt_ids: Tensor) -> Tensor:
        return self.prompt_table[prompt_ids]

    # -- patchify ---------------------------------------------------------
    def grid(self, shape) -> tuple[int, int, int]:
        pt, ph, pw = self.cfg.patch
        _, c, t, h, w = shape
        if c != self.cfg.latent_channels:
            raise InvalidArgument(f"expected {self.cfg.latent_channels} latent channels, got {c}")
        if t % pt or h % ph or w % pw:
            raise InvalidArgument(f"latent dims {(t, h, w)} not divisible by patch {self.cfg.patch}")
        return t // pt, h // ph, w // pw

    def patchify(self, x: Tensor) -> Tensor:
        self.grid(x.shape)
        return patchify(x, self.cfg.patch)

    def unpatchify(self, tokens: Tensor, shape) -> Tensor:
        return unpatchify(tokens, shape, self.cfg.patch)

    # -- forward ------------------------------------------------------------
    def forward(self, xt: Tensor, t, cond: Tensor, capture: bool = False, masks: dict | None = None):
        """Predict the velocity for ``xt`` at time ``t``.

        ``cond`` is either a [B, n_cond, cond_dim] embedding or a [B] tensor of
        integer prompt ids. ``masks`` optionally overrides the mask buffers with
        (possibly soft) tensors: keys ``block`` [N], ``heads`` list of [H_i],
        ``ffn`` list of [F_i].
        """
        B = xt.shape[0]
        grid = self.grid(xt.shape)
        if cond.dtype in (torch.int64, torch.int32):
            cond = self.embed_prompts(cond)
        cond = cond.to(xt.dtype)
        if not isinstance(t, Tensor):
            t = torch.tensor(float(t))
        t = t.to(xt.dtype).reshape(-1).expand(B) if t.numel() == 1 else t.to(xt.dtype).reshape(B)

        x = self.patch_embed(self.patchify(xt))
        t_emb = self.time_mlp(timestep_embedding(t).to(xt.dtype))
        t_mod = self.t_block(t_emb).view(B, 6, -1)
        rope = rope_tables(grid, self.cfg.head_dim, xt.device, xt.dtype) if self.cfg.rope else None

        block_mask = self.block_mask if masks is None or masks.get("block") is None else masks["block"]
        # straight-through masks carry gradients and must go through the blend
        soft_blocks = block_mask.requires_grad
        feats = []
        for i, block in enumerate(self.blocks):
            hm = masks["heads"][i] if masks is not None and masks.get("heads") is not None else None
            fm = masks["ffn"][i] if masks is not None and masks.get("ffn") is not None else None
            m = block_mask[i]
            if soft_blocks:
                y = block(x, t_mod, cond, rope, hm, fm)
                x = y * m + x * (1 - m)
            elif m.item() != 0:
                x = block(x, t_mod, cond, rope, hm, fm)
            # m == 0: identity bypass, x is left untouched
            if capture:
                feats.append(x)

        shift, scale = (self.final_table[None] + t_emb[:, None]).unbind(1)
        x = self.final_norm(x) * (1 + scale[:, None]) + shift[:, None]
        out = self.unpatchify(self.final(x), xt.shape)
        if capture:
            return out, feats
        return out

    def velocity_field(self, cond: Tensor):
        """Adapter to the ``(t, x, cond)`` callable used by the sampler."""
        def field(t, x, c=None):
            return self(x, t, cond if c is None else c)
        return field


def build_model(cfg: DiTConfig, seed: int = 0) -> DiT:
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = DiT(cfg)
        for name, p in model.named_parameters():
            if name.endswith("prompt_table"):
                nn.init.normal_(p, std=1.0)
            elif p.ndim == 2 and "table" not in name:
                nn.init.normal_(p, std=1.0 / math.sqrt(p.shape[1]))
            elif name.endswith(".bias"):
                nn.init.zeros_(p)
    finally:
        torch.random.set_rng_state(gen_state)
    return model


def count_params(cfg: DiTConfig) -> int:
    """Closed-form parameter count of ``build_model(cfg)``."""
    d, hd, c = cfg.hidden_dim, cfg.head_dim, cfg.cond_dim
    pv = cfg.latent_channels * cfg.patch_volume
    total = pv * d + d  # patch embed
    total += cfg.cond_vocab * cfg.cond_tokens * c
    total += TIME_FREQ_DIM * d + d + d * d + d  # time mlp
    total += d * 6 * d + 6 * d  # adaLN-single projection
    for i in range(cfg.num_blocks):
        a, f = cfg.heads_of(i) * hd, cfg.ffn_of(i)
        total += 6 * d
        total += d * 3 * a + 3 * a + 2 * hd + a * d + d  # self-attention
        total += d  # cross-attention pre-norm gain
        total += d * a + a + c * 2 * a + 2 * a + 2 * hd + a * d + d  # cross-attention
        total += d * f + f + f * d + d  # ffn
    total += 2 * d + d * pv + pv  # final layer
    return total


def flop_breakdown(cfg: DiTConfig, n_tokens: int, n_cond: int | None = None) -> dict[str, int]:
    """Analytic forward FLOPs (2 per multiply-add) for one batch element."""
    if n_tokens < 1:
        raise InvalidArgument("n_tokens must be >= 1")
    n, m = n_tokens, cfg.cond_tokens if n_cond is None else n_cond
    d, hd, c = cfg.hidden_dim, cfg.head_dim, cfg.cond_dim
    pv = cfg.latent_channels * cfg.patch_volume
    out = dict(embed=2 * n * pv * d, self_attn_proj=0, self_attn_scores=0, cross_attn=0, ffn=0,
               final=2 * n * d * pv,
               time=2 * (TIME_FREQ_DIM * d + d * d + 6 * d * d))
    for i in range(cfg.num_blocks):
        a, f = cfg.heads_of(i) * hd, cfg.ffn_of(i)
        out["self_attn_proj"] += 2 * n * d * 3 * a + 2 * n * a * d
        out["self_attn_scores"] += 2 * n * n * a * 2  # QK^T and AV
        out["cross_attn"] += 2 * n * d * a + 2 * m * c * 2 * a + 2 * n * m * a * 2 + 2 * n * a * d
        out["ffn"] += 2 * n * d * f * 2
    return out


def count_flops(cfg: DiTConfig, n_tokens: int, n_cond: int | None = None) -> int:
    return sum(flop_breakdown(cfg, n_tokens, n_cond).values())


def tokens_for(cfg: DiTConfig, latent_shape) -> int:
    t, h, w = latent_shape[-3:]
    pt, ph, pw = cfg.patch
    return (t // pt) * (h // ph) * (w // pw)


# -- checkpoints ------------------------------------------------------------
#
# A checkpoint is a single safetensors file. Tensors are stored under their
# canonical ``state_dict`` names (mask buffers included); the header metadata
# holds ``config`` (DiTConfig as JSON) and ``meta`` (free-form JSON).

def save_checkpoint(path, model: DiT, meta: dict | None = None, extra: dict[str, Tensor] | None = None) -> None:
    from safetensors.torch import save_file

    tensors = {k: v.detach().contiguous().clone() for k, v in model.state_dict().items()}
    for k, v in (extra or {}).items():
        tensors[k] = v.detach().contiguous().clone()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_file(tensors, str(path), metadata={"config": json.dumps(model.cfg.to_dict()),
                                            "meta": json.dumps(meta or {}, sort_keys=True)})


def load_checkpoint(path) -> tuple[DiT, dict, dict[str, Tensor]]:
    """Returns (model, meta, extra tensors not belonging to the model)."""
    from safetensors import safe_open

    with safe_open(str(path), framework="pt") as f:
        header = f.metadata()
        tensors = {k: f.get_tensor(k) for k in f.keys()}
    cfg = DiTConfig.from_dict(json.loads(header["config"]))
    model = DiT(cfg)
    own = set(model.state_dict())
    model.load_state_dict({k: v for k, v in tensors.items() if k in own})
    extra = {k: v for k, v in tensors.items() if k not in own}
    return model, json.loads(header.get("meta", "{}")), extra


def param_hash(module: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
