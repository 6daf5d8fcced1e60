"""End-to-end acceptance checks, one test group per criterion.

Run ``pytest tests/test_acceptance.py -v``; the terminal summary prints one
PASS/FAIL line per criterion. Criteria 6-8 train small models for a few
minutes each (marked ``slow``).
"""
import copy
import filecmp
import math
import random
import statistics
from dataclasses import replace
from fractions import Fraction

import pytest
import torch
import yaml

from mobiledit import cli
from mobiledit.adversarial import (AdvTrainConfig, build_discriminator, disc_loss, ema_coefficients, gen_losses,
                                   manifold_distance, train_adversarial)
from mobiledit.data import LatentTask
from mobiledit.dit import DiTConfig, build_model, count_params
from mobiledit.flow import cfm_loss, euler_step, make_schedule, noisify, predict_x0, sample
from mobiledit.kd import GroupSpec, feature_distill_loss, group_features, make_aligners, train_kd
from mobiledit.pruning import (MaskSet, PruneBudget, count_configurations, densify, enumerate_candidates,
                               eval_loss, magnitude_masks, mask_overrides)
from mobiledit.training import train_flow_matching
from mobiledit.vae import TABLE3_SPECS, StudyConfig, scaling_study

pytestmark = pytest.mark.filterwarnings("ignore::UserWarning")


def _detail(record_property, msg: str) -> None:
    record_property("detail", msg)


@pytest.fixture(autouse=True)
def _single_thread():
    # keeps timings and reductions stable on shared CPUs
    n = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(n)


# -- 1. flow identities -------------------------------------------------------------

@pytest.mark.criterion(1)
def test_c1_noisify_endpoints_exact():
    g = torch.Generator().manual_seed(0)
    x0, eps = torch.randn(16, 4, 2, 3, 3, generator=g), torch.randn(16, 4, 2, 3, 3, generator=g)
    assert torch.equal(noisify(x0, eps, 0.0), x0)
    assert torch.equal(noisify(x0, eps, 1.0), eps)


@pytest.mark.criterion(1)
def test_c1_euler_on_exact_field_follows_interpolant(record_property):
    g = torch.Generator().manual_seed(1)
    worst = 0.0
    for _ in range(1000):
        x0, eps = torch.randn(2, 8, generator=g, dtype=torch.float64), torch.randn(2, 8, generator=g,
                                                                                    dtype=torch.float64)
        t, t_next = sorted(torch.rand(2, generator=g).tolist(), reverse=True)
        out = euler_step(noisify(x0, eps, t), eps - x0, t, t_next)
        worst = max(worst, (out - noisify(x0, eps, t_next)).abs().max().item())
    _detail(record_property, f"euler max err {worst:.1e}")
    assert worst <= 1e-6


@pytest.mark.criterion(1)
@pytest.mark.parametrize("k", [1, 2, 4, 8])
def test_c1_sampler_recovers_x0(k):
    g = torch.Generator().manual_seed(k)
    x0, eps = torch.randn(8, 4, 2, 4, 4, generator=g), torch.randn(8, 4, 2, 4, 4, generator=g)
    out = sample(lambda t, x, c: eps - x0, make_schedule(k), eps)
    assert (out - x0).abs().max().item() <= 1e-6


# -- 2. gradient correctness --------------------------------------------------------

SMALL = DiTConfig(num_blocks=2, hidden_dim=32, num_heads=4, head_dim=8, ffn_dim=64, latent_channels=4,
                  cond_dim=16, cond_vocab=4, cond_tokens=2)
SMALL_TASK = LatentTask(shape=(4, 2, 4, 4), num_prompts=4)


def _fd_check(loss_fn, params: dict, n_entries: int = 3, h: float = 1e-6, seed: int = 0) -> float:
    """Worst relative error between autograd and central differences on sampled entries."""
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    rng = random.Random(seed)
    worst = 0.0
    for name, p in params.items():
        grad = p.grad.detach().clone()
        flat = p.data.view(-1)
        for idx in rng.sample(range(flat.numel()), min(n_entries, flat.numel())):
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + h
                up = loss_fn().item()
                flat[idx] = orig - h
                down = loss_fn().item()
                flat[idx] = orig
            fd, an = (up - down) / (2 * h), grad.view(-1)[idx].item()
            err = abs(an - fd) / max(abs(fd), 1e-6)
            worst = max(worst, err)
    return worst


def _pick(module, names) -> dict:
    named = dict(module.named_parameters())
    return {n: named[n] for n in names}


def _double_model(seed=0):
    model = build_model(SMALL, seed=seed).double()
    assert count_params(SMALL) <= 50_000
    with torch.no_grad():
        # zero-initialised output layers would hide most of the gradient paths
        for p in model.parameters():
            if not p.abs().sum():
                p.normal_(0, 0.05)
    return model


GEN_PARAMS = ["patch_embed.weight", "blocks.0.attn.qkv.weight", "blocks.1.cross_attn.out.weight",
              "blocks.1.ffn.fc1.weight", "t_block.1.weight", "final.weight"]


@pytest.mark.criterion(2)
def test_c2_cfm_loss_through_model(record_property):
    model = _double_model()
    g = torch.Generator().manual_seed(0)
    x0, ids = SMALL_TASK.sample(3, g)
    x0, eps, t = x0.double(), torch.randn(x0.shape, generator=g).double(), torch.rand(3, generator=g).double()
    xt = noisify(x0, eps, t)
    err = _fd_check(lambda: cfm_loss(model(xt, t, ids), x0, eps), _pick(model, GEN_PARAMS))
    _detail(record_property, f"cfm rel err {err:.1e}")
    assert err <= 1e-3


@pytest.mark.criterion(2)
def test_c2_feature_distill_loss(record_property):
    teacher = _double_model(seed=0)
    student = build_model(replace(SMALL, num_blocks=1, hidden_dim=24), seed=1).double()
    aligners = make_aligners(24, 32, 1).double()
    with torch.no_grad():
        for a in aligners:
            a.weight.add_(0.2 * torch.randn_like(a.weight))
    g = torch.Generator().manual_seed(2)
    x0, ids = SMALL_TASK.sample(3, g)
    xt, t = x0.double(), torch.rand(3, generator=g).double()
    with torch.no_grad():
        _, t_feats = teacher(xt, t, ids, capture=True)
    spec = GroupSpec.proportional(1, 2, 1)

    def loss():
        _, s_feats = student(xt, t, ids, capture=True)
        return feature_distill_loss(group_features(t_feats, s_feats, spec), aligners)

    params = {**_pick(student, ["patch_embed.weight", "blocks.0.attn.qkv.weight", "blocks.0.ffn.fc2.weight"]),
              "aligner": aligners[0].weight}
    err = _fd_check(loss, params)
    _detail(record_property, f"distill rel err {err:.1e}")
    assert err <= 1e-3


@pytest.mark.criterion(2)
def test_c2_adversarial_losses(record_property):
    gen = _double_model(seed=3)
    disc = build_discriminator(gen, K=1, L=1, seed=4).double()
    with torch.no_grad():
        for p in disc.trainable_parameters():
            if not p.abs().sum():
                p.normal_(0, 0.05)
    g = torch.Generator().manual_seed(5)
    x0, ids = SMALL_TASK.sample(4, g)
    x0 = x0.double()
    eps, eps_r = torch.randn(x0.shape, generator=g).double(), torch.randn(x0.shape, generator=g).double()
    t, t_next = 0.75, 0.5
    xt, real = noisify(x0, eps, t), noisify(x0, eps_r, t_next)

    def d_loss():
        with torch.no_grad():
            fake = euler_step(xt, gen(xt, t, ids), t, t_next)
        return disc_loss(disc(real, t_next, ids), disc(fake, t_next, ids))

    def g_loss():
        v = gen(xt, t, ids)
        return gen_losses(disc(euler_step(xt, v, t, t_next), t_next, ids), predict_x0(xt, v, t), x0, 0.03)[2]

    head = dict(list(disc.named_parameters()))
    d_params = {n: p for n, p in head.items() if p.requires_grad and p.dim() == 2}
    d_err = _fd_check(d_loss, dict(list(d_params.items())[:4]))
    g_err = _fd_check(g_loss, _pick(gen, GEN_PARAMS))
    _detail(record_property, f"disc rel err {d_err:.1e}, gen rel err {g_err:.1e}")
    assert d_err <= 1e-3 and g_err <= 1e-3


# -- 3. pruning combinatorics -------------------------------------------------------

@pytest.mark.criterion(3)
def test_c3_count_configurations_pinned():
    assert count_configurations(32, 6) == 906_192


def _closed_form(length: int, gsize: int, prunes: int) -> int:
    if prunes == 0:
        return 1
    n = length // gsize
    return math.prod(math.comb(gsize, prunes // n + (i < prunes % n)) for i in range(n))


@pytest.mark.criterion(3)
def test_c3_group_enumeration_sizes(record_property):
    rng = random.Random(2024)
    checked = 0
    while checked < 12:
        N = rng.choice([2, 4])
        gb, gh, gf = rng.choice([1, 2, N]), rng.choice([2, 3, 4]), rng.choice([2, 4])
        H, Fd = gh * rng.randint(1, 2), gf * rng.randint(1, 2)
        pb = rng.randint(0, min(N - 1, (N // gb) * (gb - 1)))
        ph = rng.randint(0, min(H - 1, (H // gh) * (gh - 1)))
        pf = rng.randint(0, min(Fd - 1, (Fd // gf) * (gf - 1)))
        if gb == 1:
            pb = 0
        cfg = DiTConfig(num_blocks=N, hidden_dim=16, num_heads=H, head_dim=6, ffn_dim=Fd, latent_channels=2,
                        cond_dim=8, cond_vocab=2, cond_tokens=1)
        expected = (_closed_form(N, gb, pb) * _closed_form(H, gh, ph) ** N * _closed_form(Fd, gf, pf) ** N)
        if expected > 4096:
            continue
        cands = enumerate_candidates(cfg, PruneBudget(10**9, pb, ph, (Fd - pf) / Fd),
                                     group_size={"blocks": gb, "heads": gh, "ffn": gf}, cap=10**6)
        assert cands.space_size == expected == len(cands) == len(set(cands.candidates))
        checked += 1
    _detail(record_property, f"{checked} randomized group cases")


# -- 4. densify equivalence ---------------------------------------------------------

TOY = DiTConfig(num_blocks=4, hidden_dim=32, num_heads=4, head_dim=8, ffn_dim=32, latent_channels=4,
                cond_dim=16, cond_vocab=4, cond_tokens=2)


def _random_valid_mask(cfg, rng):
    while True:
        blocks = [rng.randint(0, 1) for _ in range(cfg.num_blocks)]
        heads = [[rng.randint(0, 1) for _ in range(cfg.num_heads)] for _ in range(cfg.num_blocks)]
        ffn = [[rng.randint(0, 1) for _ in range(cfg.ffn_dim)] for _ in range(cfg.num_blocks)]
        if any(blocks) and all(any(h) for h in heads) and all(any(f) for f in ffn):
            return MaskSet(blocks, heads, ffn)


@pytest.mark.criterion(4)
def test_c4_densify_matches_masked_supernet(record_property):
    model = build_model(TOY, seed=11)
    g = torch.Generator().manual_seed(12)
    x = torch.randn(100, 4, 2, 4, 4, generator=g)
    t, ids = torch.rand(100, generator=g), torch.randint(4, (100,), generator=g)
    rng = random.Random(13)
    worst = 0.0
    with torch.no_grad():
        for _ in range(20):
            m = _random_valid_mask(TOY, rng)
            dense, _ = densify(model, m)
            worst = max(worst, (dense(x, t, ids) - model(x, t, ids, masks=mask_overrides(m))).abs().max().item())
    _detail(record_property, f"max abs diff {worst:.1e}")
    assert worst <= 1e-5


@pytest.mark.criterion(4)
def test_c4_densify_idempotent():
    model = build_model(TOY, seed=14)
    rng = random.Random(15)
    for _ in range(5):
        dense, cfg = densify(model, _random_valid_mask(TOY, rng))
        again, cfg2 = densify(dense)
        assert cfg2 == cfg
        sa, sb = dense.state_dict(), again.state_dict()
        assert sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


# -- 5. parameter budget ------------------------------------------------------------

BASE = DiTConfig(num_blocks=28, hidden_dim=2048, num_heads=32, head_dim=64, ffn_dim=8192,
                 latent_channels=16, cond_dim=2048)
PRUNED = replace(BASE, num_blocks=20, num_heads=20, ffn_dim=6144)
BASE_PARAMS, PRUNED_PARAMS = 1_910_502_464, 953_738_304


@pytest.mark.criterion(5)
def test_c5_parameter_budget(record_property):
    base, pruned = count_params(BASE), count_params(PRUNED)
    assert (base, pruned) == (BASE_PARAMS, PRUNED_PARAMS)
    _detail(record_property, f"base {base / 2.0e9:.3f}x of 2.0B, pruned {pruned / 915e6:.3f}x of 915M, "
                             f"reduction {pruned / base:.3f} vs {915 / 2000:.3f}")
    assert abs(base / 2.0e9 - 1) <= 0.05
    assert abs(pruned / 915e6 - 1) <= 0.05


# -- 6. KD trend --------------------------------------------------------------------

@pytest.mark.slow
@pytest.mark.criterion(6)
def test_c6_kd_lowers_eval_loss(record_property):
    task = LatentTask()
    teacher = build_model(DiTConfig(num_blocks=4, hidden_dim=64, num_heads=4, head_dim=16, ffn_dim=256), 0)
    train_flow_matching(teacher, task, 600, 16, 1e-3, 0)
    ev = task.batches(8, 32, 999)
    masks = magnitude_masks(teacher, "heads", 0.5)
    masks.ffn_masks = magnitude_masks(teacher, "ffn", 0.5).ffn_masks
    masks.block_mask = [1, 1, 0, 1]
    student0, _ = densify(teacher, masks)
    finals = {0.0: [], 0.01: []}
    for seed in range(3):
        for alpha in finals:
            student = copy.deepcopy(student0)
            train_kd(teacher, student, GroupSpec.proportional(3, 4, 3), task, 200, alpha=alpha, lr=1e-3,
                     seed=seed, batch_size=16)
            finals[alpha].append(eval_loss(student, ev))
    with_kd, without = statistics.median(finals[0.01]), statistics.median(finals[0.0])
    _detail(record_property, f"median eval cfm {with_kd:.6f} with KD vs {without:.6f} without")
    assert with_kd < without


# -- 7. adversarial distillation ----------------------------------------------------

def _distance(model, task, seed: int) -> float:
    g = torch.Generator().manual_seed(1000 + seed)
    ids = torch.arange(64) % task.num_prompts
    noise = torch.randn(64, *task.shape, generator=g)
    with torch.no_grad():
        x = sample(lambda t, x, c: model(x, t, ids), make_schedule(4), noise)
    return torch.cat([manifold_distance(x[i:i + 1], task.prototypes[ids[i]], 0.03) for i in range(64)]).mean().item()


@pytest.mark.slow
@pytest.mark.criterion(7)
def test_c7_adversarial_distillation(record_property):
    task = LatentTask(shape=(4, 1, 4, 4))
    cfg = DiTConfig(num_blocks=4, hidden_dim=64, num_heads=4, head_dim=16, ffn_dim=256, latent_channels=4)
    track = "blocks.1.ffn.fc1.weight"
    before, after = [], []
    for seed in range(3):
        gen = build_model(cfg, seed)
        train_flow_matching(gen, task, 300, 16, 1e-3, seed)
        before.append(_distance(gen, task, seed))
        disc = build_discriminator(gen, 2, 2, seed)
        h0 = disc.prefix_hash()
        adv_cfg = AdvTrainConfig(lr_gen=1e-4, lr_disc=1e-4)
        ema, curve, history = train_adversarial(gen, disc, make_schedule(4), task, adv_cfg, 200, seed, track=track)
        assert len(curve) == 200
        assert all(math.isfinite(v) for row in curve for v in row.values())
        assert disc.prefix_hash() == h0
        coeffs = ema_coefficients(Fraction(str(adv_cfg.ema_rate)), len(history) - 1)  # exact arithmetic
        assert sum(coeffs) == 1 and min(coeffs) >= 0
        expected = sum(float(c) * h.double() for c, h in zip(coeffs, history))
        torch.testing.assert_close(dict(ema.named_parameters())[track].double(), expected, rtol=1e-4, atol=1e-6)
        after.append(_distance(ema, task, seed))
    b, a = statistics.median(before), statistics.median(after)
    _detail(record_property, f"median pseudo-Huber distance {a:.4f} distilled vs {b:.4f} undistilled")
    assert a < b


# -- 8. VAE scaling -----------------------------------------------------------------

@pytest.mark.slow
@pytest.mark.criterion(8)
def test_c8_vae_scaling_trend(record_property):
    dit_cfg = DiTConfig(num_blocks=2, hidden_dim=64, num_heads=4, head_dim=16, ffn_dim=128)
    rows = [scaling_study(TABLE3_SPECS, dit_cfg, StudyConfig(), seed).rows for seed in range(3)]
    cols = list(zip(*rows))  # per spec, the three seeds
    ratios = [r[0]["total_ratio"] for r in cols]
    psnr = [statistics.median(r["psnr_db"] for r in c) for c in cols]
    latency = [statistics.median(r["latency_ms_median"] for r in c) for c in cols]
    tokens = [c[0]["tokens"] for c in cols]
    _detail(record_property, "psnr " + "/".join(f"{p:.2f}" for p in psnr)
            + " dB, latency " + "/".join(f"{v:.1f}" for v in latency) + " ms, tokens " + "/".join(map(str, tokens)))
    assert ratios == sorted(ratios)
    assert all(a > b for a, b in zip(tokens, tokens[1:]))
    assert all(a > b for a, b in zip(latency, latency[1:]))
    assert all(a >= b for a, b in zip(psnr, psnr[1:]))


# -- 9. reproducibility -------------------------------------------------------------

PIPE = {
    "seed": 0,
    "dit": {"num_blocks": 2, "hidden_dim": 16, "num_heads": 2, "head_dim": 8, "ffn_dim": 16,
            "latent_channels": 2, "cond_dim": 8, "cond_vocab": 2, "cond_tokens": 2},
    "task": {"shape": [2, 2, 4, 4], "num_prompts": 2},
    "pretrain": {"iters": 8, "batch_size": 4},
    "prune": {"blocks_to_prune": 0, "heads_to_prune": 1, "ffn_keep_fraction": 0.5, "group_size": 2, "cap": 2,
              "eval_batches": 1, "eval_batch_size": 4, "sweep_axes": ["heads"], "sweep_fractions": [0.5, 1.0],
              "bench_runs": 3},
    "kd": {"iters": 6, "batch_size": 4, "groups": 2},
    "adv": {"iters": 6, "batch_size": 4, "K": 1, "L": 1},
}


@pytest.mark.criterion(9)
def test_c9_rerun_is_bitwise_identical(tmp_path, record_property):
    outs = []
    for name in ("a", "b"):
        path = tmp_path / f"{name}.yaml"
        path.write_text(yaml.safe_dump({**PIPE, "out_dir": str(tmp_path / name)}))
        for verb in ("pretrain", "prune", "kd", "adv-distill"):
            assert cli.main([verb, "--config", str(path)]) == 0, verb
        outs.append(tmp_path / name)
    curves = sorted(p.relative_to(outs[0]) for p in outs[0].glob("*/curve*.csv"))
    assert len(curves) == 3
    for rel in curves:
        assert filecmp.cmp(outs[0] / rel, outs[1] / rel, shallow=False), rel
    _detail(record_property, f"{len(curves)} stage curves identical")
