"""Stage runners: pretrain -> prune -> kd -> adv-distill, plus vae-study, bench and report.

Each stage reads only its declared upstream artifacts under ``out_dir`` and
writes into ``out_dir/<stage>/``.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import torch

from . import report as rp
from .adversarial import build_discriminator, manifold_distance, train_adversarial
from .bench import bench_latency
from .config import ExperimentConfig, dump_config
from .dit import build_model, count_flops, count_params, load_checkpoint, save_checkpoint, tokens_for
from .errors import DependencyError
from .flow import make_schedule, sample
from .kd import GroupSpec, aligner_state, train_kd
from .pruning import (apply_masks, coarse_to_fine, compare_ffn_vs_heads, densify, eval_loss,
                      sensitivity_sweep)
from .training import seed_everything, train_flow_matching
from .vae import CompressionSpec, scaling_study, study_latencies

log = logging.getLogger(__name__)

ARTIFACTS = {
    "pretrain": "pretrain/model.safetensors",
    "prune": "prune/student.safetensors",
    "kd": "kd/student.safetensors",
    "adv-distill": "adv-distill/generator_ema.safetensors",
}


def _require(cfg: ExperimentConfig, stage: str) -> Path:
    path = Path(cfg.out_dir) / ARTIFACTS[stage]
    if not path.exists():
        raise DependencyError(f"missing {path}; run the '{stage}' stage first", stage=stage)
    return path


def _stage_dir(cfg: ExperimentConfig, stage: str) -> Path:
    d = Path(cfg.out_dir) / stage
    d.mkdir(parents=True, exist_ok=True)
    return d


def _finish(cfg: ExperimentConfig, rep: rp.ExperimentReport) -> rp.ExperimentReport:
    d = _stage_dir(cfg, rep.stage)
    (d / "config.yaml").write_text(dump_config(cfg))
    (d / "report.json").write_text(json.dumps(rep.to_json(), indent=1, default=str))
    return rep


def _hash(cfg: ExperimentConfig) -> str:
    return rp.config_hash(cfg.model_dump(mode="json", exclude={"stage", "out_dir", "parallel"}))


def _eval_stream(cfg: ExperimentConfig):
    task = cfg.task.build(cfg.seed)
    return task, task.batches(cfg.prune.eval_batches, cfg.prune.eval_batch_size, seed=cfg.seed + 10_007)


def run_pretrain(cfg: ExperimentConfig) -> rp.ExperimentReport:
    seed_everything(cfg.seed)
    task, ev = _eval_stream(cfg)
    model = build_model(cfg.dit.build(), cfg.seed)
    p = cfg.pretrain
    curve = train_flow_matching(model, task, p.iters, p.batch_size, p.lr, cfg.seed, p.t_sampler)
    h = _hash(cfg)
    d = _stage_dir(cfg, "pretrain")
    rp.write_csv(d / "curve.csv", "curve_fm", curve, h)
    save_checkpoint(d / "model.safetensors", model, meta={"stage": "pretrain", "config_hash": h})
    rep = rp.ExperimentReport("pretrain", h, "curve_fm", curves={"fm": curve})
    rep.notes.append(f"eval_loss={eval_loss(model, ev)!r} params={count_params(model.cfg)}")
    return _finish(cfg, rep)


def run_prune(cfg: ExperimentConfig) -> rp.ExperimentReport:
    seed_everything(cfg.seed)
    supernet, _, _ = load_checkpoint(_require(cfg, "pretrain"))
    _, ev = _eval_stream(cfg)
    p = cfg.prune
    masks, history = coarse_to_fine(supernet, p.budget(), p.group_size, ev, seed=cfg.seed, cap=p.cap,
                                    mode=p.mode, iters=p.mask_iters, workers=cfg.parallel)
    h = _hash(cfg)
    d = _stage_dir(cfg, "prune")
    masks.save(d / "masks.json")
    apply_masks(supernet, masks)
    student, new_cfg = densify(supernet, masks)
    save_checkpoint(d / "student.safetensors", student,
                    meta={"stage": "prune", "config_hash": h, "supernet_params": count_params(supernet.cfg)})
    rep = rp.ExperimentReport("prune", h, "candidates")
    rep.add_row(index=0, params=count_params(new_cfg), eval_loss=eval_loss(student, ev))
    rep.notes.append(f"search={history}")
    apply_masks(supernet, type(masks).ones(supernet.cfg))
    shape = tuple(cfg.task.shape)
    for axis in p.sweep_axes:
        sweep = sensitivity_sweep(supernet, axis, p.sweep_fractions, ev, shape, bench_runs=p.bench_runs, cfg_hash=h)
        sweep.write_csv(d / f"sensitivity_{axis}.csv")
        rep.curves[f"sensitivity_{axis}"] = sweep.rows
    if {"ffn", "heads"} <= set(p.sweep_axes):
        cmp = compare_ffn_vs_heads(supernet, ev)
        rep.notes.append(f"ffn_vs_heads_at_0.5={cmp}")
    rep.write_csv(d / "selection.csv")
    return _finish(cfg, rep)


def run_kd(cfg: ExperimentConfig) -> rp.ExperimentReport:
    seed_everything(cfg.seed)
    teacher, _, _ = load_checkpoint(_require(cfg, "pretrain"))
    student, _, _ = load_checkpoint(_require(cfg, "prune"))
    task, ev = _eval_stream(cfg)
    k = cfg.kd
    spec = GroupSpec.proportional(student.cfg.num_blocks, teacher.cfg.num_blocks,
                                  min(k.groups, student.cfg.num_blocks, teacher.cfg.num_blocks))
    student, aligners, curve = train_kd(teacher, student, spec, task, k.iters, alpha=k.alpha, lr=k.lr,
                                        batch_size=k.batch_size, seed=cfg.seed, sim=k.sim)
    h = _hash(cfg)
    d = _stage_dir(cfg, "kd")
    rp.write_csv(d / "curve.csv", "curve_kd", curve, h)
    save_checkpoint(d / "student.safetensors", student, extra=aligner_state(aligners),
                    meta={"stage": "kd", "config_hash": h, "alpha": k.alpha, "sim": k.sim,
                          "groups": [list(spec.student_ends), list(spec.teacher_ends)]})
    rep = rp.ExperimentReport("kd", h, "curve_kd", curves={"kd": curve})
    rep.notes.append(f"eval_loss={eval_loss(student, ev)!r} sim={k.sim}")
    return _finish(cfg, rep)


def run_adv(cfg: ExperimentConfig) -> rp.ExperimentReport:
    seed_everything(cfg.seed)
    gen, _, _ = load_checkpoint(_require(cfg, "kd"))
    task = cfg.task.build(cfg.seed)
    a = cfg.adv
    adv_cfg = a.build()
    schedule = make_schedule(a.k)
    disc = build_discriminator(gen, min(a.K, gen.cfg.num_blocks), a.L, seed=cfg.seed, head=a.head)
    before = disc.prefix_hash()
    ema, curve, _ = train_adversarial(gen, disc, schedule, task, adv_cfg, a.iters, seed=cfg.seed)
    h = _hash(cfg)
    d = _stage_dir(cfg, "adv-distill")
    rp.write_csv(d / "curve.csv", "curve_adv", curve, h)
    save_checkpoint(d / "generator_ema.safetensors", ema,
                    meta={"stage": "adv-distill", "config_hash": h, "schedule": list(schedule.steps),
                          "ema_rate": a.ema_rate})
    rep = rp.ExperimentReport("adv-distill", h, "curve_adv", curves={"adv": curve})
    rep.notes.append(f"prefix_unchanged={disc.prefix_hash() == before}")
    rep.notes.append(f"manifold_distance={few_step_distance(ema, task, a.k, a.c, cfg.seed)!r}")
    return _finish(cfg, rep)


@torch.no_grad()
def few_step_distance(model, task, k: int, c: float, seed: int, n: int = 64) -> float:
    """Mean pseudo-Huber distance from k-step samples to the nearest prototype of their prompt."""
    g = torch.Generator().manual_seed(10_000 + seed)
    ids = torch.arange(n) % task.num_prompts
    noise = torch.randn(n, *task.shape, generator=g)
    x = sample(lambda t, xt, cond: model(xt, t, ids), make_schedule(k), noise)
    dists = [manifold_distance(x[i:i + 1], task.prototypes[ids[i]], c) for i in range(n)]
    return float(torch.cat(dists).mean())


def _vae_specs(cfg: ExperimentConfig) -> list[CompressionSpec]:
    return [CompressionSpec(*s, latent_channels=cfg.vae.latent_channels) for s in cfg.vae.specs]


def _vae_seed(args):
    cfg_json, seed, measure = args
    cfg = ExperimentConfig.model_validate(cfg_json)
    torch.set_num_threads(1)
    return scaling_study(_vae_specs(cfg), cfg.dit.build(), cfg.vae.study(), seed=seed, cfg_hash=_hash(cfg),
                         measure_latency=measure)


def run_vae_study(cfg: ExperimentConfig) -> rp.ExperimentReport:
    seed_everything(cfg.seed)
    h = _hash(cfg)
    d = _stage_dir(cfg, "vae-study")
    parallel = cfg.parallel > 1 and len(cfg.vae.seeds) > 1
    jobs = [(cfg.model_dump(mode="json"), s, not parallel) for s in cfg.vae.seeds]
    if parallel:
        with ProcessPoolExecutor(cfg.parallel) as pool:
            reports = list(pool.map(_vae_seed, jobs))
        # benchmarks run one at a time, after every worker has exited
        for seed, r in zip(cfg.vae.seeds, reports):
            for row, ms in zip(r.rows, study_latencies(_vae_specs(cfg), cfg.dit.build(), cfg.vae.study(), seed)):
                row["latency_ms_median"] = ms
    else:
        reports = [_vae_seed(j) for j in jobs]
    for seed, r in zip(cfg.vae.seeds, reports):
        r.write_csv(d / f"vae_study_seed{seed}.csv")
        for name, curve in r.curves.items():
            rp.write_csv(d / f"curve_{name}_seed{seed}.csv", "curve_vae", curve, h)
    merged = median_table(reports)
    merged.write_csv(d / "vae_study.csv")
    _plot_vae(merged, d)
    return _finish(cfg, merged)


def median_table(reports: list[rp.ExperimentReport]) -> rp.ExperimentReport:
    """Per-row median over seeds of PSNR, latency and eval loss."""
    import statistics

    out = rp.ExperimentReport(reports[0].stage, reports[0].config_hash, reports[0].schema)
    for i, row in enumerate(reports[0].rows):
        merged = dict(row)
        for col in ("psnr_db", "latency_ms_median", "eval_loss"):
            merged[col] = float(statistics.median(r.rows[i][col] for r in reports))
        out.add_row(**merged)
    out.notes = list(reports[0].notes) + [f"medians over {len(reports)} seeds"]
    return out


def _plot_vae(rep: rp.ExperimentReport, d: Path) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:  # plots are optional artifacts
        return
    fig, ax = plt.subplots(1, 2, figsize=(9, 3.5))
    ax[0].plot(rep.column("total_ratio"), rep.column("psnr_db"), "o-")
    ax[0].set_xscale("log", base=2)
    ax[0].set_xlabel("total compression ratio")
    ax[0].set_ylabel("PSNR (dB)")
    ax[1].plot(rep.column("tokens"), rep.column("latency_ms_median"), "o-")
    ax[1].set_xscale("log", base=2)
    ax[1].set_xlabel("DiT tokens")
    ax[1].set_ylabel("median step latency (ms)")
    fig.tight_layout()
    fig.savefig(d / "vae_study.png", dpi=100)
    plt.close(fig)


def run_bench(cfg: ExperimentConfig) -> rp.ExperimentReport:
    seed_everything(cfg.seed)
    b = cfg.bench
    if b.checkpoint:
        model, _, _ = load_checkpoint(b.checkpoint)
    else:
        model = build_model(cfg.dit.build(), cfg.seed)
    h = _hash(cfg)
    rep = rp.ExperimentReport("bench", h, "bench")
    for shape in b.latent_shapes:
        rep.add_row(shape="x".join(map(str, shape)), tokens=tokens_for(model.cfg, shape),
                    latency_ms_median=bench_latency(model, (1, *shape), runs=b.runs))
    rep.notes.append(f"params={count_params(model.cfg)} flops@first={count_flops(model.cfg, rep.rows[0]['tokens'])}")
    rep.write_csv(_stage_dir(cfg, "bench") / "bench.csv")
    return _finish(cfg, rep)


def run_report(cfg: ExperimentConfig) -> rp.ExperimentReport:
    """Validate every CSV under ``out_dir`` against its schema and tabulate them."""
    root = Path(cfg.out_dir)
    rep = rp.ExperimentReport("report", _hash(cfg), "summary")
    for path in sorted(root.glob("*/*.csv")):
        if path.parent.name == "report":
            continue
        rep.add_row(file=str(path.relative_to(root)), schema=rp.csv_schema(path), rows=len(rp.read_csv(path)))
    rep.write_csv(_stage_dir(cfg, "report") / "summary.csv")
    return _finish(cfg, rep)


RUNNERS = {
    "pretrain": run_pretrain,
    "prune": run_prune,
    "kd": run_kd,
    "adv-distill": run_adv,
    "vae-study": run_vae_study,
    "bench": run_bench,
    "report": run_report,
}


def run(cfg: ExperimentConfig) -> rp.ExperimentReport:
    torch.set_num_threads(cfg.threads)
    log.info("running stage %s into %s", cfg.stage, cfg.out_dir)
    return RUNNERS[cfg.stage](cfg)
