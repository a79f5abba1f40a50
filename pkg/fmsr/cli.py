"""
Command-line surface: `fmsr <command> [options]` (or `python -m fmsr`).

Every command reads and writes records in the data directory (--data-dir) and is
deterministic given --seed. Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""
import argparse
import logging
import os
import time
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import torch

from fmsr.config import RunConfig, load_run_config
from fmsr.data.grid import EnsembleSet, Field, Trajectory
from fmsr.data.regrid import (
    coarsen,
    interpolate_up,
    make_coarsen_plan,
    make_upsample_plan,
    recoarsen_for_validation,
)
from fmsr.data.residual import NormStats, decompose, fit_norm_stats, make_sample
from fmsr.data.store import FieldStore, read_json, write_json
from fmsr.data.synth import (
    build_climatology,
    emulate_forecast,
    generate_truth,
    make_forecast_step,
)
from fmsr.errors import EXIT_OK, FMSRError, MissingInputError, ValidationError
from fmsr.model.base import checkpoint_path, load_checkpoint, save_checkpoint
from fmsr.model.diffnet import VelocityNet
from fmsr.model.flow_match import train
from fmsr.model.pipeline import (
    SROperator,
    pipeline_integrated_rollout,
    smooth_spectrally,
    super_resolve_ensemble,
    zero_shot_apply,
)
from fmsr.model.utils import get_full_path, split_times
from fmsr.verify.design import design_report
from fmsr.verify.ensemble import average_skill, evaluate_ensemble, per_date_scores, skill_table
from fmsr.verify.sigtest import paired_test
from fmsr.verify.spectra import (
    cutoff_wavenumber,
    spectrum_ratio,
    spectrum_report,
    zonal_power_spectrum,
)

logger = logging.getLogger(__name__)

# record names in the data directory
TRUTH_HR = "truth_hr"
TRUTH_LR = "truth_lr"
CLIM_HR = "clim_hr"
CLIM_LR = "clim_lr"
SPLITS = "splits.json"
NORM_STATS = "norm_stats.json"
FORECAST_LR = "forecast_lr"
FORECAST_SR = "forecast_sr"
FORECAST_BICUBIC = "forecast_bicubic"
FORECAST_INTEGRATED = "forecast_integrated"
FORECAST_FOREIGN = "forecast_foreign"
FORECAST_ZEROSHOT = "forecast_zeroshot"

_HINTS = {
    TRUTH_HR: "run `fmsr synth-gen` first",
    TRUTH_LR: "run `fmsr synth-gen` first",
    CLIM_HR: "run `fmsr synth-gen` first",
    CLIM_LR: "run `fmsr synth-gen` first",
    SPLITS: "run `fmsr synth-gen` first",
    NORM_STATS: "run `fmsr fit-stats` first",
    FORECAST_LR: "run `fmsr forecast` first",
    FORECAST_SR: "run `fmsr sr apply` first",
    FORECAST_BICUBIC: "run `fmsr sr apply` first",
    FORECAST_INTEGRATED: "run `fmsr sr integrated` first",
    FORECAST_ZEROSHOT: "run `fmsr sr zeroshot` first",
}


def _hint(name: str) -> str:
    if name.startswith("pairs_"):
        return "run `fmsr make-pairs` first"
    return _HINTS.get(name, "")


class Context(object):
    """Resolved configuration, store and grids shared by the commands."""

    def __init__(self, cfg: RunConfig, data_dir: str, model_dir: str):
        self.cfg = cfg
        self.data_dir = data_dir
        self.model_dir = model_dir
        self.store = FieldStore(data_dir)
        self.hr_grid, self.lr_grid = cfg.world.grids()
        self.catalog = cfg.world.catalog()
        self.plan_coarsen = make_coarsen_plan(self.hr_grid, self.lr_grid)
        self.plan_up = make_upsample_plan(self.lr_grid, self.hr_grid)

    def data_file(self, name: str) -> str:
        return os.path.join(self.data_dir, name)

    def read_fields(self, name: str) -> List[Field]:
        return self.store.read_fields(name, _hint(name))

    def read_ensembles(self, name: str) -> List[EnsembleSet]:
        return self.store.read_ensembles(name, _hint(name))

    def read_json(self, name: str) -> Any:
        return read_json(self.data_file(name), _hint(name))

    def norm_stats(self) -> NormStats:
        return NormStats.from_json(self.data_file(NORM_STATS), _hint(NORM_STATS))

    def operator(self) -> SROperator:
        stats = self.norm_stats()
        net, _ = load_checkpoint(checkpoint_path(model_path=self.model_dir), self.catalog, stats)
        return SROperator(
            net=net,
            stats=stats,
            plan_up=self.plan_up,
            plan_coarsen=self.plan_coarsen,
            cfg=self.cfg.train,
        )

    def climatology_for(self, grid):
        name = CLIM_HR if grid == self.hr_grid else CLIM_LR
        return self.store.read_climatology(name, _hint(name))

    def truth_for(self, grid) -> List[Field]:
        return self.read_fields(TRUTH_HR if grid == self.hr_grid else TRUTH_LR)


def truth_trajectory(truth: Sequence[Field], init_time: int, n_leads: int) -> Trajectory:
    """Truth states valid at init_time + 1 .. init_time + n_leads (truth[t] is valid at t)."""
    if init_time + n_leads >= len(truth):
        raise ValidationError(
            f"truth has {len(truth)} steps, forecast from {init_time} needs {init_time + n_leads + 1}"
        )
    return Trajectory(
        init_time=init_time, states=tuple(truth[init_time + 1 : init_time + 1 + n_leads])
    )


def select_inits(test_idx: np.ndarray, n_inits: int, n_leads: int, n_times: int) -> List[int]:
    """Evenly spaced initializations from the test split whose leads stay inside the record."""
    usable = [int(t) for t in test_idx if t + n_leads < n_times]
    if not usable:
        raise ValidationError(f"no test initialization leaves room for {n_leads} leads")
    stride = max(1, len(usable) // n_inits)
    return usable[::stride][:n_inits]


def _ensemble_map(ensembles: Sequence[EnsembleSet], fn) -> List[EnsembleSet]:
    return [
        EnsembleSet(
            members=tuple(
                Trajectory(
                    init_time=m.init_time,
                    states=tuple(fn(s) for s in m.states),
                    lead_step_hours=m.lead_step_hours,
                )
                for m in e.members
            )
        )
        for e in ensembles
    ]


# ---- commands ------------------------------------------------------------------------


def cmd_synth_gen(args, ctx: Context) -> None:
    cfg = ctx.cfg
    world = cfg.world
    truth = generate_truth(
        ctx.hr_grid, ctx.catalog, world.grf(cfg.seed), world.n_times, n_workers=cfg.threads
    )
    truth_lr = [coarsen(f, ctx.plan_coarsen) for f in truth]
    train_idx, val_idx, test_idx = split_times(
        world.n_times, world.n_train, world.n_val, world.n_test
    )
    fit = [truth[i] for i in train_idx]
    ctx.store.write_fields(TRUTH_HR, truth, {"seed": cfg.seed})
    ctx.store.write_fields(TRUTH_LR, truth_lr, {"seed": cfg.seed})
    for name, fields in ((CLIM_HR, fit), (CLIM_LR, [truth_lr[i] for i in train_idx])):
        ctx.store.write_climatology(
            name, build_climatology(fields, world.n_slots, world.quantiles)
        )
    write_json(
        ctx.data_file(SPLITS),
        {
            "train": train_idx.tolist(),
            "val": val_idx.tolist(),
            "test": test_idx.tolist(),
        },
    )


def cmd_make_pairs(args, ctx: Context) -> None:
    truth = ctx.read_fields(TRUTH_HR)
    truth_lr = ctx.read_fields(TRUTH_LR)
    splits = ctx.read_json(SPLITS)
    for split in ("train", "val"):
        idx = splits[split]
        if not idx:
            continue
        hr = [truth[i] for i in idx]
        lr = [truth_lr[i] for i in idx]
        residual = [decompose(h, l, ctx.plan_up)[1] for h, l in zip(hr, lr)]
        ctx.store.write_fields(f"pairs_{split}_hr", hr)
        ctx.store.write_fields(f"pairs_{split}_lr", lr)
        ctx.store.write_fields(f"pairs_{split}_residual", residual)


def _pairs(ctx: Context, split: str):
    hr = ctx.read_fields(f"pairs_{split}_hr")
    lr = ctx.read_fields(f"pairs_{split}_lr")
    if len(hr) != len(lr):
        raise ValidationError(f"pairs_{split}: {len(hr)} HR vs {len(lr)} LR states")
    return hr, lr


def cmd_fit_stats(args, ctx: Context) -> None:
    hr, lr = _pairs(ctx, "train")
    stats = fit_norm_stats(decompose(h, l, ctx.plan_up) for h, l in zip(hr, lr))
    stats.to_json(ctx.data_file(NORM_STATS))
    logger.info("Wrote %s (digest %s)", ctx.data_file(NORM_STATS), stats.digest())


def cmd_train(args, ctx: Context) -> None:
    cfg = ctx.cfg
    stats = ctx.norm_stats()
    hr, lr = _pairs(ctx, "train")
    samples = [make_sample(h, l, ctx.plan_up, stats) for h, l in zip(hr, lr)]
    net = VelocityNet(cfg.arch, len(ctx.catalog), seed=cfg.seed)
    logger.info("Training %d-parameter net on %d samples", net.n_parameters(), len(samples))
    net, history = train(samples, net, cfg.train)
    save_checkpoint(checkpoint_path(model_path=ctx.model_dir), net, ctx.catalog, stats)
    loss_path = get_full_path(ctx.model_dir, "loss.csv")
    history.to_csv(loss_path, index=False)
    logger.info("Wrote loss history to %s", loss_path)


def cmd_forecast(args, ctx: Context) -> None:
    cfg = ctx.cfg
    fc = cfg.forecast
    truth_lr = ctx.read_fields(TRUTH_LR)
    clim = ctx.store.read_climatology(CLIM_LR, _hint(CLIM_LR))
    splits = ctx.read_json(SPLITS)
    inits = select_inits(np.asarray(splits["test"]), fc.n_inits, fc.n_leads, len(truth_lr))
    model = fc.model(cfg.seed)
    ensembles = [
        emulate_forecast(truth_lr[t0], model, clim, fc.n_leads, fc.n_members) for t0 in inits
    ]
    ctx.store.write_ensembles(FORECAST_LR, ensembles, {"seed": cfg.seed})


def cmd_sr_apply(args, ctx: Context) -> None:
    op = ctx.operator()
    ensembles = ctx.read_ensembles(args.forecast)
    start = time.time()
    sr = [
        super_resolve_ensemble(op, e, ctx.cfg.seed, draw=args.draw, n_workers=ctx.cfg.threads)
        for e in ensembles
    ]
    logger.info("Super-resolved %d forecasts in %.2fs", len(sr), time.time() - start)
    ctx.store.write_ensembles(args.out, sr, {"seed": ctx.cfg.seed, "source": args.forecast})
    bicubic = _ensemble_map(ensembles, lambda s: interpolate_up(s, ctx.plan_up))
    ctx.store.write_ensembles(FORECAST_BICUBIC, bicubic, {"source": args.forecast})


def cmd_sr_integrated(args, ctx: Context) -> None:
    cfg = ctx.cfg
    op = ctx.operator()
    truth_lr = ctx.read_fields(TRUTH_LR)
    clim = ctx.store.read_climatology(CLIM_LR, _hint(CLIM_LR))
    reference = ctx.read_ensembles(FORECAST_LR)
    model = cfg.forecast.model(cfg.seed)
    out = []
    for e in reference:
        members = []
        for m in range(e.M):
            step = make_forecast_step(model, clim, member=m, init_time=e.init_time)
            members.append(
                pipeline_integrated_rollout(
                    op, truth_lr[e.init_time], step, e.T, cfg.seed, member=m
                )
            )
        out.append(EnsembleSet(members=tuple(members)))
        logger.info("Integrated rollout from t=%d done", e.init_time)
    ctx.store.write_ensembles(FORECAST_INTEGRATED, out, {"seed": cfg.seed})


def cmd_sr_zeroshot(args, ctx: Context) -> None:
    cfg = ctx.cfg
    op = ctx.operator()
    truth = ctx.read_fields(TRUTH_HR)
    reference = ctx.read_ensembles(FORECAST_LR)
    cutoff = args.cutoff_k or ctx.hr_grid.n_lon / 8
    foreign, sr = [], []
    for e in reference:
        hr = truth_trajectory(truth, e.init_time, e.T)
        smooth = Trajectory(
            init_time=hr.init_time,
            states=tuple(smooth_spectrally(s, cutoff) for s in hr.states),
        )
        foreign.append(EnsembleSet(members=(smooth,)))
        sr.append(EnsembleSet(members=(zero_shot_apply(op, smooth, cfg.seed),)))
    ctx.store.write_ensembles(FORECAST_FOREIGN, foreign, {"cutoff_k": cutoff})
    ctx.store.write_ensembles(FORECAST_ZEROSHOT, sr, {"seed": cfg.seed, "cutoff_k": cutoff})


def cmd_verify_design(args, ctx: Context) -> None:
    sr = ctx.read_ensembles(args.forecast)
    lr = ctx.read_ensembles(args.coarse)
    if len(sr) != len(lr):
        raise ValidationError(
            f"{args.forecast} has {len(sr)} initializations, {args.coarse} has {len(lr)}"
        )
    sr_re, lr_trajs = [], []
    for e_sr, e_lr in zip(sr, lr):
        if e_sr.init_time != e_lr.init_time or e_sr.M != e_lr.M:
            raise ValidationError(
                f"{args.forecast} and {args.coarse} are not aligned at init {e_sr.init_time}"
            )
        for m_sr, m_lr in zip(e_sr.members, e_lr.members):
            sr_re.append(
                Trajectory(
                    init_time=m_sr.init_time,
                    states=tuple(
                        recoarsen_for_validation(s, ctx.plan_coarsen) for s in m_sr.states
                    ),
                )
            )
            lr_trajs.append(m_lr)
    clim = ctx.store.read_climatology(CLIM_LR, _hint(CLIM_LR))
    report = design_report(sr_re, lr_trajs, clim)
    _write_csv(report, args.out)


def cmd_verify_ensemble(args, ctx: Context) -> None:
    ens = ctx.read_ensembles(args.forecast)
    grid = ens[0].grid
    truth = ctx.truth_for(grid)
    clim = ctx.climatology_for(grid)
    truths = [truth_trajectory(truth, e.init_time, e.T) for e in ens]
    quantiles = ctx.cfg.verify.brier_quantiles
    report = evaluate_ensemble(ens, truths, clim, quantiles)
    _write_csv(report, args.out)
    if args.per_date:
        _write_csv(per_date_scores(ens, truths, clim, quantiles), args.per_date)
    if args.reference:
        reference = pd.read_csv(args.reference)
        # fair Brier and clipped fair RMSE can be exactly zero at desk scale
        table = skill_table(
            report,
            reference,
            reference_id=os.path.basename(args.reference),
            nonpositive="skip",
        )
        _write_csv(table, _sibling(args.out, "skill"))
        headline = [c for c in ctx.cfg.verify.headline if c in ctx.catalog.labels]
        for metric in ("fair_crps", "fair_ens_mean_rmse"):
            if not ((table["metric"] == metric) & table["channel"].isin(headline)).any():
                logger.warning("no %s skill rows for headline channels %s", metric, headline)
                continue
            avg = average_skill(table, metric, headline)
            for _, row in avg.iterrows():
                logger.info(
                    "%s skill vs %s at %dh: %.4f",
                    metric,
                    args.reference,
                    row["lead_h"],
                    row["skill"],
                )


def cmd_verify_spectra(args, ctx: Context) -> None:
    ens = ctx.read_ensembles(args.forecast)
    grid = ens[0].grid
    truth = ctx.truth_for(grid)
    valid = sorted({s.timestamp for e in ens for m in e.members for s in m.states})
    model_spec = zonal_power_spectrum([s for e in ens for m in e.members for s in m.states])
    truth_spec = zonal_power_spectrum([truth[t] for t in valid])
    cutoff = cutoff_wavenumber(ctx.lr_grid.n_lon)
    spectrum_report(model_spec, get_full_path(args.out), cutoff)
    spectrum_report(truth_spec, get_full_path(_sibling(args.out, "truth")), cutoff)
    ratio = spectrum_ratio(model_spec, truth_spec, coarse_n_lon=ctx.lr_grid.n_lon)
    _write_csv(ratio, _sibling(args.out, "ratio"))


def cmd_sigtest(args, ctx: Context) -> None:
    v = ctx.cfg.verify
    a = _read_csv(args.a)
    b = _read_csv(args.b)
    result = paired_test(
        a, b, level=v.level, n_resamples=v.n_resamples, seed=ctx.cfg.seed, n_workers=ctx.cfg.threads
    )
    _write_csv(result, args.out)


# ---- plumbing ------------------------------------------------------------------------


def _sibling(path: str, tag: str) -> str:
    root, ext = os.path.splitext(path)
    return f"{root}_{tag}{ext or '.csv'}"


def _read_csv(path: str) -> pd.DataFrame:
    if not os.path.exists(path):
        raise MissingInputError(
            f"missing score table {path}; run `fmsr verify ensemble --per-date` first"
        )
    return pd.read_csv(path)


def _write_csv(df: pd.DataFrame, path: str) -> None:
    path = get_full_path(path)
    df.to_csv(path, index=False)
    logger.info("Wrote %d rows to %s", len(df), path)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        "fmsr", description="Flow-matching super-resolution of coarse forecasts."
    )
    parser.add_argument("--seed", type=int, default=None, help="root seed (default: config)")
    parser.add_argument(
        "--threads", type=int, default=None, help="worker processes and torch threads"
    )
    parser.add_argument("--config", type=str, default=None, help="JSON config overrides")
    parser.add_argument(
        "--log-level", type=str, default="INFO", choices=["DEBUG", "INFO", "WARN"]
    )
    parser.add_argument("--data-dir", type=str, default=None, help="(default: config data_path)")
    parser.add_argument("--model-dir", type=str, default=None, help="(default: config model_path)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate truth, coarse truth and climatologies")
    p.set_defaults(func=cmd_synth_gen)
    p = sub.add_parser("make-pairs", help="build (LR, HR, residual) training pairs")
    p.set_defaults(func=cmd_make_pairs)
    p = sub.add_parser("fit-stats", help="fit normalization statistics")
    p.set_defaults(func=cmd_fit_stats)
    p = sub.add_parser("train", help="train the velocity network")
    p.add_argument("--n-steps", type=int, default=None, help="(default: config)")
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("forecast", help="emulate coarse ensemble forecasts")
    p.set_defaults(func=cmd_forecast)

    sr = sub.add_parser("sr", help="super-resolve forecasts").add_subparsers(
        dest="mode", required=True
    )
    p = sr.add_parser("apply", help="post-process coarse ensembles")
    p.add_argument("--forecast", type=str, default=FORECAST_LR)
    p.add_argument("--out", type=str, default=FORECAST_SR)
    p.add_argument("--draw", type=int, default=0, help="sample index for repeated draws")
    p.set_defaults(func=cmd_sr_apply)
    p = sr.add_parser("integrated", help="super-resolve inside the forecast loop")
    p.set_defaults(func=cmd_sr_integrated)
    p = sr.add_parser("zeroshot", help="super-resolve smoothed high-resolution forecasts")
    p.add_argument(
        "--cutoff-k", type=float, default=None, help="smoothing wavenumber (default: n_lon / 8)"
    )
    p.set_defaults(func=cmd_sr_zeroshot)

    verify = sub.add_parser("verify", help="CSV verification reports").add_subparsers(
        dest="kind", required=True
    )
    p = verify.add_parser("design", help="re-coarsened SR vs coarse states")
    p.add_argument("--forecast", type=str, default=FORECAST_SR)
    p.add_argument("--coarse", type=str, default=FORECAST_LR)
    p.add_argument("--out", type=str, default="design.csv")
    p.set_defaults(func=cmd_verify_design)
    p = verify.add_parser("ensemble", help="fair ensemble scores against truth")
    p.add_argument("--forecast", type=str, default=FORECAST_SR)
    p.add_argument("--out", type=str, default="ensemble.csv")
    p.add_argument("--per-date", type=str, default=None, help="also write per-date scores")
    p.add_argument("--reference", type=str, default=None, help="reference report for skill")
    p.set_defaults(func=cmd_verify_ensemble)
    p = verify.add_parser("spectra", help="zonal power spectra and ratios to truth")
    p.add_argument("--forecast", type=str, default=FORECAST_SR)
    p.add_argument("--out", type=str, default="spectrum.csv")
    p.set_defaults(func=cmd_verify_spectra)

    p = sub.add_parser("sigtest", help="paired block-bootstrap test of two per-date tables")
    p.add_argument("--a", type=str, required=True)
    p.add_argument("--b", type=str, required=True)
    p.add_argument("--out", type=str, default="sigtest.csv")
    p.set_defaults(func=cmd_sigtest)
    return parser


def _overrides(args) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    if args.seed is not None:
        out["seed"] = args.seed
        out["train"] = {"seed": args.seed}
    if args.threads is not None:
        out["threads"] = args.threads
    if getattr(args, "n_steps", None) is not None:
        out.setdefault("train", {})["n_steps"] = args.n_steps
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.getLogger().setLevel(args.log_level)
    try:
        cfg = load_run_config(args.config, _overrides(args))
        torch.set_num_threads(cfg.threads)
        ctx = Context(
            cfg,
            data_dir=args.data_dir or cfg.data_path,
            model_dir=args.model_dir or cfg.model_path,
        )
        start = time.time()
        args.func(args, ctx)
        logger.info("%s finished in %.2fs", args.command, time.time() - start)
    except FMSRError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    return EXIT_OK
