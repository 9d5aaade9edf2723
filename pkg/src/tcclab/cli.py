"""Command-line driver.

Every subcommand reads a run configuration (``--config``, defaults when
omitted), writes its outputs into ``--out`` (default ``output.dir``) and
honours ``--seed``, which overrides ``samples.seed``. Exit codes: 0 success,
1 runtime error, 2 configuration or usage error, 3 pack/configuration mismatch.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import replace
from typing import Optional, Sequence

from .config import ConfigError, RunConfig, parse_config
from .denoiser import ModuleKind
from .diagnostics import count_flops, deviation, within_label_dispersion
from .experiments import sweep_alpha
from .packfile import load_pack, save_pack
from .trajectory import (PackMismatchError, calibration_sites, estimate_priors, estimate_priors_oneshot,
                         run_calibrated_inference, run_full)


def _cell(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_csv(path: str, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(x) for x in row])
    print(f"wrote {path}")


def _load_config(args) -> RunConfig:
    if args.config is None:
        cfg = RunConfig()
    else:
        try:
            with open(args.config, encoding="utf-8") as fh:
                text = fh.read()
        except (OSError, UnicodeDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        cfg = parse_config(text)
    if args.seed is not None:
        if not 0 <= args.seed < 2**63:
            raise ConfigError(f"--seed must lie in [0, 2^63), got {args.seed}")
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _out_dir(args, cfg: RunConfig) -> str:
    out = args.out if args.out is not None else cfg.output_dir
    os.makedirs(out, exist_ok=True)
    return out


def _maybe_pack(args, cfg: RunConfig):
    if args.pack is None:
        return None
    return load_pack(args.pack, cfg.fingerprint())


def cmd_estimate(args, cfg: RunConfig) -> None:
    den, sched = cfg.build_denoiser(), cfg.build_schedule()
    sites = calibration_sites(cfg.policy, den, sched, cfg.window, cfg.site_filter)
    fn = estimate_priors if args.command == "estimate-priors" else estimate_priors_oneshot
    est = fn(cfg.train_samples(), den, sched, cfg.policy, cfg.window, sites, cfg.alpha,
             cfg.pooling, cfg.variant, cfg.epsilon)
    default = "pack.tccpack" if args.command == "estimate-priors" else "oneshot.tccpack"
    path = args.pack if args.pack is not None else os.path.join(_out_dir(args, cfg), default)
    save_pack(est.pack, path)
    print(f"wrote {path} ({len(est.pack.operators)} operators, fingerprint {est.pack.fingerprint:016x})")


def cmd_sample(args, cfg: RunConfig) -> None:
    pack = _maybe_pack(args, cfg)
    den, sched = cfg.build_denoiser(), cfg.build_schedule()
    samples = cfg.train_samples()
    if args.full:
        record = run_full(samples, den, sched)
    else:
        record = run_calibrated_inference(samples, den, sched, cfg.policy, pack)
    out = _out_dir(args, cfg)
    rows = []
    for i, (s, x) in enumerate(zip(samples, record.final)):
        for tok in range(x.shape[0]):
            for ch in range(x.shape[1]):
                rows.append((i, s.seed, s.condition_id, tok, ch, float(x[tok, ch])))
    write_csv(os.path.join(out, "samples.csv"), ["sample", "seed", "condition", "token", "channel", "value"], rows)
    step_rows = []
    for k, latents in zip(record.steps, record.latents):
        for i, x in enumerate(latents):
            step_rows.append((k, sched.timestep(k), i, float((x ** 2).mean() ** 0.5)))
    write_csv(os.path.join(out, "steps.csv"), ["step", "timestep", "sample", "latent_rms"], step_rows)


def cmd_eval_deviation(args, cfg: RunConfig) -> None:
    pack = _maybe_pack(args, cfg)
    den, sched = cfg.build_denoiser(), cfg.build_schedule()
    samples = cfg.train_samples()
    log_sites = calibration_sites(cfg.policy, den, sched, cfg.window, cfg.site_filter)
    full = run_full(samples, den, sched, log_sites)
    method = run_calibrated_inference(samples, den, sched, cfg.policy, pack, log_sites)
    report = deviation(full, method)
    out = _out_dir(args, cfg)
    write_csv(os.path.join(out, "deviation.csv"), ["step", "timestep", "rel_dev"],
              [(k, sched.timestep(k), v) for k, v in report.step_curve])
    write_csv(os.path.join(out, "site_mismatch.csv"), ["step", "layer", "module", "mismatch"],
              [(s.step_index, s.layer, s.module.label, v) for s, v in report.site_mismatch.items()])
    print(f"endpoint relative deviation {report.endpoint_rel_dev!r}")


def cmd_flops(args, cfg: RunConfig) -> None:
    pack = _maybe_pack(args, cfg)
    r = count_flops(cfg.model, cfg.policy, cfg.build_schedule(), pack)
    header = ["fresh_module_flops", "cached_module_flops", "calibration_flops", "total_flops", "full_flops",
              "fresh_steps", "n_steps", "site_applications", "module_ratio", "ratio"]
    row = (r.fresh_module_flops, r.cached_module_flops, r.calibration_flops, r.total_flops, r.full_flops,
           r.fresh_steps, r.n_steps, r.calibrated_site_applications, r.module_ratio, r.ratio)
    write_csv(os.path.join(_out_dir(args, cfg), "flops.csv"), header, [row])


def cmd_dispersion(args, cfg: RunConfig) -> None:
    den, sched = cfg.build_denoiser(), cfg.build_schedule()
    samples = cfg.train_samples()
    sites = [s for k in sched.step_indices() for s in den.sites(k)]
    record = run_full(samples, den, sched, sites)
    report = within_label_dispersion(record.site_values, [s.condition_id for s in samples])
    out = _out_dir(args, cfg)
    write_csv(os.path.join(out, "dispersion.csv"),
              ["step", "layer", "module", "within_std_rms", "class_mean_rms", "ratio"],
              [(e.site.step_index, e.site.layer, e.site.module.label, e.within_std_rms, e.class_mean_rms,
                e.ratio) for e in report.entries])
    rows = []
    for k in report.steps:
        for module, label in ((ModuleKind.ATTENTION, "attention"), (ModuleKind.MLP, "mlp"), (None, "all")):
            within, class_mean = report.layer_mean(k, module)
            rows.append((k, label, report.fraction(k, module), within, class_mean))
    write_csv(os.path.join(out, "dispersion_fraction.csv"),
              ["step", "module", "fraction", "mean_within_std_rms", "mean_class_mean_rms"], rows)


def _parse_alphas(text: str) -> list[float]:
    try:
        alphas = [float(x) for x in text.split(",")]
    except ValueError:
        raise ConfigError(f"--alphas: bad list {text!r}") from None
    for a in alphas:
        if not a >= 0.0:
            raise ConfigError(f"--alphas: alpha must be >= 0, got {a}")
    return alphas


def cmd_sweep_alpha(args, cfg: RunConfig) -> None:
    alphas = _parse_alphas(args.alphas)
    if args.eval_seed is not None:
        cfg = replace(cfg, eval_seed=args.eval_seed)
    result = sweep_alpha(cfg, alphas)
    write_csv(os.path.join(_out_dir(args, cfg), "sweep_alpha.csv"),
              ["alpha", "tcc_endpoint_dev", "oneshot_endpoint_dev", "base_endpoint_dev"],
              [(r.alpha, r.tcc_endpoint_dev, r.oneshot_endpoint_dev, r.base_endpoint_dev) for r in result.rows])


COMMANDS = {
    "estimate-priors": cmd_estimate,
    "estimate-oneshot": cmd_estimate,
    "sample": cmd_sample,
    "eval-deviation": cmd_eval_deviation,
    "flops": cmd_flops,
    "dispersion": cmd_dispersion,
    "sweep-alpha": cmd_sweep_alpha,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tcclab", description="Calibrated feature-cache sampling lab.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration file (defaults when omitted)")
    common.add_argument("--seed", type=int, help="override samples.seed")
    common.add_argument("--out", help="output directory (default: output.dir)")
    common.add_argument("--pack", help="calibration pack to read, or for estimate-* to write")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "sample":
            p.add_argument("--full", action="store_true", help="sample with full computation")
        if name == "sweep-alpha":
            p.add_argument("--alphas", default="0,0.25,0.5,1", help="comma-separated alpha grid")
            p.add_argument("--eval-seed", type=int, help="override samples.eval_seed")
    return parser


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _load_config(args)
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except PackMismatchError as exc:
        print(f"pack mismatch: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(cli_main())
