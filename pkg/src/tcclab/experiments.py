"""Experiment drivers shared by the command line and the acceptance tests."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .config import RunConfig
from .diagnostics import deviation
from .trajectory import CalibrationPack, calibration_sites, estimate_priors, estimate_priors_oneshot, \
    run_calibrated_inference, run_full


@dataclass(frozen=True)
class SweepRow:
    alpha: float
    tcc_endpoint_dev: float
    oneshot_endpoint_dev: float
    base_endpoint_dev: float


@dataclass
class SweepResult:
    rows: list[SweepRow]
    tcc_packs: list[CalibrationPack]
    oneshot_packs: list[CalibrationPack]


def sweep_alpha(cfg: RunConfig, alphas: Sequence[float]) -> SweepResult:
    """Endpoint deviation of TCC and one-shot calibration for each alpha.

    Priors are fitted on ``cfg.train_samples()`` and scored on
    ``cfg.eval_samples()`` against the full-computation endpoints. One-shot
    operators do not depend on alpha (their B batches come from the
    uncalibrated trajectory), so they are fitted once and re-weighted.
    """
    for a in alphas:
        if not a >= 0.0:
            raise ValueError(f"alpha must be >= 0, got {a}")
    den = cfg.build_denoiser()
    sched = cfg.build_schedule()
    policy = cfg.policy
    sites = calibration_sites(policy, den, sched, cfg.window, cfg.site_filter)
    train = cfg.train_samples()
    evals = cfg.eval_samples()
    full = run_full(evals, den, sched)
    base_dev = deviation(full, run_calibrated_inference(evals, den, sched, policy)).endpoint_rel_dev
    oneshot = estimate_priors_oneshot(train, den, sched, policy, cfg.window, sites, 1.0,
                                      cfg.pooling, cfg.variant, cfg.epsilon).pack

    rows, tcc_packs, oneshot_packs = [], [], []
    for alpha in alphas:
        alpha = float(alpha)
        tcc = estimate_priors(train, den, sched, policy, cfg.window, sites, alpha,
                              cfg.pooling, cfg.variant, cfg.epsilon).pack
        one = oneshot.with_alpha(alpha)
        tcc_dev = deviation(full, run_calibrated_inference(evals, den, sched, policy, tcc)).endpoint_rel_dev
        one_dev = deviation(full, run_calibrated_inference(evals, den, sched, policy, one)).endpoint_rel_dev
        rows.append(SweepRow(alpha, tcc_dev, one_dev, base_dev))
        tcc_packs.append(tcc)
        oneshot_packs.append(one)
    return SweepResult(rows, tcc_packs, oneshot_packs)
