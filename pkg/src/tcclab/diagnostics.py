"""Trajectory deviation, analytical FLOPs and within-label dispersion.

FLOPs count a multiply-add as 2 and cover the transformer modules only
(embedding and readout are identical for every method and left out). Per
sampled trajectory:

* fresh attention          8 T d^2 + 4 T^2 d
* fresh MLP                4 T d d_mlp
* reused module            0
* token-level partial      attention 4 T d^2 + 4 f d^2 + 4 f T d, MLP 4 f d d_mlp
                           (f recomputed tokens; keys/values for all T tokens)
* calibration application  2 T (d^2 + 2 d)

The synthetic distortion policy's affected sites count as reused.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Optional, Sequence

import numpy as np

from .cache import CacheKind, CachePolicy, is_cache_affected, n_fresh_tokens
from .denoiser import DenoiserConfig, ModuleKind, SiteId
from .trajectory import CalibrationPack, RunRecord


@dataclass
class DeviationReport:
    endpoint_rel_dev: float
    step_curve: list[tuple[int, float]]
    site_mismatch: dict[SiteId, float] = field(default_factory=dict)


def _rel(method: Sequence[np.ndarray], ref: Sequence[np.ndarray]) -> float:
    num = sum(float(np.sum((m - r) ** 2)) for m, r in zip(method, ref))
    den = sum(float(np.sum(r ** 2)) for r in ref)
    if den == 0.0:
        return 0.0 if num == 0.0 else math.inf
    return math.sqrt(num / den)


def deviation(full_run: RunRecord, method_run: RunRecord) -> DeviationReport:
    """Relative Frobenius drift of ``method_run`` from ``full_run``, step by step."""
    if full_run.steps != method_run.steps:
        raise ValueError("runs cover different steps")
    for a, b in zip(full_run.latents, method_run.latents):
        if len(a) != len(b) or any(x.shape != y.shape for x, y in zip(a, b)):
            raise ValueError("runs differ in sample count or latent shape")
    curve = [(k, _rel(m, f)) for k, f, m in zip(full_run.steps, full_run.latents, method_run.latents)]
    mismatch = {}
    for site, values in method_run.site_values.items():
        if site not in full_run.site_values:
            continue
        ref = full_run.site_values[site]
        if len(ref) != len(values):
            raise ValueError(f"site {site} logged for different sample counts")
        mismatch[site] = math.sqrt(sum(float(np.sum((v - r) ** 2)) for v, r in zip(values, ref)))
    return DeviationReport(curve[-1][1], curve, mismatch)


@dataclass(frozen=True)
class FlopsReport:
    fresh_module_flops: int
    cached_module_flops: int
    calibration_flops: int
    total_flops: int
    full_flops: int
    fresh_steps: int
    n_steps: int
    calibrated_site_applications: int

    @property
    def module_ratio_exact(self) -> Fraction:
        return Fraction(self.fresh_module_flops + self.cached_module_flops, self.full_flops)

    @property
    def module_ratio(self) -> float:
        return float(self.module_ratio_exact)

    @property
    def ratio(self) -> float:
        return float(Fraction(self.total_flops, self.full_flops))


def attention_flops(cfg: DenoiserConfig) -> int:
    t, d = cfg.n_tokens, cfg.d_model
    return 8 * t * d * d + 4 * t * t * d


def mlp_flops(cfg: DenoiserConfig) -> int:
    return 4 * cfg.n_tokens * cfg.d_model * cfg.d_mlp


def calibration_flops_per_site(cfg: DenoiserConfig) -> int:
    d = cfg.d_model
    return 2 * cfg.n_tokens * (d * d + 2 * d)


def _partial_flops(cfg: DenoiserConfig, kind: ModuleKind, fresh_tokens: int) -> int:
    t, d, f = cfg.n_tokens, cfg.d_model, fresh_tokens
    if kind is ModuleKind.ATTENTION:
        return 4 * t * d * d + 4 * f * d * d + 4 * f * t * d
    return 4 * f * d * cfg.d_mlp


def count_flops(cfg: DenoiserConfig, policy: CachePolicy, schedule,
                pack: Optional[CalibrationPack] = None) -> FlopsReport:
    """Analytical per-trajectory FLOPs; depends only on shapes and the schedule."""
    per_kind = {ModuleKind.ATTENTION: attention_flops(cfg), ModuleKind.MLP: mlp_flops(cfg)}
    per_step_full = cfg.n_layers * sum(per_kind.values())
    fresh_total = 0
    fresh_steps = 0
    for k in schedule.step_indices():
        step_fresh = True
        for layer in range(cfg.n_layers):
            for kind in ModuleKind:
                site = SiteId(k, layer, kind)
                if not is_cache_affected(policy, site, schedule):
                    fresh_total += per_kind[kind]
                    continue
                step_fresh = False
                if policy.kind is CacheKind.TOKEN_LEVEL:
                    f = n_fresh_tokens(cfg.n_tokens, policy.token_reuse_ratio)
                    fresh_total += _partial_flops(cfg, kind, f)
        fresh_steps += step_fresh
    applications = pack.n_applications if pack is not None else 0
    calibration = applications * calibration_flops_per_site(cfg)
    return FlopsReport(
        fresh_module_flops=fresh_total,
        cached_module_flops=0,
        calibration_flops=calibration,
        total_flops=fresh_total + calibration,
        full_flops=schedule.n_steps * per_step_full,
        fresh_steps=fresh_steps,
        n_steps=schedule.n_steps,
        calibrated_site_applications=applications,
    )


@dataclass(frozen=True)
class DispersionEntry:
    site: SiteId
    within_std_rms: float
    class_mean_rms: float
    ratio: float


@dataclass
class DispersionReport:
    entries: list[DispersionEntry]

    def fraction(self, step_index: int, module: Optional[ModuleKind] = None) -> float:
        """Share of layers (or of all sites when ``module`` is None) with ratio > 1."""
        chosen = [e for e in self.entries if e.site.step_index == step_index
                  and (module is None or e.site.module is module)]
        if not chosen:
            raise ValueError(f"no dispersion entries for step {step_index}")
        return sum(e.ratio > 1.0 for e in chosen) / len(chosen)

    def layer_mean(self, step_index: int, module: Optional[ModuleKind] = None) -> tuple[float, float]:
        chosen = [e for e in self.entries if e.site.step_index == step_index
                  and (module is None or e.site.module is module)]
        return (float(np.mean([e.within_std_rms for e in chosen])),
                float(np.mean([e.class_mean_rms for e in chosen])))

    @property
    def steps(self) -> list[int]:
        return sorted({e.site.step_index for e in self.entries}, reverse=True)


def within_label_dispersion(values: Mapping[SiteId, Sequence[np.ndarray]],
                            conditions: Sequence[int]) -> DispersionReport:
    """Within-label spread versus class-mean scale at every logged site.

    For each condition the across-sample mean and population standard
    deviation are taken per (token, channel); the two RMS figures pool those
    over conditions, tokens and channels. A zero class mean with non-zero
    spread gives ratio ``inf``; zero spread gives ratio 0.
    """
    groups: dict[int, list[int]] = {}
    for i, cond in enumerate(conditions):
        groups.setdefault(int(cond), []).append(i)
    for cond, members in groups.items():
        if len(members) < 2:
            raise ValueError(f"dispersion undefined: condition {cond} has {len(members)} sample")

    entries = []
    for site in sorted(values, key=lambda s: (-s.step_index, s.layer, s.module)):
        per_sample = values[site]
        if len(per_sample) != len(conditions):
            raise ValueError(f"site {site} has {len(per_sample)} samples, expected {len(conditions)}")
        sq_std = 0.0
        sq_mean = 0.0
        count = 0
        for cond in sorted(groups):
            stack = np.stack([per_sample[i] for i in groups[cond]])
            # offsets from the first member keep identical samples at exactly zero spread
            offsets = stack - stack[0]
            offset_mean = offsets.mean(axis=0)
            var = ((offsets - offset_mean) ** 2).mean(axis=0)
            mean = stack[0] + offset_mean
            sq_std += float(var.sum())
            sq_mean += float((mean ** 2).sum())
            count += mean.size
        within = math.sqrt(sq_std / count)
        class_mean = math.sqrt(sq_mean / count)
        if within == 0.0:
            ratio = 0.0
        elif class_mean == 0.0:
            ratio = math.inf
        else:
            ratio = within / class_mean
        entries.append(DispersionEntry(site, within, class_mean, ratio))
    return DispersionReport(entries)
