"""64-bit FNV-1a fingerprint of the (model, schedule, cache policy) triple.

A calibration pack is only valid for the exact configuration it was fitted
under; the fingerprint is stored in the pack and checked before use. Collisions
are possible in principle (64-bit hash) and ignored.
"""

from __future__ import annotations

from .cache import CacheKind, CachePolicy
from .denoiser import DenoiserConfig

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def fmt_float(x: float) -> str:
    return repr(float(x))


def model_lines(cfg: DenoiserConfig) -> list[str]:
    return [
        f"model.d_model = {cfg.d_model}",
        f"model.n_layers = {cfg.n_layers}",
        f"model.n_tokens = {cfg.n_tokens}",
        f"model.n_heads = {cfg.n_heads}",
        f"model.d_mlp = {cfg.d_mlp}",
        f"model.n_conditions = {cfg.n_conditions}",
        f"model.weight_seed = {cfg.weight_seed}",
    ]


def schedule_lines(t_train: int, beta_start: float, beta_end: float, n_steps: int) -> list[str]:
    return [
        f"schedule.t_train = {t_train}",
        f"schedule.beta_start = {fmt_float(beta_start)}",
        f"schedule.beta_end = {fmt_float(beta_end)}",
        f"schedule.n_steps = {n_steps}",
    ]


def format_distortion_sites(sites) -> str:
    if sites is None:
        return "all"
    return ",".join(f"{layer}:{kind.label}" for layer, kind in sites)


def policy_lines(policy: CachePolicy) -> list[str]:
    lines = [
        f"cache.kind = {policy.kind.value}",
        f"cache.interval = {policy.interval_n}",
        f"cache.token_ratio = {fmt_float(policy.token_reuse_ratio)}",
    ]
    if policy.kind is CacheKind.DISTORTION:
        dist = policy.distortion
        lines += [
            f"cache.distortion_scale = {fmt_float(dist.scale)}",
            f"cache.distortion_angle = {fmt_float(dist.angle)}",
            f"cache.distortion_shift = {fmt_float(dist.shift)}",
            f"cache.distortion_growth = {fmt_float(dist.growth)}",
            f"cache.distortion_sites = {format_distortion_sites(dist.sites)}",
        ]
    return lines


def policy_fingerprint(policy: CachePolicy, cfg: DenoiserConfig, schedule) -> int:
    lines = (model_lines(cfg)
             + schedule_lines(schedule.t_train, schedule.beta_start, schedule.beta_end, schedule.n_steps)
             + policy_lines(policy))
    return fnv1a64(("\n".join(lines) + "\n").encode("utf-8"))
