"""Cache strategies: which sites are reused at which steps, and how.

``ModuleInterval`` recomputes every module at one step out of ``interval_n``
and reuses whole module outputs in between. ``TokenLevel`` follows the same
schedule but, at cached steps, recomputes the ``ceil((1 - R) * n_tokens)``
tokens whose incoming representation moved most since they were last
computed. ``Distortion`` is a synthetic harness: on cached steps its
affected sites return a known similarity transform of the fresh value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np

from .denoiser import ModuleFn, ModuleKind, SiteHook, SiteId

TIEBREAK_EPS = 1e-9


class CacheKind(str, Enum):
    NONE = "none"
    MODULE_INTERVAL = "module_interval"
    TOKEN_LEVEL = "token_level"
    DISTORTION = "distortion"


@dataclass(frozen=True)
class SimilarityDistortion:
    """Phi(h) = rho * F(h) @ R_angle + shift, rho = scale * (1 + growth * drift).

    ``drift`` is the relative change of the site's incoming representation
    since its last fresh step, so the distortion grows as the trajectory moves
    away from where the cache was filled. ``R_angle`` rotates coordinate pairs
    (0, 1), (2, 3), ...; the shift vector alternates ``+shift, -shift``.
    """

    scale: float = 1.5
    angle: float = 0.3
    shift: float = 0.1
    growth: float = 0.0
    sites: Optional[tuple[tuple[int, ModuleKind], ...]] = None  # None: all

    def covers(self, layer: int, kind: ModuleKind) -> bool:
        return self.sites is None or (layer, kind) in self.sites

    def rotation(self, d: int) -> np.ndarray:
        r = np.eye(d)
        c, s = math.cos(self.angle), math.sin(self.angle)
        for i in range(0, d - 1, 2):
            r[i, i], r[i, i + 1], r[i + 1, i], r[i + 1, i + 1] = c, s, -s, c
        return r

    def shift_vector(self, d: int) -> np.ndarray:
        return self.shift * np.where(np.arange(d) % 2 == 0, 1.0, -1.0)


@dataclass(frozen=True)
class CachePolicy:
    kind: CacheKind = CacheKind.NONE
    interval_n: int = 1
    token_reuse_ratio: float = 0.0
    distortion: Optional[SimilarityDistortion] = None
    first_step_fresh: bool = True

    def __post_init__(self):
        if not self.first_step_fresh:
            raise ValueError("first_step_fresh must be true")
        if self.kind is CacheKind.NONE:
            return
        if self.interval_n < 2:
            raise ValueError(f"{self.kind.value} requires interval_n >= 2, got {self.interval_n}")
        if self.kind is CacheKind.TOKEN_LEVEL and not 0.0 < self.token_reuse_ratio < 1.0:
            raise ValueError(f"token_reuse_ratio must lie in (0, 1), got {self.token_reuse_ratio}")
        if self.kind is CacheKind.DISTORTION and self.distortion is None:
            raise ValueError("distortion policy needs distortion parameters")

    @classmethod
    def none(cls) -> "CachePolicy":
        return cls()

    @classmethod
    def module_interval(cls, n: int) -> "CachePolicy":
        return cls(CacheKind.MODULE_INTERVAL, interval_n=n)

    @classmethod
    def token_level(cls, n: int, ratio: float) -> "CachePolicy":
        return cls(CacheKind.TOKEN_LEVEL, interval_n=n, token_reuse_ratio=ratio)

    @classmethod
    def with_distortion(cls, n: int, distortion: SimilarityDistortion) -> "CachePolicy":
        return cls(CacheKind.DISTORTION, interval_n=n, distortion=distortion)


@dataclass
class StepPlan:
    step_index: int
    fresh: bool
    masks: dict[SiteId, np.ndarray] = field(default_factory=dict)


def plan_step(policy: CachePolicy, step_index: int, schedule) -> StepPlan:
    schedule.check_step(step_index)
    if policy.kind is CacheKind.NONE:
        return StepPlan(step_index, True)
    fresh = (schedule.n_steps - 1 - step_index) % policy.interval_n == 0
    return StepPlan(step_index, fresh)


def is_cache_affected(policy: CachePolicy, site: SiteId, schedule) -> bool:
    if plan_step(policy, site.step_index, schedule).fresh:
        return False
    if policy.kind is CacheKind.DISTORTION:
        return policy.distortion.covers(site.layer, site.module)
    return True


def n_fresh_tokens(n_tokens: int, ratio: float) -> int:
    # The 1e-9 guard keeps e.g. (1 - 0.7) * 10 = 3.0000000000000004 at 3.
    return max(1, math.ceil((1.0 - ratio) * n_tokens - 1e-9))


@dataclass
class SiteCache:
    output: np.ndarray
    fresh_step: int
    staleness: np.ndarray
    snapshot: np.ndarray


class CacheStore:
    """Per-sample cache: last fresh output and incoming snapshot per (layer, module)."""

    def __init__(self):
        self.entries: dict[tuple[int, ModuleKind], SiteCache] = {}

    def record_fresh(self, site: SiteId, incoming: np.ndarray, output: np.ndarray) -> None:
        self.entries[(site.layer, site.module)] = SiteCache(
            output=output.copy(), fresh_step=site.step_index,
            staleness=np.zeros(len(output), dtype=np.int64), snapshot=incoming.copy())

    def get(self, site: SiteId) -> SiteCache:
        try:
            return self.entries[(site.layer, site.module)]
        except KeyError:
            raise RuntimeError(f"cache not warmed for {site}") from None

    def serialize(self) -> bytes:
        parts = []
        for key in sorted(self.entries):
            e = self.entries[key]
            parts.append(f"{key[0]}:{int(key[1])}:{e.fresh_step};".encode())
            parts += [e.output.tobytes(), e.staleness.tobytes(), e.snapshot.tobytes()]
        return b"".join(parts)


def select_fresh_tokens(store: CacheStore, site: SiteId, incoming: np.ndarray, ratio: float) -> np.ndarray:
    """Mask of tokens to recompute: the largest drift-plus-staleness scores."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"token reuse ratio must lie in (0, 1), got {ratio}")
    entry = store.get(site)
    drift = np.sqrt(np.sum((incoming - entry.snapshot) ** 2, axis=1))
    score = drift + entry.staleness * TIEBREAK_EPS
    order = np.argsort(-score, kind="stable")  # ties resolve to the lower index
    mask = np.zeros(len(incoming), dtype=bool)
    mask[order[:n_fresh_tokens(len(incoming), ratio)]] = True
    return mask


def cache_side_value(policy: CachePolicy, store: CacheStore, site: SiteId,
                     incoming: np.ndarray, compute: Optional[ModuleFn] = None,
                     plan: Optional[StepPlan] = None) -> np.ndarray:
    """Phi_u: the value a cached site hands to the rest of the forward pass.

    Token-level masks are recorded into ``plan.masks`` when a plan is given.
    """
    entry = store.get(site)
    if policy.kind is CacheKind.MODULE_INTERVAL:
        entry.staleness += 1
        return entry.output.copy()
    if policy.kind is CacheKind.TOKEN_LEVEL:
        mask = select_fresh_tokens(store, site, incoming, policy.token_reuse_ratio)
        if plan is not None:
            plan.masks[site] = mask
        rows = np.flatnonzero(mask)
        out = entry.output.copy()
        out[rows] = compute(incoming, rows)
        entry.output = out.copy()
        entry.snapshot[rows] = incoming[rows]
        entry.staleness += 1
        entry.staleness[rows] = 0
        return out
    if policy.kind is CacheKind.DISTORTION:
        dist = policy.distortion
        d = incoming.shape[1]
        drift = np.linalg.norm(incoming - entry.snapshot) / max(np.linalg.norm(entry.snapshot), 1e-300)
        rho = dist.scale * (1.0 + dist.growth * drift)
        return rho * (compute(incoming) @ dist.rotation(d)) + dist.shift_vector(d)
    raise ValueError(f"policy {policy.kind.value} has no cache-side values")


def cache_hook(policy: CachePolicy, store: CacheStore, plan: StepPlan, schedule,
               calibrate: Optional[Callable[[SiteId, np.ndarray], np.ndarray]] = None) -> SiteHook:
    """Site hook for a cache-side forward pass at ``plan.step_index``.

    Fresh steps compute and record every site. On cached steps, affected sites
    take ``cache_side_value`` and then ``calibrate`` (if given); the store
    keeps the uncalibrated value.
    """

    def hook(site: SiteId, incoming: np.ndarray, compute: ModuleFn) -> np.ndarray:
        if plan.fresh:
            value = compute(incoming)
            if policy.kind is not CacheKind.NONE:
                store.record_fresh(site, incoming, value)
            return value
        if not is_cache_affected(policy, site, schedule):
            return compute(incoming)
        value = cache_side_value(policy, store, site, incoming, compute, plan)
        if calibrate is not None:
            value = calibrate(site, value)
        return value

    return hook
