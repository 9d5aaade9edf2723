"""Prior estimation along the corrected trajectory, and calibrated sampling.

Three histories are tracked over the same representative samples:

* full      - every module freshly computed;
* cache     - the base cache policy without calibration;
* corrected - the cache policy with the operators fitted so far applied.

``estimate_priors`` walks the reverse steps once. At a step that holds
calibration sites it advances the full history (recording A), runs a
non-committing probe of the corrected history (recording B), fits one
operator per site, and only then advances the corrected history with those
operators in place. Later priors are therefore collected on the trajectory
they will be applied to. ``estimate_priors_oneshot`` is the ablation that
takes every B from the uncorrected cache history instead.

Calibration is applied when a cached value is consumed; cache stores keep the
raw cache-side value so a reused entry is never calibrated twice.

Sample-level parallelism is capped by ``TCC_LAB_THREADS`` (0 = sequential).
Results are collected in sample order, so they do not depend on it.
"""

from __future__ import annotations

import copy
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np

from .cache import CacheKind, CachePolicy, CacheStore, cache_hook, is_cache_affected, plan_step
from .calibration import (DEFAULT_EPSILON, CalibrationOperator, PoolingMode, Variant, _same_bits,
                          apply, fit, paired_batch)
from .denoiser import Denoiser, LatentState, ModuleKind, SiteId
from .fingerprint import policy_fingerprint
from .linalg import SeededRng
from .schedule import ddim_step, init_latent


class PackMismatchError(ValueError):
    """A calibration pack was used with a configuration it was not fitted for."""


class HistoryMode(str, Enum):
    FULL = "full"
    CACHE_SIDE = "cache"
    CORRECTED = "corrected"


@dataclass(frozen=True)
class Sample:
    seed: int
    condition_id: int


@dataclass(frozen=True)
class CalibrationWindow:
    """Inclusive range of reverse step indices, ``first_step >= last_step``.

    ``CalibrationWindow.empty()`` (stored as -1, -1) contains no step.
    """

    first_step: int
    last_step: int

    @classmethod
    def empty(cls) -> "CalibrationWindow":
        return cls(-1, -1)

    @property
    def is_empty(self) -> bool:
        return self.first_step < 0

    def contains(self, step_index: int) -> bool:
        return not self.is_empty and self.last_step <= step_index <= self.first_step

    def validate(self, n_steps: int) -> None:
        if self.is_empty:
            if (self.first_step, self.last_step) != (-1, -1):
                raise ValueError(f"empty window must be (-1, -1), got {self}")
            return
        if not 0 <= self.last_step <= self.first_step < n_steps:
            raise ValueError(
                f"window {self.first_step}-{self.last_step} not inside steps {n_steps - 1}-0")

    def __str__(self) -> str:
        return "none" if self.is_empty else f"{self.first_step}-{self.last_step}"


@dataclass(frozen=True)
class SiteFilter:
    layers: Optional[tuple[int, ...]] = None  # None: all layers
    modules: Optional[tuple[ModuleKind, ...]] = None  # None: both kinds

    def selects(self, site: SiteId) -> bool:
        return ((self.layers is None or site.layer in self.layers)
                and (self.modules is None or site.module in self.modules))


@dataclass(eq=False)
class CalibrationPack:
    operators: dict[SiteId, CalibrationOperator]
    window: CalibrationWindow
    pooling: PoolingMode
    alpha: float
    variant: Variant
    fingerprint: int

    def at_step(self, step_index: int) -> dict[SiteId, CalibrationOperator]:
        return {s: op for s, op in self.operators.items() if s.step_index == step_index}

    @property
    def n_applications(self) -> int:
        """Site applications per sampled trajectory."""
        return len(self.operators)

    def with_alpha(self, alpha: float) -> "CalibrationPack":
        ops = {s: op.with_alpha(alpha) for s, op in self.operators.items()}
        return CalibrationPack(ops, self.window, self.pooling, float(alpha), self.variant, self.fingerprint)

    def __eq__(self, other) -> bool:
        if not isinstance(other, CalibrationPack):
            return NotImplemented
        return (list(self.operators) == list(other.operators)
                and all(self.operators[s] == other.operators[s] for s in self.operators)
                and self.window == other.window and self.pooling == other.pooling
                and _same_bits(self.alpha, other.alpha) and self.variant == other.variant
                and self.fingerprint == other.fingerprint)

    __hash__ = None


@dataclass
class TrajectoryHistory:
    states: list[LatentState]
    stores: Optional[list[CacheStore]]
    cursor: int  # next reverse step to execute; -1 once exhausted
    mode: HistoryMode

    @classmethod
    def start(cls, samples: Sequence[Sample], denoiser: Denoiser, schedule,
              mode: HistoryMode) -> "TrajectoryHistory":
        states = [init_latent(SeededRng(s.seed), denoiser.cfg, s.condition_id) for s in samples]
        stores = None if mode is HistoryMode.FULL else [CacheStore() for _ in samples]
        return cls(states, stores, schedule.n_steps - 1, mode)

    @property
    def conditions(self) -> list[int]:
        return [s.condition_id for s in self.states]

    def latents(self) -> list[np.ndarray]:
        return [s.x.copy() for s in self.states]

    def serialize(self) -> bytes:
        parts = [f"{self.mode.value};{self.cursor};{len(self.states)};".encode()]
        for i, state in enumerate(self.states):
            parts.append(f"{state.condition_id};".encode())
            parts.append(state.x.tobytes())
            if self.stores is not None:
                parts.append(self.stores[i].serialize())
        return b"".join(parts)


@dataclass
class RunRecord:
    """Latents after every step (sampling order) plus values at logged sites."""

    steps: list[int] = field(default_factory=list)
    latents: list[list[np.ndarray]] = field(default_factory=list)
    site_values: dict[SiteId, list[np.ndarray]] = field(default_factory=dict)

    @property
    def final(self) -> list[np.ndarray]:
        return self.latents[-1]


@dataclass
class PriorEstimate:
    pack: CalibrationPack
    corrected_final: list[np.ndarray]  # endpoints of the history the B batches came from
    full_final: list[np.ndarray]


def thread_count() -> int:
    try:
        return max(0, int(os.environ.get("TCC_LAB_THREADS", "0")))
    except ValueError:
        raise ValueError("TCC_LAB_THREADS must be a non-negative integer") from None


def _map_samples(fn, n: int) -> list:
    threads = thread_count()
    if threads == 0 or n < 2:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n)))


def _collect(per_sample_taps, tap_sites) -> dict[SiteId, list[np.ndarray]]:
    out = {site: [] for site in tap_sites}
    for taps in per_sample_taps:
        for tap in taps:
            out[tap.site].append(tap.value)
    return out


def _check_cursor(hist: TrajectoryHistory) -> int:
    if hist.cursor < 0:
        raise RuntimeError("trajectory cursor exhausted")
    return hist.cursor


def _check_pack(pack: Optional[CalibrationPack], policy: CachePolicy, denoiser: Denoiser, schedule) -> None:
    if pack is None:
        return
    expected = policy_fingerprint(policy, denoiser.cfg, schedule)
    if pack.fingerprint != expected:
        raise PackMismatchError(
            f"pack fingerprint {pack.fingerprint:016x} does not match configuration {expected:016x}")


def _step_state(state: LatentState, eps: np.ndarray, k: int, schedule) -> LatentState:
    return LatentState(ddim_step(state.x, eps, schedule.abar(k), schedule.abar_prev(k)), state.condition_id)


def advance_full(hist: TrajectoryHistory, denoiser: Denoiser, schedule,
                 tap_sites: Iterable[SiteId] = ()) -> dict[SiteId, list[np.ndarray]]:
    """One fully fresh step for every sample; returns per-sample tap values."""
    if hist.mode is not HistoryMode.FULL:
        raise ValueError(f"advance_full needs a full history, got {hist.mode.value}")
    k = _check_cursor(hist)
    tap_sites = list(tap_sites)

    def one(i):
        state = hist.states[i]
        eps, taps = denoiser.forward(state, k, schedule, taps=tap_sites)
        return _step_state(state, eps, k, schedule), taps

    results = _map_samples(one, len(hist.states))
    hist.states = [r[0] for r in results]
    hist.cursor = k - 1
    return _collect([r[1] for r in results], tap_sites)


def _cache_advance(hist: TrajectoryHistory, policy: CachePolicy, ops: dict[SiteId, CalibrationOperator],
                   denoiser: Denoiser, schedule, tap_sites: list[SiteId]) -> dict[SiteId, list[np.ndarray]]:
    k = _check_cursor(hist)
    calibrate = None
    if ops:
        def calibrate(site, value):
            op = ops.get(site)
            return value if op is None else apply(op, value)

    def one(i):
        state = hist.states[i]
        hook = cache_hook(policy, hist.stores[i], plan_step(policy, k, schedule), schedule, calibrate)
        eps, taps = denoiser.forward(state, k, schedule, taps=tap_sites, hook=hook)
        return _step_state(state, eps, k, schedule), taps

    results = _map_samples(one, len(hist.states))
    hist.states = [r[0] for r in results]
    hist.cursor = k - 1
    return _collect([r[1] for r in results], tap_sites)


def probe_advance(hist: TrajectoryHistory, policy: CachePolicy, pack_so_far: Optional[CalibrationPack],
                  denoiser: Denoiser, schedule, tap_sites: Iterable[SiteId]) -> dict[SiteId, list[np.ndarray]]:
    """Cache-side pass from a copy of ``hist``; ``hist`` itself is left untouched.

    Operators already present in ``pack_so_far`` for this step are applied.
    Estimation fits every site of a step from a single probe, so during
    estimation there are none.
    """
    if hist.mode is not HistoryMode.CORRECTED:
        raise ValueError(f"probe_advance needs a corrected history, got {hist.mode.value}")
    _check_pack(pack_so_far, policy, denoiser, schedule)
    k = _check_cursor(hist)
    scratch = copy.deepcopy(hist)
    ops = pack_so_far.at_step(k) if pack_so_far is not None else {}
    return _cache_advance(scratch, policy, ops, denoiser, schedule, list(tap_sites))


def calibrated_advance(hist: TrajectoryHistory, policy: CachePolicy, pack: Optional[CalibrationPack],
                       denoiser: Denoiser, schedule,
                       tap_sites: Iterable[SiteId] = ()) -> dict[SiteId, list[np.ndarray]]:
    """Committing cache-side step with this step's operators applied on consumption."""
    if hist.mode is HistoryMode.FULL:
        raise ValueError("calibrated_advance needs a cache-side or corrected history")
    _check_pack(pack, policy, denoiser, schedule)
    k = _check_cursor(hist)
    ops = pack.at_step(k) if pack is not None else {}
    if pack is not None and pack.operators and not ops and pack.window.contains(k):
        affected = [s for s in denoiser.sites(k) if is_cache_affected(policy, s, schedule)]
        if affected:
            raise ValueError(f"missing operator: step {k} is inside window {pack.window} but has none")
    return _cache_advance(hist, policy, ops, denoiser, schedule, list(tap_sites))


def calibration_sites(policy: CachePolicy, denoiser: Denoiser, schedule, window: CalibrationWindow,
                      site_filter: SiteFilter = SiteFilter()) -> list[SiteId]:
    """Cache-affected sites inside ``window`` that pass ``site_filter``, in sampling order."""
    window.validate(schedule.n_steps)
    return [site for k in schedule.step_indices() if window.contains(k)
            for site in denoiser.sites(k)
            if site_filter.selects(site) and is_cache_affected(policy, site, schedule)]


def _validate_sites(sites, policy, schedule, window) -> list[SiteId]:
    sites = list(sites)
    for site in sites:
        if not window.contains(site.step_index):
            raise ValueError(f"calibration site {site} lies outside window {window}")
        if not is_cache_affected(policy, site, schedule):
            raise ValueError(f"calibration site {site} is not cache-affected under {policy.kind.value}")
    return sites


def estimate_priors(samples: Sequence[Sample], denoiser: Denoiser, schedule, policy: CachePolicy,
                    window: CalibrationWindow, sites: Optional[Iterable[SiteId]] = None,
                    alpha: float = 1.0, pooling: PoolingMode = PoolingMode.TOKEN_POOL,
                    variant: Variant = Variant.FULL, epsilon: float = DEFAULT_EPSILON) -> PriorEstimate:
    """Offline prior estimation along the corrected trajectory, over the representative samples."""
    window.validate(schedule.n_steps)
    if sites is None:
        sites = calibration_sites(policy, denoiser, schedule, window)
    sites = _validate_sites(sites, policy, schedule, window)
    pooling, variant = PoolingMode(pooling), Variant(variant)
    pack = CalibrationPack({}, window, pooling, float(alpha), variant,
                           policy_fingerprint(policy, denoiser.cfg, schedule))

    full = TrajectoryHistory.start(samples, denoiser, schedule, HistoryMode.FULL)
    corr = TrajectoryHistory.start(samples, denoiser, schedule, HistoryMode.CORRECTED)
    conditions = full.conditions
    for k in schedule.step_indices():
        step_sites = [s for s in sites if s.step_index == k]
        if step_sites:
            full_taps = advance_full(full, denoiser, schedule, step_sites)
            probe_taps = probe_advance(corr, policy, pack, denoiser, schedule, step_sites)
            for site in step_sites:
                batch = paired_batch(full_taps[site], probe_taps[site], conditions, pooling)
                pack.operators[site] = fit(batch.a, batch.b, alpha, variant, epsilon, site)
        else:
            advance_full(full, denoiser, schedule)
        calibrated_advance(corr, policy, pack, denoiser, schedule)
    return PriorEstimate(pack, corr.latents(), full.latents())


def estimate_priors_oneshot(samples: Sequence[Sample], denoiser: Denoiser, schedule, policy: CachePolicy,
                            window: CalibrationWindow, sites: Optional[Iterable[SiteId]] = None,
                            alpha: float = 1.0, pooling: PoolingMode = PoolingMode.TOKEN_POOL,
                            variant: Variant = Variant.FULL,
                            epsilon: float = DEFAULT_EPSILON) -> PriorEstimate:
    """Ablation: every B batch comes from the uncalibrated cache trajectory."""
    window.validate(schedule.n_steps)
    if sites is None:
        sites = calibration_sites(policy, denoiser, schedule, window)
    sites = _validate_sites(sites, policy, schedule, window)
    pooling, variant = PoolingMode(pooling), Variant(variant)

    full = TrajectoryHistory.start(samples, denoiser, schedule, HistoryMode.FULL)
    cache = TrajectoryHistory.start(samples, denoiser, schedule, HistoryMode.CACHE_SIDE)
    conditions = full.conditions
    operators = {}
    for k in schedule.step_indices():
        step_sites = [s for s in sites if s.step_index == k]
        full_taps = advance_full(full, denoiser, schedule, step_sites)
        cache_taps = calibrated_advance(cache, policy, None, denoiser, schedule, step_sites)
        for site in step_sites:
            batch = paired_batch(full_taps[site], cache_taps[site], conditions, pooling)
            operators[site] = fit(batch.a, batch.b, alpha, variant, epsilon, site)
    pack = CalibrationPack(operators, window, pooling, float(alpha), variant,
                           policy_fingerprint(policy, denoiser.cfg, schedule))
    return PriorEstimate(pack, cache.latents(), full.latents())


def run_full(samples: Sequence[Sample], denoiser: Denoiser, schedule,
             log_sites: Iterable[SiteId] = ()) -> RunRecord:
    hist = TrajectoryHistory.start(samples, denoiser, schedule, HistoryMode.FULL)
    log_sites = list(log_sites)
    record = RunRecord(site_values={s: [] for s in log_sites})
    for k in schedule.step_indices():
        taps = advance_full(hist, denoiser, schedule, [s for s in log_sites if s.step_index == k])
        for site, values in taps.items():
            record.site_values[site] = values
        record.steps.append(k)
        record.latents.append(hist.latents())
    return record


def run_calibrated_inference(samples: Sequence[Sample], denoiser: Denoiser, schedule, policy: CachePolicy,
                             pack: Optional[CalibrationPack] = None,
                             log_sites: Iterable[SiteId] = ()) -> RunRecord:
    """Cache-accelerated sampling with ``pack`` applied (plain caching when None)."""
    _check_pack(pack, policy, denoiser, schedule)
    mode = HistoryMode.CACHE_SIDE if pack is None else HistoryMode.CORRECTED
    hist = TrajectoryHistory.start(samples, denoiser, schedule, mode)
    log_sites = list(log_sites)
    record = RunRecord(site_values={s: [] for s in log_sites})
    for k in schedule.step_indices():
        taps = calibrated_advance(hist, policy, pack, denoiser, schedule,
                                  [s for s in log_sites if s.step_index == k])
        for site, values in taps.items():
            record.site_values[site] = values
        record.steps.append(k)
        record.latents.append(hist.latents())
    return record


def make_samples(conditions: Sequence[int], per_condition: int, seed: int) -> list[Sample]:
    """Samples ordered by condition; the j-th sample gets seed ``seed + j``."""
    out = []
    for cond in conditions:
        for _ in range(per_condition):
            out.append(Sample(seed + len(out), int(cond)))
    return out


__all__ = [
    "CalibrationPack", "CalibrationWindow", "HistoryMode", "PackMismatchError",
    "PriorEstimate", "RunRecord", "Sample", "SiteFilter", "TrajectoryHistory", "advance_full",
    "calibrated_advance", "calibration_sites", "estimate_priors", "estimate_priors_oneshot",
    "make_samples", "probe_advance", "run_calibrated_inference", "run_full",
]
