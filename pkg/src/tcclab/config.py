"""Run configuration: a small ``section.key = value`` text format.

Grammar, one statement per line::

    # comment (also allowed after a value)
    section.key = value

Blank lines are ignored, keys may appear at most once, and any key not listed
in ``KEYS`` is rejected. Values are integers, floats, enum names, ``none`` or
``all``, or comma-separated lists. Omitted keys take their defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Optional

from .cache import CacheKind, CachePolicy, SimilarityDistortion
from .calibration import DEFAULT_EPSILON, PoolingMode, Variant
from .denoiser import DenoiserConfig, ModuleKind, build_denoiser
from .fingerprint import fmt_float, model_lines, policy_fingerprint, policy_lines, schedule_lines
from .schedule import build_schedule
from .trajectory import CalibrationWindow, SiteFilter, make_samples


class ConfigError(ValueError):
    """Invalid configuration text or value; messages name the line or key."""


@dataclass(frozen=True)
class ScheduleParams:
    t_train: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    n_steps: int = 20


@dataclass(frozen=True)
class RunConfig:
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    schedule: ScheduleParams = field(default_factory=ScheduleParams)
    policy: CachePolicy = field(default_factory=lambda: CachePolicy.module_interval(2))
    window: CalibrationWindow = CalibrationWindow(19, 12)
    alpha: float = 1.0
    variant: Variant = Variant.FULL
    pooling: PoolingMode = PoolingMode.TOKEN_POOL
    epsilon: float = DEFAULT_EPSILON
    site_filter: SiteFilter = SiteFilter()
    seed: int = 0
    eval_seed: int = 10000
    per_condition: int = 2
    conditions: Optional[tuple[int, ...]] = None  # None: every condition id
    output_dir: str = "out"

    def __post_init__(self):
        if self.conditions is None:
            object.__setattr__(self, "conditions", tuple(range(self.model.n_conditions)))

    def build_schedule(self):
        s = self.schedule
        return build_schedule(s.t_train, s.beta_start, s.beta_end, s.n_steps)

    def build_denoiser(self):
        return build_denoiser(self.model)

    def train_samples(self):
        return make_samples(self.conditions, self.per_condition, self.seed)

    def eval_samples(self):
        return make_samples(self.conditions, self.per_condition, self.eval_seed)

    def fingerprint(self) -> int:
        return policy_fingerprint(self.policy, self.model, self.build_schedule())


KEYS = (
    "model.d_model", "model.n_layers", "model.n_tokens", "model.n_heads", "model.d_mlp",
    "model.n_conditions", "model.weight_seed",
    "schedule.t_train", "schedule.beta_start", "schedule.beta_end", "schedule.n_steps",
    "cache.kind", "cache.interval", "cache.token_ratio",
    "cache.distortion_scale", "cache.distortion_angle", "cache.distortion_shift",
    "cache.distortion_growth", "cache.distortion_sites",
    "calibration.window", "calibration.alpha", "calibration.variant", "calibration.pooling",
    "calibration.epsilon", "calibration.layers", "calibration.modules",
    "samples.seed", "samples.eval_seed", "samples.per_condition", "samples.conditions",
    "output.dir",
)
_DISTORTION_KEYS = tuple(k for k in KEYS if k.startswith("cache.distortion_"))


def _tokenize(text: str) -> dict[str, tuple[str, int]]:
    values: dict[str, tuple[str, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key.count(".") != 1 or not all(key.split(".")):
            raise ConfigError(f"line {lineno}: malformed key {key!r}")
        if not value:
            raise ConfigError(f"line {lineno}: missing value for {key}")
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key}")
        values[key] = (value, lineno)
    return values


class _Reader:
    def __init__(self, values):
        self.values = values

    def has(self, key):
        return key in self.values

    def _get(self, key, conv, default):
        if key not in self.values:
            return default
        text, lineno = self.values[key]
        try:
            return conv(text)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value {text!r} for {key}") from None

    def int(self, key, default):
        return self._get(key, int, default)

    def float(self, key, default):
        return self._get(key, float, default)

    def str(self, key, default):
        return self._get(key, str, default)

    def enum(self, key, cls, default):
        return self._get(key, cls, default)

    def int_list(self, key, default):
        def conv(text):
            if text == "all":
                return None
            return tuple(int(x) for x in text.split(","))
        return self._get(key, conv, default)


def _parse_window(text: str) -> CalibrationWindow:
    if text == "none":
        return CalibrationWindow.empty()
    first, last = text.split("-")
    return CalibrationWindow(int(first), int(last))


def _parse_modules(text: str):
    if text == "all":
        return None
    return tuple(ModuleKind.parse(x) for x in text.split(","))


def _parse_sites(text: str):
    if text == "all":
        return None
    out = []
    for item in text.split(","):
        layer, kind = item.split(":")
        out.append((int(layer), ModuleKind.parse(kind)))
    return tuple(out)


def _check(cond: bool, key: str, message: str) -> None:
    if not cond:
        raise ConfigError(f"{key}: {message}")


def parse_config(text: str) -> RunConfig:
    values = _tokenize(text)
    r = _Reader(values)
    dflt = RunConfig()

    m = dflt.model
    model_kw = {f.name: r.int(f"model.{f.name}", getattr(m, f.name)) for f in fields(DenoiserConfig)}
    for name, value in model_kw.items():
        _check(value >= (0 if name == "weight_seed" else 1), f"model.{name}",
               f"must be >= {0 if name == 'weight_seed' else 1}, got {value}")
    _check(model_kw["d_model"] % model_kw["n_heads"] == 0, "model.n_heads",
           f"must divide model.d_model={model_kw['d_model']}")
    model = DenoiserConfig(**model_kw)

    s = dflt.schedule
    sched = ScheduleParams(
        r.int("schedule.t_train", s.t_train), r.float("schedule.beta_start", s.beta_start),
        r.float("schedule.beta_end", s.beta_end), r.int("schedule.n_steps", s.n_steps))
    _check(sched.t_train >= 1, "schedule.t_train", f"must be >= 1, got {sched.t_train}")
    _check(0.0 < sched.beta_start < 1.0, "schedule.beta_start", f"must lie in (0, 1), got {sched.beta_start}")
    _check(sched.beta_start < sched.beta_end < 1.0, "schedule.beta_end",
           f"must lie in (beta_start, 1), got {sched.beta_end}")
    _check(1 <= sched.n_steps <= sched.t_train, "schedule.n_steps",
           f"must lie in [1, t_train], got {sched.n_steps}")

    kind = r.enum("cache.kind", CacheKind, dflt.policy.kind)
    interval = r.int("cache.interval", dflt.policy.interval_n if kind is not CacheKind.NONE else 1)
    ratio = r.float("cache.token_ratio", 0.0)
    if kind is CacheKind.NONE:
        _check(interval == 1, "cache.interval", "must be 1 when cache.kind = none")
    else:
        _check(interval >= 2, "cache.interval", f"must be >= 2, got {interval}")
    if kind is CacheKind.TOKEN_LEVEL:
        _check(0.0 < ratio < 1.0, "cache.token_ratio", f"must lie in (0, 1), got {ratio}")
    else:
        _check(ratio == 0.0, "cache.token_ratio", "only applies to cache.kind = token_level")
    distortion = None
    if kind is CacheKind.DISTORTION:
        d0 = SimilarityDistortion()
        distortion = SimilarityDistortion(
            r.float("cache.distortion_scale", d0.scale), r.float("cache.distortion_angle", d0.angle),
            r.float("cache.distortion_shift", d0.shift), r.float("cache.distortion_growth", d0.growth),
            r._get("cache.distortion_sites", _parse_sites, None))
        _check(distortion.scale > 0.0, "cache.distortion_scale", f"must be positive, got {distortion.scale}")
        _check(distortion.growth >= 0.0, "cache.distortion_growth",
               f"must be non-negative, got {distortion.growth}")
        for layer, _ in distortion.sites or ():
            _check(0 <= layer < model.n_layers, "cache.distortion_sites", f"layer {layer} out of range")
    else:
        for key in _DISTORTION_KEYS:
            _check(not r.has(key), key, "only applies to cache.kind = distortion")
    policy = CachePolicy(kind, interval, ratio, distortion)

    try:
        window = r._get("calibration.window", _parse_window, dflt.window)
        window.validate(sched.n_steps)
    except ValueError as exc:
        raise ConfigError(f"calibration.window: {exc}") from None
    alpha = r.float("calibration.alpha", dflt.alpha)
    _check(alpha >= 0.0, "calibration.alpha", f"must be >= 0, got {alpha}")
    epsilon = r.float("calibration.epsilon", dflt.epsilon)
    _check(epsilon > 0.0, "calibration.epsilon", f"must be positive, got {epsilon}")
    layers = r.int_list("calibration.layers", None)
    for layer in layers or ():
        _check(0 <= layer < model.n_layers, "calibration.layers", f"layer {layer} out of range")
    site_filter = SiteFilter(layers, r._get("calibration.modules", _parse_modules, None))

    conditions = r.int_list("samples.conditions", None)
    for cond in conditions or ():
        _check(0 <= cond < model.n_conditions, "samples.conditions", f"condition {cond} out of range")
    per_condition = r.int("samples.per_condition", dflt.per_condition)
    _check(per_condition >= 1, "samples.per_condition", f"must be >= 1, got {per_condition}")
    seed = r.int("samples.seed", dflt.seed)
    eval_seed = r.int("samples.eval_seed", dflt.eval_seed)
    for key, value in (("samples.seed", seed), ("samples.eval_seed", eval_seed)):
        _check(0 <= value < 2**63, key, f"must lie in [0, 2^63), got {value}")

    return RunConfig(
        model=model, schedule=sched, policy=policy, window=window, alpha=alpha,
        variant=r.enum("calibration.variant", Variant, dflt.variant),
        pooling=r.enum("calibration.pooling", PoolingMode, dflt.pooling),
        epsilon=epsilon, site_filter=site_filter, seed=seed, eval_seed=eval_seed,
        per_condition=per_condition, conditions=conditions,
        output_dir=r.str("output.dir", dflt.output_dir))


def _join(items) -> str:
    return ",".join(str(x) for x in items)


def render(cfg: RunConfig) -> str:
    """Canonical text form; ``parse_config(render(cfg)) == cfg``."""
    s = cfg.schedule
    f = cfg.site_filter
    lines = model_lines(cfg.model) + schedule_lines(s.t_train, s.beta_start, s.beta_end, s.n_steps)
    lines += policy_lines(cfg.policy) + [
        f"calibration.window = {cfg.window}",
        f"calibration.alpha = {fmt_float(cfg.alpha)}",
        f"calibration.variant = {cfg.variant.value}",
        f"calibration.pooling = {cfg.pooling.value}",
        f"calibration.epsilon = {fmt_float(cfg.epsilon)}",
        f"calibration.layers = {'all' if f.layers is None else _join(f.layers)}",
        f"calibration.modules = {'all' if f.modules is None else _join(m.label for m in f.modules)}",
        f"samples.seed = {cfg.seed}",
        f"samples.eval_seed = {cfg.eval_seed}",
        f"samples.per_condition = {cfg.per_condition}",
        f"samples.conditions = {_join(cfg.conditions)}",
        f"output.dir = {cfg.output_dir}",
    ]
    return "\n".join(lines) + "\n"


def with_overrides(cfg: RunConfig, **changes) -> RunConfig:
    return replace(cfg, **{k: v for k, v in changes.items() if v is not None})
