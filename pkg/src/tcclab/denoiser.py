"""A small class-conditional DiT-style denoiser with tappable module sites.

Each block is pre-norm::

    h <- h + Attn_l(h)
    h <- h + Mlp_l(h)

and every module output (before its residual addition) is a *site*
``SiteId(step_index, layer, module)``. A forward pass can report the value
consumed at requested sites, replace sites with fixed matrices, or hand each
site to a hook that decides what gets consumed (this is how cache policies
plug in).

Weights are drawn from ``SeededRng(weight_seed)`` as uniforms in
``[-1/sqrt(d_model), 1/sqrt(d_model)]``, in this order: time projection
(d x d), class table (n_conditions x d), position table (n_tokens x d), then
per layer Wq, Wk, Wv, Wo (d x d), W1 (d x d_mlp), W2 (d_mlp x d), and finally
the readout (d x d).

The noise prediction is ``sqrt(1 - abar_t) * x_t + (h_L - h_0) @ W_out``:
the first term is the exact noise predictor for unit-variance Gaussian data,
so trajectories stay O(1) even though the network is untrained.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Callable, Iterable, Mapping, Optional

import numpy as np

from .linalg import SeededRng

LN_EPS = 1e-5


class ModuleKind(IntEnum):
    ATTENTION = 0
    MLP = 1

    @property
    def label(self) -> str:
        return "attention" if self is ModuleKind.ATTENTION else "mlp"

    @classmethod
    def parse(cls, text: str) -> "ModuleKind":
        key = text.strip().lower()
        if key in ("attention", "attn"):
            return cls.ATTENTION
        if key == "mlp":
            return cls.MLP
        raise ValueError(f"unknown module kind {text!r}")


@dataclass(frozen=True, order=True)
class SiteId:
    step_index: int
    layer: int
    module: ModuleKind

    def __str__(self) -> str:
        return f"step{self.step_index}/L{self.layer}/{self.module.label}"


@dataclass(frozen=True)
class DenoiserConfig:
    d_model: int = 32
    n_layers: int = 6
    n_tokens: int = 16
    n_heads: int = 4
    d_mlp: int = 64
    n_conditions: int = 8
    weight_seed: int = 0

    def __post_init__(self):
        for name in ("d_model", "n_layers", "n_tokens", "n_heads", "d_mlp", "n_conditions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0 <= self.weight_seed < 2**64:
            raise ValueError(f"weight_seed out of range: {self.weight_seed}")


@dataclass
class LatentState:
    x: np.ndarray  # n_tokens x d_model
    condition_id: int


@dataclass(frozen=True)
class SiteTap:
    site: SiteId
    value: np.ndarray


# compute(h, rows=None) evaluates a module freshly on incoming h; with `rows`
# only those token rows of the output are produced.
ModuleFn = Callable[..., np.ndarray]
SiteHook = Callable[[SiteId, np.ndarray, ModuleFn], np.ndarray]


def _layer_norm(h: np.ndarray) -> np.ndarray:
    mu = h.mean(axis=-1, keepdims=True)
    var = ((h - mu) ** 2).mean(axis=-1, keepdims=True)
    return (h - mu) / np.sqrt(var + LN_EPS)


def _gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def timestep_features(t: float, d: int) -> np.ndarray:
    half = d // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    feats = np.zeros(d)
    feats[:half] = np.cos(t * freqs)
    feats[half:2 * half] = np.sin(t * freqs)
    return feats


class Denoiser:
    def __init__(self, cfg: DenoiserConfig):
        self.cfg = cfg
        d, bound = cfg.d_model, 1.0 / math.sqrt(cfg.d_model)
        rng = SeededRng(cfg.weight_seed)

        def draw(*shape):
            w = rng.uniform_range(shape, -bound, bound)
            w.flags.writeable = False
            return w

        self.w_time = draw(d, d)
        self.class_emb = draw(cfg.n_conditions, d)
        self.pos_emb = draw(cfg.n_tokens, d)
        self.layers = []
        for _ in range(cfg.n_layers):
            self.layers.append({
                "wq": draw(d, d), "wk": draw(d, d), "wv": draw(d, d), "wo": draw(d, d),
                "w1": draw(d, cfg.d_mlp), "w2": draw(cfg.d_mlp, d),
            })
        self.w_out = draw(d, d)

    def sites(self, step_index: int) -> list[SiteId]:
        return [SiteId(step_index, layer, kind)
                for layer in range(self.cfg.n_layers) for kind in ModuleKind]

    def attention(self, layer: int, h: np.ndarray, rows=None) -> np.ndarray:
        w = self.layers[layer]
        n_heads = self.cfg.n_heads
        dh = self.cfg.d_model // n_heads
        a = _layer_norm(h)
        aq = a if rows is None else a[rows]
        q = (aq @ w["wq"]).reshape(len(aq), n_heads, dh).transpose(1, 0, 2)
        k = (a @ w["wk"]).reshape(len(a), n_heads, dh).transpose(1, 0, 2)
        v = (a @ w["wv"]).reshape(len(a), n_heads, dh).transpose(1, 0, 2)
        attn = _softmax(q @ k.transpose(0, 2, 1) / math.sqrt(dh))
        out = (attn @ v).transpose(1, 0, 2).reshape(len(aq), self.cfg.d_model)
        return out @ w["wo"]

    def mlp(self, layer: int, h: np.ndarray, rows=None) -> np.ndarray:
        w = self.layers[layer]
        a = _layer_norm(h if rows is None else h[rows])
        return _gelu(a @ w["w1"]) @ w["w2"]

    def module_fn(self, layer: int, kind: ModuleKind) -> ModuleFn:
        fn = self.attention if kind is ModuleKind.ATTENTION else self.mlp
        return lambda h, rows=None: fn(layer, h, rows)

    def embed(self, state: LatentState, timestep: int) -> np.ndarray:
        temb = timestep_features(float(timestep), self.cfg.d_model) @ self.w_time
        return state.x + temb + self.class_emb[state.condition_id] + self.pos_emb

    def forward(self, state: LatentState, step_index: int, schedule,
                overrides: Optional[Mapping[SiteId, np.ndarray]] = None,
                taps: Iterable[SiteId] = (),
                hook: Optional[SiteHook] = None) -> tuple[np.ndarray, list[SiteTap]]:
        """One denoiser evaluation at reverse step ``step_index``.

        Site values come from ``overrides`` first, then ``hook``, else fresh
        computation. Returned taps hold the value actually consumed.
        """
        cfg = self.cfg
        overrides = overrides or {}
        shape = (cfg.n_tokens, cfg.d_model)
        for site, value in overrides.items():
            if site.step_index != step_index:
                raise ValueError(f"site/step mismatch: {site} overridden at step {step_index}")
            if np.shape(value) != shape:
                raise ValueError(f"override for {site} has shape {np.shape(value)}, need {shape}")
        if state.x.shape != shape:
            raise ValueError(f"latent has shape {state.x.shape}, need {shape}")
        if not 0 <= state.condition_id < cfg.n_conditions:
            raise ValueError(f"condition_id {state.condition_id} outside [0, {cfg.n_conditions})")
        wanted = set(taps)
        for site in wanted:
            if site.step_index != step_index:
                raise ValueError(f"site/step mismatch: tap {site} requested at step {step_index}")

        h0 = self.embed(state, schedule.timestep(step_index))
        h = h0
        recorded = []
        for layer in range(cfg.n_layers):
            for kind in ModuleKind:
                site = SiteId(step_index, layer, kind)
                if site in overrides:
                    value = np.asarray(overrides[site], dtype=np.float64)
                elif hook is not None:
                    value = hook(site, h, self.module_fn(layer, kind))
                else:
                    value = self.module_fn(layer, kind)(h)
                if site in wanted:
                    recorded.append(SiteTap(site, value.copy()))
                h = h + value
        eps = math.sqrt(1.0 - schedule.abar(step_index)) * state.x + (h - h0) @ self.w_out
        return eps, recorded


def build_denoiser(cfg: DenoiserConfig) -> Denoiser:
    return Denoiser(cfg)
