"""Slot Attention: iterative competitive attention from features to slots.

All functions accept a leading batch axis (``X`` of shape ``(B, N, d)``) or
none (``(N, d)``); the slot axis is always the last axis of the attention
matrix.

GRU convention (``h`` = previous slots, ``x`` = attention update)::

    z = sigmoid(x W_z + h U_z + b_z)          # update gate
    r = sigmoid(x W_r + h U_r + b_r)          # reset gate
    n = tanh(x W_n + b_n + r * (h U_n + c_n)) # candidate
    h' = (1 - z) * n + z * h
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterator

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError, DimensionError, StateError

WEIGHTED_MEAN_EPS = 1e-8

_GRU_FIELDS = ("gru_wz", "gru_wr", "gru_wn", "gru_uz", "gru_ur", "gru_un", "gru_bz", "gru_br", "gru_bn", "gru_cn")


@dataclass
class SlotAttnParams:
    mu: Tensor
    log_sigma: Tensor
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    gru_wz: Tensor
    gru_wr: Tensor
    gru_wn: Tensor
    gru_uz: Tensor
    gru_ur: Tensor
    gru_un: Tensor
    gru_bz: Tensor
    gru_br: Tensor
    gru_bn: Tensor
    gru_cn: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    ln_in_g: Tensor
    ln_in_b: Tensor
    ln_slot_g: Tensor
    ln_slot_b: Tensor
    ln_mlp_g: Tensor
    ln_mlp_b: Tensor
    mlp_residual: bool = True

    @classmethod
    def init(cls, d: int, d_slots: int, d_attn: int, mlp_hidden: int, rng: np.random.Generator,
             mlp_residual: bool = True) -> "SlotAttnParams":
        def lin(i, o):
            return dc.parameter(rng.normal(0.0, 1.0 / np.sqrt(i), size=(i, o)))

        zeros = lambda n: dc.parameter(np.zeros(n))
        ones = lambda n: dc.parameter(np.ones(n))
        return cls(
            mu=dc.parameter(rng.normal(0.0, 1.0, size=d_slots)),
            log_sigma=dc.parameter(np.full(d_slots, np.log(0.5))),
            w_q=lin(d_slots, d_attn), w_k=lin(d, d_attn), w_v=lin(d, d_attn),
            gru_wz=lin(d_attn, d_slots), gru_wr=lin(d_attn, d_slots), gru_wn=lin(d_attn, d_slots),
            gru_uz=lin(d_slots, d_slots), gru_ur=lin(d_slots, d_slots), gru_un=lin(d_slots, d_slots),
            gru_bz=zeros(d_slots), gru_br=zeros(d_slots), gru_bn=zeros(d_slots), gru_cn=zeros(d_slots),
            mlp_w1=lin(d_slots, mlp_hidden), mlp_b1=zeros(mlp_hidden),
            mlp_w2=lin(mlp_hidden, d_slots), mlp_b2=zeros(d_slots),
            ln_in_g=ones(d), ln_in_b=zeros(d),
            ln_slot_g=ones(d_slots), ln_slot_b=zeros(d_slots),
            ln_mlp_g=ones(d_slots), ln_mlp_b=zeros(d_slots),
            mlp_residual=mlp_residual,
        )

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Tensor):
                yield f.name, value

    @property
    def d_slots(self) -> int:
        return self.mu.shape[0]

    def validate(self) -> None:
        d_attn = self.w_q.shape[1]
        if self.w_k.shape[1] != d_attn or self.w_v.shape[1] != d_attn:
            raise DimensionError("q, k and v must share the attention width")
        if self.gru_uz.shape != (self.d_slots, self.d_slots):
            raise DimensionError("GRU hidden size must equal the slot width")
        for name, t in self.named():
            if not np.all(np.isfinite(t.data)):
                raise ConfigError(f"parameter {name} is not finite")


@dataclass
class FeatureGrid:
    values: Tensor  # (..., N, d)
    spatial: tuple[int, int]

    def __post_init__(self):
        n = self.values.shape[-2]
        if n < 1 or self.spatial[0] * self.spatial[1] != n:
            raise DimensionError(f"spatial shape {self.spatial} does not cover {n} locations")


@dataclass
class SlotState:
    slots: Tensor  # (..., K, d_slots)
    active: np.ndarray  # (..., K) bool

    def __post_init__(self):
        self.active = np.asarray(self.active, dtype=bool)
        if not np.all(self.active.any(axis=-1)):
            raise StateError("every image needs at least one active slot")

    @property
    def num_slots(self) -> int:
        return self.slots.shape[-2]


def init_slots(params: SlotAttnParams, K: int, rng_seed, batch_shape: tuple = ()) -> SlotState:
    """Sample ``K`` slots per image from the shared learnable Gaussian."""
    if K < 1:
        raise ConfigError("need at least one slot")
    rng = np.random.default_rng(rng_seed)
    noise = rng.standard_normal(tuple(batch_shape) + (K, params.d_slots))
    slots = params.mu + dc.exp(params.log_sigma) * noise
    return SlotState(slots, np.ones(tuple(batch_shape) + (K,), dtype=bool))


def _linear(x, w, b=None):
    y = dc.matmul(x, w)
    return y if b is None else y + b


def gru(params: SlotAttnParams, h: Tensor, x: Tensor) -> Tensor:
    p = params
    z = dc.sigmoid(_linear(x, p.gru_wz) + _linear(h, p.gru_uz, p.gru_bz))
    r = dc.sigmoid(_linear(x, p.gru_wr) + _linear(h, p.gru_ur, p.gru_br))
    n = dc.tanh(_linear(x, p.gru_wn, p.gru_bn) + r * _linear(h, p.gru_un, p.gru_cn))
    return (1.0 - z) * n + z * h


def mlp(params: SlotAttnParams, x: Tensor) -> Tensor:
    hidden = dc.relu(_linear(x, params.mlp_w1, params.mlp_b1))
    return _linear(hidden, params.mlp_w2, params.mlp_b2)


def weighted_mean(attn: Tensor, values: Tensor, eps: float = WEIGHTED_MEAN_EPS) -> Tensor:
    """Per-slot mean of ``values`` weighted by the slot's attention column."""
    col_mass = dc.sum_(attn, axis=-2, keepdims=True)
    normed = dc.div(attn, col_mass, eps=eps)
    return dc.matmul(dc.transpose(normed), values)


def attention_logits(params: SlotAttnParams, keys: Tensor, slots: Tensor) -> Tensor:
    q = dc.matmul(dc.layernorm(slots, params.ln_slot_g, params.ln_slot_b), params.w_q)
    d_attn = params.w_q.shape[1]
    return dc.scale(dc.matmul(keys, dc.transpose(q)), 1.0 / np.sqrt(d_attn))


def _project_inputs(params: SlotAttnParams, X: FeatureGrid) -> tuple[Tensor, Tensor]:
    x = dc.layernorm(X.values, params.ln_in_g, params.ln_in_b)
    return dc.matmul(x, params.w_k), dc.matmul(x, params.w_v)


def _step(params, keys, values, S: SlotState, return_updates=False):
    if not np.all(S.active.any(axis=-1)):
        raise StateError("attention step with no active slots")
    logits = attention_logits(params, keys, S.slots)
    mask = np.expand_dims(S.active, -2)
    attn = dc.softmax(logits, axis=-1, mask=mask)
    updates = weighted_mean(attn, values)
    h = gru(params, S.slots, updates)
    if params.mlp_residual:
        new = h + mlp(params, dc.layernorm(h, params.ln_mlp_g, params.ln_mlp_b))
    else:
        new = mlp(params, dc.layernorm(h, params.ln_mlp_g, params.ln_mlp_b))
    out = (attn, SlotState(new, S.active.copy()))
    return out + (updates,) if return_updates else out


def attention_step(params: SlotAttnParams, X: FeatureGrid, S: SlotState, return_updates: bool = False):
    """One round of attention, weighted mean, GRU and MLP.

    Returns ``(attn, new_state)`` and, with ``return_updates``, also the
    weighted-mean update fed into the GRU.
    """
    keys, values = _project_inputs(params, X)
    return _step(params, keys, values, S, return_updates)


def run(params: SlotAttnParams, X: FeatureGrid, K: int, T: int, rng_seed) -> tuple[SlotState, Tensor]:
    """Run ``T`` iterations from a fresh Gaussian sample.

    The returned attention matrix is the one computed in the final
    iteration, which is what merging consumes.
    """
    if T < 1:
        raise ConfigError("need at least one iteration")
    batch_shape = X.values.shape[:-2]
    S = init_slots(params, K, rng_seed, batch_shape)
    return run_from(params, X, S, T)


def run_from(params: SlotAttnParams, X: FeatureGrid, S: SlotState, T: int) -> tuple[SlotState, Tensor]:
    keys, values = _project_inputs(params, X)
    attn = None
    for _ in range(T):
        attn, S = _step(params, keys, values, S)
    return S, attn
