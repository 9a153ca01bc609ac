"""Patch encoder -> Slot Attention -> optional merging -> broadcast decoder.

The decoder tiles each active slot over a coarse grid (one cell per
``decoder_patch x decoder_patch`` pixel block), adds a learned positional
embedding, and a shared MLP emits RGB and an alpha logit for every pixel of
the block. Alphas are softmaxed across active slots only, so inactive slots
contribute exactly nothing. ``decoder_patch=1`` is the per-pixel variant.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import merge as mg
from . import slotattn as sa
from .config import ARCHITECTURE_KEYS, ModelConfig
from .diffcore import Tensor
from .errors import ConfigError, FormatError


@dataclass
class ForwardResult:
    loss: Tensor
    recon: Tensor
    alphas: Tensor  # (B, H, W, K)
    attn: Tensor  # (B, N, K), after merging when merging ran
    active: np.ndarray  # (B, K)
    traces: list
    pre_merge_slots: Tensor


def patchify(images: np.ndarray, p: int) -> np.ndarray:
    B, H, W, C = images.shape
    x = images.reshape(B, H // p, p, W // p, p, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, (H // p) * (W // p), p * p * C)


def _blocks_to_image(x: Tensor, B: int, lead: int, gh: int, gw: int, p: int, C: int) -> Tensor:
    """``(B, lead, gh*gw, p*p*C)`` -> ``(B, lead, gh*p, gw*p, C)``."""
    x = dc.reshape(x, (B, lead, gh, gw, p, p, C))
    x = dc.transpose(x, (0, 1, 2, 4, 3, 5, 6))
    return dc.reshape(x, (B, lead, gh * p, gw * p, C))


class SlotModel:
    def __init__(self, config: ModelConfig, seed: int | None = None):
        self.config = config
        cfg = config
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        n_in = cfg.patch_size * cfg.patch_size * 3
        N = cfg.grid[0] * cfg.grid[1]
        G = cfg.decoder_grid[0] * cfg.decoder_grid[1]
        dp2 = cfg.decoder_patch * cfg.decoder_patch
        hid = cfg.decoder_hidden

        def lin(i, o):
            return dc.parameter(rng.normal(0.0, 1.0 / np.sqrt(i), size=(i, o)))

        self.enc = {
            "w": lin(n_in, cfg.d),
            "b": dc.parameter(np.zeros(cfg.d)),
            "pos": dc.parameter(rng.normal(0.0, 0.02, size=(N, cfg.d))),
            "ln_g": dc.parameter(np.ones(cfg.d)),
            "ln_b": dc.parameter(np.zeros(cfg.d)),
        }
        self.slot_attn = sa.SlotAttnParams.init(cfg.d, cfg.d_slots, cfg.d_attn, cfg.mlp_hidden, rng,
                                                mlp_residual=cfg.mlp_residual)
        self.dec = {
            "w_slot": lin(cfg.d_slots, hid),
            "pos": dc.parameter(rng.normal(0.0, 1.0, size=(G, hid))),
            "b1": dc.parameter(np.zeros(hid)),
            "w2": lin(hid, hid),
            "b2": dc.parameter(np.zeros(hid)),
            "w_rgb": lin(hid, dp2 * 3),
            "b_rgb": dc.parameter(np.zeros(dp2 * 3)),
            "w_alpha": lin(hid, dp2),
            "b_alpha": dc.parameter(np.zeros(dp2)),
        }

    # -- parameters --------------------------------------------------------
    def named_parameters(self) -> dict:
        out = {f"enc.{k}": v for k, v in self.enc.items()}
        out.update({f"sa.{k}": v for k, v in self.slot_attn.named()})
        out.update({f"dec.{k}": v for k, v in self.dec.items()})
        return out

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def load_state(self, arrays: dict) -> None:
        params = self.named_parameters()
        for name, p in params.items():
            if name not in arrays:
                raise FormatError(f"checkpoint is missing parameter {name}")
            if arrays[name].shape != p.shape:
                raise FormatError(f"parameter {name}: checkpoint shape {arrays[name].shape} != {p.shape}")
            p.data = np.array(arrays[name], dtype=np.float64)
            p.zero_grad()

    # -- building blocks ------------------------------------------------------
    def encode(self, images) -> sa.FeatureGrid:
        cfg = self.config
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[1:] != (cfg.canvas_h, cfg.canvas_w, 3):
            raise ConfigError(f"images of shape {images.shape} do not match the "
                              f"{cfg.canvas_h}x{cfg.canvas_w} canvas")
        patches = dc.Tensor(patchify(images, cfg.patch_size))
        e = self.enc
        x = dc.matmul(patches, e["w"]) + e["b"] + e["pos"]
        return sa.FeatureGrid(dc.layernorm(x, e["ln_g"], e["ln_b"]), cfg.grid)

    def decode(self, slots: Tensor, active: np.ndarray) -> tuple[Tensor, Tensor]:
        """Reconstruction ``(B, H, W, 3)`` and alphas ``(B, H, W, K)``."""
        cfg = self.config
        d = self.dec
        B, K, _ = slots.shape
        gh, gw = cfg.decoder_grid
        p = cfg.decoder_patch
        s = dc.reshape(dc.matmul(slots, d["w_slot"]), (B, K, 1, -1))
        h = dc.relu(s + d["pos"] + d["b1"])                       # (B, K, G, hid)
        h = dc.relu(dc.matmul(h, d["w2"]) + d["b2"])
        rgb = dc.matmul(h, d["w_rgb"]) + d["b_rgb"]               # (B, K, G, p*p*3)
        logits = dc.matmul(h, d["w_alpha"]) + d["b_alpha"]        # (B, K, G, p*p)
        mask = np.asarray(active, dtype=bool)[:, :, None, None]
        alpha = dc.softmax(logits, axis=1, mask=mask)
        alpha_rgb = dc.reshape(alpha, (B, K, gh * gw, p * p, 1))
        rgb = dc.reshape(rgb, (B, K, gh * gw, p * p, 3))
        mixed = dc.sum_(alpha_rgb * rgb, axis=1)                  # (B, G, p*p, 3)
        recon = _blocks_to_image(dc.reshape(mixed, (B, 1, gh * gw, p * p * 3)), B, 1, gh, gw, p, 3)
        alphas = _blocks_to_image(alpha, B, K, gh, gw, p, 1)      # (B, K, H, W, 1)
        alphas = dc.transpose(dc.reshape(alphas, (B, K, cfg.canvas_h, cfg.canvas_w)), (0, 2, 3, 1))
        return dc.reshape(recon, (B, cfg.canvas_h, cfg.canvas_w, 3)), alphas

    @staticmethod
    def loss(recon: Tensor, images) -> Tensor:
        images = dc.as_tensor(np.asarray(images.data if isinstance(images, Tensor) else images,
                                         dtype=np.float64))
        if recon.shape != images.shape:
            raise ConfigError(f"reconstruction {recon.shape} and image {images.shape} differ")
        return dc.mean(dc.square(recon - images))

    def merge_config(self, tau: float) -> mg.MergePolicyConfig:
        return mg.MergePolicyConfig(tau=tau, detach_gradients=self.config.detach_gradients,
                                    update_attention=self.config.update_attention)

    def slots_and_attention(self, images, seed):
        feats = self.encode(images)
        return sa.run(self.slot_attn, feats, self.config.k_init, self.config.iters, seed)

    def attention_maps(self, images, seed) -> np.ndarray:
        """Final-iteration attention without merging, as a plain array."""
        _, attn = self.slots_and_attention(images, seed)
        return attn.data

    def decide(self, slots: np.ndarray, attn: np.ndarray, active: np.ndarray, tau: float) -> list:
        cfg = self.merge_config(tau)
        batch = [(sa.SlotState(slots[b], active[b]), attn[b]) for b in range(slots.shape[0])]
        return [trace for _, _, trace in mg.batch_merge(batch, cfg, self.config.merge_policy)]

    def forward(self, images, seed, tau: float | None = None, traces: list | None = None) -> ForwardResult:
        """Full pass. Merging runs when ``tau`` is given or ``traces`` are fixed."""
        state, attn = self.slots_and_attention(images, seed)
        slots, active = state.slots, state.active
        pre = slots
        if traces is None and tau is not None:
            traces = self.decide(slots.data, attn.data, active, tau)
        if traces is not None:
            cfg = self.merge_config(0.0 if tau is None else tau)
            slots, attn, active = mg.apply_traces(slots, attn, active, traces, cfg)
        recon, alphas = self.decode(slots, active)
        return ForwardResult(self.loss(recon, images), recon, alphas, attn, active, traces or [], pre)


def architecture_meta(config: ModelConfig) -> dict:
    return {f"arch.{k}": str(getattr(config, k)) for k in ARCHITECTURE_KEYS}
