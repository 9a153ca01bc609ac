"""Finite-difference checks of the full model on a tiny configuration.

The micro-model (8x8 canvas, one 2x2 patch grid, three slots, width 8) is
small enough that every parameter can be perturbed individually. A merge is
forced by fixing the trace before checking: the first pair the policy would
pick at ``tau = 0`` is merged, and that decision is held constant while the
parameters move, so the checked function is smooth.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import merge as mg
from . import scenes
from .config import ModelConfig
from .model import SlotModel

MICRO_CONFIG = ModelConfig(canvas_h=8, canvas_w=8, patch_size=4, d=8, d_slots=8, d_attn=8, mlp_hidden=8,
                           k_init=3, iters=2, decoder_hidden=8, decoder_patch=4, batch_size=2)
DEFAULT_TOL = 1e-3


def micro_images(seed: int, count: int = 2, canvas=(8, 8)) -> np.ndarray:
    spec = scenes.SceneSpec(canvas=canvas, n_objects=(1, 2), size=(3, 5), seed=seed)
    return scenes.generate(spec, count).images.astype(np.float64)


def forced_traces(model: SlotModel, images, slot_seed) -> list:
    """One merge per image: the highest-overlap pair of the unmerged forward pass."""
    state, attn = model.slots_and_attention(images, slot_seed)
    traces = model.decide(state.slots.data, attn.data, state.active, tau=0.0)
    return [mg.MergeTrace(t.steps[:1], state.active.shape[1] - min(len(t.steps), 1)) for t in traces]


@dataclass
class GradcheckReport:
    worst: dict  # mode -> worst relative error
    absorbed_grad: float | None  # max |d loss / d S_j| with detached merging
    attached_absorbed_grad: float | None
    merges: int
    tol: float = DEFAULT_TOL

    @property
    def detach_zero(self) -> bool | None:
        return None if self.absorbed_grad is None else self.absorbed_grad == 0.0

    @property
    def passed(self) -> bool:
        ok = all(err < self.tol for err in self.worst.values())
        return ok and self.detach_zero is not False

    def to_record(self) -> dict:
        return {"worst": self.worst, "merges": self.merges, "absorbed_grad_detached": self.absorbed_grad,
                "absorbed_grad_attached": self.attached_absorbed_grad, "detach_zero": self.detach_zero,
                "tol": self.tol, "passed": self.passed}


def _loss_fn(model: SlotModel, images, slot_seed, traces, cfg: mg.MergePolicyConfig, frozen=None, record=None):
    state, attn = model.slots_and_attention(images, slot_seed)
    slots, active = state.slots, state.active
    if traces is not None:
        slots, attn, active = mg.apply_traces(slots, attn, active, traces, cfg, frozen=frozen, record=record)
    recon, _ = model.decode(slots, active)
    return model.loss(recon, images)


def absorbed_gradient(model: SlotModel, images, slot_seed, traces, detach: bool) -> float:
    """Largest gradient magnitude reaching the absorbed pre-merge slots."""
    state, attn = model.slots_and_attention(images, slot_seed)
    leaf = dc.parameter(state.slots.data.copy())
    cfg = mg.MergePolicyConfig(detach_gradients=detach)
    slots, _, active = mg.apply_traces(leaf, dc.as_tensor(attn.data), state.active, traces, cfg)
    recon, _ = model.decode(slots, active)
    model.loss(recon, images).backward()
    rows = [(b, s.j) for b, t in enumerate(traces) for s in t.steps]
    if not rows:
        return 0.0
    return float(max(np.abs(leaf.grad[b, j]).max() for b, j in rows))


def micro_gradcheck(config: ModelConfig | None = None, seed: int = 0, force_merge: bool = True,
                    modes=("attached", "detached"), h: float = 1e-5, tol: float = DEFAULT_TOL,
                    images=None) -> GradcheckReport:
    """Central-difference check of every parameter, with and without detached merging.

    In detached mode the numeric side differentiates the detached function
    itself: the merge weights and the absorbed slot are pinned to their
    values at the unperturbed point.
    """
    config = MICRO_CONFIG if config is None else config
    model = SlotModel(config, seed=seed)
    if images is None:
        images = micro_images(seed, config.batch_size, (config.canvas_h, config.canvas_w))
    slot_seed = [seed, 2]
    traces = forced_traces(model, images, slot_seed) if force_merge else None
    merges = sum(t.num_merges for t in traces) if traces else 0
    worst = {}
    for mode in modes:
        cfg = mg.MergePolicyConfig(detach_gradients=(mode == "detached"))
        frozen = None
        if cfg.detach_gradients and traces is not None:
            frozen = []
            _loss_fn(model, images, slot_seed, traces, cfg, record=frozen)
        model.zero_grad()
        worst[mode] = float(dc.gradcheck(lambda: _loss_fn(model, images, slot_seed, traces, cfg, frozen),
                                         model.parameters(), h=h))
    absorbed = attached = None
    if traces is not None and merges:
        absorbed = absorbed_gradient(model, images, slot_seed, traces, detach=True)
        attached = absorbed_gradient(model, images, slot_seed, traces, detach=False)
    return GradcheckReport(worst, absorbed, attached, merges, tol)
