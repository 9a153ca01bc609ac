"""Training schedule, threshold calibration, checkpoints and evaluation.

Randomness is derived from the run seed and the position in the schedule
(epoch for data order, global step for slot sampling), so a run resumed from
a checkpoint continues exactly as an uninterrupted one would.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import metrics
from . import threshold as th
from .config import ARCHITECTURE_KEYS, ModelConfig
from .errors import FormatError, ScheduleError
from .model import SlotModel, architecture_meta

LOG_FORMAT = "slotmerge-train-log"
EVAL_FORMAT = "slotmerge-eval"
LOG_VERSION = 1
EVAL_SEED = 10_007


# ---------------------------------------------------------------------------
# optimiser


def learning_rate(cfg: ModelConfig, step: int, total_steps: int) -> float:
    """Linear warm-up to ``lr_peak``, then cosine annealing to ``lr_min``."""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr_peak * (step + 1) / cfg.warmup_steps
    span = max(total_steps - cfg.warmup_steps, 1)
    progress = min(max(step - cfg.warmup_steps, 0) / span, 1.0)
    return cfg.lr_min + 0.5 * (cfg.lr_peak - cfg.lr_min) * (1.0 + math.cos(math.pi * progress))


def clip_inf_norm(grads: list, max_norm: float) -> float:
    """Rescale ``grads`` in place so their joint infinity norm is at most ``max_norm``."""
    norm = max((float(np.max(np.abs(g))) for g in grads if g.size), default=0.0)
    if norm > max_norm:
        factor = max_norm / norm
        for g in grads:
            g *= factor
    return norm


class Adam:
    def __init__(self, params: dict, beta1: float, beta2: float, eps: float):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            p.data = p.data - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state(self) -> dict:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    def load(self, arrays: dict, t: int) -> None:
        for k in self.params:
            try:
                self.m[k] = np.array(arrays[f"adam.m.{k}"])
                self.v[k] = np.array(arrays[f"adam.v.{k}"])
            except KeyError:
                raise FormatError(f"checkpoint is missing optimiser state for {k}") from None
        self.t = t


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0  # next epoch to run
    tau: float | None = None
    calibration: dict | None = None


def save_checkpoint(path, model: SlotModel, opt: Adam | None, state: TrainState) -> None:
    arrays = {k: p.data for k, p in model.named_parameters().items()}
    if opt is not None:
        arrays.update(opt.state())
    meta = {
        "format": "slotmerge-checkpoint",
        "step": state.step,
        "epoch": state.epoch,
        "tau": "none" if state.tau is None else repr(float(state.tau)),
        "config": json.dumps(model.config.dumps()),
    }
    meta.update(architecture_meta(model.config))
    dc.save_arrays(path, arrays, meta)


def load_checkpoint(path, config: ModelConfig | None = None):
    """Return ``(model, arrays, TrainState)``; ``config`` overrides non-architecture keys."""
    try:
        arrays, meta = dc.load_arrays(path)
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint: {exc}") from None
    if meta.get("format") != "slotmerge-checkpoint":
        raise FormatError("not a slotmerge checkpoint")
    try:
        stored = ModelConfig.loads(json.loads(meta["config"]))
        state = TrainState(step=int(meta["step"]), epoch=int(meta["epoch"]),
                           tau=None if meta["tau"] == "none" else float(meta["tau"]))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"corrupt checkpoint metadata: {exc}") from None
    if config is None:
        config = stored
    elif config.architecture() != stored.architecture():
        diff = [k for k in ARCHITECTURE_KEYS if getattr(config, k) != getattr(stored, k)]
        raise FormatError(f"config does not match checkpoint architecture: {diff}")
    model = SlotModel(config)
    model.load_state(arrays)
    return model, arrays, state


# ---------------------------------------------------------------------------
# logging


class JsonLog:
    def __init__(self, path, fmt: str, append: bool = False):
        self.path = path
        exists = append and os.path.exists(path)
        self.fh = open(path, "a" if exists else "w")
        if not exists:
            self.write({"type": "header", "format": fmt, "version": LOG_VERSION})

    def write(self, record: dict) -> None:
        self.fh.write(json.dumps(record) + "\n")
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def read_log(path, fmt: str = LOG_FORMAT) -> list:
    with open(path) as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    if not records or records[0].get("type") != "header":
        raise FormatError(f"{path}: missing log header")
    head = records[0]
    if head.get("format") != fmt or head.get("version") != LOG_VERSION:
        raise FormatError(f"{path}: unsupported log {head.get('format')} v{head.get('version')}")
    return records[1:]


# ---------------------------------------------------------------------------
# training


def calibrate(model: SlotModel, data, seed) -> tuple[th.ThresholdEstimate, int]:
    cfg = model.config
    samples = th.collect_overlaps(model, data, cfg.calib_batches, cfg.batch_size, seed=seed)
    estimate = th.estimate_tau(samples, cfg.calib_agg)
    return estimate, int(sum(s.size for s in samples))


@dataclass
class TrainResult:
    model: SlotModel
    state: TrainState
    epochs: list = field(default_factory=list)
    final_loss: float = float("nan")


def train(config: ModelConfig, data, out_dir, seed: int | None = None, resume=None,
          keep_epochs: tuple = ()) -> TrainResult:
    """Train ``config`` on ``data``; writes ``log.jsonl`` and checkpoints into ``out_dir``.

    ``keep_epochs`` lists epochs whose end-of-epoch checkpoint is kept as
    ``epoch-XXX.ckpt`` in addition to ``last.ckpt``.
    """
    seed = config.seed if seed is None else seed
    config = config.replace(seed=seed)
    os.makedirs(out_dir, exist_ok=True)
    if resume is not None:
        model, arrays, state = load_checkpoint(resume, config)
        opt = Adam(model.named_parameters(), config.beta1, config.beta2, config.adam_eps)
        opt.load(arrays, state.step)
    else:
        model = SlotModel(config, seed=seed)
        opt = Adam(model.named_parameters(), config.beta1, config.beta2, config.adam_eps)
        state = TrainState()
    if config.force_tau is not None:
        state.tau = config.force_tau
    elif config.tau is not None and state.tau is None:
        state.tau = config.tau
    log = JsonLog(os.path.join(out_dir, "log.jsonl"), LOG_FORMAT, append=resume is not None)
    n = len(data)
    bs = config.batch_size
    steps_per_epoch = max(math.ceil(n / bs), 1)
    total = steps_per_epoch * config.epochs
    params = model.parameters()
    result = TrainResult(model, state)
    uses_tau = config.merge_mode != "off"
    calib_epoch = config.merge_start_epoch - 1

    def maybe_calibrate(epoch):
        if uses_tau and epoch == calib_epoch and state.tau is None and config.calibrate:
            estimate, n_samples = calibrate(model, data, seed=(seed, 1, epoch + 1))
            state.tau = estimate.tau
            state.calibration = estimate.to_record(n_samples)
            log.write({"type": "calibration", "epoch": epoch, **state.calibration})

    try:
        if state.epoch == 0 and calib_epoch < 0:
            maybe_calibrate(calib_epoch)
        for epoch in range(state.epoch, config.epochs):
            merging = config.merge_mode == "training" and epoch >= config.merge_start_epoch
            if merging and state.tau is None:
                raise ScheduleError(f"merging starts at epoch {epoch} but no threshold is set")
            order = np.random.default_rng([seed, 0, epoch]).permutation(n)
            losses, merges, active = [], 0, 0
            lr = 0.0
            for b in range(steps_per_epoch):
                index = order[b * bs:(b + 1) * bs]
                images = data.images[index]
                out = model.forward(images, seed=[seed, 2, state.step], tau=state.tau if merging else None)
                model.zero_grad()
                out.loss.backward()
                clip_inf_norm([p.grad for p in params], config.clip_inf_norm)
                lr = learning_rate(config, state.step, total)
                opt.step(lr)
                state.step += 1
                losses.append(float(out.loss.data))
                merges += sum(t.num_merges for t in out.traces)
                active += int(out.active.sum())
            maybe_calibrate(epoch)
            state.epoch = epoch + 1
            record = {
                "type": "epoch", "epoch": epoch, "step": state.step, "lr": lr,
                "loss": float(np.mean(losses)), "last_loss": losses[-1],
                "merging": merging, "merges": merges,
                "mean_merges": merges / n, "mean_active": active / n,
            }
            log.write(record)
            result.epochs.append(record)
            result.final_loss = losses[-1]
            ckpt = os.path.join(out_dir, "last.ckpt")
            save_checkpoint(ckpt, model, opt, state)
            if epoch in keep_epochs:
                save_checkpoint(os.path.join(out_dir, f"epoch-{epoch:03d}.ckpt"), model, opt, state)
    finally:
        log.close()
    return result


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model: SlotModel, data, tau: float | None, merge_at_inference: bool, masks: str = "decoder",
             batch_size: int | None = None, seed: int = EVAL_SEED) -> tuple[list, dict]:
    """Per-image metric records and an aggregate summary record."""
    if masks not in ("decoder", "attention"):
        raise ValueError("masks must be 'decoder' or 'attention'")
    if merge_at_inference and tau is None:
        raise ScheduleError("merge at inference requested but the checkpoint has no threshold")
    cfg = model.config
    bs = batch_size or cfg.batch_size
    records = []
    H, W = cfg.canvas_h, cfg.canvas_w
    gh, gw = cfg.grid
    for start in range(0, len(data), bs):
        index = np.arange(start, min(start + bs, len(data)))
        out = model.forward(data.images[index], seed=[seed, start], tau=tau if merge_at_inference else None)
        for b, k in enumerate(index):
            if masks == "decoder":
                weights = out.alphas.data[b]
            else:
                att = out.attn.data[b].reshape(gh, gw, -1)
                weights = np.repeat(np.repeat(att, H // gh, axis=0), W // gw, axis=1)
            pred = metrics.slots_to_masks(weights, out.active[b])
            m = metrics.image_metrics(pred, data.instances[k], data.classes[k])
            records.append({
                "image_id": int(k), **m,
                "active_slots": int(out.active[b].sum()),
                "merges": out.traces[b].num_merges if out.traces else 0,
            })
    return records, summarize(records, merge_at_inference, masks)


def summarize(records: list, merge_at_inference: bool, masks: str) -> dict:
    def avg(key):
        vals = [r[key] for r in records if r[key] != metrics.NO_GT]
        return math.fsum(vals) / len(vals) if vals else metrics.NO_GT

    return {
        "type": "summary", "n_images": len(records),
        "mbo_i": avg("mbo_i"), "mbo_c": avg("mbo_c"), "miou": avg("miou"),
        "mean_active_slots": avg("active_slots"), "mean_merges": avg("merges"),
        "merge_at_inference": merge_at_inference, "masks": masks,
    }
