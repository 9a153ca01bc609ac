"""Soft-IoU overlap scoring and mass-weighted slot merging.

Merge *decisions* (which pair, when to stop) are made on detached numpy
copies of the attention matrix. Merge *arithmetic* is available both as plain
numpy (inside the policies) and as differentiable tape operations
(``merge_pair`` and ``apply_traces``), and the two are kept formula-for-formula
identical so a trace recorded by a policy can be replayed on tensors.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError, DataError, DimensionError, UsageError
from .slotattn import SlotState

IOU_EPS = 1e-12
MASS_EPS = 1e-12


@dataclass
class MergePolicyConfig:
    tau: float = 0.0
    detach_gradients: bool = False
    update_attention: bool = True

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau must lie in [0, 1], got {self.tau}")


@dataclass(frozen=True)
class MergeStep:
    i: int
    j: int
    iou: float
    wi: float
    wj: float


@dataclass
class MergeTrace:
    steps: list = field(default_factory=list)
    final_active_count: int = 0
    pair_evals: int = 0
    updates: int = 0

    @property
    def num_merges(self) -> int:
        return len(self.steps)

    def pairs(self) -> list:
        return [(s.i, s.j) for s in self.steps]

    def to_record(self, image_id, active) -> dict:
        return {
            "image_id": image_id,
            "steps": [{"i": s.i, "j": s.j, "iou": s.iou, "wi": s.wi, "wj": s.wj} for s in self.steps],
            "active_after": [int(k) for k in np.flatnonzero(active)],
        }

    def to_json(self, image_id, active) -> str:
        return json.dumps(self.to_record(image_id, active))

    @classmethod
    def from_record(cls, record: dict) -> "MergeTrace":
        steps = [MergeStep(int(s["i"]), int(s["j"]), float(s["iou"]), float(s["wi"]), float(s["wj"]))
                 for s in record["steps"]]
        return cls(steps, len(record["active_after"]))


def _array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


# ---------------------------------------------------------------------------
# overlap scoring


def soft_iou(p, q) -> float:
    p, q = _array(p), _array(q)
    if p.shape != q.shape:
        raise DimensionError(f"soft_iou: shapes {p.shape} and {q.shape} differ")
    p, q = p.ravel(), q.ravel()
    inter = float(np.dot(p, q))
    union = float(p.sum()) + float(q.sum()) - inter
    if union < IOU_EPS:
        return 0.0
    return inter / union


def _iou_from_parts(inter, mass_i, mass_j):
    union = mass_i + mass_j - inter
    safe = np.where(union < IOU_EPS, 1.0, union)
    return np.where(union < IOU_EPS, 0.0, inter / safe)


@dataclass
class OverlapState:
    """Pairwise soft intersections and per-slot masses for one image."""

    inter: np.ndarray
    mass: np.ndarray
    active: np.ndarray
    pair_evals: int = 0
    updates: int = 0

    def iou(self, i: int, j: int) -> float:
        return float(_iou_from_parts(self.inter[i, j], self.mass[i], self.mass[j]))

    def iou_matrix(self) -> np.ndarray:
        """IoU over active pairs with ``i < j``; every other entry is ``-inf``."""
        K = self.mass.shape[0]
        out = _iou_from_parts(self.inter, self.mass[:, None], self.mass[None, :])
        valid = np.triu(np.ones((K, K), dtype=bool), 1) & self.active[:, None] & self.active[None, :]
        return np.where(valid, out, -np.inf)

    def absorb(self, i: int, j: int, update_attention: bool = True) -> None:
        """Retire ``j`` after it was merged into ``i``."""
        self.active[j] = False
        if not update_attention:
            return
        self.mass[i] += self.mass[j]
        others = np.flatnonzero(self.active)
        others = others[others != i]
        # sum_n (A_i + A_j) A_k splits exactly into the two stored intersections
        self.inter[i, others] += self.inter[j, others]
        self.inter[others, i] = self.inter[i, others]
        self.updates += len(others)


def build_overlaps(A, active=None) -> OverlapState:
    A = _array(A)
    K = A.shape[1]
    active = np.ones(K, dtype=bool) if active is None else np.array(active, dtype=bool)
    masked = A * active
    inter = masked.T @ masked
    mass = masked.sum(axis=0)
    r = int(active.sum())
    return OverlapState(inter, mass, active, pair_evals=r * (r - 1) // 2)


def slot_mass(A, i: int, active=None) -> float:
    A = _array(A)
    if active is not None and not np.asarray(active, dtype=bool)[i]:
        raise UsageError(f"slot {i} is not active")
    return float(A[:, i].sum())


def merge_weights(alpha_i: float, alpha_j: float) -> tuple[float, float]:
    if alpha_i < 0 or alpha_j < 0:
        raise DataError(f"negative attention mass ({alpha_i}, {alpha_j})")
    total = alpha_i + alpha_j
    if total < MASS_EPS:
        return 0.5, 0.5
    wi = alpha_i / total
    return wi, 1.0 - wi


# ---------------------------------------------------------------------------
# differentiable merge arithmetic


def _merge_round(slots: Tensor, attn: Tensor, i_idx, j_idx, has, cfg: MergePolicyConfig, frozen=None):
    """One merge per batch row (rows with ``has`` False pass through unchanged).

    ``slots`` is ``(B, K, D)``, ``attn`` is ``(B, N, K)``. With detached
    gradients, ``frozen = (w_i, slots)`` arrays replace the values that are
    treated as constants, which lets finite differences probe the detached
    function itself.
    """
    B, K = slots.shape[0], slots.shape[1]
    rows = np.arange(B)
    e_i = np.zeros((B, K))
    e_j = np.zeros((B, K))
    e_i[rows[has], np.asarray(i_idx)[has]] = 1.0
    e_j[rows[has], np.asarray(j_idx)[has]] = 1.0

    masses = dc.sum_(attn, axis=1)                    # (B, K)
    a_i = dc.sum_(masses * e_i, axis=1)               # (B,)
    a_j = dc.sum_(masses * e_j, axis=1)
    total = a_i + a_j
    degenerate = (total.data < MASS_EPS).astype(np.float64)
    w_i = dc.div(a_i, total + degenerate) * (1.0 - degenerate) + 0.5 * degenerate
    if cfg.detach_gradients:
        if frozen is not None:
            w_i, source_j = Tensor(frozen[0]), Tensor(frozen[1])
        else:
            w_i, source_j = w_i.detach(), slots.detach()
    else:
        source_j = slots
    w_j = 1.0 - w_i

    s_i = dc.sum_(slots * e_i[:, :, None], axis=1)     # (B, D)
    s_j = dc.sum_(source_j * e_j[:, :, None], axis=1)
    merged = dc.reshape(w_i, (B, 1)) * s_i + dc.reshape(w_j, (B, 1)) * s_j
    new_slots = slots * (1.0 - e_i)[:, :, None] + e_i[:, :, None] * dc.reshape(merged, (B, 1, -1))

    keep = (1.0 - e_j)[:, None, :]
    if cfg.update_attention:
        col_j = dc.sum_(attn * e_j[:, None, :], axis=2)   # (B, N)
        new_attn = attn * keep + e_i[:, None, :] * dc.reshape(col_j, (B, -1, 1))
    else:
        new_attn = attn * keep
    return new_slots, new_attn, w_i, w_j


def merge_pair(S: SlotState, A, i: int, j: int, cfg: MergePolicyConfig) -> tuple[SlotState, Tensor]:
    """Merge slot ``j`` into slot ``i`` for a single image (tape-recorded)."""
    if i == j:
        raise UsageError("cannot merge a slot with itself")
    if not (S.active[i] and S.active[j]):
        raise UsageError(f"merge operands must be active, got ({i}, {j})")
    slots = dc.as_tensor(S.slots)
    A = dc.as_tensor(A)
    K, D = slots.shape
    has = np.array([True])
    new_slots, new_attn, _, _ = _merge_round(
        dc.reshape(slots, (1, K, D)), dc.reshape(A, (1,) + A.shape), [i], [j], has, cfg)
    active = S.active.copy()
    active[j] = False
    return SlotState(dc.reshape(new_slots, (K, D)), active), dc.reshape(new_attn, A.shape)


def apply_traces(slots: Tensor, attn: Tensor, active: np.ndarray, traces: Sequence[MergeTrace],
                 cfg: MergePolicyConfig, frozen: list | None = None,
                 record: list | None = None) -> tuple[Tensor, Tensor, np.ndarray]:
    """Replay recorded merge sequences on batched tensors, keeping gradients.

    Images merge in lock-step rounds; an image whose trace is shorter simply
    passes through the remaining rounds. ``record`` collects, per round, the
    ``(w_i, slots)`` values that ``frozen`` can later pin (detached mode only).
    """
    active = np.array(active, dtype=bool)
    B = slots.shape[0]
    rounds = max((t.num_merges for t in traces), default=0)
    for r in range(rounds):
        has = np.array([r < t.num_merges for t in traces])
        i_idx = np.array([t.steps[r].i if r < t.num_merges else 0 for t in traces])
        j_idx = np.array([t.steps[r].j if r < t.num_merges else 0 for t in traces])
        pinned = frozen[r] if frozen is not None else None
        before = slots.data
        slots, attn, w_i, _ = _merge_round(slots, attn, i_idx, j_idx, has, cfg, pinned)
        if record is not None:
            record.append((w_i.data.copy(), before.copy()))
        active[np.arange(B)[has], j_idx[has]] = False
    return slots, attn, active


# ---------------------------------------------------------------------------
# merge policies


def _prepare(S: SlotState, A):
    slots = _array(S.slots).copy()
    A = _array(A).copy()
    active = np.array(S.active, dtype=bool)
    if A.ndim != 2 or A.shape[1] != slots.shape[0]:
        raise DimensionError(f"attention {A.shape} does not match {slots.shape[0]} slots")
    A[:, ~active] = 0.0
    return slots, A, active


def _merge_arrays(slots, A, active, i, j, cfg):
    wi, wj = merge_weights(slot_mass(A, i), slot_mass(A, j))
    slots[i] = wi * slots[i] + wj * slots[j]
    if cfg.update_attention:
        A[:, i] = A[:, i] + A[:, j]
    A[:, j] = 0.0
    active[j] = False
    return wi, wj


def merge_policy_naive(S: SlotState, A, cfg: MergePolicyConfig):
    """Greedy max-Soft-IoU merging, recomputing every active pair each round."""
    slots, A, active = _prepare(S, A)
    trace = MergeTrace()
    while active.sum() > 1:
        idx = np.flatnonzero(active)
        best, best_pair = -np.inf, None
        for a, i in enumerate(idx):
            for j in idx[a + 1:]:
                value = soft_iou(A[:, i], A[:, j])
                trace.pair_evals += 1
                if value > best:
                    best, best_pair = value, (int(i), int(j))
        if best <= cfg.tau:
            break
        i, j = best_pair
        wi, wj = _merge_arrays(slots, A, active, i, j, cfg)
        trace.steps.append(MergeStep(i, j, best, wi, wj))
    trace.final_active_count = int(active.sum())
    return SlotState(slots, active), A, trace


def merge_policy_incremental(S: SlotState, A, cfg: MergePolicyConfig):
    """Same decisions as the naive policy, maintained through ``OverlapState``."""
    slots, A, active = _prepare(S, A)
    overlaps = build_overlaps(A, active)
    trace = MergeTrace()
    while active.sum() > 1:
        scores = overlaps.iou_matrix()
        flat = int(np.argmax(scores))
        i, j = divmod(flat, scores.shape[1])
        best = float(scores[i, j])
        if best <= cfg.tau:
            break
        wi, wj = _merge_arrays(slots, A, active, i, j, cfg)
        overlaps.absorb(i, j, cfg.update_attention)
        trace.steps.append(MergeStep(i, j, best, wi, wj))
    trace.final_active_count = int(active.sum())
    trace.pair_evals = overlaps.pair_evals
    trace.updates = overlaps.updates
    return SlotState(slots, active), A, trace


POLICIES = {"naive": merge_policy_naive, "incremental": merge_policy_incremental}


def batch_merge(batch: Sequence[tuple[SlotState, object]], cfg: MergePolicyConfig, policy: str = "incremental"):
    """Run the chosen policy independently on every image of ``batch``."""
    try:
        fn = POLICIES[policy]
    except KeyError:
        raise UsageError(f"unknown merge policy {policy!r}") from None
    return [fn(S, A, cfg) for S, A in batch]
