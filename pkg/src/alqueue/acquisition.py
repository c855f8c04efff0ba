"""Priority values for queued candidates. Lower value = simulated sooner."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import rng as rngmod
from .surrogate import Prediction


class Mode(str, enum.Enum):
    EXPLOIT = "Exploit"
    EXPLORE = "Explore"
    LCB = "LCB"
    MULTI = "MultiObjective"
    RANDOM = "Random"
    FIFO = "Fifo"


@dataclass(frozen=True)
class AcquisitionSpec:
    mode: Mode = Mode.EXPLOIT
    lam: float = 0.0
    w_is: float = 1.0
    w_sa: float = 0.0
    w_t: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if min(self.w_is, self.w_sa, self.w_t) < 0:
            raise ValueError("objective weights must be >= 0")
        if self.mode is Mode.MULTI and abs(self.w_is + self.w_sa + self.w_t - 1.0) > 1e-9:
            raise ValueError("MultiObjective weights must sum to 1")
        if not math.isfinite(self.lam):
            raise ValueError("lambda must be finite")

    @property
    def uses_surrogate(self) -> bool:
        if self.mode in (Mode.EXPLOIT, Mode.EXPLORE, Mode.LCB):
            return True
        return self.mode is Mode.MULTI and self.w_is > 0


def priority(spec: AcquisitionSpec, pred: Prediction | None, s_sa: float, s_t: float, id: int,
             *, seed: int = 0, rank_pass: int = 0) -> float:
    """Priority of one candidate.

    For MultiObjective, ``pred.mean``, ``s_sa`` and ``s_t`` must already be
    normalized over the queue snapshot.
    """
    mode = spec.mode
    if spec.uses_surrogate and pred is None:
        raise ValueError(f"{mode.value} acquisition needs a surrogate prediction")
    if mode is Mode.EXPLOIT:
        return pred.mean
    if mode is Mode.EXPLORE:
        return -pred.spread
    if mode is Mode.LCB:
        return pred.mean - spec.lam * pred.spread
    if mode is Mode.MULTI:
        n_is = pred.mean if pred is not None else 0.0
        return spec.w_is * n_is + spec.w_sa * s_sa + spec.w_t * s_t
    if mode is Mode.RANDOM:
        return float(rngmod.keyed_uniform(seed, rank_pass, [id])[0])
    return float(id)


def normalize_objective(values: Sequence[float]) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant input maps to zeros."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return v
    lo, hi = v.min(), v.max()
    if not hi > lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def priorities(spec: AcquisitionSpec, ids, mean=None, spread=None, s_sa=None, s_t=None,
               *, seed: int = 0, rank_pass: int = 0) -> np.ndarray:
    """Vectorized ``priority`` over one queue snapshot (normalizes MultiObjective inputs)."""
    ids = np.asarray(ids, dtype=np.int64)
    mode = spec.mode
    if spec.uses_surrogate and (mean is None or spread is None):
        raise ValueError(f"{mode.value} acquisition needs surrogate predictions")
    if mode is Mode.EXPLOIT:
        return np.asarray(mean, dtype=np.float64).copy()
    if mode is Mode.EXPLORE:
        return -np.asarray(spread, dtype=np.float64)
    if mode is Mode.LCB:
        return np.asarray(mean, dtype=np.float64) - spec.lam * np.asarray(spread, dtype=np.float64)
    if mode is Mode.MULTI:
        out = np.zeros(len(ids))
        if spec.w_is > 0:
            out += spec.w_is * normalize_objective(mean)
        if spec.w_sa > 0:
            out += spec.w_sa * normalize_objective(s_sa)
        if spec.w_t > 0:
            out += spec.w_t * normalize_objective(s_t)
        return out
    if mode is Mode.RANDOM:
        return rngmod.keyed_uniform(seed, rank_pass, ids)
    return ids.astype(np.float64)


def rank(ids, prios) -> np.ndarray:
    """Indices ordering the queue by ascending priority, ties to the smaller id."""
    ids = np.asarray(ids, dtype=np.int64)
    p = np.asarray(prios, dtype=np.float64)
    if p.shape != ids.shape:
        raise ValueError("one priority per queued candidate required")
    if np.isnan(p).any():
        raise ValueError("NaN priority")
    return np.lexsort((ids, p))
