"""Bias-corrected Adam over the Gaussian parameter groups."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from ..errors import TrainingDivergenceError
from ..scene_model import GaussianCloud

GROUPS = GaussianCloud.FIELDS


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15

    @classmethod
    def for_cloud(cls, cloud: GaussianCloud) -> "AdamState":
        p = cloud.params()
        return cls({k: np.zeros_like(a) for k, a in p.items()}, {k: np.zeros_like(a) for k, a in p.items()})

    def remap(self, source_rows: np.ndarray, fresh: np.ndarray) -> None:
        """Re-index moments after density control; ``fresh`` rows restart from zero."""
        for store in (self.m, self.v):
            for k in list(store):
                a = store[k][source_rows]
                a[fresh] = 0.0
                store[k] = a


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState,
              lrs: Dict[str, float]) -> Dict[str, np.ndarray]:
    """One Adam update; returns new parameter arrays and advances ``state`` in place.

    Quaternions are renormalised after the update.
    """
    for k, g in grads.items():
        bad = ~np.isfinite(g)
        if bad.any():
            row = int(np.argwhere(bad)[0][0])
            raise TrainingDivergenceError(f"non-finite {k} gradient for Gaussian {row}", gaussian=row)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    out = {}
    for k, p in params.items():
        g = grads[k]
        m = state.m.setdefault(k, np.zeros_like(p))
        v = state.v.setdefault(k, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        out[k] = p - lrs[k] * (m / c1) / (np.sqrt(v / c2) + state.eps)
    if "quats" in out and len(out["quats"]):
        q = out["quats"]
        out["quats"] = q / np.linalg.norm(q, axis=1, keepdims=True)
    return out
