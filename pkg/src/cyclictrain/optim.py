"""AdamW with decoupled weight decay, per-parameter state and freezing.

The optimizer keeps one state record per parameter name.  Frozen parameters
(``trainable=False``) are skipped entirely: no data change, no moment update,
no step-count advance, so a freeze leaves both the weights and the optimizer
state bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np

__all__ = ["AdamWState", "AdamW"]


@dataclass
class AdamWState:
    """Moments and counters for one parameter."""

    lr: float
    step_count: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


class AdamW:
    """Decoupled-weight-decay Adam over named parameters.

    Parameters are duck-typed: anything with ``name``, ``tensor`` (holding
    ``data`` and ``grad``), ``component`` and ``trainable`` works.  ``lr_for``
    lets the caller resolve a per-parameter learning rate (e.g. a smaller one
    for a shared backbone); it is sampled once, when the parameter's state is
    first created.
    """

    def __init__(
        self,
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        lr_for: Callable[[object], float] | None = None,
    ):
        if not (0.0 < betas[0] < 1.0 and 0.0 < betas[1] < 1.0):
            raise ValueError(f"betas must lie in (0, 1), got {betas}")
        if lr < 0.0:
            raise ValueError(f"lr must be non-negative, got {lr}")
        self.lr = float(lr)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.lr_for = lr_for
        self._state: dict[str, AdamWState] = {}

    def state_for(self, name: str) -> AdamWState | None:
        return self._state.get(name)

    def step(
        self,
        params: Iterable,
        grads: Mapping[str, np.ndarray] | None = None,
        lr_scale: float = 1.0,
    ) -> None:
        """Apply one update to every trainable parameter.

        ``grads`` overrides ``param.tensor.grad`` when given; a missing or
        ``None`` gradient is treated as zero (weight decay still applies).
        Non-finite gradients are rejected by parameter name.
        """
        b1, b2 = self.betas
        for p in params:
            if not p.trainable:
                continue
            if grads is not None and p.name in grads:
                g = grads[p.name]
            else:
                g = p.tensor.grad
            if g is None:
                g = np.zeros_like(p.tensor.data)
            if not np.all(np.isfinite(g)):
                raise ValueError(f"non-finite gradient for parameter '{p.name}'")
            st = self._state.get(p.name)
            if st is None:
                lr = self.lr_for(p) if self.lr_for is not None else self.lr
                if lr < 0.0:
                    raise ValueError(f"negative learning rate for '{p.name}'")
                st = AdamWState(lr=lr)
                st.m = np.zeros_like(p.tensor.data)
                st.v = np.zeros_like(p.tensor.data)
                self._state[p.name] = st
            st.step_count += 1
            st.m = b1 * st.m + (1.0 - b1) * g
            st.v = b2 * st.v + (1.0 - b2) * (g * g)
            m_hat = st.m / (1.0 - b1 ** st.step_count)
            v_hat = st.v / (1.0 - b2 ** st.step_count)
            update = m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.tensor.data
            p.tensor.data -= (st.lr * lr_scale) * update

    # ------------------------------------------------------------------
    # serialization support for checkpoints

    def export_state(self) -> dict:
        entries = {}
        for name, st in self._state.items():
            entries[name] = {
                "lr": st.lr,
                "step_count": st.step_count,
                "m": st.m,
                "v": st.v,
            }
        return {
            "betas": list(self.betas),
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "entries": entries,
        }

    def load_state(self, state: dict) -> None:
        self.betas = (float(state["betas"][0]), float(state["betas"][1]))
        self.eps = float(state["eps"])
        self.weight_decay = float(state["weight_decay"])
        self._state = {}
        for name, entry in state["entries"].items():
            st = AdamWState(lr=float(entry["lr"]), step_count=int(entry["step_count"]))
            st.m = np.asarray(entry["m"], dtype=np.float64)
            st.v = np.asarray(entry["v"], dtype=np.float64)
            self._state[name] = st
