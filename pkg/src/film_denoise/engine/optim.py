"""Adam optimizer for engine parameters.

Bias-corrected first and second moments; the step applied to each parameter
is ``lr * m_hat / (sqrt(v_hat) + eps)`` with epsilon added outside the square
root.  With the defaults (lr=0.001, eps=1e-7) a unit gradient on the first
step moves a parameter by -0.001 / (1 + 1e-7).
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .tensor import EngineError, Parameter

__all__ = ["Adam"]


class Adam:
    """Holds per-parameter moment state; ``step()`` applies one update in place.

    A parameter whose gradient buffer is missing (``None``) raises, naming the
    parameter: an optimizer should never silently skip a leaf it was given.
    Zero gradients leave the parameter bit-identical.
    """

    def __init__(
        self,
        params: Iterable[Parameter],
        lr: float = 0.001,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-7,
    ):
        self.params: list[Parameter] = list(params)
        if not self.params:
            raise ValueError("Adam needs at least one parameter")
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(f"duplicate parameter names: {dupes}")
        if not 0.0 < lr:
            raise ValueError(f"lr must be positive, got {lr}")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ValueError(f"betas must lie in [0, 1), got {beta1}, {beta2}")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.zero_grad()

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.tensor.grad
            if g is None:
                raise EngineError(
                    f"parameter {p.name!r} has no gradient buffer; "
                    "run backward() before step()"
                )
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            update *= self.lr
            p.tensor.data -= update

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flat snapshot of moment buffers keyed by parameter name (for checkpoints)."""
        out: dict[str, np.ndarray] = {}
        for p, m, v in zip(self.params, self._m, self._v):
            out[f"{p.name}.m"] = m
            out[f"{p.name}.v"] = v
        return out

    def load_state_arrays(self, state: dict[str, np.ndarray], t: int) -> None:
        for i, p in enumerate(self.params):
            for key, buf in ((f"{p.name}.m", self._m), (f"{p.name}.v", self._v)):
                if key not in state:
                    raise KeyError(f"optimizer state missing entry {key!r}")
                arr = state[key]
                if arr.shape != p.shape:
                    raise ValueError(
                        f"optimizer state {key!r} has shape {arr.shape}, expected {p.shape}"
                    )
                buf[i] = arr.astype(p.data.dtype, copy=True)
        self.t = int(t)
