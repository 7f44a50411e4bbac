"""Adam variants used by the two trainers."""

from __future__ import annotations

import numpy as np


class LazyAdam:
    """Adam that only touches the rows present in a sparse gradient.

    Moment buffers are keyed by table name and allocated when the table is
    first updated. Rows absent from a gradient keep their moments frozen (no
    decay) and their parameters untouched. Bias correction uses the global
    step count.
    """

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._seen: dict[str, np.ndarray] = {}

    def begin_step(self):
        self.step_count += 1

    def _state(self, name: str, table: np.ndarray):
        if name not in self._m:
            self._m[name] = np.zeros_like(table)
            self._v[name] = np.zeros_like(table)
            self._seen[name] = np.zeros(len(table), dtype=bool)
        return self._m[name], self._v[name]

    def n_state_rows(self, name: str) -> int:
        return int(self._seen[name].sum()) if name in self._seen else 0

    def update(self, name: str, table: np.ndarray, ids: np.ndarray, grad: np.ndarray) -> None:
        """Apply one Adam step to ``table[ids]`` in place. Call ``begin_step`` first."""
        if not len(ids):
            return
        m, v = self._state(name, table)
        self._seen[name][ids] = True
        t = self.step_count
        m_rows = self.beta1 * m[ids] + (1 - self.beta1) * grad
        v_rows = self.beta2 * v[ids] + (1 - self.beta2) * grad * grad
        m[ids] = m_rows
        v[ids] = v_rows
        m_hat = m_rows / (1 - self.beta1 ** t)
        v_hat = v_rows / (1 - self.beta2 ** t)
        table[ids] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class Adam:
    """Plain dense Adam over a dict of named arrays."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
