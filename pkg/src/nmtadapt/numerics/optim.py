"""Adam / RAdam with L2 weight decay and global-norm gradient clipping."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, ContractError
from .tensor import Tensor


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most ``max_norm``.

    Returns the norm measured before clipping.
    """
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
    if max_norm is not None and max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


@dataclass
class Optimizer:
    params: dict[str, Tensor]
    kind: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-9
    weight_decay: float = 0.0
    no_decay: frozenset = frozenset()  # parameter names exempt from weight decay
    max_grad_norm: float | None = None
    step_count: int = 0
    state: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    last_grad_norm: float = 0.0

    def __post_init__(self):
        if self.kind not in ("adam", "radam"):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}; expected adam or radam")

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        """Apply one update with learning rate ``lr``, then zero gradients."""
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"parameter {name!r} has no gradient; run backward() first")
        plist = list(self.params.values())
        self.last_grad_norm = clip_grad_norm(plist, self.max_grad_norm)
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        if self.kind == "radam":
            rho_inf = 2.0 / (1.0 - b2) - 1.0
            rho_t = rho_inf - 2.0 * t * b2 ** t / bc2
            rectified = rho_t > 4.0
            if rectified:
                r_t = math.sqrt((rho_t - 4.0) * (rho_t - 2.0) * rho_inf
                                / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
        for name, p in self.params.items():
            g = p.grad
            if self.weight_decay and name not in self.no_decay:
                g = g + self.weight_decay * p.data
            st = self.state.get(name)
            if st is None:
                st = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
                self.state[name] = st
            m, v = st["m"], st["v"]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            m_hat = m / bc1
            if self.kind == "adam":
                update = m_hat / (np.sqrt(v / bc2) + self.eps)
            elif rectified:
                update = r_t * m_hat / (np.sqrt(v / bc2) + self.eps)
            else:
                # warm start: momentum SGD until the variance estimate is usable
                update = m_hat
            if lr != 0.0:
                p.data -= (lr * update).astype(p.data.dtype, copy=False)
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, st in self.state.items():
            out[f"{name}.m"] = st["m"]
            out[f"{name}.v"] = st["v"]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.state = {}
        for name in self.params:
            if f"{name}.m" in arrays:
                self.state[name] = {"m": arrays[f"{name}.m"].copy(), "v": arrays[f"{name}.v"].copy()}
