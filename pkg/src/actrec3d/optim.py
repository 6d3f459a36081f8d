"""Adam / Nadam updates and time-based learning-rate decay.

Both step functions are pure: they return new parameter and state dicts and
leave their inputs untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class OptimConfig:
    kind: str = "adam"
    lr0: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 0.01

    def __post_init__(self):
        if self.kind not in ("adam", "nadam"):
            raise ValueError(f"optimizer kind must be 'adam' or 'nadam', got {self.kind!r}")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be > 0")
        if not (0 <= self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 must be in [0,1) and beta2 in (0,1)")
        if not self.eps > 0:
            raise ValueError("eps must be > 0")
        if self.decay < 0:
            raise ValueError("decay must be >= 0")


@dataclass
class OptimState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: dict) -> "OptimState":
        return cls(0, {k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})

    def to_arrays(self) -> dict[str, np.ndarray]:
        """Flatten into a name->array mapping (e.g. for ``np.savez``)."""
        out = {"t": np.asarray(self.t, dtype=np.int64)}
        out.update({f"m/{k}": a for k, a in self.m.items()})
        out.update({f"v/{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays) -> "OptimState":
        m = {k[2:]: np.array(arrays[k]) for k in arrays if k.startswith("m/")}
        v = {k[2:]: np.array(arrays[k]) for k in arrays if k.startswith("v/")}
        return cls(int(arrays["t"]), m, v)


def decayed_lr(cfg: OptimConfig, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 / (1.0 + cfg.decay * epoch)


def _prepare(params, grads, state, lr):
    if not lr > 0:
        raise ValueError(f"learning rate must be > 0, got {lr}")
    if list(grads) != list(params):
        raise ValueError("gradient names do not match parameter names")
    for name, g in grads.items():
        if np.shape(g) != np.shape(params[name]):
            raise ValueError(f"{name}: grad shape {np.shape(g)} != param shape "
                             f"{np.shape(params[name])}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name} at step {state.t + 1}")
    if state.t == 0 and not state.m:
        state = OptimState.zeros_like(params)
    return state


def _step(params, grads, state, cfg, lr, nesterov):
    state = _prepare(params, grads, state, lr)
    t = state.t + 1
    b1, b2 = cfg.beta1, cfg.beta2
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        v_hat = v / (1 - b2 ** t)
        if nesterov:
            direction = b1 * m / (1 - b1 ** (t + 1)) + (1 - b1) * g / (1 - b1 ** t)
        else:
            direction = m / (1 - b1 ** t)
        new_p[name] = (p - lr * direction / (np.sqrt(v_hat) + cfg.eps)).astype(p.dtype)
        new_m[name] = m.astype(p.dtype)
        new_v[name] = v.astype(p.dtype)
    return new_p, OptimState(t, new_m, new_v)


def adam_step(params: dict, grads: dict, state: OptimState, cfg: OptimConfig, lr: float):
    return _step(params, grads, state, cfg, lr, nesterov=False)


def nadam_step(params: dict, grads: dict, state: OptimState, cfg: OptimConfig, lr: float):
    """Adam with the Nesterov-corrected first moment."""
    return _step(params, grads, state, cfg, lr, nesterov=True)


def optimizer_step(params, grads, state, cfg: OptimConfig, lr: float):
    step = nadam_step if cfg.kind == "nadam" else adam_step
    return step(params, grads, state, cfg, lr)
