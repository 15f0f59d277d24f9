"""Fixed-step explicit integrators over latent states.

Three entry points share the same stage formulas:

* :func:`integrate` - any array-valued field, records a trajectory;
* :func:`integrate_mlp` - the fused kernel path for the model's own field;
* :func:`integrate_differentiable` - unrolled on the tape for training.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels
from ._native_py import mlp_field
from .autodiff import Tensor
from .autodiff import ops as T

SCHEMES = ("euler", "heun", "rk4")
DIVERGENCE_NORM = 1e6
UNIFORM_11 = tuple(k / 10 for k in range(11))


class DivergenceError(ArithmeticError):
    def __init__(self, step: int, reason: str):
        super().__init__(f"integration diverged at step {step}: {reason}")
        self.step = step


@dataclass(frozen=True)
class SolverConfig:
    scheme: str = "rk4"
    steps: int = 20
    record_points: tuple = UNIFORM_11

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        pts = tuple(float(p) for p in self.record_points)
        if not pts or pts[0] != 0.0 or pts[-1] != 1.0 or list(pts) != sorted(pts):
            raise ValueError("record_points must be sorted and include 0 and 1")
        object.__setattr__(self, "record_points", pts)
        self.record_steps()

    def record_steps(self) -> list[int]:
        out = []
        for p in self.record_points:
            k = round(p * self.steps)
            if abs(p * self.steps - k) > 1e-9:
                raise ValueError(f"record point {p} is not a step boundary for N={self.steps}")
            out.append(k)
        return out


@dataclass
class LatentTrajectory:
    times: list
    states: list
    velocities: list = field(default_factory=list)

    def stacked(self) -> np.ndarray:
        return np.stack(self.states)

    def pooled(self) -> np.ndarray:
        """Mean over atom rows at each recorded point, float64."""
        return np.stack([np.asarray(s, dtype=np.float64).mean(axis=-2) for s in self.states])


def _guard(z: np.ndarray, step: int):
    if not np.all(np.isfinite(z)):
        raise DivergenceError(step, "non-finite state")
    norm = float(np.linalg.norm(z))
    if norm > DIVERGENCE_NORM:
        raise DivergenceError(step, f"state norm {norm:.3g} exceeds {DIVERGENCE_NORM:g}")


def step_once(z, t: float, dt: float, f: Callable, scheme: str):
    """One explicit step; works for arrays and for tape tensors via ``f``'s
    return type (arithmetic goes through ``+`` and scalar multiply)."""
    if scheme == "euler":
        return z + dt * f(z, t)
    if scheme == "heun":
        k1 = f(z, t)
        k2 = f(z + dt * k1, t + dt)
        return z + (dt / 2) * (k1 + k2)
    k1 = f(z, t)
    k2 = f(z + (dt / 2) * k1, t + dt / 2)
    k3 = f(z + (dt / 2) * k2, t + dt / 2)
    k4 = f(z + dt * k3, t + dt)
    return z + (dt / 6) * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate(z_r, fieldfn: Callable, cfg: SolverConfig = SolverConfig(), h_c=None):
    """Integrate dz/dt = field(z, t[, h_c]) from t=0 to 1.

    Returns ``(z_hat, trajectory)``; the trajectory holds states and field
    values at ``cfg.record_points``.
    """
    z = np.array(z_r, dtype=np.float64 if np.asarray(z_r).dtype.kind != "f" else np.asarray(z_r).dtype)
    f = fieldfn if h_c is None else (lambda x, t: fieldfn(x, t, h_c))
    n = cfg.steps
    dt = 1.0 / n
    want = cfg.record_steps()
    states, times, vels = [], [], []
    nxt = 0
    for i in range(n + 1):
        while nxt < len(want) and want[nxt] == i:
            states.append(z.copy())
            times.append(cfg.record_points[nxt])
            vels.append(np.asarray(f(z, i * dt)))
            nxt += 1
        if i == n:
            break
        z = step_once(z, i * dt, dt, f, cfg.scheme)
        _guard(z, i + 1)
    return z, LatentTrajectory(times, states, vels)


def integrate_mlp(z_r: np.ndarray, weights, tbias: np.ndarray, gamma1: np.ndarray, beta: np.ndarray,
                  cfg: SolverConfig = SolverConfig(), backend=None):
    """Fused path for the rowwise MLP field with FiLM.

    ``weights`` = (w0z, w1, b1, w2, b2); ``tbias`` holds the folded
    first-layer bias at times ``k / (2N)``, k = 0..2N. ``gamma1``/``beta`` are
    per-row arrays shaped like ``z_r`` (several graphs may be stacked as rows).
    """
    mod = kernels if backend is None else kernels.backend_module(backend)
    w0z, w1, b1, w2, b2 = weights
    every, _ = mod.integrate_mlp(z_r, tbias, w0z, w1, b1, w2, b2, gamma1, beta, cfg.scheme, cfg.steps, 1)
    for i, s in enumerate(every):
        _guard(s, i)
    want = cfg.record_steps()
    states = [every[k] for k in want]
    vels = [mlp_field(np.asarray(s, np.float64), tbias[2 * k], w0z, w1, b1, w2, b2, gamma1, beta).astype(s.dtype)
            for s, k in zip(states, want)]
    return every[-1], LatentTrajectory(list(cfg.record_points), states, vels)


def integrate_differentiable(z_r: Tensor, fieldfn: Callable, scheme: str = "heun", steps: int = 5) -> Tensor:
    """Unrolled integration on the active tape (discretize-then-differentiate)."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    dt = 1.0 / steps

    def f(z, t):
        return fieldfn(z, min(max(t, 0.0), 1.0))

    z = z_r
    for i in range(steps):
        t = i * dt
        if scheme == "euler":
            z = T.add(z, T.scale(f(z, t), dt))
        elif scheme == "heun":
            k1 = f(z, t)
            k2 = f(T.add(z, T.scale(k1, dt)), t + dt)
            z = T.add(z, T.scale(T.add(k1, k2), dt / 2))
        else:
            k1 = f(z, t)
            k2 = f(T.add(z, T.scale(k1, dt / 2)), t + dt / 2)
            k3 = f(T.add(z, T.scale(k2, dt / 2)), t + dt / 2)
            k4 = f(T.add(z, T.scale(k3, dt)), t + dt)
            acc = T.add(T.add(k1, T.scale(k2, 2.0)), T.add(T.scale(k3, 2.0), k4))
            z = T.add(z, T.scale(acc, dt / 6))
    return z


# ---------------------------------------------------------------- export


def write_trajectory_csv(path, items: Sequence[tuple[str, LatentTrajectory]]):
    """``reaction_id, step, t, state_norm, velocity_norm``, one row per point."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["reaction_id", "step", "t", "state_norm", "velocity_norm"])
        for rid, traj in items:
            for k, (t, s) in enumerate(zip(traj.times, traj.states)):
                vn = float(np.linalg.norm(traj.velocities[k])) if traj.velocities else float("nan")
                w.writerow([rid, k, f"{t:.6g}", f"{float(np.linalg.norm(s)):.9g}", f"{vn:.9g}"])


def save_states(path, items: Sequence[tuple[str, LatentTrajectory]]):
    """Raw recorded states, one float32 array (points, atoms, d) per reaction."""
    arrays = {str(rid): np.stack(traj.states).astype(np.float32) for rid, traj in items}
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_states(path) -> dict[str, np.ndarray]:
    with np.load(path) as data:
        return {k: data[k] for k in data.files}
