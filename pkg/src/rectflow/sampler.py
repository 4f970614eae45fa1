"""ODE integration from t=0 to t=1: fixed-step Euler and adaptive
Dormand-Prince 5(4) with FSAL, both with exact function-evaluation counts.

Fields are plain callables f(z, t) -> dz/dt over numpy arrays, so the
solvers are testable against closed-form dynamics independent of any model.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .decoder import VelocityModel, velocity_field
from .frontend import ConditionGrid


class SolverFailure(RuntimeError):
    """Integration aborted: non-finite state or step budget exhausted."""


@dataclass
class SolverSpec:
    kind: str = "rk45"
    steps: int = 50
    rtol: float = 1e-5
    atol: float = 1e-5
    max_steps: int = 10_000

    def __post_init__(self):
        if self.kind not in ("euler", "rk45"):
            raise ValueError(f"unknown solver kind '{self.kind}' (expected euler or rk45)")
        if self.kind == "euler" and self.steps < 1:
            raise ValueError(f"euler steps must be >= 1, got {self.steps}")
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError(f"tolerances must be positive, got rtol={self.rtol} atol={self.atol}")
        if self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")

    def to_dict(self):
        return {"kind": self.kind, "steps": self.steps, "rtol": self.rtol,
                "atol": self.atol, "max_steps": self.max_steps}


@dataclass
class SolveResult:
    z1: np.ndarray
    nfe: int
    wall_time: float
    trajectory: list = field(default_factory=list)
    accepted_steps: int = 0
    rejected_steps: int = 0


def solve_euler(f, z0, steps, record_trajectory=False) -> SolveResult:
    """Forward Euler with the field evaluated at each interval's left edge."""
    if steps < 1:
        raise ValueError(f"euler steps must be >= 1, got {steps}")
    start = time.perf_counter()
    z = np.array(z0, dtype=np.asarray(z0).dtype, copy=True)
    dt = 1.0 / steps
    traj = [(0.0, z.copy())] if record_trajectory else []
    for k in range(steps):
        v = f(z, k / steps)
        z = z + dt * v
        if not np.all(np.isfinite(z)):
            raise SolverFailure(f"euler: non-finite state at step {k + 1} of {steps}")
        if record_trajectory:
            traj.append(((k + 1) / steps, z.copy()))
    return SolveResult(z1=z, nfe=steps, wall_time=time.perf_counter() - start,
                       trajectory=traj, accepted_steps=steps, rejected_steps=0)


# Dormand-Prince 5(4): 5th-order propagation, embedded 4th-order error
# estimate, first-same-as-last. One initial evaluation, then six fresh
# evaluations per attempted step (stage 1 is reused across attempts).
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])

_H0 = 1e-2
_H_MIN = 1e-6
_H_MAX = 1.0
_SAFETY = 0.9
_FAC_MIN = 0.2
_FAC_MAX = 5.0


def solve_rk45(f, z0, rtol, atol, max_steps=10_000, record_trajectory=False) -> SolveResult:
    """Adaptive Dormand-Prince integration of dz/dt = f(z, t) over [0, 1].

    Accepts a step when the RMS of err/(atol + rtol*max(|y|, |y_new|)) is at
    most 1; the step factor is 0.9 * err_norm^(-1/5) clipped to [0.2, 5] and
    the step size to [1e-6, 1]. The final step is clipped so integration
    lands on t = 1 exactly. NFE is 1 + 6 * (accepted + rejected) under FSAL.
    """
    if rtol <= 0 or atol <= 0:
        raise ValueError(f"tolerances must be positive, got rtol={rtol} atol={atol}")
    start = time.perf_counter()
    z = np.array(z0, dtype=np.asarray(z0).dtype, copy=True)
    t = 0.0
    nfe = 1
    k1 = np.asarray(f(z, t))
    h = min(_H0, 1.0)
    accepted = 0
    rejected = 0
    traj = [(0.0, z.copy())] if record_trajectory else []
    ks = [None] * 7
    while t < 1.0:
        clipped = t + h >= 1.0
        if clipped:
            h = 1.0 - t
        ks[0] = k1
        for s in range(1, 7):
            zs = z + h * sum(_DP_A[s][j] * ks[j] for j in range(s))
            ks[s] = np.asarray(f(zs, t + _DP_C[s] * h))
            nfe += 1
        z_new = z + h * sum(_DP_B5[j] * ks[j] for j in range(7))
        err = h * sum((_DP_B5[j] - _DP_B4[j]) * ks[j] for j in range(7))
        if not (np.all(np.isfinite(z_new)) and np.all(np.isfinite(err))):
            raise SolverFailure(f"rk45: non-finite state at t={t:.6g}")
        scale = atol + rtol * np.maximum(np.abs(z), np.abs(z_new))
        err_norm = float(np.sqrt(np.mean((err / scale) ** 2)))
        if err_norm <= 1.0:
            accepted += 1
            t = 1.0 if clipped else t + h
            z = z_new
            k1 = ks[6]  # FSAL: last stage of an accepted step seeds the next
            if record_trajectory:
                traj.append((t, z.copy()))
        else:
            rejected += 1
        if accepted + rejected >= max_steps and t < 1.0:
            raise SolverFailure(
                f"rk45: max_steps={max_steps} exhausted at t={t:.6g} "
                f"(accepted={accepted}, rejected={rejected})"
            )
        factor = _FAC_MAX if err_norm == 0.0 else min(
            _FAC_MAX, max(_FAC_MIN, _SAFETY * err_norm ** -0.2)
        )
        h = min(_H_MAX, max(_H_MIN, h * factor))
    return SolveResult(z1=z, nfe=nfe, wall_time=time.perf_counter() - start,
                       trajectory=traj, accepted_steps=accepted, rejected_steps=rejected)


def solve(spec: SolverSpec, model: VelocityModel, cond: ConditionGrid | None,
          z0=None, rng=None, record_trajectory=False) -> SolveResult:
    """Integrate the model's velocity field under ``spec``.

    ``z0`` defaults to a standard-Gaussian draw of the condition's frame
    grid. The result's NFE is cross-checked against the model's instrumented
    evaluation counter.
    """
    frames = cond.frames if cond is not None else 1
    if z0 is None:
        if rng is None:
            raise ValueError("solve: need either z0 or rng")
        z0 = rng.standard_normal((frames, model.cfg.mel_bins)).astype(model.dtype)
    f = velocity_field(model, cond)
    before = model.nfe_count
    if spec.kind == "euler":
        result = solve_euler(f, z0, spec.steps, record_trajectory=record_trajectory)
    else:
        result = solve_rk45(f, z0, spec.rtol, spec.atol, max_steps=spec.max_steps,
                            record_trajectory=record_trajectory)
    counted = model.nfe_count - before
    if counted != result.nfe:
        raise AssertionError(
            f"NFE accounting mismatch: solver reports {result.nfe}, "
            f"model counted {counted}"
        )
    return result
