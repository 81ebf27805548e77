"""Latent encoding by integrating the gradient flow dz/dt = -alpha(t) grad_z l.

Three interchangeable integrators:

* fixed-grid 4th-order Runge-Kutta on a logarithmic time grid,
* the damped second-order system (dv/dt = -3/(t+eps) v - grad, dz/dt = v)
  that models accelerated gradient descent, solved on the same grid,
* an adaptive step integrator (AMD) that backtracks each step until the
  reconstruction loss strictly decreases, with a multiplicative step-scale
  schedule and early stopping on stagnation.

Solvers are pure: given (sample, parameters, config) they always produce
the same trajectory.  Every decoder evaluation is counted in
``FlowState.model_calls``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .models import DecoderParams, LossKind, reconstruction_loss


class SolverKind(Enum):
    RK4_FIXED = "rk4"
    NESTEROV2 = "nesterov"
    AMD = "amd"


class AlphaSchedule(Enum):
    ONE = "one"
    EXP_DECAY = "exp_decay"


class FlowError(RuntimeError):
    pass


class FlowDivergedError(FlowError):
    """Non-finite gradient during integration; carries (t, grad norm)."""

    def __init__(self, t: float, grad_norm: float):
        self.t = t
        self.grad_norm = grad_norm
        super().__init__(f"flow diverged at t={t:.6g} (|grad|={grad_norm:.6g})")


@dataclass
class FlowConfig:
    tau: float = 20.0
    solver: SolverKind = SolverKind.AMD
    n_slices: int = 100
    alpha_schedule: AlphaSchedule = AlphaSchedule.ONE
    beta: float = 0.75
    s0: float = 1.0
    s_max: float = 10.0
    kappa: float = 1.1
    epsilon: float = 1e-3
    early_stop_tol: float = 0.01
    z0: np.ndarray | None = None
    backtrack_cap: int = 50
    grid_c: float = 3.0

    def __post_init__(self):
        if not (0.0 < self.beta < 1.0):
            raise ValueError(f"beta must be in (0,1), got {self.beta}")
        if self.s0 > self.s_max:
            raise ValueError(f"s0={self.s0} exceeds s_max={self.s_max}")
        if self.tau <= 0.0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.n_slices < 2:
            raise ValueError(f"n_slices must be >= 2, got {self.n_slices}")


@dataclass
class FlowState:
    """End state of one flow: latent, bookkeeping, and loss history."""

    z: np.ndarray
    v: np.ndarray | None = None
    t: float = 0.0
    loss_history: list[tuple[float, float]] = field(default_factory=list)
    model_calls: int = 0
    early_stopped: bool = False
    stalled: bool = False


@dataclass
class FlowTrace:
    """Cached trajectory consumed by the full-adjoint backward pass.

    ``ts`` has one entry per grid point (n_steps + 1); ``dts`` and ``grads``
    have one entry per slice, with grads evaluated at the slice's left
    endpoint.
    """

    ts: list[float] = field(default_factory=list)
    zs: list[np.ndarray] = field(default_factory=list)
    dts: list[float] = field(default_factory=list)
    grads: list[np.ndarray] = field(default_factory=list)
    complete: bool = False
    theta_version: tuple | None = None

    @property
    def n_slices(self) -> int:
        return len(self.dts)

    def final_z(self) -> np.ndarray:
        return self.zs[-1]


Objective = Callable[[Tensor], Tensor]


def log_time_grid(tau: float, n_slices: int, c: float = 3.0) -> np.ndarray:
    """Monotone grid on [0, tau], denser near zero: tau*(e^(ci/N)-1)/(e^c-1)."""
    i = np.arange(n_slices + 1, dtype=np.float64)
    return tau * np.expm1(c * i / n_slices) / np.expm1(c)


def _alpha_fn(cfg: FlowConfig) -> Callable[[float], float]:
    if cfg.alpha_schedule == AlphaSchedule.EXP_DECAY:
        tau = cfg.tau
        return lambda t: float(np.exp(-2.0 * t / tau))
    return lambda t: 1.0


def _grad_eval(objective: Objective, z: np.ndarray,
               t: float) -> tuple[float, np.ndarray]:
    """Loss and d loss/dz at z; one model call."""
    try:
        with np.errstate(over="ignore", invalid="ignore"), dc.recording():
            zt = Tensor(z, requires_grad=True)
            lt = objective(zt)
            (g,) = dc.grad(lt, [zt])
    except dc.NonFiniteError:
        raise FlowDivergedError(t, float("nan")) from None
    gd = g.data
    if not np.isfinite(gd).all():
        raise FlowDivergedError(t, float(np.linalg.norm(gd)))
    return lt.item(), gd


def _loss_eval(objective: Objective, z: np.ndarray, t: float) -> float:
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            return objective(dc.constant(z)).item()
    except dc.NonFiniteError:
        raise FlowDivergedError(t, float("nan")) from None


def reconstruction_objective(y, decoder: DecoderParams,
                             kind: LossKind = LossKind.CROSS_ENTROPY) -> Objective:
    yd = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)

    def objective(z: Tensor) -> Tensor:
        return reconstruction_loss(yd, z, decoder, kind)

    return objective


def _default_z0(cfg: FlowConfig, dim: int) -> np.ndarray:
    if cfg.z0 is not None:
        z0 = np.asarray(cfg.z0, dtype=np.float64)
        if z0.shape != (dim,):
            raise ValueError(f"z0 shape {z0.shape} does not match latent ({dim},)")
        return z0.copy()
    return np.zeros(dim)


# ---------------------------------------------------------------------------
# Integrators (objective-generic; the solve_* wrappers below bind a decoder)
# ---------------------------------------------------------------------------

def integrate_rk4(objective: Objective, z0: np.ndarray,
                  cfg: FlowConfig) -> tuple[FlowState, FlowTrace]:
    alpha = _alpha_fn(cfg)
    ts = log_time_grid(cfg.tau, cfg.n_slices, cfg.grid_c)
    state = FlowState(z=np.array(z0, dtype=np.float64))
    trace = FlowTrace()
    z = state.z
    for i in range(cfg.n_slices):
        t, h = float(ts[i]), float(ts[i + 1] - ts[i])
        l0, g0 = _grad_eval(objective, z, t)
        k1 = -alpha(t) * g0
        _, g = _grad_eval(objective, z + 0.5 * h * k1, t + 0.5 * h)
        k2 = -alpha(t + 0.5 * h) * g
        _, g = _grad_eval(objective, z + 0.5 * h * k2, t + 0.5 * h)
        k3 = -alpha(t + 0.5 * h) * g
        _, g = _grad_eval(objective, z + h * k3, t + h)
        k4 = -alpha(t + h) * g
        state.model_calls += 4
        trace.ts.append(t)
        trace.zs.append(z.copy())
        trace.dts.append(h)
        trace.grads.append(g0)
        state.loss_history.append((t, l0))
        z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.isfinite(z).all():
            raise FlowDivergedError(t + h, float(np.linalg.norm(g0)))
    trace.ts.append(float(ts[-1]))
    trace.zs.append(z.copy())
    trace.complete = True
    state.z = z
    state.t = float(ts[-1])
    return state, trace


def integrate_nesterov(objective: Objective, z0: np.ndarray,
                       cfg: FlowConfig) -> tuple[FlowState, FlowTrace]:
    """Coupled first-order form of z'' + 3/(t+eps) z' + grad l = 0."""
    eps = cfg.epsilon
    ts = log_time_grid(cfg.tau, cfg.n_slices, cfg.grid_c)
    state = FlowState(z=np.array(z0, dtype=np.float64),
                      v=np.zeros_like(np.asarray(z0, dtype=np.float64)))
    trace = FlowTrace()
    z, v = state.z, state.v

    def rhs(t, zc, vc):
        l, g = _grad_eval(objective, zc, t)
        state.model_calls += 1
        return vc, -(3.0 / (t + eps)) * vc - g, l, g

    for i in range(cfg.n_slices):
        t, h = float(ts[i]), float(ts[i + 1] - ts[i])
        k1z, k1v, l0, g0 = rhs(t, z, v)
        k2z, k2v, _, _ = rhs(t + 0.5 * h, z + 0.5 * h * k1z, v + 0.5 * h * k1v)
        k3z, k3v, _, _ = rhs(t + 0.5 * h, z + 0.5 * h * k2z, v + 0.5 * h * k2v)
        k4z, k4v, _, _ = rhs(t + h, z + h * k3z, v + h * k3v)
        trace.ts.append(t)
        trace.zs.append(z.copy())
        trace.dts.append(h)
        trace.grads.append(g0)
        state.loss_history.append((t, l0))
        z = z + (h / 6.0) * (k1z + 2.0 * k2z + 2.0 * k3z + k4z)
        v = v + (h / 6.0) * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
        if not (np.isfinite(z).all() and np.isfinite(v).all()):
            raise FlowDivergedError(t + h, float(np.linalg.norm(g0)))
    trace.ts.append(float(ts[-1]))
    trace.zs.append(z.copy())
    trace.complete = True
    state.z, state.v = z, v
    state.t = float(ts[-1])
    return state, trace


_GRAD_FLOOR = 1e-15


def integrate_amd(objective: Objective, z0: np.ndarray,
                  cfg: FlowConfig) -> tuple[FlowState, FlowTrace]:
    """Backtracking explicit steps; every accepted step strictly lowers l.

    Candidate steps are dt = beta^m * s_n with the smallest accepting m;
    s_n follows s_n = min(max(kappa*s_{n-1}, s0), s_max).  Alpha is fixed
    to 1 (the step size takes over its role).  Stops at tau, on relative
    improvement below early_stop_tol, or with ``stalled`` set when
    backtracking exhausts (converged to machine precision).
    """
    state = FlowState(z=np.array(z0, dtype=np.float64))
    trace = FlowTrace()
    z, t = state.z, 0.0
    s = cfg.s0
    l_cur, g = _grad_eval(objective, z, t)
    state.model_calls += 1
    state.loss_history.append((t, l_cur))

    while t < cfg.tau:
        gnorm = float(np.linalg.norm(g))
        if gnorm < _GRAD_FLOOR:
            state.early_stopped = True
            break

        accepted = False
        m = 0
        remaining = cfg.tau - t
        while m <= cfg.backtrack_cap:
            dt = (cfg.beta ** m) * s
            clamped = dt > remaining
            if clamped:
                dt = remaining
            z_try = z - dt * g
            l_try = _loss_eval(objective, z_try, t + dt)
            state.model_calls += 1
            if l_try < l_cur:
                accepted = True
                break
            if clamped:
                # Same clamped dt would repeat; jump to the first m below it.
                while (cfg.beta ** (m + 1)) * s > remaining and m <= cfg.backtrack_cap:
                    m += 1
            m += 1
        if not accepted:
            state.stalled = True
            break

        trace.ts.append(t)
        trace.zs.append(z.copy())
        trace.dts.append(dt)
        trace.grads.append(g)
        z, t = z_try, t + dt
        state.loss_history.append((t, l_try))
        improvement = (l_cur - l_try) / max(l_cur, 1e-12)
        l_cur = l_try
        if improvement < cfg.early_stop_tol:
            state.early_stopped = True
            break
        if t >= cfg.tau:
            break
        s = min(max(cfg.kappa * s, cfg.s0), cfg.s_max)
        l_cur, g = _grad_eval(objective, z, t)
        state.model_calls += 1

    trace.ts.append(t)
    trace.zs.append(z.copy())
    trace.complete = True
    state.z = z
    state.t = t
    return state, trace


# ---------------------------------------------------------------------------
# Decoder-bound entry points
# ---------------------------------------------------------------------------

_SOLVE = {
    SolverKind.RK4_FIXED: integrate_rk4,
    SolverKind.NESTEROV2: integrate_nesterov,
    SolverKind.AMD: integrate_amd,
}


def solve_rk4_fixed(y, theta: DecoderParams, cfg: FlowConfig,
                    kind: LossKind = LossKind.CROSS_ENTROPY):
    if cfg.solver != SolverKind.RK4_FIXED:
        raise ValueError("config selects a different solver")
    return encode_sample(y, theta, cfg, kind)


def solve_nesterov(y, theta: DecoderParams, cfg: FlowConfig,
                   kind: LossKind = LossKind.CROSS_ENTROPY):
    if cfg.solver != SolverKind.NESTEROV2:
        raise ValueError("config selects a different solver")
    return encode_sample(y, theta, cfg, kind)


def solve_amd(y, theta: DecoderParams, cfg: FlowConfig,
              kind: LossKind = LossKind.CROSS_ENTROPY):
    if cfg.solver != SolverKind.AMD:
        raise ValueError("config selects a different solver")
    return encode_sample(y, theta, cfg, kind)


def encode_sample(y, theta: DecoderParams, cfg: FlowConfig,
                  kind: LossKind = LossKind.CROSS_ENTROPY):
    """One flow solve with the solver selected by the config."""
    obj = reconstruction_objective(y, theta, kind)
    state, trace = _SOLVE[cfg.solver](obj, _default_z0(cfg, theta.latent_dim), cfg)
    trace.theta_version = tuple(id(t) for t in theta.tensors())
    return state, trace


def encode_batch(batch, theta: DecoderParams, cfg: FlowConfig,
                 kind: LossKind = LossKind.CROSS_ENTROPY
                 ) -> list[tuple[FlowState, FlowTrace]]:
    """Independent per-sample flows, order-aligned with the batch."""
    samples = list(batch)
    if len(samples) == 0:
        raise ValueError("encode_batch: empty batch")
    results = []
    for i, y in enumerate(samples):
        try:
            results.append(encode_sample(y, theta, cfg, kind))
        except FlowError as exc:
            raise FlowError(f"sample {i}: {exc}") from exc
    return results


def total_model_calls(results) -> int:
    return sum(state.model_calls for state, _ in results)


def dump_trace_csv(path, results, sample_ids=None) -> None:
    """Solver diagnostics: one row per slice with loss and gradient norm."""
    if sample_ids is None:
        sample_ids = list(range(len(results)))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "step", "t", "dt", "loss", "grad_norm"])
        for sid, (state, trace) in zip(sample_ids, results):
            losses = dict(
                (round(t, 12), l) for t, l in state.loss_history)
            for k in range(trace.n_slices):
                t = trace.ts[k]
                writer.writerow([
                    sid, k, f"{t:.9g}", f"{trace.dts[k]:.9g}",
                    f"{losses.get(round(t, 12), float('nan')):.9g}",
                    f"{np.linalg.norm(trace.grads[k]):.9g}",
                ])
