"""Decoder updates from flow-encoded batches, plus the conventional AE path.

Two ways to differentiate the per-sample loss l(y, D(z*, theta)) w.r.t. the
decoder parameters:

* ``APPROXIMATE`` ignores the dependence of z* on theta and takes the
  partial derivative at the flow endpoint (cheap, one model call).
* ``FULL`` integrates the costate lambda backward along the cached forward
  trajectory and accumulates the mixed-derivative integral correction.

The backward system implemented here is the self-consistent one

    lambda(tau) = -grad_z l(z(tau)),   dlambda/dt = +alpha(t) H lambda,
    d_theta J   = partial_theta l + int_0^tau alpha lambda^T d_theta grad_z l dt,

verified against closed-form linear flows and end-to-end finite
differences (see tests).

Model-call accounting: one unit per decoder evaluation (forward build, with
or without its first-order gradient); a second-order sweep (hvp or
mixed-vjp) adds two units since it re-traverses a graph roughly twice the
decoder's size.  The flow itself counts 4 units per RK4 slice.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .flow import (FlowConfig, FlowTrace, SolverKind, _alpha_fn,
                   encode_sample, reconstruction_objective)
from .models import DecoderParams, EncoderParams, LossKind, encode, \
    reconstruction_loss
from .data import Dataset, SamplerState


class AdjointMode(Enum):
    FULL = "full"
    APPROXIMATE = "approx"


class TrainDivergedError(RuntimeError):
    pass


class OptimizerKind(Enum):
    RMSPROP = "rmsprop"
    ADAM = "adam"


@dataclass
class OptimizerState:
    kind: OptimizerKind
    lr: float
    alpha: float = 0.9          # rmsprop decay
    beta1: float = 0.9          # adam
    beta2: float = 0.999
    eps: float = 1e-6
    sq_avg: list = field(default_factory=list)
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step_count: int = 0


def rmsprop_state(params: list[Tensor], lr: float = 5e-4, alpha: float = 0.9,
                  eps: float = 1e-6) -> OptimizerState:
    """Momentum-free RMSprop with the reference hyperparameters."""
    return OptimizerState(OptimizerKind.RMSPROP, lr, alpha=alpha, eps=eps,
                          sq_avg=[np.zeros_like(p.data) for p in params])


def adam_state(params: list[Tensor], lr: float = 1e-3, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8) -> OptimizerState:
    return OptimizerState(OptimizerKind.ADAM, lr, beta1=beta1, beta2=beta2,
                          eps=eps,
                          m=[np.zeros_like(p.data) for p in params],
                          v=[np.zeros_like(p.data) for p in params])


def optimizer_step(opt: OptimizerState, params: list[Tensor],
                   grads: list[np.ndarray]) -> list[Tensor]:
    """One update; returns fresh parameter tensors (inputs stay immutable)."""
    if len(params) != len(grads):
        raise ValueError("params/grads length mismatch")
    for p, g in zip(params, grads):
        if p.data.shape != g.shape:
            raise ValueError(f"shape mismatch: param {p.data.shape} vs "
                             f"grad {g.shape}")
    opt.step_count += 1
    out = []
    if opt.kind == OptimizerKind.RMSPROP:
        for i, (p, g) in enumerate(zip(params, grads)):
            opt.sq_avg[i] = opt.alpha * opt.sq_avg[i] + (1 - opt.alpha) * g * g
            step = opt.lr * g / (np.sqrt(opt.sq_avg[i]) + opt.eps)
            out.append(Tensor(p.data - step, requires_grad=True))
    else:
        t = opt.step_count
        bc1 = 1.0 - opt.beta1 ** t
        bc2 = 1.0 - opt.beta2 ** t
        for i, (p, g) in enumerate(zip(params, grads)):
            opt.m[i] = opt.beta1 * opt.m[i] + (1 - opt.beta1) * g
            opt.v[i] = opt.beta2 * opt.v[i] + (1 - opt.beta2) * g * g
            step = opt.lr * (opt.m[i] / bc1) / (np.sqrt(opt.v[i] / bc2) + opt.eps)
            out.append(Tensor(p.data - step, requires_grad=True))
    return out


# ---------------------------------------------------------------------------
# Parameter gradients
# ---------------------------------------------------------------------------

def grad_theta_approximate(y, zstar: np.ndarray, theta: DecoderParams,
                           kind: LossKind = LossKind.CROSS_ENTROPY
                           ) -> tuple[list[np.ndarray], int]:
    """partial_theta l(y, D(z*, theta)) with z* held fixed; one model call."""
    thetas = theta.tensors()
    with dc.recording():
        z = dc.constant(zstar)
        loss = reconstruction_loss(y, z, theta, kind)
        gs = dc.grad(loss, thetas)
    grads = [g.data for g in gs]
    for g, p in zip(grads, thetas):
        if not np.isfinite(g).all():
            raise TrainDivergedError(
                f"non-finite parameter gradient (block shape {p.shape})")
    return grads, 1


def full_adjoint_gradient(objective, thetas: list[Tensor], trace: FlowTrace,
                          alpha_fn, quadrature: str = "trapezoid",
                          costate_out: list | None = None
                          ) -> tuple[list[np.ndarray], int]:
    """Total d/d theta of the endpoint loss along a cached trajectory.

    ``objective`` maps a latent Tensor to the taped loss and closes over
    ``thetas``.  The costate is advanced backward with RK4 on each cached
    slice (latent linearly interpolated inside a slice); the integral term
    uses the named quadrature on the grid points.  If ``costate_out`` is a
    list, (t, lambda) pairs are appended in backward order.
    """
    if not trace.complete:
        raise ValueError("full adjoint needs a complete flow trace")
    if quadrature not in ("trapezoid", "rectangle"):
        raise ValueError(f"unknown quadrature {quadrature!r}")
    calls = 0
    n = trace.n_slices
    ts, zs = trace.ts, trace.zs

    # Terminal condition and the partial derivative, from one shared graph.
    with dc.recording():
        z_end = Tensor(zs[-1], requires_grad=True)
        loss = objective(z_end)
        gs = dc.grad(loss, [z_end] + thetas)
    calls += 1
    lam = -gs[0].data
    total = [g.data.copy() for g in gs[1:]]
    if costate_out is not None:
        costate_out.append((ts[-1], lam.copy()))

    def mixed_at(z_val, lam_val):
        nonlocal calls
        with dc.recording():
            zt = Tensor(z_val, requires_grad=True)
            lt = objective(zt)
            ms = dc.mixed_vjp(lt, zt, thetas, dc.constant(lam_val))
        calls += 3
        return [m.data for m in ms]

    def hvp_at(z_val, lam_val):
        nonlocal calls
        with dc.recording():
            zt = Tensor(z_val, requires_grad=True)
            lt = objective(zt)
            hv = dc.hvp(lt, zt, dc.constant(lam_val))
        calls += 3
        return hv.data

    m_right = mixed_at(zs[-1], lam) if quadrature == "trapezoid" else None

    for j in range(n - 1, -1, -1):
        t_hi, t_lo = ts[j + 1], ts[j]
        dt = trace.dts[j]
        h = t_lo - t_hi  # negative
        z_lo, z_hi = zs[j], zs[j + 1]

        def z_at(t):
            w = 0.0 if dt == 0.0 else (t - t_lo) / dt
            return z_lo + w * (z_hi - z_lo)

        def rhs(t, lam_val):
            return alpha_fn(t) * hvp_at(z_at(t), lam_val)

        if quadrature == "rectangle":
            total = [acc + dt * alpha_fn(t_hi) * m for acc, m in
                     zip(total, mixed_at(z_hi, lam))]

        k1 = rhs(t_hi, lam)
        k2 = rhs(t_hi + 0.5 * h, lam + 0.5 * h * k1)
        k3 = rhs(t_hi + 0.5 * h, lam + 0.5 * h * k2)
        k4 = rhs(t_lo, lam + h * k3)
        lam = lam + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if costate_out is not None:
            costate_out.append((t_lo, lam.copy()))

        if quadrature == "trapezoid":
            m_left = mixed_at(z_lo, lam)
            total = [acc + 0.5 * dt * (alpha_fn(t_lo) * ml
                                       + alpha_fn(t_hi) * mr)
                     for acc, ml, mr in zip(total, m_left, m_right)]
            m_right = m_left

    return total, calls


def grad_theta_full_adjoint(y, trace: FlowTrace, theta: DecoderParams,
                            cfg: FlowConfig,
                            kind: LossKind = LossKind.CROSS_ENTROPY,
                            quadrature: str = "trapezoid"
                            ) -> tuple[list[np.ndarray], int]:
    """Full-adjoint total derivative for a decoder reconstruction loss."""
    if getattr(trace, "theta_version", None) is not None and \
            trace.theta_version != theta_version(theta):
        raise ValueError("trace/theta mismatch: decoder parameters changed "
                         "since the forward flow")
    objective = reconstruction_objective(y, theta, kind)
    alpha_fn = _alpha_fn(cfg) if cfg.solver != SolverKind.AMD else (lambda t: 1.0)
    grads, calls = full_adjoint_gradient(objective, theta.tensors(), trace,
                                         alpha_fn, quadrature)
    for g in grads:
        if not np.isfinite(g).all():
            raise TrainDivergedError("non-finite full-adjoint gradient")
    return grads, calls


def theta_version(theta: DecoderParams) -> tuple:
    """Cheap identity fingerprint: optimizer steps swap tensor objects."""
    return tuple(id(t) for t in theta.tensors())


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------

@dataclass
class MetricsRow:
    wall_ms: float
    iteration: int
    images_seen: int
    split: str
    loss: float
    model_calls: int


@dataclass
class TrainSchedule:
    iterations: int
    batch_size: int = 32
    validate_every: int = 20
    val_size: int = 64
    divergence_factor: float = 10.0


def schedule_preset(name: str, n_train: int, batch_size: int = 32
                    ) -> TrainSchedule:
    """'paper-gfe' trains one epoch; 'paper-ae' trains twelve."""
    epochs = {"paper-gfe": 1, "paper-ae": 12}.get(name)
    if epochs is None:
        raise ValueError(f"unknown schedule preset {name!r}")
    iters = max(1, (epochs * n_train) // batch_size)
    return TrainSchedule(iterations=iters, batch_size=batch_size)


@dataclass
class TrainReport:
    metrics: list[MetricsRow]
    decoder: DecoderParams
    encoder: EncoderParams | None
    total_model_calls: int
    images_seen: int

    def final_val_loss(self) -> float:
        vals = [r.loss for r in self.metrics if r.split == "val"]
        if not vals:
            raise ValueError("no validation rows recorded")
        return vals[-1]


def write_metrics_csv(path, rows: list[MetricsRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["wall_ms", "iteration", "images_seen", "split", "loss",
                    "model_calls"])
        for r in rows:
            w.writerow([f"{r.wall_ms:.3f}", r.iteration, r.images_seen,
                        r.split, f"{r.loss:.9g}", r.model_calls])


class EvalMode(Enum):
    AE_ENCODER = "ae-encoder"
    GFE_FLOW = "gfe-flow"


def evaluate(ds: Dataset, decoder: DecoderParams, mode: EvalMode,
             cfg: FlowConfig | None = None,
             encoder: EncoderParams | None = None,
             kind: LossKind = LossKind.CROSS_ENTROPY,
             limit: int | None = None,
             warm_start_encoder: bool = False) -> tuple[float, int]:
    """Mean reconstruction loss over a split; returns (loss, model calls).

    GFE_FLOW re-encodes each sample with the flow (frozen parameters).
    With ``warm_start_encoder`` and an encoder available, the flow starts
    from the encoder's latent instead of zero, so it can only refine it.
    """
    if len(ds) == 0:
        raise ValueError("evaluate: empty split")
    n = len(ds) if limit is None else min(limit, len(ds))
    calls = 0
    total = 0.0
    if mode == EvalMode.AE_ENCODER:
        if encoder is None:
            raise ValueError("AE_ENCODER evaluation needs encoder parameters")
        for i in range(n):
            y = ds.images[i]
            z = encode(dc.constant(y), encoder)
            total += reconstruction_loss(y, z, decoder, kind).item()
            calls += 1
    else:
        cfg = cfg if cfg is not None else FlowConfig()
        for i in range(n):
            y = ds.images[i]
            sample_cfg = cfg
            if warm_start_encoder and encoder is not None:
                z0 = encode(dc.constant(y), encoder).data
                sample_cfg = replace(cfg, z0=z0)
            state, _ = encode_sample(y, decoder, sample_cfg, kind)
            calls += state.model_calls
            total += reconstruction_loss(
                y, dc.constant(state.z), decoder, kind).item()
            calls += 1
    return total / n, calls


def _validation_loss(val: Dataset, decoder, encoder, mode: EvalMode,
                     cfg, kind, size: int) -> tuple[float, int]:
    return evaluate(val, decoder, mode, cfg=cfg, encoder=encoder, kind=kind,
                    limit=size)


def train_gfe(train: Dataset, val: Dataset, decoder: DecoderParams,
              cfg: FlowConfig, mode: AdjointMode, opt: OptimizerState,
              schedule: TrainSchedule, rng: np.random.Generator,
              kind: LossKind = LossKind.CROSS_ENTROPY,
              quadrature: str = "trapezoid") -> TrainReport:
    """Flow-encode each batch sample, update theta per the adjoint mode."""
    if len(train) == 0:
        raise ValueError("empty training set")
    sampler = SamplerState(rng=rng, batch_size=schedule.batch_size)
    t0 = time.perf_counter()
    rows: list[MetricsRow] = []
    total_calls = 0
    params = decoder.tensors()

    val0, c = _validation_loss(val, decoder, None, EvalMode.GFE_FLOW, cfg,
                               kind, schedule.val_size)
    total_calls += c
    rows.append(MetricsRow((time.perf_counter() - t0) * 1e3, 0, 0, "val",
                           val0, total_calls))

    for it in range(1, schedule.iterations + 1):
        idx = sampler.sample(len(train))
        batch_grads = None
        batch_loss = 0.0
        for i in idx:
            y = train.images[i]
            state, trace = encode_sample(y, decoder, cfg, kind)
            total_calls += state.model_calls
            trace.theta_version = theta_version(decoder)
            if mode == AdjointMode.APPROXIMATE:
                gs, c = grad_theta_approximate(y, state.z, decoder, kind)
            else:
                gs, c = grad_theta_full_adjoint(y, trace, decoder, cfg, kind,
                                                quadrature)
            total_calls += c
            batch_loss += reconstruction_loss(
                y, dc.constant(state.z), decoder, kind).item()
            total_calls += 1
            if batch_grads is None:
                batch_grads = gs
            else:
                batch_grads = [a + b for a, b in zip(batch_grads, gs)]
        batch_grads = [g / len(idx) for g in batch_grads]
        params = optimizer_step(opt, params, batch_grads)
        decoder.replace_tensors(params)

        images_seen = it * schedule.batch_size
        rows.append(MetricsRow((time.perf_counter() - t0) * 1e3, it,
                               images_seen, "train",
                               batch_loss / len(idx), total_calls))
        if it % schedule.validate_every == 0 or it == schedule.iterations:
            vloss, c = _validation_loss(val, decoder, None, EvalMode.GFE_FLOW,
                                        cfg, kind, schedule.val_size)
            total_calls += c
            rows.append(MetricsRow((time.perf_counter() - t0) * 1e3, it,
                                   images_seen, "val", vloss, total_calls))
            if vloss > schedule.divergence_factor * max(val0, 1e-12):
                raise TrainDivergedError(
                    f"validation loss {vloss:.4g} exceeded "
                    f"{schedule.divergence_factor}x its initial value "
                    f"{val0:.4g} at iteration {it}")
    return TrainReport(rows, decoder, None, total_calls,
                       schedule.iterations * schedule.batch_size)


def train_ae(train: Dataset, val: Dataset, encoder: EncoderParams,
             decoder: DecoderParams, opt: OptimizerState,
             schedule: TrainSchedule, rng: np.random.Generator,
             kind: LossKind = LossKind.CROSS_ENTROPY) -> TrainReport:
    """Standard encoder+decoder loop with the same logging."""
    if len(train) == 0:
        raise ValueError("empty training set")
    if not encoder.matches_decoder(decoder):
        raise ValueError("encoder widths must mirror the decoder's")
    sampler = SamplerState(rng=rng, batch_size=schedule.batch_size)
    t0 = time.perf_counter()
    rows: list[MetricsRow] = []
    total_calls = 0
    params = encoder.tensors() + decoder.tensors()

    val0, c = _validation_loss(val, decoder, encoder, EvalMode.AE_ENCODER,
                               None, kind, schedule.val_size)
    total_calls += c
    rows.append(MetricsRow((time.perf_counter() - t0) * 1e3, 0, 0, "val",
                           val0, total_calls))

    ne = 2 * encoder.n_layers
    for it in range(1, schedule.iterations + 1):
        idx = sampler.sample(len(train))
        batch_grads = None
        batch_loss = 0.0
        for i in idx:
            y = train.images[i]
            with dc.recording():
                z = encode(dc.constant(y), encoder)
                loss = reconstruction_loss(y, z, decoder, kind)
                gs = dc.grad(loss, params)
            total_calls += 1
            batch_loss += loss.item()
            grads = [g.data for g in gs]
            if batch_grads is None:
                batch_grads = grads
            else:
                batch_grads = [a + b for a, b in zip(batch_grads, grads)]
        batch_grads = [g / len(idx) for g in batch_grads]
        params = optimizer_step(opt, params, batch_grads)
        encoder.replace_tensors(params[:ne])
        decoder.replace_tensors(params[ne:])

        images_seen = it * schedule.batch_size
        rows.append(MetricsRow((time.perf_counter() - t0) * 1e3, it,
                               images_seen, "train",
                               batch_loss / len(idx), total_calls))
        if it % schedule.validate_every == 0 or it == schedule.iterations:
            vloss, c = _validation_loss(val, decoder, encoder,
                                        EvalMode.AE_ENCODER, None, kind,
                                        schedule.val_size)
            total_calls += c
            rows.append(MetricsRow((time.perf_counter() - t0) * 1e3, it,
                                   images_seen, "val", vloss, total_calls))
            if vloss > schedule.divergence_factor * max(val0, 1e-12):
                raise TrainDivergedError(
                    f"validation loss {vloss:.4g} exceeded "
                    f"{schedule.divergence_factor}x its initial value "
                    f"{val0:.4g} at iteration {it}")
    return TrainReport(rows, decoder, encoder, total_calls,
                       schedule.iterations * schedule.batch_size)
