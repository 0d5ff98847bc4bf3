"""Latent-space phase retrieval by restarted gradient descent.

Given magnitude measurements ``y`` of an unknown image and a generator ``G``,
the solver minimizes

    f(z) = || y - |A G(z)| ||_2^2

over the latent vector ``z`` by fixed-step gradient descent from ``R``
independent random initializations; the restart with the smallest final
residual wins (ties go to the lowest restart index). The gradient threads the
measurement adjoint and the generator's vector-Jacobian product:

    u = A G(z),  r = |u| - y,
    grad f(z) = 2 * J_G(z)^T Re( A^H (r * u/|u|) ),

with the convention u/|u| := 0 where u = 0, so the objective's subgradient is
well defined everywhere.

The same machinery projects an arbitrary image onto the generator's range by
swapping in the objective ``|| G(z) - x_target ||_2^2``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import generator as gen
from .errors import ConfigError, DimensionError, SolveFailed

# chains whose loss exceeds this (or goes non-finite) are flagged diverged
DIVERGENCE_LIMIT = 1e12

_PRIORS = ("standard_normal", "uniform")
_PRECISIONS = ("f32", "f64")


@dataclass(frozen=True)
class SolverConfig:
    """Descent hyperparameters.

    ``restarts``, ``iterations`` and ``step_size`` default to the standard
    recipe: 10 restarts of 10000 fixed-size steps at 0.001. ``stop_tol`` > 0
    enables an early exit once the residual drops below it (off by default so
    the step count is exactly ``iterations``). ``line_search`` replaces the
    fixed step with backtracking halving, useful when the operator scaling
    makes 0.001 unstable. ``workers`` > 1 runs restarts on a thread pool;
    results are identical to the sequential order because each restart owns
    its RNG stream and the reduction is an argmin keyed by restart index.
    """

    restarts: int = 10
    iterations: int = 10000
    step_size: float = 0.001
    latent_prior: str = "standard_normal"
    seed: int = 0
    precision: str = "f64"
    loss_trace_stride: int = 100
    stop_tol: float = 0.0
    line_search: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.restarts < 1:
            raise ConfigError(f"restarts must be >= 1, got {self.restarts}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if not self.step_size > 0:
            raise ConfigError(f"step_size must be > 0, got {self.step_size}")
        if self.latent_prior not in _PRIORS:
            raise ConfigError(f"latent_prior must be one of {_PRIORS}, "
                              f"got {self.latent_prior!r}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        if self.precision not in _PRECISIONS:
            raise ConfigError(f"precision must be one of {_PRECISIONS}, "
                              f"got {self.precision!r}")
        if self.loss_trace_stride < 1:
            raise ConfigError("loss_trace_stride must be >= 1")
        if self.stop_tol < 0:
            raise ConfigError(f"stop_tol must be >= 0, got {self.stop_tol}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32

    @property
    def cdtype(self):
        return np.complex128 if self.precision == "f64" else np.complex64


@dataclass(frozen=True)
class RestartResult:
    """Outcome of one descent chain.

    ``residual`` is the objective value at ``z_final`` and ``x_hat`` is the
    generator output there. ``diverged`` chains (non-finite loss or loss above
    ``DIVERGENCE_LIMIT``) report their last healthy iterate and are excluded
    when picking the best restart.
    """

    index: int
    z_final: np.ndarray
    x_hat: np.ndarray
    residual: float
    loss_trace: tuple = field(repr=False, default=())
    diverged: bool = False


def _check_instance(model, op, y):
    n = int(np.prod(model.output_shape))
    if op.n != n:
        raise DimensionError(
            f"operator expects inputs of length {op.n}, generator emits {n} pixels"
        )
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.shape[0] != op.m:
        raise DimensionError(f"y has length {y.shape[0]}, operator has m={op.m}")
    return y


def _phase(u, mag):
    # u/|u| with the zero-magnitude entries mapped to 0, not NaN
    safe = np.where(mag == 0.0, 1.0, mag)
    return np.where(mag == 0.0, 0.0 + 0.0j, u / safe)


def loss(model, op, y, z):
    """Measurement-space objective ``|| y - |A G(z)| ||_2^2``."""
    y = _check_instance(model, op, y)
    x = gen.forward(model, z)
    u = op.apply(x.ravel().astype(np.complex128))
    r = np.abs(u) - y
    return float(np.dot(r, r))


def grad_loss(model, op, y, z):
    """Gradient of :func:`loss` with respect to the latent vector."""
    y = _check_instance(model, op, y)
    x, tape = gen.forward_with_tape(model, z)
    u = op.apply(x.ravel().astype(np.complex128))
    mag = np.abs(u)
    r = mag - y
    cot = np.real(op.adjoint(r * _phase(u, mag))).reshape(model.output_shape)
    return 2.0 * gen.backprop(model, tape, cot.astype(model.dtype))


def _descend(objective, z0, config):
    """One chain of fixed-step (or backtracking) gradient descent.

    Returns (z, value, trace, diverged); on divergence z is the last iterate
    whose objective was finite.
    """
    z = np.array(z0, copy=True)
    val, grad = objective(z)
    trace = []
    for t in range(config.iterations):
        if t % config.loss_trace_stride == 0:
            trace.append(float(val))
        if not np.isfinite(val) or val > DIVERGENCE_LIMIT:
            return z, float(val), trace, True
        if val < config.stop_tol:
            break
        if config.line_search:
            step = config.step_size
            accepted = False
            for _ in range(30):
                z_try = z - step * grad
                if np.all(np.isfinite(z_try)):
                    val_try, grad_try = objective(z_try)
                    if np.isfinite(val_try) and val_try < val:
                        z, val, grad = z_try, val_try, grad_try
                        accepted = True
                        break
                step *= 0.5
            if not accepted:
                break  # no descent at any tried step: stationary enough
        else:
            z_new = z - config.step_size * grad
            if not np.all(np.isfinite(z_new)):
                return z, float(val), trace, True
            val_new, grad_new = objective(z_new)
            if not np.isfinite(val_new):
                return z, float(val), trace, True
            z, val, grad = z_new, val_new, grad_new
    trace.append(float(val))
    return z, float(val), trace, val > DIVERGENCE_LIMIT or not np.isfinite(val)


def _draw_latent(config, k, restart_index):
    rng = np.random.default_rng([config.seed, restart_index])
    if config.latent_prior == "standard_normal":
        z0 = rng.standard_normal(k)
    else:
        z0 = rng.uniform(-1.0, 1.0, k)
    return z0.astype(config.dtype)


def _run_restarts(model, objective, config):
    def one(j):
        z0 = _draw_latent(config, model.input_dim, j)
        z, val, trace, diverged = _descend(objective, z0, config)
        return RestartResult(index=j, z_final=z, x_hat=gen.forward(model, z),
                             residual=val, loss_trace=tuple(trace),
                             diverged=diverged)

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(one, range(config.restarts)))
    else:
        results = [one(j) for j in range(config.restarts)]
    healthy = [r for r in results if not r.diverged]
    if not healthy:
        raise SolveFailed(f"all {config.restarts} restarts diverged")
    best = min(healthy, key=lambda r: (r.residual, r.index))
    return best, results


def solve(model, op, y, config: SolverConfig = SolverConfig()):
    """Recover a latent vector explaining magnitude measurements ``y``.

    Runs ``config.restarts`` independent descent chains (restart j draws its
    start from a stream seeded by (config.seed, j)) and returns the
    lowest-residual chain plus the full per-restart list.
    """
    y = _check_instance(model, op, y).astype(config.dtype)
    model = model.astype(config.dtype)
    op = op.astype(config.cdtype)

    def objective(z):
        x, tape = gen.forward_with_tape(model, z)
        u = op.apply(x.ravel().astype(config.cdtype))
        mag = np.abs(u)
        r = mag - y
        val = float(np.dot(r, r))
        cot = np.real(op.adjoint(r * _phase(u, mag))).reshape(model.output_shape)
        grad = 2.0 * gen.backprop(model, tape, cot.astype(config.dtype))
        return val, grad

    return _run_restarts(model, objective, config)


def project_to_range(model, x_target, config: SolverConfig = SolverConfig()):
    """Closest generator output to ``x_target`` in squared l2 distance.

    Same restart machinery as :func:`solve`; the returned residual is
    ``|| G(z*) - x_target ||_2^2``.
    """
    x_target = np.asarray(x_target)
    if x_target.shape != model.output_shape:
        raise DimensionError(
            f"target shape {x_target.shape} != generator output {model.output_shape}"
        )
    model = model.astype(config.dtype)
    x_target = x_target.astype(config.dtype)

    def objective(z):
        x, tape = gen.forward_with_tape(model, z)
        d = x - x_target
        val = float(np.sum(d * d))
        grad = 2.0 * gen.backprop(model, tape, d)
        return val, grad

    best, _ = _run_restarts(model, objective, config)
    return best


def with_defaults(config=None, **overrides):
    """Convenience: clone ``config`` (or the defaults) with field overrides."""
    base = config if config is not None else SolverConfig()
    return replace(base, **overrides)
