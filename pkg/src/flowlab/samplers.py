"""ODE solvers for flow matching and DDPM / DDIM updates for diffusion.

All samplers work on batches: ``x_init`` is (B, *shape). A "model" is either
a :class:`~flowlab.models.ConditionedModel` or any callable
``f(x, t, cond) -> array`` of the same shape as ``x``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .paths import NoiseSchedule

FAMILIES = ("euler", "heun", "ddpm_ancestral", "ddim")
ODE_FAMILIES = ("euler", "heun")
DIFFUSION_FAMILIES = ("ddpm_ancestral", "ddim")


class SamplerError(RuntimeError):
    pass


@dataclass
class SamplerConfig:
    family: str = "euler"
    steps: int = 10
    seed: int = 0
    record_trajectory: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise SamplerError(f"unknown sampler family {self.family!r}")
        if int(self.steps) < 1:
            raise SamplerError("steps must be >= 1")
        self.steps = int(self.steps)

    @property
    def path_kind(self) -> str:
        return "linear_ot" if self.family in ODE_FAMILIES else "vp_diffusion"


@dataclass
class Trajectory:
    times: np.ndarray
    states: list = field(default_factory=list)

    def to_csv(self, path) -> None:
        """One row per (sample, step): ``sample_id, step, t, x0, x1, ...``."""
        stacked = np.stack(self.states)  # (steps + 1, B, ...)
        K, B = stacked.shape[:2]
        flat = stacked.reshape(K, B, -1)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "step", "t"] + [f"x{i}" for i in range(flat.shape[2])])
            for b in range(B):
                for k in range(K):
                    w.writerow([b, k, repr(float(self.times[k]))] + [repr(float(v)) for v in flat[k, b]])


def _field(model):
    return model.predict if hasattr(model, "predict") else model


def _check(x, step):
    if not np.all(np.isfinite(x)):
        raise SamplerError(f"non-finite state at step {step}")


def euler_solve(model, x_init, steps: int, cond=None, record_trajectory: bool = False):
    """Forward Euler on ``dx/dt = v(x, t)`` over a uniform grid on [0, 1]."""
    if steps < 1:
        raise SamplerError("steps must be >= 1")
    f = _field(model)
    x = np.array(x_init, dtype=np.float64)
    dt = 1.0 / steps
    states = [x.copy()] if record_trajectory else None
    for k in range(steps):
        x = x + dt * f(x, k * dt, cond)
        _check(x, k)
        if record_trajectory:
            states.append(x.copy())
    traj = Trajectory(np.linspace(0, 1, steps + 1), states) if record_trajectory else None
    return x, traj


def heun_solve(model, x_init, steps: int, cond=None, record_trajectory: bool = False):
    """Explicit trapezoidal rule: Euler predictor, averaged-slope corrector."""
    if steps < 1:
        raise SamplerError("steps must be >= 1")
    f = _field(model)
    x = np.array(x_init, dtype=np.float64)
    dt = 1.0 / steps
    states = [x.copy()] if record_trajectory else None
    for k in range(steps):
        t = k * dt
        v0 = f(x, t, cond)
        pred = x + dt * v0
        x = x + 0.5 * dt * (v0 + f(pred, t + dt, cond))
        _check(x, k)
        if record_trajectory:
            states.append(x.copy())
    traj = Trajectory(np.linspace(0, 1, steps + 1), states) if record_trajectory else None
    return x, traj


def diffusion_indices(num_train_steps: int, steps: int) -> np.ndarray:
    """Evenly spaced, strictly decreasing step indices from T-1 down to 0."""
    if steps > num_train_steps:
        raise SamplerError(f"steps ({steps}) exceeds training steps ({num_train_steps})")
    if steps < 1:
        raise SamplerError("steps must be >= 1")
    if steps == 1:
        return np.array([num_train_steps - 1])
    return np.round(np.linspace(num_train_steps - 1, 0, steps)).astype(np.int64)


def _diffusion_loop(model, schedule: NoiseSchedule, x_init, steps, cond, update, record_trajectory):
    f = _field(model)
    T = schedule.num_train_steps
    idx = diffusion_indices(T, steps)
    ab = schedule.alpha_bar
    x = np.array(x_init, dtype=np.float64)
    states = [x.copy()] if record_trajectory else None
    for k, i in enumerate(idx):
        a_t = ab[i]
        a_s = ab[idx[k + 1]] if k + 1 < len(idx) else 1.0
        eps = f(x, i / T, cond)
        x1_hat = (x - np.sqrt(1 - a_t) * eps) / np.sqrt(a_t)
        x = update(x, eps, x1_hat, a_t, a_s, last=k + 1 == len(idx))
        _check(x, k)
        if record_trajectory:
            states.append(x.copy())
    traj = None
    if record_trajectory:
        times = np.concatenate([1.0 - (idx + 1) / T, [1.0]])
        traj = Trajectory(times, states)
    return x, traj


def ddim_sample(model, schedule: NoiseSchedule, x_init, steps: int, cond=None, record_trajectory: bool = False):
    """Deterministic DDIM (eta = 0); returns ``(x, trajectory or None)``."""

    def update(x, eps, x1_hat, a_t, a_s, last):
        return np.sqrt(a_s) * x1_hat + np.sqrt(1 - a_s) * eps

    return _diffusion_loop(model, schedule, x_init, steps, cond, update, record_trajectory)


def ddpm_sample(
    model, schedule: NoiseSchedule, x_init, steps: int, cond=None, rng=None, record_trajectory: bool = False
):
    """Ancestral sampling through the posterior q(x_s | x_t, x1_hat) on a strided grid.

    Fresh Gaussian noise is added at every step except the last.
    """
    if rng is None:
        rng = np.random.default_rng(0)

    def update(x, eps, x1_hat, a_t, a_s, last):
        beta = 1.0 - a_t / a_s
        mean = (np.sqrt(a_s) * beta / (1 - a_t)) * x1_hat + (np.sqrt(a_t / a_s) * (1 - a_s) / (1 - a_t)) * x
        if last:
            return mean
        var = (1 - a_s) / (1 - a_t) * beta
        return mean + np.sqrt(var) * rng.standard_normal(x.shape)

    return _diffusion_loop(model, schedule, x_init, steps, cond, update, record_trajectory)


def sample(model, config: SamplerConfig, x_init, cond=None, schedule: NoiseSchedule | None = None, path_kind=None):
    """Dispatch on ``config.family``; checks it against the model's training path."""
    if path_kind is not None and path_kind != config.path_kind:
        raise SamplerError(f"{config.family} sampler cannot run a {path_kind} model")
    rec = config.record_trajectory
    if config.family == "euler":
        return euler_solve(model, x_init, config.steps, cond, rec)
    if config.family == "heun":
        return heun_solve(model, x_init, config.steps, cond, rec)
    if schedule is None:
        raise SamplerError(f"{config.family} needs the model's noise schedule")
    if config.family == "ddim":
        return ddim_sample(model, schedule, x_init, config.steps, cond, rec)
    rng = np.random.default_rng([config.seed, 1])
    return ddpm_sample(model, schedule, x_init, config.steps, cond, rng, rec)


def straightness_per_sample(traj: Trajectory) -> np.ndarray:
    """``1 - chord / path length`` for each sample; 0 for a zero-length path."""
    if len(traj.states) < 3:
        raise SamplerError("straightness needs at least 3 states")
    s = np.stack(traj.states)
    s = s.reshape(s.shape[0], s.shape[1], -1)
    seg = np.linalg.norm(np.diff(s, axis=0), axis=2).sum(0)
    chord = np.linalg.norm(s[-1] - s[0], axis=1)
    out = np.zeros_like(seg)
    nz = seg > 0
    out[nz] = 1.0 - chord[nz] / seg[nz]
    return out


def straightness(traj: Trajectory) -> float:
    """Mean straightness over the samples in ``traj`` (0 = straight chord)."""
    return float(np.mean(straightness_per_sample(traj)))
