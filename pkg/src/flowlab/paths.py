"""Probability paths, training pairs and the two regression losses.

Conventions: ``x0`` is the source (noise, or a corrupted image in denoising
mode) and ``x1`` is the data sample. The linear path moves from ``x0`` at
t=0 to ``x1`` at t=1. The variance-preserving diffusion path is indexed by a
training step ``t_index`` in ``[0, T)`` with ``alpha_bar`` decreasing in the
index, so large indices are noisy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .models import Condition


class PathError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    num_train_steps: int
    beta: np.ndarray
    alpha_bar: np.ndarray = field(init=False, repr=False)
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if self.num_train_steps < 1 or beta.shape != (self.num_train_steps,):
            raise PathError("beta must have one entry per training step")
        if np.any(beta <= 0) or np.any(beta >= 1) or np.any(np.diff(beta) < 0):
            raise PathError("beta must lie in (0, 1) and be non-decreasing")
        alpha_bar = np.cumprod(1.0 - beta)
        if not (np.all(np.diff(alpha_bar) < 0) and 0 < alpha_bar[-1] and alpha_bar[0] < 1):
            raise PathError("alpha_bar must be strictly decreasing inside (0, 1)")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha_bar", alpha_bar)

    @classmethod
    def linear(cls, num_train_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        beta = np.linspace(beta_start, beta_end, num_train_steps)
        return cls(num_train_steps, beta, beta_start, beta_end)

    def to_dict(self) -> dict:
        return {"num_train_steps": self.num_train_steps, "beta_start": self.beta_start, "beta_end": self.beta_end}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls.linear(d["num_train_steps"], d["beta_start"], d["beta_end"])


@dataclass(frozen=True)
class PathSpec:
    kind: str
    schedule: NoiseSchedule | None = None

    def __post_init__(self):
        if self.kind == "linear_ot":
            if self.schedule is not None:
                raise PathError("linear_ot path takes no noise schedule")
        elif self.kind == "vp_diffusion":
            if self.schedule is None:
                raise PathError("vp_diffusion path needs a noise schedule")
        else:
            raise PathError(f"unknown path kind {self.kind!r}")

    @classmethod
    def linear_ot(cls) -> "PathSpec":
        return cls("linear_ot")

    @classmethod
    def vp_diffusion(cls, schedule: NoiseSchedule | None = None) -> "PathSpec":
        return cls("vp_diffusion", schedule or NoiseSchedule.linear())

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.schedule is not None:
            d["schedule"] = self.schedule.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PathSpec":
        sched = NoiseSchedule.from_dict(d["schedule"]) if d.get("schedule") else None
        return cls(d["kind"], sched)


@dataclass
class TrainingPair:
    """One regression example.

    For ``vp_diffusion`` pairs, ``x0`` holds the noise ``eps`` and ``t`` is
    the integer step index.
    """

    x0: np.ndarray
    x1: np.ndarray
    t: float
    cond: Condition | None = None

    def __post_init__(self):
        if np.shape(self.x0) != np.shape(self.x1):
            raise PathError(f"x0 {np.shape(self.x0)} and x1 {np.shape(self.x1)} differ in shape")


@dataclass
class TrainingBatch:
    """Stacked training pairs: ``x0``/``x1`` are (B, ...) and ``t`` is (B,)."""

    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    cond: Condition | None = None

    def __len__(self):
        return self.x0.shape[0]

    @classmethod
    def stack(cls, pairs) -> "TrainingBatch":
        pairs = list(pairs)
        if not pairs:
            raise PathError("empty batch")
        shapes = {np.shape(p.x0) for p in pairs}
        if len(shapes) != 1:
            raise PathError("all pairs in a batch must share one shape")
        cond = None
        with_cond = [p.cond for p in pairs if p.cond is not None]
        if with_cond:
            if len(with_cond) != len(pairs):
                raise PathError("either every pair carries a condition or none does")
            oh = [c.class_onehot for c in with_cond]
            mk = [c.mask for c in with_cond]
            cond = Condition(
                None if oh[0] is None else np.stack(oh),
                None if mk[0] is None else np.stack(mk),
            )
        return cls(
            np.stack([p.x0 for p in pairs]),
            np.stack([p.x1 for p in pairs]),
            np.array([p.t for p in pairs], dtype=np.float64),
            cond,
        )


def _as_batch(batch) -> TrainingBatch:
    if isinstance(batch, TrainingBatch):
        if len(batch) == 0:
            raise PathError("empty batch")
        return batch
    return TrainingBatch.stack(batch)


# ---------------------------------------------------------------------------
# path algebra


def ot_interpolate(x0, x1, t: float):
    """Point ``t * x1 + (1 - t) * x0`` on the straight path."""
    x0, x1 = np.asarray(x0, dtype=np.float64), np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise PathError(f"shape mismatch {x0.shape} vs {x1.shape}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise PathError(f"t must lie in [0, 1], got {t}")
    if t_arr.ndim == 1:
        t_arr = t_arr.reshape((-1,) + (1,) * (x0.ndim - 1))
    return t_arr * x1 + (1.0 - t_arr) * x0


def target_velocity(x0, x1):
    x0, x1 = np.asarray(x0, dtype=np.float64), np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise PathError(f"shape mismatch {x0.shape} vs {x1.shape}")
    return x1 - x0


def diffusion_forward(x1, eps, t_index, schedule: NoiseSchedule):
    """``sqrt(alpha_bar) * x1 + sqrt(1 - alpha_bar) * eps`` at the given step(s)."""
    x1, eps = np.asarray(x1, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if x1.shape != eps.shape:
        raise PathError(f"shape mismatch {x1.shape} vs {eps.shape}")
    idx = np.asarray(t_index)
    if np.any(idx < 0) or np.any(idx >= schedule.num_train_steps):
        raise PathError(f"t_index out of range [0, {schedule.num_train_steps})")
    ab = schedule.alpha_bar[idx]
    if ab.ndim == 1:
        ab = ab.reshape((-1,) + (1,) * (x1.ndim - 1))
    return np.sqrt(ab) * x1 + np.sqrt(1.0 - ab) * eps


def model_time(path: PathSpec, t):
    """Time fed to the network: ``t`` itself, or ``t_index / T`` for diffusion."""
    if path.kind == "vp_diffusion":
        return np.asarray(t, dtype=np.float64) / path.schedule.num_train_steps
    return np.asarray(t, dtype=np.float64)


def gaussian_velocity_oracle(x, t):
    """Minimiser of the flow matching loss for independent N(0, I) source and target.

    With ``x_t = t x1 + (1 - t) x0``, ``E[x1 - x0 | x_t = x] = (2t - 1) / (2t^2 - 2t + 1) * x``.
    """
    t = np.asarray(t, dtype=np.float64)
    return (2 * t - 1) / (2 * t * t - 2 * t + 1) * np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# losses


def _predict(model, x, t, cond):
    if hasattr(model, "forward"):
        return model.forward(nx.Tensor(x), t, cond)
    return nx.as_tensor(model(x, t, cond))


def fm_loss(model, batch) -> nx.Tensor:
    """Mean squared error between predicted velocity and ``x1 - x0``."""
    b = _as_batch(batch)
    xt = ot_interpolate(b.x0, b.x1, b.t)
    target = nx.Tensor(target_velocity(b.x0, b.x1))
    return nx.mean(nx.square(_predict(model, xt, b.t, b.cond) - target))


def diffusion_loss(model, batch, schedule: NoiseSchedule | None) -> nx.Tensor:
    """Mean squared error of the noise prediction; ``batch.x0`` holds the noise."""
    if schedule is None:
        raise PathError("diffusion loss needs a noise schedule")
    b = _as_batch(batch)
    idx = b.t.astype(np.int64)
    xt = diffusion_forward(b.x1, b.x0, idx, schedule)
    t_in = idx / schedule.num_train_steps
    return nx.mean(nx.square(_predict(model, xt, t_in, b.cond) - nx.Tensor(b.x0)))


def path_loss(model, batch, path: PathSpec) -> nx.Tensor:
    if path.kind == "linear_ot":
        return fm_loss(model, batch)
    return diffusion_loss(model, batch, path.schedule)


# ---------------------------------------------------------------------------
# sampling pairs


def sample_training_batch(
    dataset,
    path: PathSpec,
    rng: np.random.Generator,
    batch_size: int | None = None,
    *,
    indices=None,
    conditioning: str = "none",
    denoise: bool = False,
) -> TrainingBatch:
    """Draw a batch of training pairs.

    Data indices come from ``indices`` when given, else uniformly at random.
    With ``denoise`` the source is the dataset's paired noisy image instead of
    Gaussian noise (linear path only).
    """
    n = len(dataset)
    if n == 0:
        raise PathError("dataset is empty")
    if indices is None:
        if batch_size is None or batch_size < 1:
            raise PathError("batch_size must be >= 1")
        indices = rng.integers(0, n, size=batch_size)
    indices = np.asarray(indices, dtype=np.int64)
    B = indices.size
    x1 = dataset.samples[indices]
    if path.kind == "linear_ot":
        if denoise:
            if getattr(dataset, "noisy", None) is None:
                raise PathError("denoising needs a dataset with paired noisy samples")
            x0 = dataset.noisy[indices]
        else:
            x0 = rng.standard_normal(x1.shape)
        t = rng.uniform(0.0, 1.0, size=B)
    else:
        if denoise:
            raise PathError("denoising is defined for the linear path only")
        x0 = rng.standard_normal(x1.shape)
        t = rng.integers(0, path.schedule.num_train_steps, size=B).astype(np.float64)
    return TrainingBatch(x0, x1, t, dataset_condition(dataset, indices, conditioning))


def dataset_condition(dataset, indices, conditioning: str) -> Condition | None:
    if conditioning == "none":
        return None
    onehot = mask = None
    if "class" in conditioning:
        if dataset.labels is None:
            raise PathError("class conditioning needs labels")
        onehot = np.eye(dataset.num_classes)[dataset.labels[indices]]
    if "mask" in conditioning:
        if dataset.masks is None:
            raise PathError("mask conditioning needs masks")
        mask = dataset.masks[indices]
    return Condition(onehot, mask)


def sample_training_pair(dataset, path: PathSpec, rng: np.random.Generator, **kwargs) -> TrainingPair:
    b = sample_training_batch(dataset, path, rng, 1, **kwargs)
    t = float(b.t[0]) if path.kind == "linear_ot" else int(b.t[0])
    return TrainingPair(b.x0[0], b.x1[0], t, None if b.cond is None else b.cond.take(0))
