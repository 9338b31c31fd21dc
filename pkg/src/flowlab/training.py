"""Training loop, Adam, checkpoint/resume and evaluation sweeps.

Randomness in epoch ``e`` comes only from ``default_rng([seed, e])``, so a run
resumed from a checkpoint at epoch boundary N replays epochs N.. exactly as an
uninterrupted run would.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .datasets import Dataset, background_mean
from .metrics import EvalReport, KernelSpec, config_digest, intensity_shift, mask_ssim, mmd2, psnr, sliced_wasserstein, snr, ssim
from .models import Condition, ConditionedModel, load_checkpoint, save_checkpoint
from .paths import PathSpec, dataset_condition, path_loss, sample_training_batch
from .samplers import SamplerConfig, SamplerError, sample

logger = logging.getLogger(__name__)

CONDITIONING = ("none", "class", "mask", "class+mask")
MODES = ("generate", "denoise")
EVAL_METRICS = ("mmd2", "sliced_wasserstein", "intensity_shift", "ssim", "mask_ssim", "psnr", "snr")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    path: PathSpec = field(default_factory=PathSpec.linear_ot)
    lr: float = 1e-4
    epochs: int = 200
    batch_size: int = 128
    seed: int = 0
    conditioning: str = "none"
    mode: str = "generate"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    cond_dropout: float = 0.1
    checkpoint_every: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise TrainingError("lr must be positive")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if self.epochs < 0:
            raise TrainingError("epochs must be >= 0")
        if self.conditioning not in CONDITIONING:
            raise TrainingError(f"conditioning must be one of {CONDITIONING}")
        if self.mode not in MODES:
            raise TrainingError(f"mode must be one of {MODES}")
        if self.mode == "denoise" and self.path.kind != "linear_ot":
            raise TrainingError("denoise mode needs the linear_ot path")
        if not 0 <= self.cond_dropout < 1:
            raise TrainingError("cond_dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "path"}
        d["path"] = self.path.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "path" in d:
            d["path"] = PathSpec.from_dict(d["path"])
        return cls(**d)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params], 0)

    def to_dict(self) -> dict:
        return {"m": self.m, "v": self.v, "step": self.step}

    @classmethod
    def from_dict(cls, d) -> "AdamState":
        return cls([np.array(a) for a in d["m"]], [np.array(a) for a in d["v"]], int(d["step"]))


def adam_step(params, grads, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update. Parameter tensors get new data arrays."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise TrainingError("params, grads and optimizer state are misaligned")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.zeros(p.shape) if g is None else g
        if g.shape != p.shape:
            raise TrainingError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        state.m[i] = beta1 * state.m[i] + (1 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1 - beta2) * g * g
        new = p.data - lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)
        new.flags.writeable = False
        p.data = new
    return params, state


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def losses(self) -> list:
        return [r["mean_loss"] for r in self.records]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl())


def _drop(cond: Condition | None, rng, p: float) -> Condition | None:
    if cond is None or p == 0:
        return cond
    oh, mk = cond.class_onehot, cond.mask
    if oh is not None:
        oh = oh * (rng.uniform(size=oh.shape[0]) >= p)[:, None]
    if mk is not None:
        keep = rng.uniform(size=mk.shape[0]) >= p
        mk = mk * keep.reshape((-1,) + (1,) * (mk.ndim - 1))
    return Condition(oh, mk)


def check_dataset(dataset: Dataset, config: TrainConfig):
    if len(dataset) == 0:
        raise TrainingError("dataset is empty")
    if "class" in config.conditioning and dataset.labels is None:
        raise TrainingError("class conditioning needs a labelled dataset")
    if "mask" in config.conditioning and dataset.masks is None:
        raise TrainingError("mask conditioning needs a dataset with masks")
    if config.mode == "denoise" and dataset.noisy is None:
        raise TrainingError("denoise mode needs a dataset with noisy pairs")


def checkpoint_metadata(model, config: TrainConfig, epoch: int, dataset_spec=None) -> dict:
    return {
        "path": config.path.to_dict(),
        "train": config.to_dict(),
        "training_seed": config.seed,
        "epoch": epoch,
        "conditioning": config.conditioning,
        "mode": config.mode,
        "dataset": dataset_spec,
    }


def train(
    model: ConditionedModel,
    dataset: Dataset,
    config: TrainConfig,
    *,
    start_epoch: int = 0,
    optimizer_state: AdamState | None = None,
    checkpoint_dir=None,
    dataset_spec: dict | None = None,
):
    """Run epochs ``start_epoch .. config.epochs - 1``.

    Returns ``(model, log, optimizer_state)``. Checkpoints (with optimizer
    state) go to ``checkpoint_dir`` every ``checkpoint_every`` epochs and at
    the end.
    """
    check_dataset(dataset, config)
    params = model.parameters()
    state = optimizer_state or AdamState.zeros_like(params)
    log = TrainLog(metadata={
        "optimizer": "adam", "weight_decay": 0.0, "lr_schedule": "constant", "grad_clip": None,
        "config": config.to_dict(),
    })
    n = len(dataset)
    per_epoch = math.ceil(n / config.batch_size)
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)
    for epoch in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng([config.seed, epoch])
        perm = rng.permutation(n)
        total = 0.0
        for s in range(per_epoch):
            idx = perm[s * config.batch_size:(s + 1) * config.batch_size]
            batch = sample_training_batch(
                dataset, config.path, rng, indices=idx,
                conditioning=config.conditioning, denoise=config.mode == "denoise",
            )
            batch.cond = _drop(batch.cond, rng, config.cond_dropout)
            model.zero_grad()
            try:
                loss = path_loss(model, batch, config.path)
                value = loss.item()
                if not math.isfinite(value) or value < 0:
                    raise TrainingError(f"bad loss {value} at epoch {epoch}, step {s}")
                nx.backward(loss)
            except nx.NumericsError as exc:
                raise TrainingError(f"non-finite value at epoch {epoch}, step {s}: {exc}") from exc
            adam_step(params, [p.grad for p in params], state, config.lr,
                      config.adam_beta1, config.adam_beta2, config.adam_eps)
            total += value * len(idx)
        record = {
            "epoch": epoch,
            "mean_loss": total / n,
            "wall_time": time.perf_counter() - t0,
            "permutation_sha256": hashlib.sha256(perm.astype("<i8").tobytes()).hexdigest()[:16],
        }
        last = epoch == config.epochs - 1
        if ckdir is not None and (last or (config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0)):
            path = ckdir / f"epoch_{epoch + 1:04d}.motf"
            digest = save_checkpoint(path, model, checkpoint_metadata(model, config, epoch + 1, dataset_spec), state.to_dict())
            record["checkpoint"] = str(path.name)
            record["checkpoint_sha256"] = digest
        log.records.append(record)
        logger.debug("epoch %d loss %.5f", epoch, record["mean_loss"])
    return model, log, state


def resume(checkpoint_path, dataset: Dataset, epochs: int, checkpoint_dir=None):
    """Continue a run from a checkpoint written by :func:`train` up to ``epochs`` total."""
    ck = load_checkpoint(checkpoint_path)
    if ck.optimizer is None:
        raise TrainingError("checkpoint carries no optimizer state")
    cfg = TrainConfig.from_dict({**ck.metadata["train"], "epochs": epochs})
    return train(
        ck.model, dataset, cfg,
        start_epoch=int(ck.metadata["epoch"]),
        optimizer_state=AdamState.from_dict(ck.optimizer),
        checkpoint_dir=checkpoint_dir,
        dataset_spec=ck.metadata.get("dataset"),
    )


# ---------------------------------------------------------------------------
# evaluation


def generate(model, path: PathSpec, sampler: SamplerConfig, n: int, cond=None, x_init=None):
    """Draw ``n`` samples; the initial noise comes from ``sampler.seed``."""
    if x_init is None:
        x_init = np.random.default_rng([sampler.seed, 0]).standard_normal((n,) + tuple(model.config.data_shape))
    return sample(model, sampler, x_init, cond, path.schedule, path_kind=path.kind)


def evaluate(
    model: ConditionedModel,
    path: PathSpec,
    validation: Dataset,
    sampler_configs,
    metrics=("mmd2", "sliced_wasserstein"),
    *,
    n_samples: int | None = None,
    conditioning: str = "none",
    kernel: KernelSpec | None = None,
    model_id: str = "",
    mode: str = "generate",
    band=(0.6, 1.0),
    threshold: float | None = None,
) -> EvalReport:
    """Generate with each sampler config and score against ``validation``.

    Conditions (labels / masks) cycle through the validation split. In
    ``denoise`` mode the validation set's noisy images are the initial states
    and psnr/ssim/snr compare denoised output with the clean images.
    """
    report = EvalReport(provenance={"model": model_id, "dataset": validation.metadata, "path": path.to_dict()})
    n = n_samples or len(validation)
    idx = np.arange(n) % len(validation)
    reference = validation.samples
    cond = dataset_condition(validation, idx, conditioning)
    if kernel is None and {"mmd2"} & set(metrics):
        kernel = KernelSpec.median_heuristic(reference)
    for sc in sampler_configs:
        if sc.path_kind != path.kind:
            raise SamplerError(f"{sc.family} sampler cannot run a {path.kind} model")
        x_init = validation.noisy[idx] if mode == "denoise" else None
        gen, _ = generate(model, path, sc, n, cond, x_init)
        digest = config_digest({"sampler": sc.__dict__, "path": path.to_dict(), "n": n, "conditioning": conditioning})
        common = dict(n_generated=n, n_reference=len(validation), config_digest=digest, model=model_id,
                      sampler=sc.family, steps=sc.steps)
        for m in metrics:
            if m == "mmd2":
                val = mmd2(gen, reference, kernel)
            elif m == "sliced_wasserstein":
                val = sliced_wasserstein(gen, reference, seed=sc.seed)
            elif m == "intensity_shift":
                val = intensity_shift(reference, gen, band)
            elif m == "ssim":
                # generated image vs the validation image whose condition produced it
                val = float(np.mean([ssim(g, reference[i]) for g, i in zip(gen, idx)]))
            elif m == "mask_ssim":
                thr = background_mean(validation) if threshold is None else threshold
                val = mask_ssim(gen, validation.masks[idx], thr)
            elif m == "psnr":
                val = float(np.mean([psnr(g, reference[i]) for g, i in zip(gen, idx)]))
            elif m == "snr":
                val = float(np.mean([snr(reference[i], g) for g, i in zip(gen, idx)]))
            else:
                raise ValueError(f"unknown metric {m!r}")
            report.add(metric=m, value=float(val), **common)
    return report
