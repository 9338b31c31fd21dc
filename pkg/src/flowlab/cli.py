"""``flowlab`` command line: train, sample, eval, denoise.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.
Outputs go to the run's ``output_dir``; relative directories are resolved
against ``$FLOWLAB_OUTPUT_ROOT`` when it is set.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .datasets import (
    DatasetError, TOY_NAMES, gen_phantoms, gen_toy2d, load_dataset, pixel_kde, read_pgm, with_speckle, write_pgm,
)
from .metrics import EvalReport, KernelSpec, config_digest, psnr, snr, ssim
from .models import CheckpointError, Condition, ConditionedModel, ModelConfig, ModelError, load_checkpoint
from .paths import PathError, PathSpec, dataset_condition
from .samplers import FAMILIES, SamplerConfig, SamplerError
from .training import EVAL_METRICS, TrainConfig, TrainingError, check_dataset, evaluate, generate, train

logger = logging.getLogger("flowlab")

OUTPUT_ROOT_ENV = "FLOWLAB_OUTPUT_ROOT"
KDE_GRID = np.linspace(-0.25, 1.25, 601)


class ConfigError(ValueError):
    """Bad configuration or arguments; maps to exit code 1."""


# ---------------------------------------------------------------------------
# RunConfig

TOP_KEYS = {"dataset", "path", "model", "train", "samplers", "metrics", "output_dir", "seed"}
DATASET_KEYS = {
    "common": {"name", "n", "seed", "split", "noise_power", "noise_seed"},
    "toy": {"sigma", "radius"},
    "phantoms": {"size", "num_classes"},
}
PATH_KEYS = {"kind", "schedule"}
SCHEDULE_KEYS = {"num_train_steps", "beta_start", "beta_end"}
MODEL_KEYS = {"arch", "hidden", "channels", "time_dim", "time_scale", "seed"}
TRAIN_KEYS = {
    "lr", "epochs", "batch_size", "seed", "conditioning", "mode",
    "adam_beta1", "adam_beta2", "adam_eps", "cond_dropout", "checkpoint_every",
}
SAMPLER_KEYS = {"family", "steps", "seed"}


def _strict(section: dict, allowed: set, where: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be a JSON object")
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown key {where}.{key}" if where else f"unknown key {key}")


def resolve_config(raw: dict) -> dict:
    """Validate ``raw`` strictly and fill every default.

    The result is a plain JSON document; it is what every run writes beside
    its outputs and what the config digest is taken over.
    """
    _strict(raw, TOP_KEYS, "")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")

    ds = dict(raw.get("dataset") or {})
    name = ds.get("name", "eight_gaussians")
    if name not in TOY_NAMES + ("phantoms",):
        raise ConfigError(f"dataset.name {name!r} is not one of {TOY_NAMES + ('phantoms',)}")
    _strict(ds, DATASET_KEYS["common"] | DATASET_KEYS["phantoms" if name == "phantoms" else "toy"], "dataset")
    image = name == "phantoms"
    dataset = {
        "name": name,
        "n": ds.get("n", 1024 if image else 4000),
        "seed": ds.get("seed", seed),
        "split": ds.get("split", 0.875),
        "noise_power": ds.get("noise_power"),
        "noise_seed": ds.get("noise_seed", seed),
    }
    if image:
        dataset.update(size=ds.get("size", 16), num_classes=ds.get("num_classes", 4))
    else:
        dataset.update(sigma=ds.get("sigma", 0.1), radius=ds.get("radius", 2.0))

    p = dict(raw.get("path") or {})
    _strict(p, PATH_KEYS, "path")
    kind = p.get("kind", "linear_ot")
    path = {"kind": kind}
    if kind == "vp_diffusion":
        sch = dict(p.get("schedule") or {})
        _strict(sch, SCHEDULE_KEYS, "path.schedule")
        path["schedule"] = {
            "num_train_steps": sch.get("num_train_steps", 1000),
            "beta_start": sch.get("beta_start", 1e-4),
            "beta_end": sch.get("beta_end", 0.02),
        }
    elif kind == "linear_ot":
        if p.get("schedule") is not None:
            raise ConfigError("path.schedule is only valid for vp_diffusion")
    else:
        raise ConfigError(f"path.kind {kind!r} is not linear_ot or vp_diffusion")

    m = dict(raw.get("model") or {})
    _strict(m, MODEL_KEYS, "model")
    model = {
        "arch": m.get("arch", "conv" if image else "mlp"),
        "hidden": list(m.get("hidden", [128, 128, 128])),
        "channels": m.get("channels", 16),
        "time_dim": m.get("time_dim", 32),
        "time_scale": m.get("time_scale", 1000.0),
        "seed": m.get("seed", seed),
    }

    t = dict(raw.get("train") or {})
    _strict(t, TRAIN_KEYS, "train")
    defaults = TrainConfig()
    tr = {k: t.get(k, getattr(defaults, k)) for k in sorted(TRAIN_KEYS)}
    tr["seed"] = t.get("seed", seed)
    tr["batch_size"] = t.get("batch_size", 32 if image else 128)
    if tr["mode"] == "denoise" and dataset["noise_power"] is None:
        dataset["noise_power"] = 0.1

    samplers = []
    for i, s in enumerate(raw.get("samplers", [])):
        _strict(s, SAMPLER_KEYS, f"samplers[{i}]")
        samplers.append({
            "family": s.get("family", "euler" if kind == "linear_ot" else "ddim"),
            "steps": s.get("steps", 10),
            "seed": s.get("seed", seed),
        })
    metrics = list(raw.get("metrics", []))
    for mname in metrics:
        if mname not in EVAL_METRICS:
            raise ConfigError(f"unknown metric {mname!r}; expected one of {EVAL_METRICS}")

    out = raw.get("output_dir", "run")
    if not isinstance(out, str) or not out:
        raise ConfigError("output_dir must be a non-empty string")

    resolved = {
        "dataset": dataset, "path": path, "model": model, "train": tr,
        "samplers": samplers, "metrics": metrics, "output_dir": out, "seed": seed,
    }
    # Build every object once so type/range errors surface as config errors.
    try:
        path_spec = PathSpec.from_dict(path)
        TrainConfig.from_dict({**tr, "path": path})
        for s in samplers:
            sc = SamplerConfig(**s)
            if sc.path_kind != path_spec.kind:
                raise ConfigError(f"sampler {sc.family} cannot run a {path_spec.kind} model")
    except (TypeError, PathError, TrainingError, SamplerError) as exc:
        raise ConfigError(str(exc)) from exc
    return resolved


def load_config(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    return resolve_config(raw)


# ---------------------------------------------------------------------------
# building blocks shared by the commands


def build_datasets(spec: dict):
    """``(train, validation)`` from a resolved dataset section."""
    spec = dict(spec)
    try:
        if spec["name"] == "phantoms":
            ds = gen_phantoms(spec["n"], spec["size"], spec["num_classes"], spec["seed"])
        else:
            ds = gen_toy2d(spec["name"], spec["n"], spec["seed"], sigma=spec["sigma"], radius=spec["radius"])
        tr, va = ds.split(spec["split"])
        if spec.get("noise_power") is not None:
            tr = with_speckle(tr, spec["noise_power"], spec["noise_seed"])
            va = with_speckle(va, spec["noise_power"], spec["noise_seed"] + 1)
    except (DatasetError, TypeError) as exc:
        raise ConfigError(f"dataset: {exc}") from exc
    return tr, va


def build_model(cfg: dict, dataset) -> ConditionedModel:
    cond = cfg["train"]["conditioning"]
    try:
        return ConditionedModel(ModelConfig(
            data_shape=dataset.sample_shape,
            num_classes=dataset.num_classes if "class" in cond else 0,
            mask_conditioning="mask" in cond,
            **cfg["model"],
        ))
    except (ModelError, TypeError) as exc:
        raise ConfigError(f"model: {exc}") from exc


def output_dir(name) -> Path:
    p = Path(name)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_manifest(directory: Path, command: str, config: dict, checkpoints=(), outputs=(), extra=None) -> None:
    manifest = {
        "command": command,
        "version": f"flowlab {__version__} ({kernels.BACKEND} kernels)",
        "config_digest": config_digest(config),
        "checkpoints": {str(c): file_sha256(c) for c in checkpoints},
        "outputs": sorted(str(o) for o in outputs),
    }
    manifest.update(extra or {})
    write_json(directory / "manifest.json", manifest)


def open_checkpoint(path):
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"checkpoint not found: {p}")
    try:
        ck = load_checkpoint(p)
    except CheckpointError as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    if not ck.metadata.get("path") or not ck.metadata.get("dataset"):
        raise ConfigError(f"{p}: checkpoint lacks training metadata (path / dataset)")
    return ck


def _sampler_for(path: PathSpec, family, steps, seed) -> SamplerConfig:
    family = family or ("euler" if path.kind == "linear_ot" else "ddim")
    try:
        sc = SamplerConfig(family, steps, seed)
    except SamplerError as exc:
        raise ConfigError(str(exc)) from exc
    if sc.path_kind != path.kind:
        raise ConfigError(f"{family} sampler cannot run a {path.kind} checkpoint")
    return sc


def _write_samples(directory: Path, x: np.ndarray, labels=None) -> list:
    if x.ndim == 2 and x.shape[1] == 2:
        f = directory / "samples.csv"
        with open(f, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "label"])
            for i, row in enumerate(x):
                lab = -1 if labels is None else int(labels[i])
                w.writerow([repr(float(row[0])), repr(float(row[1])), lab])
        return [f.name]
    names = []
    for i, img in enumerate(x):
        f = directory / f"sample_{i:05d}.pgm"
        write_pgm(f, np.clip(img, 0.0, 1.0))
        names.append(f.name)
    return names


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = output_dir(cfg["output_dir"])
    write_json(out / "config.resolved.json", cfg)
    tr, va = build_datasets(cfg["dataset"])
    model = build_model(cfg, tr)
    tc = TrainConfig.from_dict({**cfg["train"], "path": cfg["path"]})
    try:
        check_dataset(tr, tc)
    except TrainingError as exc:
        raise ConfigError(str(exc)) from exc
    _, log, _ = train(model, tr, tc, checkpoint_dir=out / "checkpoints", dataset_spec=cfg["dataset"])
    final = out / "checkpoints" / f"epoch_{tc.epochs:04d}.motf"
    model_path = out / "model.motf"
    if final.exists():
        shutil.copyfile(final, model_path)
    log.write(out / "train_log.jsonl")
    outputs = ["config.resolved.json", "train_log.jsonl", "model.motf"]
    if cfg["samplers"] and cfg["metrics"]:
        path = PathSpec.from_dict(cfg["path"])
        report = evaluate(
            model, path, va, [SamplerConfig(**s) for s in cfg["samplers"]], cfg["metrics"],
            conditioning=tc.conditioning, model_id=model_path.name, mode=tc.mode,
        )
        report.provenance["checkpoint_sha256"] = file_sha256(model_path)
        (out / "eval_report.csv").write_text(report.to_csv())
        (out / "eval_report.json").write_text(report.to_json() + "\n")
        outputs += ["eval_report.csv", "eval_report.json"]
    write_manifest(out, "train", cfg, [model_path], outputs, {"epochs": tc.epochs})
    print(model_path)
    return 0


def _sample_condition(ck, model, args, count):
    meta = model.config
    onehot = mask = None
    if args.class_ is not None:
        if not meta.num_classes:
            raise ConfigError("--class given but the checkpoint is not class-conditional")
        if not 0 <= args.class_ < meta.num_classes:
            raise ConfigError(f"--class must lie in [0, {meta.num_classes})")
        onehot = np.tile(np.eye(meta.num_classes)[args.class_], (count, 1))
    if args.mask is not None:
        if not meta.mask_conditioning:
            raise ConfigError("--mask given but the checkpoint is not mask-conditional")
        mpath = Path(args.mask)
        if not mpath.is_file():
            raise ConfigError(f"mask file not found: {mpath}")
        m = read_pgm(mpath)
        if m.shape != tuple(meta.data_shape[-2:]):
            raise ConfigError(f"mask shape {m.shape} does not match model {meta.data_shape}")
        mask = np.broadcast_to(m, (count,) + m.shape).copy()
    if onehot is None and mask is None:
        return None
    return Condition(onehot, mask)


def cmd_sample(args) -> int:
    ck = open_checkpoint(args.checkpoint)
    if ck.metadata.get("mode") == "denoise":
        raise ConfigError("denoise-mode checkpoint: use `flowlab denoise`")
    path = PathSpec.from_dict(ck.metadata["path"])
    sc = _sampler_for(path, args.family, args.steps, args.seed)
    sc.record_trajectory = args.trajectories
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    cond = _sample_condition(ck, ck.model, args, args.count)
    x, traj = generate(ck.model, path, sc, args.count, cond)
    out = output_dir(args.out)
    labels = None if args.class_ is None else np.full(args.count, args.class_)
    outputs = _write_samples(out, x, labels)
    if traj is not None:
        traj.to_csv(out / "trajectories.csv")
        outputs.append("trajectories.csv")
    resolved = {
        "checkpoint": str(args.checkpoint), "family": sc.family, "steps": sc.steps, "seed": sc.seed,
        "count": args.count, "class": args.class_, "mask": args.mask, "trajectories": args.trajectories,
    }
    write_json(out / "config.resolved.json", resolved)
    write_manifest(out, "sample", resolved, [args.checkpoint], outputs + ["config.resolved.json"])
    return 0


def cmd_eval(args) -> int:
    if not args.checkpoints:
        raise ConfigError("eval needs at least one checkpoint")
    cks = [open_checkpoint(c) for c in args.checkpoints]
    if args.dataset:
        dpath = Path(args.dataset)
        if dpath.is_dir():
            va = load_dataset(dpath)
        elif dpath.is_file():
            spec = resolve_config({"dataset": json.loads(dpath.read_text())})["dataset"]
            _, va = build_datasets(spec)
        else:
            raise ConfigError(f"dataset not found: {dpath}")
    else:
        _, va = build_datasets(cks[0].metadata["dataset"])
    for m in args.metrics:
        if m not in EVAL_METRICS:
            raise ConfigError(f"unknown metric {m!r}; expected one of {EVAL_METRICS}")
    kernel = KernelSpec.median_heuristic(va.samples) if "mmd2" in args.metrics else None
    image = len(va.sample_shape) == 2
    rows, curves = [], {"grid": KDE_GRID, "real": pixel_kde(va.samples, KDE_GRID)} if image else {}
    report = EvalReport(provenance={"dataset": va.metadata, "checkpoints": {}})
    names = [Path(c).name for c in args.checkpoints]
    unique = len(set(names)) == len(names)
    for cpath, ck in zip(args.checkpoints, cks):
        path = PathSpec.from_dict(ck.metadata["path"])
        model_id = Path(cpath).name if unique else str(cpath)
        report.provenance["checkpoints"][str(cpath)] = file_sha256(cpath)
        families = [f for f in args.families if SamplerConfig(f).path_kind == path.kind] if args.families else [None]
        if not families:
            raise ConfigError(f"none of {args.families} can run the {path.kind} checkpoint {cpath}")
        configs = [_sampler_for(path, f, s, args.seed) for f in families for s in args.steps]
        mode = ck.metadata.get("mode", "generate")
        if mode == "denoise" and va.noisy is None:
            raise ConfigError("denoise checkpoint needs a validation set with noisy images")
        sub = evaluate(
            ck.model, path, va, configs, args.metrics, conditioning=ck.metadata.get("conditioning", "none"),
            kernel=kernel, model_id=model_id, mode=mode, n_samples=args.n,
        )
        report.entries.extend(sub.entries)
        if image:
            n = args.n or len(va)
            idx = np.arange(n) % len(va)
            cond = dataset_condition(va, idx, ck.metadata.get("conditioning", "none"))
            for sc in configs:
                x_init = va.noisy[idx] if mode == "denoise" else None
                gen, _ = generate(ck.model, path, sc, n, cond, x_init)
                curves[f"{model_id}:{sc.family}:{sc.steps}"] = pixel_kde(gen, KDE_GRID)
    out = output_dir(args.out)
    (out / "eval_report.csv").write_text(report.to_csv())
    (out / "eval_report.json").write_text(report.to_json() + "\n")
    outputs = ["eval_report.csv", "eval_report.json"]
    if image:
        with open(out / "kde.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            keys = list(curves)
            w.writerow(keys)
            for i in range(KDE_GRID.size):
                w.writerow([repr(float(curves[k][i])) for k in keys])
        outputs.append("kde.csv")
    resolved = {
        "checkpoints": [str(c) for c in args.checkpoints], "dataset": args.dataset, "steps": args.steps,
        "metrics": args.metrics, "families": args.families, "seed": args.seed, "n": args.n,
    }
    write_json(out / "config.resolved.json", resolved)
    write_manifest(out, "eval", resolved, args.checkpoints, outputs + ["config.resolved.json"])
    return 0


def cmd_denoise(args) -> int:
    ck = open_checkpoint(args.checkpoint)
    if ck.metadata.get("mode") != "denoise":
        raise ConfigError("checkpoint was trained in generate mode, not denoise mode")
    path = PathSpec.from_dict(ck.metadata["path"])
    sc = _sampler_for(path, "euler", args.steps, 0)
    if args.noisy:
        d = Path(args.noisy)
        if not (d / "index.json").is_file():
            raise ConfigError(f"{d} is not a dataset directory (index.json missing)")
        ds = load_dataset(d)
        if ds.noisy is not None:
            noisy, clean = ds.noisy, ds.samples
        else:
            noisy, clean = ds.samples, None
    else:
        spec = dict(ck.metadata["dataset"])
        spec["noise_power"] = args.noise_power if args.noise_power is not None else spec.get("noise_power") or 0.1
        _, va = build_datasets(spec)
        noisy, clean = va.noisy, va.samples
    if noisy.shape[1:] != tuple(ck.model.config.data_shape):
        raise ConfigError(f"image shape {noisy.shape[1:]} does not match model {ck.model.config.data_shape}")
    den, _ = generate(ck.model, path, sc, len(noisy), None, noisy)
    den = np.clip(den, 0.0, 1.0)
    out = output_dir(args.out)
    outputs = []
    for i, img in enumerate(den):
        write_pgm(out / f"denoised_{i:05d}.pgm", img)
        outputs.append(f"denoised_{i:05d}.pgm")
    summary = {}
    if clean is not None:
        cols = ["psnr_noisy", "ssim_noisy", "snr_noisy", "psnr_denoised", "ssim_denoised", "snr_denoised"]
        table = np.array([
            [psnr(n, c), ssim(n, c), snr(c, n), psnr(d, c), ssim(d, c), snr(c, d)]
            for n, d, c in zip(noisy, den, clean)
        ])
        with open(out / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image"] + cols)
            for i, row in enumerate(table):
                w.writerow([i] + [repr(float(v)) for v in row])
        summary = {c: float(np.mean(table[:, k])) for k, c in enumerate(cols)}
        outputs.append("metrics.csv")
    resolved = {"checkpoint": str(args.checkpoint), "noisy": args.noisy, "noise_power": args.noise_power,
                "steps": args.steps}
    write_json(out / "config.resolved.json", resolved)
    write_manifest(out, "denoise", resolved, [args.checkpoint], outputs + ["config.resolved.json"],
                   {"summary": summary})
    for k, v in summary.items():
        print(f"{k}\t{v:.4f}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def _default_out(command: str) -> str:
    return f"{command}_out"


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flowlab", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"flowlab {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a RunConfig JSON file")
    p.add_argument("config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw samples from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--family", choices=FAMILIES)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--class", dest="class_", type=int)
    p.add_argument("--mask", help="PGM mask file")
    p.add_argument("--trajectories", action="store_true", help="also write trajectories.csv")
    p.add_argument("--out", default=_default_out("sample"))
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score checkpoints across step counts")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--dataset", help="dataset directory or JSON dataset section (default: checkpoint's)")
    p.add_argument("--steps", type=int, nargs="+", default=[1, 10, 50])
    p.add_argument("--metrics", nargs="+", default=["mmd2", "sliced_wasserstein"])
    p.add_argument("--families", nargs="+", choices=FAMILIES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, help="generated samples per row (default: validation size)")
    p.add_argument("--out", default=_default_out("eval"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("denoise", help="denoise speckled images with a denoise-mode checkpoint")
    p.add_argument("checkpoint")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--noisy", help="dataset directory holding noisy images")
    src.add_argument("--noise-power", type=float)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--out", default=_default_out("denoise"))
    p.set_defaults(func=cmd_denoise)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError, ModelError, CheckpointError) as exc:
        print(f"flowlab: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - exit-code contract
        logger.debug("runtime failure", exc_info=True)
        print(f"flowlab: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
