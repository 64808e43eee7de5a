"""Experiment configuration, dataset synthesis, and command runners.

One JSON config document drives everything. Defaults are explicit and
dumpable, unknown keys are rejected, and a single master seed pins masks,
noise, initializations, and every sampler draw, so full reruns reproduce the
metrics table byte-for-byte (wall-clock columns aside).
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cdp import CdpOperator, MeasurementSet, add_noise_at_snr, load_masks, make_cdp_operator, realized_snr_db, save_masks
from .denoiser import (
    AnalyticGaussianDenoiser,
    GaussianPrior,
    TinyDenoiser,
    TinyDenoiserConfig,
    TrainConfig,
    analytic_epsilon,
    load_checkpoint,
    save_checkpoint,
    train_tiny_denoiser,
    _forward_batch,
)
from .exceptions import ConfigError, DivergenceError
from .fields import is_power_of_two, read_array, read_image, substream, write_array, write_image
from .samplers import (
    DolphConfig,
    TvConfig,
    amplitude_flow_baseline,
    ddpm_run,
    dolph_run,
    recon_snr,
    tv_reconstruct,
)
from .schedule import SIGMA_MODES, make_linear_schedule

METHODS = ("dolph", "ddpm", "amplitude_flow", "tv")
IMAGE_SOURCES = ("gaussian", "phantom", "file")
METRICS_COLUMNS = ("method", "seed", "input_snr_db", "recon_snr_db", "final_g",
                   "iters", "wall_ms", "manifest_hash")
MANIFEST_NAME = "manifest.json"

DEFAULT_CONFIG: dict = {
    "master_seed": 0,
    "output_dir": "runs/out",
    "image": {
        "source": "gaussian",
        "path": None,
        "height": 16,
        "width": 16,
        "channels": 1,
        "mean": 1.0,
        "std": 0.05,
        "rects": 5,
        "base_level": 0.2,
    },
    "operator": {"num_masks": 4, "seed": None},
    "noise": {"input_snr_db": [25.0, 15.0]},
    "schedule": {"T": 300, "beta_start": 1e-4, "beta_end": 0.02, "sigma_mode": "fixed"},
    "denoiser": {"kind": "analytic", "mean": 1.0, "var": 0.0025, "checkpoint_path": None},
    "method": {
        "name": "dolph",
        "dolph": {"gamma": 0.08, "grad_steps": 1, "zero_final_noise": True},
        "amplitude_flow": {"step": 0.25, "iters": 600, "init_scale": 1.0},
        "tv": {"tau": 0.05, "outer_step": 0.2, "outer_iters": 150, "inner_iters": 30},
    },
    "train": {
        "dataset": {
            "source": "gaussian",
            "height": 4,
            "width": 4,
            "channels": 1,
            "mean": 0.0,
            "std": 1.0,
            "rects": 5,
            "base_level": 0.2,
            "size": 512,
            "holdout": 128,
        },
        "epochs": 80,
        "batch_size": 32,
        "learning_rate": 5e-3,
        "momentum": 0.9,
        "init_scale": 0.1,
        "hidden": [8],
        "kernel_size": 1,
        "resume": None,
        "checkpoint_name": "denoiser.ckpt",
    },
    "seeds": [0, 1, 2, 3, 4, 5, 6, 7, 8, 9],
    "write_png": False,
}


# ---------------------------------------------------------------------------
# Config loading and validation
# ---------------------------------------------------------------------------


def _merge(base: dict, override: dict, path: str) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"{here}: unknown field")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{here}: expected an object")
            out[key] = _merge(base[key], value, here)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _need(cond: bool, path: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{path}: {msg}")


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check_positive_int(cfg, section, key, minimum=1):
    v = cfg[section][key]
    _need(isinstance(v, int) and not isinstance(v, bool) and v >= minimum,
          f"{section}.{key}", f"expected an integer >= {minimum}, got {v!r}")


def validate_config(cfg: dict) -> dict:
    """Validate a fully merged config; raises ConfigError naming the field."""
    _need(isinstance(cfg["master_seed"], int) and cfg["master_seed"] >= 0,
          "master_seed", "expected a nonnegative integer")
    _need(isinstance(cfg["output_dir"], str) and cfg["output_dir"],
          "output_dir", "expected a nonempty path string")

    img = cfg["image"]
    _need(img["source"] in IMAGE_SOURCES, "image.source", f"expected one of {IMAGE_SOURCES}")
    if img["source"] == "file":
        _need(isinstance(img["path"], str) and img["path"], "image.path",
              "required when image.source is 'file'")
    for key in ("height", "width", "channels"):
        _check_positive_int(cfg, "image", key)
    _need(is_power_of_two(img["height"]) and is_power_of_two(img["width"]),
          "image.height/width", "grid dimensions must be powers of two")
    _need(_is_num(img["mean"]), "image.mean", "expected a number")
    _need(_is_num(img["std"]) and img["std"] > 0, "image.std", "expected a positive number")
    _check_positive_int(cfg, "image", "rects")
    _need(_is_num(img["base_level"]), "image.base_level", "expected a number")

    _check_positive_int(cfg, "operator", "num_masks")
    op_seed = cfg["operator"]["seed"]
    _need(op_seed is None or (isinstance(op_seed, int) and op_seed >= 0),
          "operator.seed", "expected null or a nonnegative integer")

    snrs = cfg["noise"]["input_snr_db"]
    _need(isinstance(snrs, list) and snrs, "noise.input_snr_db", "expected a nonempty list")
    for i, v in enumerate(snrs):
        _need(_is_num(v) or v == "noiseless", f"noise.input_snr_db[{i}]",
              f"expected a number or 'noiseless', got {v!r}")

    sch = cfg["schedule"]
    _check_positive_int(cfg, "schedule", "T")
    _need(_is_num(sch["beta_start"]) and _is_num(sch["beta_end"])
          and 0.0 < sch["beta_start"] <= sch["beta_end"] < 1.0,
          "schedule.beta_start/beta_end", "need 0 < beta_start <= beta_end < 1")
    _need(sch["sigma_mode"] in SIGMA_MODES, "schedule.sigma_mode",
          f"expected one of {SIGMA_MODES}")

    den = cfg["denoiser"]
    _need(den["kind"] in ("analytic", "checkpoint"), "denoiser.kind",
          "expected 'analytic' or 'checkpoint'")
    _need(_is_num(den["mean"]), "denoiser.mean", "expected a number")
    _need(_is_num(den["var"]) and den["var"] > 0, "denoiser.var", "expected a positive number")
    if den["kind"] == "checkpoint":
        _need(isinstance(den["checkpoint_path"], str) and den["checkpoint_path"],
              "denoiser.checkpoint_path", "required when denoiser.kind is 'checkpoint'")

    met = cfg["method"]
    _need(met["name"] in METHODS, "method.name", f"expected one of {METHODS}")
    d = met["dolph"]
    _need(_is_num(d["gamma"]) and d["gamma"] >= 0.0, "method.dolph.gamma",
          "expected a number >= 0")
    _need(isinstance(d["grad_steps"], int) and d["grad_steps"] >= 1,
          "method.dolph.grad_steps", "expected an integer >= 1")
    _need(isinstance(d["zero_final_noise"], bool), "method.dolph.zero_final_noise",
          "expected a boolean")
    af = met["amplitude_flow"]
    _need(_is_num(af["step"]) and af["step"] > 0, "method.amplitude_flow.step",
          "expected a positive number")
    _need(isinstance(af["iters"], int) and af["iters"] >= 0,
          "method.amplitude_flow.iters", "expected an integer >= 0")
    _need(_is_num(af["init_scale"]) and af["init_scale"] > 0,
          "method.amplitude_flow.init_scale", "expected a positive number")
    tv = met["tv"]
    for key in ("tau", "outer_step"):
        _need(_is_num(tv[key]) and tv[key] > 0, f"method.tv.{key}", "expected a positive number")
    for key in ("outer_iters", "inner_iters"):
        _need(isinstance(tv[key], int) and tv[key] >= 1, f"method.tv.{key}",
              "expected an integer >= 1")

    tr = cfg["train"]
    ds = tr["dataset"]
    _need(ds["source"] in ("gaussian", "phantom"), "train.dataset.source",
          "expected 'gaussian' or 'phantom'")
    for key in ("height", "width", "channels", "rects", "size"):
        _need(isinstance(ds[key], int) and ds[key] >= 1, f"train.dataset.{key}",
              "expected a positive integer")
    _need(isinstance(ds["holdout"], int) and ds["holdout"] >= 0, "train.dataset.holdout",
          "expected an integer >= 0")
    _need(_is_num(ds["std"]) and ds["std"] > 0, "train.dataset.std", "expected a positive number")
    _need(isinstance(tr["epochs"], int) and tr["epochs"] >= 0, "train.epochs",
          "expected an integer >= 0")
    _check_positive_int(cfg, "train", "batch_size")
    _need(_is_num(tr["learning_rate"]) and tr["learning_rate"] > 0, "train.learning_rate",
          "expected a positive number")
    _need(_is_num(tr["momentum"]) and 0.0 <= tr["momentum"] < 1.0, "train.momentum",
          "expected a number in [0, 1)")
    _need(_is_num(tr["init_scale"]) and tr["init_scale"] > 0, "train.init_scale",
          "expected a positive number")
    _need(isinstance(tr["hidden"], list) and tr["hidden"]
          and all(isinstance(h, int) and h >= 1 for h in tr["hidden"]),
          "train.hidden", "expected a nonempty list of positive integers")
    _need(isinstance(tr["kernel_size"], int) and tr["kernel_size"] >= 1
          and tr["kernel_size"] % 2 == 1, "train.kernel_size", "expected an odd integer >= 1")
    _need(tr["resume"] is None or (isinstance(tr["resume"], str) and tr["resume"]),
          "train.resume", "expected null or a path string")
    _need(isinstance(tr["checkpoint_name"], str) and tr["checkpoint_name"],
          "train.checkpoint_name", "expected a nonempty file name")

    seeds = cfg["seeds"]
    _need(isinstance(seeds, list) and seeds, "seeds", "expected a nonempty list")
    for i, s in enumerate(seeds):
        _need(isinstance(s, int) and not isinstance(s, bool) and s >= 0,
              f"seeds[{i}]", f"expected a nonnegative integer, got {s!r}")
    _need(isinstance(cfg["write_png"], bool), "write_png", "expected a boolean")
    return cfg


def load_config(path=None, seed: int | None = None, out: str | None = None) -> dict:
    """Merge a user config file over the defaults and validate.

    ``seed`` and ``out`` are the CLI-level overrides for master_seed and
    output_dir.
    """
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON at line {exc.lineno}, column {exc.colno}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{p}: top-level value must be an object")
        cfg = _merge(cfg, user, "")
    if seed is not None:
        cfg["master_seed"] = seed
    if out is not None:
        cfg["output_dir"] = out
    return validate_config(cfg)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# Dataset synthesis
# ---------------------------------------------------------------------------


def make_phantom(rng: np.random.Generator, shape: tuple[int, int, int],
                 rects: int = 5, base_level: float = 0.2) -> np.ndarray:
    """Piecewise-constant image: a flat background plus random rectangles."""
    c, h, w = shape
    img = np.full(shape, float(base_level))
    for _ in range(rects):
        y0 = int(rng.integers(0, max(h - 2, 1)))
        x0 = int(rng.integers(0, max(w - 2, 1)))
        y1 = int(rng.integers(y0 + 2, h + 1)) if h > 2 else h
        x1 = int(rng.integers(x0 + 2, w + 1)) if w > 2 else w
        val = float(rng.uniform(0.2, 1.0))
        ch = int(rng.integers(0, c))
        img[ch, y0:y1, x0:x1] += val
    return np.clip(img, 0.0, 1.2)


def synth_images(spec: dict, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n images from a synthetic source spec (gaussian or phantom)."""
    shape = (spec["channels"], spec["height"], spec["width"])
    if spec["source"] == "gaussian":
        return spec["mean"] + spec["std"] * rng.standard_normal((n, *shape))
    if spec["source"] == "phantom":
        return np.stack([make_phantom(rng, shape, spec["rects"], spec["base_level"])
                         for _ in range(n)])
    raise ConfigError(f"cannot synthesize from source {spec['source']!r}")


def load_truth_image(cfg: dict, rng: np.random.Generator) -> np.ndarray:
    img = cfg["image"]
    if img["source"] == "file":
        path = Path(img["path"])
        if not path.is_file():
            raise ConfigError(f"image.path: file not found: {path}")
        return read_image(path)
    return synth_images(img, 1, rng)[0]


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------


def snr_tag(entry) -> str:
    return "noiseless" if entry == "noiseless" else f"{float(entry):g}"


def _snr_value(entry) -> float | None:
    return None if entry == "noiseless" else float(entry)


def _snr_json(value: float | None) -> object:
    return "inf" if value is None or np.isinf(value) else float(value)


def build_schedule(cfg: dict):
    sch = cfg["schedule"]
    return make_linear_schedule(sch["T"], sch["beta_start"], sch["beta_end"], sch["sigma_mode"])


def build_model(cfg: dict, channels: int):
    den = cfg["denoiser"]
    if den["kind"] == "analytic":
        return AnalyticGaussianDenoiser(GaussianPrior(den["mean"], den["var"]))
    path = Path(den["checkpoint_path"])
    if not path.is_file():
        raise ConfigError(f"denoiser.checkpoint_path: file not found: {path}")
    params = load_checkpoint(path)
    if params.config.channels != channels:
        raise ConfigError(
            f"denoiser.checkpoint_path: checkpoint has {params.config.channels} channels, "
            f"measurements have {channels}")
    return TinyDenoiser(params)


def _operator_seed(cfg: dict) -> int:
    return cfg["master_seed"] if cfg["operator"]["seed"] is None else cfg["operator"]["seed"]


def _write_trace_csv(path: Path, rows) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("step", "g_value", "x_norm", "wall_ms"))
        for step, g, norm, ms in rows:
            writer.writerow((step, repr(g), repr(norm), repr(ms)))


def _normalized_png(field: np.ndarray) -> np.ndarray:
    lo, hi = float(field.min()), float(field.max())
    if hi <= lo:
        return np.zeros_like(field)
    return (field - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def run_simulate(cfg: dict) -> dict:
    """Write masks, ground truth, clean amplitudes, and noisy measurements.

    Returns the manifest; reruns with the same config are byte-identical.
    """
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    master = cfg["master_seed"]

    op = make_cdp_operator((cfg["image"]["height"], cfg["image"]["width"]),
                           cfg["operator"]["num_masks"], substream(_operator_seed(cfg), "masks"))
    x_true = load_truth_image(cfg, substream(master, "image"))
    if x_true.shape[1:] != op.plane_shape:
        raise ConfigError(
            f"image.path: image plane {x_true.shape[1:]} does not match configured "
            f"{op.plane_shape}")
    clean = op.amplitudes(x_true)
    num_masks, channels, h, w = clean.shape

    write_array(x_true, out / "truth.dfld")
    save_masks(op, out / "masks.cfld")
    write_array(clean.reshape(num_masks * channels, h, w), out / "clean_amplitudes.dfld")

    measurements = []
    for entry in cfg["noise"]["input_snr_db"]:
        tag = snr_tag(entry)
        value = _snr_value(entry)
        meas = add_noise_at_snr(clean, value, substream(master, "noise", tag))
        fname = f"measurements_{tag}.dfld"
        write_array(meas.y.reshape(num_masks * channels, h, w), out / fname)
        measurements.append({
            "input_snr_db": _snr_json(value),
            "realized_snr_db": _snr_json(realized_snr_db(clean, meas)),
            "tag": tag,
            "file": fname,
        })

    manifest = {
        "kind": "measurement_manifest",
        "config_hash": config_hash(cfg),
        "master_seed": master,
        "image": {"height": h, "width": w, "channels": channels,
                  "source": cfg["image"]["source"]},
        "operator": {"num_masks": num_masks, "seed_used": _operator_seed(cfg)},
        "files": {"truth": "truth.dfld", "masks": "masks.cfld",
                  "clean_amplitudes": "clean_amplitudes.dfld"},
        "measurements": measurements,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest


def _load_manifest(out: Path) -> tuple[dict, str]:
    path = out / MANIFEST_NAME
    if not path.is_file():
        raise ConfigError(f"no measurement manifest at {path}; run `simulate` first")
    raw = path.read_bytes()
    return json.loads(raw.decode("utf-8")), hashlib.sha256(raw).hexdigest()


def _load_measurements(out: Path, manifest: dict, entry: dict) -> MeasurementSet:
    info = manifest["image"]
    num_masks = manifest["operator"]["num_masks"]
    flat = read_array(out / entry["file"])
    y = flat.reshape(num_masks, info["channels"], info["height"], info["width"])
    value = entry["input_snr_db"]
    return MeasurementSet(y=y, input_snr_db=None if value == "inf" else float(value))


# ---------------------------------------------------------------------------
# reconstruct
# ---------------------------------------------------------------------------


@dataclass
class RunRecord:
    method: str
    seed: int
    snr_tag: str
    input_snr_db: object
    recon_snr_db: object   # float, or "failed"
    final_g: object
    iters: int
    wall_ms: float
    manifest_hash: str
    artifacts: dict
    error: str | None = None


def _run_cell(cfg: dict, out: Path, op: CdpOperator, sched, model, x_true,
              meas: MeasurementSet, entry: dict, seed: int, manifest_hash: str) -> RunRecord:
    method = cfg["method"]["name"]
    tag = entry["tag"]
    rng = substream(cfg["master_seed"], "chain", seed, tag)
    shape = meas.y.shape[1:]
    trace: list = []
    stem = f"recon_{method}_seed{seed}_snr{tag}"
    tic = time.perf_counter()
    try:
        if method == "dolph":
            mcfg = cfg["method"]["dolph"]
            x_hat = dolph_run(meas, op, model, sched,
                              DolphConfig(gamma=mcfg["gamma"], grad_steps=mcfg["grad_steps"],
                                          zero_final_noise=mcfg["zero_final_noise"]),
                              rng, trace=trace)
            iters = sched.T
        elif method == "ddpm":
            x_hat = ddpm_run(model, sched, shape, rng, trace=trace,
                             fidelity_fn=lambda x: op.fidelity(meas, x))
            iters = sched.T
        elif method == "amplitude_flow":
            mcfg = cfg["method"]["amplitude_flow"]
            x_init = mcfg["init_scale"] * rng.standard_normal(shape)
            x_hat = amplitude_flow_baseline(meas, op, x_init, mcfg["step"], mcfg["iters"],
                                            trace=trace)
            iters = mcfg["iters"]
        else:
            mcfg = cfg["method"]["tv"]
            x_hat = tv_reconstruct(meas, op,
                                   TvConfig(tau=mcfg["tau"], outer_step=mcfg["outer_step"],
                                            outer_iters=mcfg["outer_iters"],
                                            inner_iters=mcfg["inner_iters"]),
                                   rng, trace=trace)
            iters = mcfg["outer_iters"]
    except DivergenceError as exc:
        wall_ms = (time.perf_counter() - tic) * 1e3
        trace_name = f"{stem}_trace.csv"
        _write_trace_csv(out / trace_name, trace)
        return RunRecord(method=method, seed=seed, snr_tag=tag,
                         input_snr_db=entry["input_snr_db"], recon_snr_db="failed",
                         final_g="failed", iters=exc.step or 0,
                         wall_ms=wall_ms, manifest_hash=manifest_hash,
                         artifacts={"trace": trace_name}, error=str(exc))

    wall_ms = (time.perf_counter() - tic) * 1e3
    recon_name = f"{stem}.dfld"
    trace_name = f"{stem}_trace.csv"
    write_array(x_hat, out / recon_name)
    _write_trace_csv(out / trace_name, trace)
    artifacts = {"recon": recon_name, "trace": trace_name}
    if cfg["write_png"]:
        png_name = f"{stem}.png"
        write_image(_normalized_png(x_hat), out / png_name)
        artifacts["png"] = png_name
    return RunRecord(method=method, seed=seed, snr_tag=tag,
                     input_snr_db=entry["input_snr_db"],
                     recon_snr_db=recon_snr(x_true, x_hat),
                     final_g=op.fidelity(meas, x_hat), iters=iters, wall_ms=wall_ms,
                     manifest_hash=manifest_hash, artifacts=artifacts)


def _metric_str(value) -> str:
    return value if isinstance(value, str) else repr(float(value))


def write_metrics_csv(path: Path, records: list[RunRecord]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for r in records:
            writer.writerow((r.method, r.seed, _metric_str(_snr_db_str(r.input_snr_db)),
                             _metric_str(r.recon_snr_db), _metric_str(r.final_g),
                             r.iters, repr(r.wall_ms), r.manifest_hash))


def _snr_db_str(v) -> object:
    return "inf" if v == "inf" else float(v)


def run_reconstruct(cfg: dict, jobs: int = 1) -> tuple[list[RunRecord], bool]:
    """Run the configured method for every (seed x snr) cell.

    A diverging cell is recorded with a failure marker and never aborts the
    grid. Returns (records, any_failed).
    """
    out = Path(cfg["output_dir"])
    manifest, manifest_hash = _load_manifest(out)
    x_true = read_array(out / manifest["files"]["truth"])
    op = CdpOperator(masks=load_masks(out / manifest["files"]["masks"]))
    sched = build_schedule(cfg)
    model = build_model(cfg, manifest["image"]["channels"])

    cells = []
    for entry in manifest["measurements"]:
        meas = _load_measurements(out, manifest, entry)
        for seed in cfg["seeds"]:
            cells.append((entry, meas, seed))

    def work(cell):
        entry, meas, seed = cell
        return _run_cell(cfg, out, op, sched, model, x_true, meas, entry, seed, manifest_hash)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(work, cells))
    else:
        records = [work(c) for c in cells]

    write_metrics_csv(out / "metrics.csv", records)
    run_manifest = {
        "kind": "reconstruction_manifest",
        "config_hash": config_hash(cfg),
        "measurement_manifest_hash": manifest_hash,
        "method": cfg["method"]["name"],
        "metrics": "metrics.csv",
        "cells": [{
            "seed": r.seed, "snr_tag": r.snr_tag, "artifacts": r.artifacts,
            "error": r.error,
        } for r in records],
    }
    (out / "run_manifest.json").write_text(json.dumps(run_manifest, sort_keys=True, indent=2) + "\n")
    return records, any(r.error is not None for r in records)


# ---------------------------------------------------------------------------
# sample-many
# ---------------------------------------------------------------------------


def run_sample_many(cfg: dict, n_samples: int, jobs: int = 1) -> dict:
    """n reconstructions from the config's first n seeds on one measurement set.

    Writes the samples, the pairwise L2 distance matrix, per-sample fidelity,
    and an optional side-by-side PNG grid. Duplicate seeds are allowed (and
    produce zero distance), so determinism is directly observable.
    """
    if n_samples < 2:
        raise ConfigError(f"n_samples must be >= 2, got {n_samples}")
    if len(cfg["seeds"]) < n_samples:
        raise ConfigError(
            f"seeds: need at least {n_samples} entries for sample-many, got {len(cfg['seeds'])}")
    out = Path(cfg["output_dir"])
    manifest, manifest_hash = _load_manifest(out)
    entry = manifest["measurements"][0]
    meas = _load_measurements(out, manifest, entry)
    x_true = read_array(out / manifest["files"]["truth"])
    op = CdpOperator(masks=load_masks(out / manifest["files"]["masks"]))
    sched = build_schedule(cfg)
    model = build_model(cfg, manifest["image"]["channels"])
    seeds = cfg["seeds"][:n_samples]

    def work(seed):
        return _run_cell(cfg, out, op, sched, model, x_true, meas, entry, seed, manifest_hash)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(work, seeds))
    else:
        records = [work(s) for s in seeds]
    failed = [r for r in records if r.error is not None]
    if failed:
        raise DivergenceError(
            f"{len(failed)} of {n_samples} sample chains diverged (first: {failed[0].error})")

    samples = [read_array(out / r.artifacts["recon"]) for r in records]
    dist = np.zeros((n_samples, n_samples))
    for i in range(n_samples):
        for j in range(i + 1, n_samples):
            dist[i, j] = dist[j, i] = float(np.linalg.norm(samples[i] - samples[j]))
    with (out / "sample_distances.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed"] + [str(s) for s in seeds])
        for i, seed in enumerate(seeds):
            writer.writerow([seed] + [repr(v) for v in dist[i]])

    if cfg["write_png"]:
        grid = np.concatenate([_normalized_png(s) for s in samples], axis=-1)
        write_image(grid, out / "sample_grid.png")

    result = {
        "kind": "sample_manifest",
        "config_hash": config_hash(cfg),
        "measurement_manifest_hash": manifest_hash,
        "snr_tag": entry["tag"],
        "distances": "sample_distances.csv",
        "samples": [{
            "seed": r.seed,
            "final_g": r.final_g,
            "recon_snr_db": r.recon_snr_db,
            "artifacts": r.artifacts,
        } for r in records],
    }
    if cfg["write_png"]:
        result["grid_png"] = "sample_grid.png"
    (out / "sample_manifest.json").write_text(json.dumps(result, sort_keys=True, indent=2) + "\n")
    return result


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def run_train(cfg: dict) -> dict:
    """Train the tiny denoiser on a synthetic dataset; write checkpoint + loss CSV."""
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    master = cfg["master_seed"]
    tr = cfg["train"]
    ds = tr["dataset"]

    data = synth_images(ds, ds["size"] + ds["holdout"], substream(master, "train_data"))
    train_data, holdout = data[: ds["size"]], data[ds["size"] :]

    arch = TinyDenoiserConfig(channels=ds["channels"], hidden=tuple(tr["hidden"]),
                              kernel_size=tr["kernel_size"])
    tcfg = TrainConfig(arch=arch, epochs=tr["epochs"], batch_size=tr["batch_size"],
                       learning_rate=tr["learning_rate"], momentum=tr["momentum"],
                       init_scale=tr["init_scale"])
    init = None
    if tr["resume"]:
        resume_path = Path(tr["resume"])
        if not resume_path.is_file():
            raise ConfigError(f"train.resume: checkpoint not found: {resume_path}")
        init = load_checkpoint(resume_path, expected=arch)

    sched = build_schedule(cfg)
    result = train_tiny_denoiser(train_data, sched, tcfg, substream(master, "train"), init=init)

    ckpt_name = tr["checkpoint_name"]
    save_checkpoint(result.params, out / ckpt_name)
    with (out / "loss_trace.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("epoch", "loss"))
        for i, loss in enumerate(result.epoch_losses):
            writer.writerow((i, repr(loss)))

    info = {
        "kind": "train_manifest",
        "config_hash": config_hash(cfg),
        "checkpoint": ckpt_name,
        "loss_trace": "loss_trace.csv",
        "epochs": tr["epochs"],
        "final_epoch_loss": result.epoch_losses[-1] if result.epoch_losses else None,
    }
    if ds["holdout"] > 0 and ds["source"] == "gaussian":
        info["heldout_oracle_gap_per_pixel"] = heldout_oracle_gap(
            result.params, holdout, GaussianPrior(ds["mean"], ds["std"] ** 2), sched,
            substream(master, "train_holdout"))
    (out / "train_manifest.json").write_text(json.dumps(info, sort_keys=True, indent=2) + "\n")
    return info


def heldout_oracle_gap(params, holdout: np.ndarray, prior: GaussianPrior, sched,
                       rng: np.random.Generator) -> float:
    """Mean per-pixel squared discrepancy between the net and the exact oracle.

    Evaluated at noisy latents formed from held-out clean samples with random
    step indices.
    """
    n = holdout.shape[0]
    t_idx = rng.integers(1, sched.T + 1, size=n)
    eps = rng.standard_normal(holdout.shape)
    a_bar = sched.alpha_bar[t_idx - 1][:, None, None, None]
    x_t = np.sqrt(a_bar) * holdout + np.sqrt(1.0 - a_bar) * eps
    pred, _ = _forward_batch(params, x_t, t_idx / sched.T)
    oracle = np.stack([analytic_epsilon(prior, x_t[i], int(t_idx[i]), sched) for i in range(n)])
    return float(((pred - oracle) ** 2).mean())
