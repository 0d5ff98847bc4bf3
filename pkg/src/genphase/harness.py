"""Experiment harness: config files, dataset ingestion, sweeps, reports.

A sweep evaluates recovery quality over a grid of (image, measurement count,
noise level, trial) cells and writes a report bundle:

    records.csv        one row per successful cell (schema below)
    summary.json       per-(m, noise) means and standard deviations
    failures.json      manifest of skipped inputs and failed cells
    config_echo.json   the fully resolved configuration that produced the run
    grid_m*_noise*.png original / range-projection / reconstruction image grids
    psnr_vs_m.png, ssim_vs_m.png, psnr_vs_noise.png   metric curves

CSV schema (fixed):
    item,m,noise_pct,trial,psnr_orig,psnr_range,ssim_orig,ssim_range,ppe,residual,wall_ms

Every value except ``wall_ms`` is a pure function of the config and master
seed, so two runs of the same config differ only in that column. Infinite
PSNR serializes as the string ``inf``.

Per-cell seeds derive from (master_seed, item_index, m, noise_percent, trial)
through :func:`mix_seed`, a splitmix64-style avalanche fold, so any cell can
be reproduced in isolation.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from PIL import Image, UnidentifiedImageError

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import generator as gen
from . import measure as ms
from . import metrics as mt
from . import solver as sv
from .errors import ConfigError, DataError, SolveFailed

log = logging.getLogger("genphase.harness")

CSV_HEADER = ("item", "m", "noise_pct", "trial", "psnr_orig", "psnr_range",
              "ssim_orig", "ssim_range", "ppe", "residual", "wall_ms")

_MASK64 = (1 << 64) - 1


def mix_seed(*parts):
    """Fold integer parts into one 64-bit seed (splitmix64 finalizer per part).

    Float parts are accepted at millipercent resolution (x1000, rounded) so
    noise levels mix cleanly. The result never collides across distinct part
    tuples in practice and is stable across platforms.
    """
    acc = 0x9E3779B97F4A7C15
    for p in parts:
        if isinstance(p, float):
            p = round(p * 1000.0)
        acc = (acc + int(p)) & _MASK64
        acc = (acc + 0x9E3779B97F4A7C15) & _MASK64
        z = acc
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        acc = z ^ (z >> 31)
    return acc


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSpec:
    """Where test images come from and how they are shaped."""

    directory: str
    target_shape: tuple
    count: int = 0          # 0 means every usable file
    mode: str = "grayscale"  # or "rgb"
    zero_pad: bool = False   # False: bilinear resize to target

    def __post_init__(self):
        if self.mode not in ("grayscale", "rgb"):
            raise ConfigError(f"dataset mode must be grayscale or rgb, "
                              f"got {self.mode!r}")
        shape = tuple(int(s) for s in self.target_shape)
        if len(shape) != 3 or any(s < 1 for s in shape):
            raise ConfigError(f"target_shape must be (h, w, c), got {shape}")
        if shape[2] not in (1, 3):
            raise ConfigError("target_shape channel count must be 1 or 3")
        if self.count < 0:
            raise ConfigError(f"count must be >= 0, got {self.count}")
        object.__setattr__(self, "target_shape", shape)


@dataclass(frozen=True)
class OperatorSpec:
    """Measurement family plus family-specific parameters."""

    family: str                     # gaussian | cdp | tm
    tm_path: str = ""
    residual_threshold: float = 0.4

    def __post_init__(self):
        if self.family not in ("gaussian", "cdp", "tm"):
            raise ConfigError(f"unknown operator family {self.family!r}")
        if self.family == "tm" and not self.tm_path:
            raise ConfigError("tm operator requires tm_path")


@dataclass(frozen=True)
class ExperimentConfig:
    generator_path: str
    dataset: DatasetSpec
    operator: OperatorSpec
    m_values: tuple
    out_dir: str
    master_seed: int = 0
    noise_percents: tuple = (0.0,)
    noise_mode: str = "relative"
    trials: int = 1
    solver: sv.SolverConfig = field(default_factory=sv.SolverConfig)
    projection: sv.SolverConfig = field(default_factory=sv.SolverConfig)
    sweep_workers: int = 1

    def __post_init__(self):
        if len(self.m_values) == 0:
            raise ConfigError("m_values must be non-empty")
        if any(int(m) < 1 for m in self.m_values):
            raise ConfigError("every m must be >= 1")
        if len(self.noise_percents) == 0:
            raise ConfigError("noise_percents must be non-empty")
        if any(p < 0 for p in self.noise_percents):
            raise ConfigError("noise percents must be >= 0")
        if self.noise_mode not in ("relative", "absolute"):
            raise ConfigError(f"unknown noise mode {self.noise_mode!r}")
        if self.trials < 1:
            raise ConfigError(f"trials must be >= 1, got {self.trials}")
        if self.master_seed < 0:
            raise ConfigError("master_seed must be >= 0")
        if self.sweep_workers < 1:
            raise ConfigError("sweep_workers must be >= 1")
        object.__setattr__(self, "m_values", tuple(int(m) for m in self.m_values))
        object.__setattr__(self, "noise_percents",
                           tuple(float(p) for p in self.noise_percents))
        if not Path(self.generator_path).is_file():
            raise ConfigError(f"generator file not found: {self.generator_path}")
        if not Path(self.dataset.directory).is_dir():
            raise ConfigError(f"dataset directory not found: "
                              f"{self.dataset.directory}")
        if self.operator.family == "tm" and not Path(self.operator.tm_path).is_file():
            raise ConfigError(f"TM file not found: {self.operator.tm_path}")


def _table(raw, name):
    value = raw.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(f"[{name}] must be a table")
    return dict(value)


def _solver_from_table(table, context):
    try:
        return sv.SolverConfig(**table)
    except TypeError as exc:
        raise ConfigError(f"bad [{context}] key: {exc}") from exc


def load_config(path, out_dir=None, master_seed=None):
    """Parse and validate a TOML experiment file.

    ``out_dir`` and ``master_seed`` override the file when given (the CLI's
    --out/--seed flags). See the annotated example in the README for every
    recognized key.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    exp = _table(raw, "experiment")
    ds = _table(raw, "dataset")
    op = _table(raw, "operator")
    sweep = _table(raw, "sweep")
    solver_cfg = _solver_from_table(_table(raw, "solver"), "solver")
    if "projection" in raw:
        projection_cfg = _solver_from_table(_table(raw, "projection"),
                                            "projection")
    else:
        projection_cfg = solver_cfg
    try:
        generator_path = exp.pop("generator")
        file_out = exp.pop("out_dir", None)
        file_seed = int(exp.pop("master_seed", 0))
        resolved_out = out_dir if out_dir is not None else file_out
        if resolved_out is None:
            raise ConfigError("no output directory: set [experiment] out_dir "
                              "or pass --out")
        config = ExperimentConfig(
            generator_path=generator_path,
            out_dir=str(resolved_out),
            master_seed=master_seed if master_seed is not None else file_seed,
            dataset=DatasetSpec(
                directory=ds.pop("dir"),
                target_shape=tuple(ds.pop("target_shape")),
                **ds,
            ),
            operator=OperatorSpec(**op),
            m_values=tuple(sweep.pop("m_values")),
            noise_percents=tuple(sweep.pop("noise_percents", [0.0])),
            noise_mode=sweep.pop("noise_mode", "relative"),
            trials=int(sweep.pop("trials", 1)),
            sweep_workers=int(sweep.pop("workers", 1)),
            solver=solver_cfg,
            projection=projection_cfg,
        )
    except KeyError as exc:
        raise ConfigError(f"missing required config key: {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"unrecognized config key: {exc}") from exc
    for name, leftover in (("experiment", exp), ("sweep", sweep)):
        if leftover:
            raise ConfigError(f"unknown [{name}] keys: {sorted(leftover)}")
    return config


# ---------------------------------------------------------------------------
# dataset ingestion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IngestResult:
    items: tuple     # file stems, lexicographic order
    images: tuple    # float arrays in [0, 1], target shape
    skipped: tuple   # unusable file names, with reasons


def _shape_image(img, spec):
    h, w, c = spec.target_shape
    img = img.convert("L" if c == 1 else "RGB")
    if spec.zero_pad:
        if img.height > h or img.width > w:
            raise DataError(f"{img.size} does not fit inside zero-pad target "
                            f"({w}, {h})")
        arr = np.asarray(img, dtype=np.float64) / 255.0
        if arr.ndim == 2:
            arr = arr[:, :, None]
        out = np.zeros((h, w, c), dtype=np.float64)
        top = (h - arr.shape[0]) // 2
        left = (w - arr.shape[1]) // 2
        out[top:top + arr.shape[0], left:left + arr.shape[1], :] = arr
        return out
    if (img.height, img.width) != (h, w):
        img = img.resize((w, h), Image.Resampling.BILINEAR)
    arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def load_image(path, spec: DatasetSpec):
    """Shape a single image file exactly as dataset ingestion would."""
    try:
        with Image.open(path) as img:
            return _shape_image(img, spec)
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def ingest_images(spec: DatasetSpec) -> IngestResult:
    """Load, normalize and shape every usable image under ``spec.directory``.

    Files are taken in lexicographic name order; PNG, PGM and PPM are
    accepted. Unreadable or unpaddable files are skipped with a warning and
    reported; zero usable files is an error.
    """
    root = Path(spec.directory)
    files = sorted(p for p in root.iterdir()
                   if p.suffix.lower() in (".png", ".pgm", ".ppm"))
    items, images, skipped = [], [], []
    for path in files:
        if spec.count and len(items) >= spec.count:
            break
        try:
            with Image.open(path) as img:
                arr = _shape_image(img, spec)
        except (OSError, UnidentifiedImageError, DataError) as exc:
            log.warning("skipping %s: %s", path.name, exc)
            skipped.append(f"{path.name}: {exc}")
            continue
        items.append(path.stem)
        images.append(arr)
    if not items:
        raise DataError(f"no usable images in {root}")
    return IngestResult(items=tuple(items), images=tuple(images),
                        skipped=tuple(skipped))


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def build_operator(spec: OperatorSpec, m, target_shape, seed):
    """Instantiate the configured measurement family at m rows."""
    h, w, c = target_shape
    n = h * w * c
    if spec.family == "gaussian":
        return ms.make_gaussian(m, n, seed)
    if spec.family == "cdp":
        if c != 1:
            raise ConfigError("cdp operators require single-channel targets")
        return ms.make_cdp_total(h, w, m, seed)
    op = ms.load_tm(spec.tm_path, spec.residual_threshold, m, seed)
    if op.n != n:
        raise ConfigError(f"TM columns ({op.n}) do not match target pixel "
                          f"count ({n})")
    return op


@dataclass(frozen=True)
class RunRecord:
    item: str
    m: int
    noise_pct: float
    trial: int
    psnr_orig: float
    psnr_range: float
    ssim_orig: float
    ssim_range: float
    ppe: float
    residual: float
    wall_ms: float


def _fmt(v):
    if isinstance(v, float):
        if np.isinf(v):
            return "inf" if v > 0 else "-inf"
        if np.isnan(v):
            return "nan"
        return repr(v)
    return str(v)


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if np.isfinite(v):
            return v
        return _fmt(v)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _run_cell(model, config, item_index, item, image, m, pct, trial, x_range):
    cell_seed = mix_seed(config.master_seed, item_index, m, pct, trial)
    op = build_operator(config.operator, m, config.dataset.target_shape,
                        seed=mix_seed(cell_seed, 1))
    mv = ms.measure_magnitude(op, image.ravel(), pct,
                              noise_mode=config.noise_mode,
                              seed=mix_seed(cell_seed, 2))
    t0 = time.perf_counter()
    best, _ = sv.solve(model, op, mv.y,
                       replace(config.solver, seed=mix_seed(cell_seed, 3)))
    wall_ms = (time.perf_counter() - t0) * 1e3
    x_hat = np.asarray(best.x_hat, dtype=np.float64)
    if x_range is None:
        psnr_range = float("nan")
        ssim_range = float("nan")
    else:
        psnr_range = mt.psnr(x_range, x_hat)
        ssim_range = mt.ssim(x_range, x_hat)
    return RunRecord(
        item=item, m=m, noise_pct=pct, trial=trial,
        psnr_orig=mt.psnr(image, x_hat),
        psnr_range=psnr_range,
        ssim_orig=mt.ssim(image, x_hat),
        ssim_range=ssim_range,
        ppe=mt.per_pixel_error(image, x_hat),
        residual=best.residual,
        wall_ms=wall_ms,
    ), x_hat


def run_sweep(config: ExperimentConfig):
    """Execute the full sweep grid and write the report bundle.

    Returns the bundle directory. Cell failures never abort the sweep; they
    land in failures.json and the corresponding CSV row is omitted, so each
    grid cell shows up in exactly one of the two files.
    """
    model = gen.load_generator(config.generator_path)
    if config.dataset.target_shape != model.output_shape:
        raise ConfigError(
            f"target_shape {config.dataset.target_shape} does not match "
            f"generator output {model.output_shape}"
        )
    ingest = ingest_images(config.dataset)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config_echo.json", _config_echo(config))

    failures = [{"stage": "ingest", "detail": s} for s in ingest.skipped]

    # one range projection per item, reused across all of its cells
    x_ranges = {}
    for idx, (item, image) in enumerate(zip(ingest.items, ingest.images)):
        try:
            proj = sv.project_to_range(
                model, image.astype(np.float64),
                replace(config.projection,
                        seed=mix_seed(config.master_seed, idx, 0, 0.0, 0, 4)))
            x_ranges[item] = np.asarray(proj.x_hat, dtype=np.float64)
        except SolveFailed as exc:
            log.warning("range projection failed for %s: %s", item, exc)
            failures.append({"stage": "range_projection", "item": item,
                             "detail": str(exc)})
            x_ranges[item] = None

    cells = [(idx, item, image, m, pct, trial)
             for idx, (item, image) in enumerate(zip(ingest.items,
                                                     ingest.images))
             for m in config.m_values
             for pct in config.noise_percents
             for trial in range(config.trials)]

    def eval_cell(cell):
        idx, item, image, m, pct, trial = cell
        try:
            record, x_hat = _run_cell(model, config, idx, item, image, m, pct,
                                      trial, x_ranges[item])
            return record, x_hat, None
        except (SolveFailed, DataError, ConfigError) as exc:
            return None, None, {"stage": "cell", "item": item, "m": m,
                                "noise_pct": pct, "trial": trial,
                                "detail": str(exc)}

    if config.sweep_workers > 1:
        with ThreadPoolExecutor(max_workers=config.sweep_workers) as pool:
            outcomes = list(pool.map(eval_cell, cells))
    else:
        outcomes = [eval_cell(c) for c in cells]

    records, recons = [], {}
    for cell, (record, x_hat, failure) in zip(cells, outcomes):
        if failure is not None:
            failures.append(failure)
            continue
        records.append(record)
        # keep trial 0 reconstructions for the figure grids
        if cell[5] == 0:
            recons[(cell[1], cell[3], cell[4])] = x_hat

    records.sort(key=lambda r: (r.item, r.m, r.noise_pct, r.trial))
    _write_csv(out / "records.csv", records)
    _write_json(out / "failures.json",
                {"count": len(failures), "failures": failures})
    _write_json(out / "summary.json", _summarize(config, ingest, records,
                                                 failures))
    _render_grids(out, config, ingest, x_ranges, recons)
    _render_curves(out, config, records)
    return out


def _config_echo(config):
    echo = asdict(config)
    echo["csv_header"] = ",".join(CSV_HEADER)
    return _json_safe(echo)


def _write_csv(path, records):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow([
                r.item, r.m, _fmt(r.noise_pct), r.trial,
                _fmt(r.psnr_orig), _fmt(r.psnr_range),
                _fmt(r.ssim_orig), _fmt(r.ssim_range),
                _fmt(r.ppe), _fmt(r.residual), _fmt(r.wall_ms),
            ])


def _cell_stats(values):
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": _json_safe(float(np.mean(arr))),
            "sd": _json_safe(float(np.std(arr)))}


def _summarize(config, ingest, records, failures):
    cells = []
    for m in config.m_values:
        for pct in config.noise_percents:
            group = [r for r in records if r.m == m and r.noise_pct == pct]
            if not group:
                continue
            cells.append({
                "m": m,
                "noise_pct": pct,
                "count": len(group),
                "psnr_orig": _cell_stats([r.psnr_orig for r in group]),
                "psnr_range": _cell_stats([r.psnr_range for r in group]),
                "ssim_orig": _cell_stats([r.ssim_orig for r in group]),
                "ssim_range": _cell_stats([r.ssim_range for r in group]),
                "ppe": _cell_stats([r.ppe for r in group]),
                "residual": _cell_stats([r.residual for r in group]),
            })
    return {
        "items": list(ingest.items),
        "skipped": list(ingest.skipped),
        "n_records": len(records),
        "n_failures": len(failures),
        "cells": cells,
    }


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(_json_safe(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_png(path, image):
    """Write a [0,1] float image as an 8-bit PNG."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    data = (arr * 255.0).round().astype(np.uint8)
    Image.fromarray(data, mode="L" if data.ndim == 2 else "RGB").save(path)


def _imshow(ax, image):
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if arr.ndim == 3 and arr.shape[2] == 1:
        ax.imshow(arr[:, :, 0], cmap="gray", vmin=0.0, vmax=1.0)
    else:
        ax.imshow(arr)
    ax.set_xticks([])
    ax.set_yticks([])


def _render_grids(out, config, ingest, x_ranges, recons, max_items=8):
    rows = ("original", "range", "reconstruction")
    shown = list(zip(ingest.items, ingest.images))[:max_items]
    for m in config.m_values:
        for pct in config.noise_percents:
            fig, axes = plt.subplots(3, len(shown),
                                     figsize=(1.6 * len(shown), 5.0),
                                     squeeze=False)
            for col, (item, image) in enumerate(shown):
                panels = (image, x_ranges.get(item), recons.get((item, m, pct)))
                for row, panel in enumerate(panels):
                    ax = axes[row][col]
                    if panel is None:
                        ax.axis("off")
                    else:
                        _imshow(ax, panel)
                    if col == 0:
                        ax.set_ylabel(rows[row], fontsize=8)
                    if row == 0:
                        ax.set_title(item, fontsize=7)
            fig.suptitle(f"m={m}, noise={pct:g}%")
            fig.tight_layout()
            fig.savefig(out / f"grid_m{m}_noise{pct:g}.png", dpi=120)
            plt.close(fig)


def _render_metric_curve(out, name, records, x_field, series_field, metric):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    series_values = sorted({getattr(r, series_field) for r in records})
    for sval in series_values:
        group = [r for r in records if getattr(r, series_field) == sval]
        xs = sorted({getattr(r, x_field) for r in group})
        means, sds = [], []
        for x in xs:
            vals = np.asarray([getattr(r, metric) for r in group
                               if getattr(r, x_field) == x], dtype=np.float64)
            finite = vals[np.isfinite(vals)]
            if len(finite) == 0:
                finite = vals
            means.append(float(np.mean(finite)))
            sds.append(float(np.std(finite)))
        ax.errorbar(xs, means, yerr=sds, marker="o", capsize=3,
                    label=f"{series_field}={sval:g}")
    ax.set_xlabel(x_field)
    ax.set_ylabel(metric)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / name, dpi=120)
    plt.close(fig)


def _render_curves(out, config, records):
    if not records:
        return
    _render_metric_curve(out, "psnr_vs_m.png", records,
                         x_field="m", series_field="noise_pct",
                         metric="psnr_orig")
    _render_metric_curve(out, "ssim_vs_m.png", records,
                         x_field="m", series_field="noise_pct",
                         metric="ssim_orig")
    _render_metric_curve(out, "psnr_vs_noise.png", records,
                         x_field="noise_pct", series_field="m",
                         metric="psnr_orig")


# ---------------------------------------------------------------------------
# single-instance reports
# ---------------------------------------------------------------------------


def save_solve_report(out_dir, tag, solver_config, best, every,
                      x_ref=None, x_range=None):
    """Write one solve's JSON report, reconstruction PNG and raw f32 dump.

    The raw dump is planar: channels separated, each channel row-major, little
    endian float32 (shape recorded in the JSON). Returns the JSON path.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    x_hat = np.asarray(best.x_hat, dtype=np.float64)
    report = {
        "tag": tag,
        "solver": asdict(solver_config),
        "best_index": best.index,
        "residuals": [r.residual for r in every],
        "diverged": [r.diverged for r in every],
        "loss_traces": [list(r.loss_trace) for r in every],
        "x_hat_shape": list(x_hat.shape),
    }
    if x_ref is not None:
        report["scores_vs_original"] = asdict(mt.score(x_ref, x_hat))
    if x_range is not None:
        report["scores_vs_range"] = asdict(mt.score(x_range, x_hat))
    save_png(out / f"{tag}_reconstruction.png", x_hat)
    planar = np.transpose(x_hat, (2, 0, 1)).astype("<f4")
    (out / f"{tag}_reconstruction.f32").write_bytes(planar.tobytes())
    if x_ref is not None:
        panels = [("original", x_ref)]
        if x_range is not None:
            panels.append(("range", x_range))
        panels.append(("reconstruction", x_hat))
        fig, axes = plt.subplots(1, len(panels),
                                 figsize=(2.2 * len(panels), 2.6))
        for ax, (name, img) in zip(np.atleast_1d(axes), panels):
            _imshow(ax, img)
            ax.set_title(name, fontsize=8)
        fig.tight_layout()
        fig.savefig(out / f"{tag}_comparison.png", dpi=120)
        plt.close(fig)
    path = out / f"{tag}_report.json"
    _write_json(path, report)
    return path
