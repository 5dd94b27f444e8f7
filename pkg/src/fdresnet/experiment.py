"""Task orchestration behind the command line: runs, sweeps and their reports."""

from __future__ import annotations

import csv
import datetime as dt
import logging
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import plotting
from .analysis import (
    extract_features,
    gradcam,
    mean_average_precision,
    overlay,
    write_pgm,
    write_ppm,
    write_retrieval_table,
)
from .config import ExperimentConfig, dump_config
from .data import (
    DataError,
    LabeledImageSet,
    channel_stats,
    load_cifar10,
    load_mnist_idx,
    make_synthetic_frequency_dataset,
)
from .filters import gaussian_kernel_1d
from .gradcheck import gradcheck_report
from .models import build_model, load_checkpoint
from .tensor import precision
from .train import NumericalError, evaluate, robustness_report, train

__all__ = ["RunResult", "run_experiment", "make_run_dir", "load_datasets", "run_sweep", "parse_grid"]

log = logging.getLogger(__name__)


@dataclass
class RunResult:
    out_dir: Path
    metrics: dict = field(default_factory=dict)
    model: object = None
    gradcheck_failed: bool = False


def make_run_dir(out_root, name: str) -> Path:
    stamp = dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    base = Path(out_root) / f"{name}_{stamp}"
    path, i = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}_{i}")
        i += 1
    for sub in ("checkpoints", "reports", "saliency"):
        (path / sub).mkdir(parents=True, exist_ok=True)
    return path


def load_datasets(cfg: ExperimentConfig) -> tuple[LabeledImageSet, LabeledImageSet]:
    d = cfg.data
    if d.dataset == "synthetic":
        train_set, test_set = make_synthetic_frequency_dataset(d.n_per_class, d.data_seed)
    elif d.dataset == "cifar10":
        train_set, test_set = load_cifar10(d.root)
    else:
        train_set, test_set = load_mnist_idx(d.root)
    if d.train_subset:
        train_set = train_set.subset(np.arange(min(d.train_subset, len(train_set))))
    if d.test_subset:
        test_set = test_set.subset(np.arange(min(d.test_subset, len(test_set))))
    return train_set, test_set


def _write_csv(path, rows: list[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _resolve_normalization(cfg: ExperimentConfig, train_set: LabeledImageSet) -> ExperimentConfig:
    """Fill in per-channel stats from the training split when not configured."""
    if cfg.data.normalize_mean is not None and cfg.data.normalize_std is not None:
        return cfg
    mean, std = channel_stats(train_set.images)
    data = cfg.data.model_copy(update={"normalize_mean": list(mean), "normalize_std": list(std)})
    return cfg.model_copy(update={"data": data})


def _write_manifest(cfg: ExperimentConfig, out_dir: Path, tasks) -> None:
    header = [
        f"# fdresnet {__version__} run manifest",
        f"# created {dt.datetime.now().isoformat(timespec='seconds')}",
        f"# python {platform.python_version()}, numpy {np.__version__}",
        f"# tasks executed: {', '.join(tasks)}",
        "# this file is a complete config: `fdresnet run --config manifest.yaml` reproduces the run",
    ]
    (out_dir / "manifest.yaml").write_text("\n".join(header) + "\n" + dump_config(cfg))


def run_experiment(cfg: ExperimentConfig, out_dir, tasks=None, echo=print) -> RunResult:
    """Execute ``tasks`` (default: ``cfg.tasks``) in order, writing into ``out_dir``."""
    tasks = list(tasks or cfg.tasks)
    out_dir = Path(out_dir)
    for sub in ("checkpoints", "reports", "saliency"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    reports = out_dir / "reports"
    result = RunResult(out_dir)

    needs_data = any(t in tasks for t in ("train", "eval", "robustness", "gradcam", "retrieve"))
    train_set = test_set = None
    if needs_data:
        try:
            train_set, test_set = load_datasets(cfg)
        except (OSError, DataError) as exc:
            raise DataError(f"data.root: {exc}") from exc
        cfg = _resolve_normalization(cfg, train_set)
    _write_manifest(cfg, out_dir, tasks)
    spec = cfg.augment_spec(cfg.data.normalize_mean or [0.0] * cfg.in_channels(),
                            cfg.data.normalize_std or [1.0] * cfg.in_channels())
    tcfg = cfg.to_train_config()

    model = None

    def get_model():
        nonlocal model
        if model is None:
            with precision(tcfg.precision):
                if cfg.model.checkpoint:
                    model = load_checkpoint(cfg.model.checkpoint)
                else:
                    model = build_model(cfg.to_model_config(), seed=tcfg.seed)
        return model

    for task in tasks:
        log.info("task %s", task)
        if task == "train":
            m = get_model()
            runlog = train(m, train_set, test_set, tcfg, spec, out_dir=out_dir)
            plotting.plot_convergence({cfg.name: runlog}, reports / "convergence.png")
            result.metrics["final_test_acc"] = runlog.records[-1].test_acc
            result.metrics["final_train_loss"] = runlog.records[-1].train_loss
            sig = m.sigma_values()
            if sig:
                _write_csv(reports / "sigma.csv", [{"filter": k, "sigma": v} for k, v in sig.items()])
        elif task == "eval":
            m = get_model()
            with precision(tcfg.precision):
                acc, scores = evaluate(m, test_set, spec)
            result.metrics["test_acc"] = acc
            _write_csv(reports / "eval.csv", [{"model": cfg.name, "split": "test", "n": len(test_set),
                                               "accuracy": acc}])
            _write_csv(reports / "scores.csv", [
                {"sample": i, "label": int(test_set.labels[i]), "true_class_score": float(s)}
                for i, s in enumerate(scores)
            ])
            echo(f"test accuracy {acc:.4f}")
        elif task == "robustness":
            m = get_model()
            a = cfg.analysis
            with precision(tcfg.precision):
                rows = robustness_report({cfg.name: m}, test_set, spec, a.robustness_kernels,
                                         a.robustness_sigma)
            _write_csv(reports / "robustness.csv", rows)
            plotting.plot_robustness(rows, reports / "robustness.png")
            result.metrics["robustness"] = rows
        elif task == "gradcam":
            m = get_model()
            result.metrics["gradcam"] = _run_gradcam(m, cfg, test_set, spec, out_dir, tcfg.precision)
        elif task == "retrieve":
            m = get_model()
            with precision(tcfg.precision):
                index = extract_features(m, test_set, spec)
            metric = cfg.analysis.retrieval_metric
            mAP = mean_average_precision(index, metric=metric)
            write_retrieval_table(reports / "retrieval.csv", index, cfg.analysis.retrieval_top_k, metric)
            _write_csv(reports / "retrieval_summary.csv", [{
                "model": cfg.name, "protocol": cfg.analysis.retrieval_protocol,
                "metric": metric, "n": len(test_set), "mAP": mAP,
            }])
            result.metrics["mAP"] = mAP
            echo(f"retrieval mAP {mAP:.4f}")
        elif task == "dump-kernel":
            low, high = cfg.gaussian_specs()
            kernels = {}
            rows = []
            for name, s in (("low", low), ("high", high)):
                w = gaussian_kernel_1d(s.kernel_size, s.sigma)
                kernels[f"{name} k{s.kernel_size} sigma {s.sigma:g}"] = w
                echo(f"{name} kernel size={s.kernel_size} sigma={s.sigma:g}: "
                     + " ".join(f"{v:.10f}" for v in w))
                rows += [{"pass": name, "kernel": s.kernel_size, "sigma": s.sigma, "index": i,
                          "weight": repr(float(v))} for i, v in enumerate(w)]
            _write_csv(reports / "kernels.csv", rows)
            plotting.plot_kernels(kernels, reports / "kernels.png")
        elif task == "gradcheck":
            rows = gradcheck_report(cfg.to_model_config(), seed=tcfg.seed)
            _write_csv(reports / "gradcheck.csv", rows)
            worst = max(r["max_rel_error"] for r in rows)
            result.metrics["gradcheck_max_rel_error"] = worst
            tol = cfg.analysis.gradcheck_tolerance
            for r in rows:
                flag = "ok" if r["max_rel_error"] < tol else "FAIL"
                echo(f"gradcheck {r['check']:<28s} {r['max_rel_error']:.3e} {flag}")
            result.gradcheck_failed = worst >= tol
        else:  # pragma: no cover - rejected by config validation
            raise ValueError(f"unknown task {task}")
    result.model = model
    return result


def _run_gradcam(model, cfg, test_set, spec, out_dir: Path, prec) -> list[dict]:
    n = min(cfg.analysis.gradcam_samples, len(test_set))
    # evenly spread over the test set so several classes appear
    picks = np.linspace(0, len(test_set) - 1, n).round().astype(int)
    images, maps, titles, rows = [], [], [], []
    tap = cfg.analysis.gradcam_tap
    with precision(prec):
        for j, i in enumerate(picks):
            raw = test_set.images[i]
            x = ((raw - np.asarray(spec.mean, dtype=raw.dtype)[:, None, None])
                 / np.asarray(spec.std, dtype=raw.dtype)[:, None, None])
            label = int(test_set.labels[i])
            sal = gradcam(model, x, label, tap)
            stem = out_dir / "saliency" / f"sample_{j:02d}_idx{i}_class{label}"
            write_pgm(stem.with_suffix(".pgm"), sal.values)
            write_ppm(stem.with_name(stem.name + "_overlay.ppm"), overlay(raw, sal.values))
            images.append(raw)
            maps.append(sal.values)
            titles.append(test_set.class_names[label])
            rows.append({"sample": int(i), "class": label, "tap": tap, "empty": sal.is_empty,
                         "path": str(stem.with_suffix(".pgm").name)})
    plotting.plot_saliency_grid(images, maps, titles, out_dir / "reports" / "saliency.png")
    _write_csv(out_dir / "reports" / "gradcam.csv", rows)
    return rows


# -- sweeps ------------------------------------------------------------------------------

def parse_grid(grid: dict) -> tuple[list[dict], int]:
    """Expand a grid description into cells.

    Accepted keys: ``cells`` (list of ``{low, high, sigma}`` or ``[low, high]``; ``low`` or
    ``high`` null for a single skip), or ``kernels`` + ``sigmas`` (matched
    ``(Lk, Hk)`` pairs for every sigma; ``"trainable"`` is a valid sigma);
    ``baseline`` (prepend the plain ResNet cell, default false); ``repeat``.
    """
    unknown = set(grid) - {"cells", "kernels", "sigmas", "baseline", "repeat"}
    if unknown:
        raise ValueError(f"unknown grid keys: {sorted(unknown)}")
    repeat = int(grid.get("repeat", 1))
    if repeat < 1:
        raise ValueError("grid repeat must be >= 1")
    cells = []
    if grid.get("baseline", False):
        cells.append({"cell": "ResNet", "variant": "resnet", "low": None, "high": None, "sigma": None})
    raw_cells = list(grid.get("cells", []))
    for k in grid.get("kernels", []):
        for s in grid.get("sigmas", [1.0]):
            raw_cells.append({"low": k, "high": k, "sigma": s})
    for c in raw_cells:
        if isinstance(c, (list, tuple)) and len(c) in (2, 3):
            c = dict(zip(("low", "high", "sigma"), c))
        if not isinstance(c, dict) or set(c) - {"low", "high", "sigma"}:
            raise ValueError(f"grid cell {c!r} must be {{low, high, sigma}} or [low, high(, sigma)]")
        low, high, sigma = c.get("low"), c.get("high"), c.get("sigma", 1.0)
        if low is None and high is None:
            raise ValueError("a grid cell needs at least one of low/high")
        lo = "Nil" if low is None else f"L{low}"
        hi = "Nil" if high is None else f"H{high}"
        name = f"({lo}, {hi}) s={sigma}"
        cells.append({"cell": name, "variant": "fdresnet", "low": low, "high": high, "sigma": sigma})
    return cells, repeat


def _cell_overrides(cell: dict) -> list[str]:
    if cell["variant"] == "resnet":
        return ["model.variant=resnet"]
    ov = ["model.variant=fdresnet"]
    trainable = cell["sigma"] == "trainable"
    sigma = 1.0 if trainable else float(cell["sigma"])
    ov.append(f"filter.trainable={'true' if trainable else 'false'}")
    for side in ("low", "high"):
        if cell[side] is not None:
            ov += [f"filter.{side}.kernel={int(cell[side])}", f"filter.{side}.sigma={sigma}"]
    if cell["low"] is None:
        ov.append("filter.single_path=high")
    elif cell["high"] is None:
        ov.append("filter.single_path=low")
    return ov


def run_sweep(cfg_path, grid: dict, out_dir, base_overrides=None, echo=print) -> list[dict]:
    """Train/evaluate every grid cell ``repeat`` times; writes ``summary.csv``."""
    from .config import ConfigError, load_config

    cells, repeat = parse_grid(grid)
    out_dir = Path(out_dir)
    (out_dir / "reports").mkdir(parents=True, exist_ok=True)
    rows = []
    for cell in cells:
        accs, status, runlogs = [], "ok", {}
        for r in range(repeat):
            try:
                overrides = list(base_overrides or []) + _cell_overrides(cell)
                base = load_config(cfg_path, overrides)
                seed = base.train.seed + r
                cfg = load_config(cfg_path, overrides + [f"train.seed={seed}", "tasks=[train]",
                                                         f"name='{_slug(cell['cell'])}'"])
                cell_dir = out_dir / "cells" / _slug(cell["cell"]) / f"seed_{seed}"
                res = run_experiment(cfg, cell_dir, echo=lambda *_: None)
                accs.append(res.metrics["final_test_acc"])
            except (ConfigError, ValueError, NumericalError, DataError) as exc:
                status = f"failed: {exc}".replace("\n", " ")
                log.warning("cell %s failed: %s", cell["cell"], exc)
                break
        row = {
            "cell": cell["cell"], "variant": cell["variant"],
            "low_kernel": cell["low"] if cell["low"] is not None else "Nil",
            "high_kernel": cell["high"] if cell["high"] is not None else "Nil",
            "sigma": cell["sigma"] if cell["sigma"] is not None else "",
            "repeats": len(accs),
            "mean_acc": float(np.mean(accs)) if accs else float("nan"),
            "std_acc": float(np.std(accs)) if accs else float("nan"),
            "accs": ";".join(f"{a:.4f}" for a in accs),
            "status": status,
        }
        rows.append(row)
        echo(f"{row['cell']:<22s} {row['mean_acc']:.4f} +- {row['std_acc']:.4f} ({row['status']})")
    _write_csv(out_dir / "reports" / "summary.csv", rows)
    plotting.plot_sweep(rows, out_dir / "reports" / "summary.png")
    return rows


def _slug(name: str) -> str:
    keep = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)
    return "_".join(p for p in keep.split("_") if p)
