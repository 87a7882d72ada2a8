"""Seed/grid sweeps: run every (grid point, seed), keep the min-train-error model.

Output layout under the experiment directory::

    runs/<grid tag>/seed_<s>/report.json
    runs/<grid tag>/seed_<s>/checkpoint.npz
    selected/report.json, checkpoint.npz, selection_table.csv, selection_table.pgm
    summary.json
"""

from __future__ import annotations

import csv
import io
import json
import logging
import shutil
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import datasets as D
from .metrics import active_experts
from .config import ConfigError, ExperimentConfig, grid_tag, is_distill, regime_gate
from .models import build_model, load_checkpoint, save_checkpoint
from .regularizers import RegConfig
from .training import RunReport, distill, evaluate, train

log = logging.getLogger(__name__)

SOURCE_REGIME = {
    "distill_from_importance": "attentive+importance",
    "distill_from_Ls": "attentive+Ls",
}


class DataMissingError(FileNotFoundError):
    pass


class OutputExistsError(FileExistsError):
    pass


class ReportError(ValueError):
    """A report file that does not parse or lacks required fields."""


# -- data -------------------------------------------------------------------
_CACHE: dict[tuple, D.Dataset] = {}


def _dataset_root(explicit: str | None, name: str) -> Path:
    if explicit:
        return Path(explicit)
    base = D.default_data_dir()
    return base / name if (base / name).is_dir() else base


def _load(root: Path, split: str, names) -> D.Dataset:
    key = (str(root.resolve()), split)
    if key not in _CACHE:
        try:
            _CACHE[key] = D.load_standard(root, split, names)
        except FileNotFoundError as exc:
            raise DataMissingError(str(exc)) from exc
    return _CACHE[key]


def load_datasets(spec) -> tuple[D.Dataset, D.Dataset]:
    """Train and test sets for a :class:`DatasetSpec`."""
    if spec.name == "combined":
        mroot = _dataset_root(spec.mnist_root, "mnist")
        froot = _dataset_root(spec.fmnist_root, "fmnist")
        return D.combine_fmnist_mnist(
            _load(froot, "train", D.FMNIST_CLASSES), _load(mroot, "train", D.MNIST_CLASSES),
            spec.train_n, spec.test_n, spec.data_seed,
            fmnist_test=_load(froot, "test", D.FMNIST_CLASSES),
            mnist_test=_load(mroot, "test", D.MNIST_CLASSES),
        )
    names = D.MNIST_CLASSES if spec.name == "mnist" else D.FMNIST_CLASSES
    root = _dataset_root(spec.root, spec.name)
    tr, te = _load(root, "train", names), _load(root, "test", names)
    if spec.train_n is not None and spec.train_n < len(tr):
        tr = D.subsample(tr, spec.train_n, spec.data_seed)
    if spec.test_n is not None and spec.test_n < len(te):
        te = D.subsample(te, spec.test_n, spec.data_seed)
    return tr, te


# -- reports on disk -----------------------------------------------------------
def read_report(path) -> RunReport:
    path = Path(path)
    if path.is_dir():
        path = path / "selected" / "report.json" if (path / "selected").is_dir() else path / "report.json"
    try:
        return RunReport.from_json(path.read_text())
    except FileNotFoundError:
        raise
    except (ValueError, TypeError) as exc:
        raise ReportError(f"{path}: {exc}") from exc


def check_report(report: RunReport, cfg: ExperimentConfig) -> None:
    """Raise ReportError unless ``report`` echoes the training settings of ``cfg``."""
    echo = report.config
    expect = cfg.base_train_config(report.seed)
    for key in ("epochs", "batch_size", "lr", "beta1", "beta2", "eps"):
        if echo.get(key) != getattr(expect, key):
            raise ReportError(f"report {key}={echo.get(key)!r}, config says {getattr(expect, key)!r}")
    if echo.get("n_experts") != cfg.n_experts and not is_distill(cfg.regime):
        raise ReportError(f"report has {echo.get('n_experts')} experts, config says {cfg.n_experts}")
    gate = "softmax" if is_distill(cfg.regime) else regime_gate(cfg.regime)
    if echo.get("gate") != gate:
        raise ReportError(f"report gate {echo.get('gate')!r}, regime {cfg.regime} implies {gate!r}")
    if report.regime != cfg.regime:
        raise ReportError(f"report regime {report.regime!r} != config regime {cfg.regime!r}")


# -- sweep ----------------------------------------------------------------------
@dataclass
class SweepResult:
    out: Path
    reports: dict[tuple[str, int], RunReport]
    selected: tuple[str, int]
    summary: dict = field(default_factory=dict)

    @property
    def selected_report(self) -> RunReport:
        return self.reports[self.selected]


def select(reports: dict[tuple[str, int], RunReport]) -> tuple[str, int]:
    """Lowest train error; ties go to lower train loss, then sweep order."""
    order = list(reports)
    return min(order, key=lambda k: (reports[k].train_error, reports[k].final_train_loss, order.index(k)))


def _prepare_out(out: Path, overwrite: bool) -> None:
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise OutputExistsError(f"{out} already holds results; pass --overwrite to replace them")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


def _resolve_source(cfg: ExperimentConfig):
    path = Path(cfg.source)
    if path.is_dir():
        path = path / "selected" / "checkpoint.npz"
    if not path.exists():
        raise ConfigError("source", f"checkpoint {path} not found")
    sibling = path.with_name("report.json")
    if sibling.exists():
        src_regime = read_report(sibling).regime
        want = SOURCE_REGIME[cfg.regime]
        if src_regime != want:
            raise ConfigError("source", f"{cfg.regime} needs a {want} source, got {src_regime}")
    try:
        model = load_checkpoint(path)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError("source", f"unreadable checkpoint {path}: {exc}") from exc
    if model.gate_kind != "attentive":
        raise ConfigError("source", f"source model has a {model.gate_kind} gate, need attentive")
    return model


def run_experiment(cfg: ExperimentConfig, out=None, *, overwrite: bool = False, threads: int = 1,
                   data: tuple[D.Dataset, D.Dataset] | None = None) -> SweepResult:
    """Execute the whole sweep described by ``cfg`` and write its artefacts.

    ``data`` bypasses dataset loading (handy for tests and notebooks).
    """
    out = Path(out or cfg.out or f"runs/{cfg.name or cfg.regime}")
    source = _resolve_source(cfg) if is_distill(cfg.regime) else None
    train_ds, test_ds = data if data is not None else load_datasets(cfg.dataset)
    _prepare_out(out, overwrite)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))

    jobs = [(reg, seed) for reg in cfg.grid_points() for seed in cfg.seeds]

    def one(job: tuple[RegConfig, int]):
        reg, seed = job
        tcfg = cfg.base_train_config(seed).replace(reg=reg)
        if source is not None:
            model, report = distill(source, train_ds, tcfg, test_ds)
        else:
            model = build_model(cfg.n_experts, train_ds.n_classes, regime_gate(cfg.regime), seed, cfg.arch())
            report = train(model, train_ds, tcfg, test_ds)
        report.regime = cfg.regime
        run_dir = out / "runs" / grid_tag(reg) / f"seed_{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "report.json").write_text(report.to_json())
        save_checkpoint(model, run_dir / "checkpoint.npz")
        log.info("%s %s seed %d: train err %.4f, test err %s", cfg.regime, grid_tag(reg), seed,
                 report.train_error, report.test_error)
        return (grid_tag(reg), seed), report

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, jobs))
    else:
        results = [one(j) for j in jobs]
    reports = dict(results)
    return _finish(cfg, out, reports, source, test_ds)


def _finish(cfg, out: Path, reports, source, test_ds) -> SweepResult:
    key = select(reports)
    tag, seed = key
    peers = [r.test_error for (t, _), r in reports.items() if t == tag and r.test_error is not None]
    mean = statistics.fmean(peers) if peers else None
    std = statistics.pstdev(peers) if len(peers) > 1 else (0.0 if peers else None)

    best = reports[key]
    best.test_error_std = std
    sel = out / "selected"
    sel.mkdir(exist_ok=True)
    (sel / "report.json").write_text(best.to_json())
    shutil.copyfile(out / "runs" / tag / f"seed_{seed}" / "checkpoint.npz", sel / "checkpoint.npz")
    table = best.table()
    if table is not None:
        table.save(sel / "selection_table.csv", sel / "selection_table.pgm")

    summary = {
        "name": cfg.name,
        "regime": cfg.regime,
        "selected": {"grid": tag, "seed": seed, "report": f"runs/{tag}/seed_{seed}/report.json"},
        "test_error_mean": mean,
        "test_error_std": std,
        "runs": [
            {"grid": t, "seed": s, "train_error": r.train_error, "final_train_loss": r.final_train_loss,
             "test_error": r.test_error, "h_s": r.h_s, "h_u": r.h_u, "i_ey": r.i_ey}
            for (t, s), r in reports.items()
        ],
    }
    if source is not None and test_ds is not None:
        summary["source_test_error"] = evaluate(source, test_ds).error
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return SweepResult(out, reports, key, summary)


# -- comparisons ------------------------------------------------------------------
COMPARE_COLUMNS = ("regime", "error", "error_std", "i_ey", "h_s", "h_u")


def compare(paths: Sequence) -> list[dict]:
    """One row per report, columns as in :data:`COMPARE_COLUMNS`."""
    if len(paths) < 2:
        raise ValueError("compare needs at least two reports")
    rows = []
    for p in paths:
        r = read_report(p)
        rows.append({"regime": r.regime, "error": r.test_error, "error_std": r.test_error_std,
                     "i_ey": r.i_ey, "h_s": r.h_s, "h_u": r.h_u})
    return rows


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.4f}"


def format_table(rows: list[dict]) -> str:
    head = ["regime", "error", "I(E;Y)", "H_s", "H_u"]
    body = []
    for r in rows:
        err = _fmt(r["error"]) if r["error_std"] is None else f"{r['error']:.4f} +/- {r['error_std']:.4f}"
        body.append([r["regime"], err, _fmt(r["i_ey"]), _fmt(r["h_s"]), _fmt(r["h_u"])])
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in [head, *body]]
    return "\n".join(lines) + "\n"


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COMPARE_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: "" if r[k] is None else r[k] for k in COMPARE_COLUMNS})
    return buf.getvalue()


def expert_usage(path, threshold: float = 0.01) -> int:
    report = read_report(path)
    table = report.table()
    if table is None:
        raise ReportError(f"{path}: report has no selection table")
    return active_experts(table, threshold)
