"""Executes the cells of an experiment and persists one directory per cell.

Each cell lands in ``<output_dir>/<fingerprint>/`` with ``report.json``,
``metrics.csv``, ``weights.csv`` and ``model.json``. A cell whose directory
already holds a completed report is skipped, so an interrupted sweep can be
rerun with the same config.
"""
from __future__ import annotations

import json
import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..bilevel import fingerprint, resolve_run, train
from ..data import SyntheticSpec, make_dataset
from ..nn import Params, save_checkpoint
from ..reweight import write_weights_csv
from .config import Cell, ExperimentConfig, build, to_plain

log = logging.getLogger(__name__)

REPORT = "report.json"


@dataclass
class CellOutcome:
    fingerprint: str
    status: str  # completed, skipped or failed
    error: str | None = None


def _json_safe(obj):
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.generic):
        return _json_safe(obj.item())
    return obj


def _write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _resolved(cell: Cell):
    ds = make_dataset(cell.data)
    spec = cell.model.spec(ds.dim, ds.n_classes, cell.seed)
    context = {"data": to_plain(cell.data)}
    config, spec, description = resolve_run(cell.bilevel, spec, cell.loss, cell.run_mode,
                                            cell.seed, cell.eval_every, context)
    return ds, spec, description


def cell_fingerprint(cell: Cell) -> str:
    return fingerprint(_resolved(cell)[2])


def is_completed(cell_dir: Path) -> bool:
    path = cell_dir / REPORT
    if not path.is_file():
        return False
    try:
        return json.loads(path.read_text()).get("status") == "completed"
    except (OSError, json.JSONDecodeError):
        return False


def run_cell(cell: Cell, output_dir: str | Path) -> CellOutcome:
    """Train one cell and write its files; failures are recorded, never raised."""
    ds, spec, description = _resolved(cell)
    fp = fingerprint(description)
    cell_dir = Path(output_dir) / fp
    cell_dir.mkdir(parents=True, exist_ok=True)
    sweep = {k: to_plain(v) for k, v in cell.sweep}
    try:
        report = train(cell.bilevel, ds, spec, cell.loss, cell.run_mode, cell.seed,
                       cell.eval_every, context={"data": to_plain(cell.data)})
    except Exception as e:  # a failed cell must not take the sweep down with it
        log.warning("cell %s failed: %s", fp, e)
        _write(cell_dir / REPORT, json.dumps(_json_safe({
            "fingerprint": fp, "status": "failed", "error": f"{type(e).__name__}: {e}",
            "traceback": traceback.format_exc(), "config": description, "sweep": sweep,
            "final": {}, "rows": []}), indent=1, sort_keys=True))
        return CellOutcome(fp, "failed", str(e))
    _write(cell_dir / "metrics.csv", report.metrics_csv())
    if len(ds.x_unlabeled):
        write_weights_csv(cell_dir / "weights.csv", report.weights, ds.u_provenance)
    save_checkpoint(report.model.spec, Params(report.theta, report.model.norms),
                    cell_dir / "model.json")
    out = report.to_dict()
    out["sweep"] = sweep
    _write(cell_dir / REPORT, json.dumps(_json_safe(out), indent=1, sort_keys=True))
    return CellOutcome(fp, "completed")


def _run_cell_args(args) -> CellOutcome:
    return run_cell(*args)


def run_experiment(cfg: ExperimentConfig, workers: int | None = None,
                   progress=None) -> list[CellOutcome]:
    """Run every pending cell of ``cfg`` and return one outcome per cell, in cell order."""
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = cfg.cells()
    outcomes: list[CellOutcome | None] = [None] * len(cells)
    pending = []
    for i, cell in enumerate(cells):
        fp = cell_fingerprint(cell)
        if is_completed(out_dir / fp):
            outcomes[i] = CellOutcome(fp, "skipped")
        else:
            pending.append(i)
    n_workers = workers if workers is not None else (cfg.workers or os.cpu_count() or 1)
    n_workers = max(1, min(n_workers, len(pending) or 1))
    if n_workers == 1:
        results = (run_cell(cells[i], out_dir) for i in pending)
        for i, res in zip(pending, results):
            outcomes[i] = res
            if progress:
                progress(cells[i], res)
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = pool.map(_run_cell_args, [(cells[i], out_dir) for i in pending])
            for i, res in zip(pending, results):
                outcomes[i] = res
                if progress:
                    progress(cells[i], res)
    return outcomes


def load_data_from_report(report: dict):
    """Regenerate the dataset a report was trained on."""
    return make_dataset(build(SyntheticSpec, report["config"]["data"], "data"))


__all__ = ["CellOutcome", "run_cell", "run_experiment", "cell_fingerprint", "is_completed",
           "load_data_from_report", "REPORT"]
