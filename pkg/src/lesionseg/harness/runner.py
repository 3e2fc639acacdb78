"""Dataset directories, single training runs, evaluation and the experiment grid."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
import traceback
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import segio
from ..losses import LossConfig
from ..metrics import evaluate_arrays
from ..models import ModelConfig, build, count_params, predict
from ..nn import TrainConfig, init_params, train
from ..segio import ResultRow, RunConfig
from ..synthdata import PhantomSpec, SliceSample, case_seed, generate_dataset, split, stack

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"


# -- dataset directories ------------------------------------------------------


def slice_filename(s: SliceSample) -> str:
    return f"case{s.case_id:04d}_slice{s.slice_idx:03d}.seg1"


def split_cases(dataset, train_fraction: float, seed: int):
    """Like :func:`synthdata.split`, but ``train_fraction == 1`` keeps every case for training."""
    if train_fraction == 1:
        return list(dataset), []
    return split(dataset, train_fraction, seed)


def write_dataset(out_dir, cfg: RunConfig, force: bool = False) -> Path:
    """Generate the configured phantoms as SEG1 files plus a manifest."""
    out = segio.ensure_empty_dir(out_dir, force)
    if force:
        for p in out.glob("*.seg1"):
            p.unlink()
    dataset = generate_dataset(cfg.data)
    train_set, val_set = split_cases(dataset, cfg.grid.train_fraction, cfg.grid.split_seed)
    files = []
    for s in dataset:
        blob = segio.encode_slice(s)
        name = slice_filename(s)
        (out / name).write_bytes(blob)
        files.append({
            "file": name,
            "case_id": s.case_id,
            "slice_idx": s.slice_idx,
            "phenotype": s.phenotype,
            "sha256": hashlib.sha256(blob).hexdigest(),
        })
    manifest = {
        "format": "SEG1",
        "spec": dataclasses.asdict(cfg.data),
        "split": {
            "train_fraction": cfg.grid.train_fraction,
            "split_seed": cfg.grid.split_seed,
            "train_cases": sorted({s.case_id for s in train_set}),
            "val_cases": sorted({s.case_id for s in val_set}),
        },
        "files": files,
    }
    segio.atomic_write(out / MANIFEST, json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out / MANIFEST


@dataclass
class DataDir:
    samples: list[SliceSample]
    train: list[SliceSample]
    val: list[SliceSample]
    manifest: dict


def load_dataset(data_dir) -> DataDir:
    d = Path(data_dir)
    mpath = d / MANIFEST
    if not mpath.is_file():
        raise FileNotFoundError(f"{d}: no {MANIFEST} (run `lesionseg generate` first)")
    manifest = json.loads(mpath.read_text())
    samples = []
    for entry in manifest["files"]:
        blob = (d / entry["file"]).read_bytes()
        if hashlib.sha256(blob).hexdigest() != entry["sha256"]:
            raise segio.FormatError(f"{entry['file']}: checksum does not match the manifest")
        samples.append(segio.decode_slice(blob, entry["file"]))
    train_ids = set(manifest["split"]["train_cases"])
    val_ids = set(manifest["split"]["val_cases"])
    train_set = [s for s in samples if s.case_id in train_ids]
    val_set = [s for s in samples if s.case_id in val_ids]
    return DataDir(samples, train_set, val_set, manifest)


def in_memory_dataset(cfg: RunConfig) -> DataDir:
    samples = generate_dataset(cfg.data)
    tr, va = split_cases(samples, cfg.grid.train_fraction, cfg.grid.split_seed)
    return DataDir(samples, tr, va, {})


# -- single runs --------------------------------------------------------------


def train_run(cfg: RunConfig, data: DataDir, out_dir, force: bool = False, echo=None):
    """Train ``cfg.model`` with ``cfg.loss``; writes params, log CSV and triptychs."""
    out = segio.ensure_empty_dir(out_dir, force)
    graph = build(cfg.model)
    val = data.val or data.train
    if not data.train:
        raise ValueError("training split is empty")
    vis_x, vis_y = stack(val[: cfg.train.batch_size])
    tdir = out / "triptychs"
    every = cfg.grid.triptych_every

    def callback(epoch, params):
        if every and epoch % every == 0:
            tdir.mkdir(exist_ok=True)
            pred = predict(graph, params, vis_x, cfg.grid.threshold)
            for i in range(len(vis_x)):
                img = segio.triptych(vis_x[i, 0], vis_y[i, 0], pred[i, 0])
                (tdir / f"epoch{epoch:03d}_val{i:02d}.pgm").write_bytes(segio.pgm_bytes(img))
        if echo is not None:
            echo(f"epoch {epoch}/{cfg.train.epochs}")

    params, history = train(graph, data.train, cfg.loss, cfg.train, val=val, callback=callback,
                            threshold=cfg.grid.threshold, pooling=cfg.grid.pooling)
    segio.write_params(out / "params.lsp", params, cfg.model)
    lines = ["epoch,mean_loss,val_dice"] + [f"{e.epoch},{e.mean_loss:.6f},{e.val_dice:.6f}" for e in history]
    (out / "log.csv").write_text("\n".join(lines) + "\n")
    (out / "config.txt").write_text(segio.config_to_text(cfg))
    return params, history


def evaluate_run(params, model: ModelConfig, samples, threshold=0.5, pooling="slice"):
    x, y = stack(samples)
    return evaluate_arrays(build(model), params, x, y, threshold, pooling)


# -- experiment grid ----------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    index: int  # (architecture, loss) position in the grid
    architecture: str
    loss: str
    seed: int

    @property
    def label(self) -> str:
        return f"{self.architecture}/{self.loss}/seed={self.seed}"


def grid_cells(cfg: RunConfig) -> list[Cell]:
    """Grid order: architecture, then loss, then seed."""
    cells = []
    g = cfg.grid
    for ai, arch in enumerate(g.architectures):
        for li, loss in enumerate(g.losses):
            for seed in g.seeds:
                cells.append(Cell(ai * len(g.losses) + li, arch, loss, seed))
    return cells


def cell_seed(cell: Cell) -> int:
    """Training seed of a cell, derived from (grid index, seed) only.

    Same chained mixer as the per-case data seeds; the grid index is mixed
    in after the seed so (index, seed) pairs never swap into each other.
    """
    return case_seed(cell.seed, cell.index)


def run_cell(cfg: RunConfig, cell: Cell, train_set, val_set) -> tuple[ResultRow, str | None]:
    """Fresh init, train, evaluate on validation. Failures become ``nan`` rows."""
    model = dataclasses.replace(cfg.model, arch=cell.architecture)
    loss = dataclasses.replace(cfg.loss, kind=cell.loss)
    tcfg = dataclasses.replace(cfg.train, seed=cell_seed(cell))
    n_params = sum(int(np.prod(w)) + int(np.prod(b)) for w, b in
                   (n.layer.param_shapes() for n in build(model).param_nodes()))
    try:
        params, _ = train(build(model), train_set, loss, tcfg, val=val_set or train_set,
                          threshold=cfg.grid.threshold, pooling=cfg.grid.pooling)
        d, se, sp = evaluate_run(params, model, val_set or train_set, cfg.grid.threshold, cfg.grid.pooling)
        return ResultRow(cell.architecture, cell.loss, cell.seed, d, se, sp, tcfg.epochs, n_params), None
    except Exception as exc:  # record and continue
        nan = float("nan")
        detail = f"{cell.label}: {type(exc).__name__}: {exc}\n" + traceback.format_exc()
        return ResultRow(cell.architecture, cell.loss, cell.seed, nan, nan, nan, tcfg.epochs, n_params), detail


_WORKER: dict = {}


def _worker_init(cfg, train_set, val_set):
    _WORKER.update(cfg=cfg, train=train_set, val=val_set)


def _worker_run(cell):
    t0 = time.perf_counter()
    row, err = run_cell(_WORKER["cfg"], cell, _WORKER["train"], _WORKER["val"])
    return row, err, time.perf_counter() - t0


def run_matrix(cfg: RunConfig, out_dir, data: DataDir | None = None, threads: int = 1,
               force: bool = False, echo=None):
    """Run every grid cell and write ``results.csv`` plus its summary.

    Rows are reduced in grid order, so the files do not depend on ``threads``
    or on completion order.  Returns ``(rows, failures)``.
    """
    out = segio.ensure_empty_dir(out_dir, force)
    data = data if data is not None else in_memory_dataset(cfg)
    cells = grid_cells(cfg)
    results: list = [None] * len(cells)

    def done(i, row, err, dt):
        results[i] = (row, err)
        if echo is not None:
            status = "FAILED" if err else f"dice {row.dice:.4f}"
            echo(f"[{sum(r is not None for r in results)}/{len(cells)}] {cells[i].label}: {status} ({dt:.0f}s)")

    if threads <= 1:
        _worker_init(cfg, data.train, data.val)
        for i, cell in enumerate(cells):
            done(i, *_worker_run(cell))
    else:
        import multiprocessing as mp

        ctx = mp.get_context("spawn")
        saved = {k: os.environ.get(k) for k in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS")}
        # one BLAS thread per worker process; children read this at import
        os.environ.update({k: "1" for k in saved})
        try:
            with ctx.Pool(threads, initializer=_worker_init, initargs=(cfg, data.train, data.val)) as pool:
                for i, res in enumerate(pool.imap(_worker_run, cells)):
                    done(i, *res)
        finally:
            for k, v in saved.items():
                if v is None:
                    os.environ.pop(k, None)
                else:
                    os.environ[k] = v
    rows = [r for r, _ in results]
    failures = [e for _, e in results if e]
    title = (f"{cfg.data.phenotype} phantom, {len(data.train)} train / {len(data.val) or len(data.train)} "
             f"validation slices, {cfg.train.epochs} epochs, mean over {len(cfg.grid.seeds)} seed(s)")
    segio.write_results(out / "results.csv", rows, title)
    (out / "config.txt").write_text(segio.config_to_text(cfg))
    fpath = out / "failures.txt"
    if failures:
        fpath.write_text("\n".join(failures))
    elif fpath.exists():
        fpath.unlink()
    return rows, failures
