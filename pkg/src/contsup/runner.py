"""Run orchestration and persistence.

A run directory holds ``config.json``, ``metrics.csv`` (per epoch and module;
no timings, so identical configs give byte-identical files), checkpoints and
``summary.json``, the :class:`RunRecord` written atomically at completion.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import os
import subprocess
import tempfile
from dataclasses import asdict, dataclass, field
from importlib import metadata
from typing import Callable, Optional

import torch

from .accounting import account_memory, account_overhead, measure_wall_time, peak_rss_bytes
from .backbone import make_plan
from .config import RunConfig
from .context import adapter_weight_matrix
from .data import Dataset, load_dataset
from .engine import METRIC_FIELDS, GLLNetwork, make_optimizers, save_checkpoint, seed_everything, train, train_step
from .errors import ConfigError

SUMMARY_FORMAT = "contsup-run-v1"


@dataclass
class RunRecord:
    config: dict
    seed: int
    run_dir: str
    fingerprint: dict
    status: str = "ok"
    failure: Optional[str] = None
    metrics_csv: Optional[str] = None
    metrics: list[dict] = field(default_factory=list)
    final_test_error: Optional[float] = None
    best_test_error: Optional[float] = None
    best_epoch: Optional[int] = None
    final_module_errors: list = field(default_factory=list)
    plan: Optional[dict] = None
    memory: Optional[dict] = None
    overhead: Optional[dict] = None
    wall_time: Optional[dict] = None
    peak_rss_bytes: Optional[int] = None
    adapter_weights: Optional[list] = None
    checkpoints: dict = field(default_factory=dict)
    info_curve: Optional[list] = None

    @property
    def run_config(self) -> RunConfig:
        return RunConfig.from_dict(self.config)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["format"] = SUMMARY_FORMAT
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        d = dict(d)
        if d.pop("format", None) != SUMMARY_FORMAT:
            raise ConfigError("not a run summary")
        return cls(**d)


def fingerprint() -> dict:
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "unknown"
    commit = None
    try:
        commit = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            cwd=os.path.dirname(__file__),
            capture_output=True,
            text=True,
            timeout=5,
        ).stdout.strip() or None
    except (OSError, subprocess.SubprocessError):
        pass
    return {"package_version": version, "git_commit": commit, "torch": torch.__version__}


def write_atomic(path: str, text: str) -> None:
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for r in rows:
        w.writerow([_fmt(r.get(k)) for k in METRIC_FIELDS])
    return buf.getvalue()


def read_metrics_csv(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        rows = []
        for r in csv.DictReader(fh):
            rows.append({k: (None if v == "" else (int(v) if k in ("epoch", "module") else float(v))) for k, v in r.items()})
        return rows


def build_network(cfg: RunConfig, seed: int) -> GLLNetwork:
    seed_everything(seed)
    spec = cfg.backbone_spec()
    plan = make_plan(spec, cfg.K, cfg.partition)
    return GLLNetwork(spec, plan, cfg.context, cfg.objective(), cfg.overrides(), cfg.zero_init_adapters)


def step_timer(net: GLLNetwork, cfg: RunConfig, dataset: Dataset, seed: int) -> Callable[[], None]:
    """A closure running one training step on a private copy of ``net``."""
    twin = copy.deepcopy(net).train()
    opts = make_optimizers(twin, cfg.training.to_training_config(seed))
    gen = torch.Generator().manual_seed(seed)
    x, y, unit = next(dataset.batches("train", cfg.training.batch_size, shuffle=True, generator=gen))
    return lambda: train_step(twin, opts, x, y, unit)


def run(
    cfg: RunConfig,
    seed: Optional[int] = None,
    dataset: Optional[Dataset] = None,
    on_epoch=None,
) -> RunRecord:
    """Train one seed of ``cfg`` and write the run directory; returns the record.

    Ingestion and configuration errors propagate. A numeric failure during
    training is recorded in the summary with ``status="failed"``.
    """
    cfg.validate()
    seed = cfg.seeds[0] if seed is None else seed
    if dataset is None:
        dataset = load_dataset(cfg.dataset.name, cfg.dataset.root, cfg.dataset.augmentation_on, cfg.dataset.toy)
    run_dir = os.path.join(cfg.output_dir, cfg.run_name(seed))
    os.makedirs(run_dir, exist_ok=True)
    write_atomic(os.path.join(run_dir, "config.json"), cfg.to_json() + "\n")

    net = build_network(cfg, seed)
    spec = net.spec
    record = RunRecord(cfg.to_dict(), seed, run_dir, fingerprint(), plan=net.plan.to_dict())
    record.memory = account_memory(net.plan, net.context, spec, cfg.training.batch_size, cfg.objective(), overrides=cfg.overrides()).to_dict()
    record.overhead = account_overhead(net.plan, net.context, spec, cfg.overrides()).to_dict()

    best_ckpt = os.path.join(run_dir, "checkpoint_best.pt")
    hist = train(net, cfg.training.to_training_config(seed), dataset, best_ckpt, cfg.config_hash(), on_epoch)
    record.status, record.failure = hist.status, hist.failure
    record.metrics = hist.rows
    record.metrics_csv = os.path.join(run_dir, "metrics.csv")
    write_atomic(record.metrics_csv, metrics_to_csv(hist.rows))
    record.final_test_error = hist.final_test_error
    record.best_test_error = hist.best_test_error
    record.best_epoch = hist.best_epoch
    record.final_module_errors = hist.final_module_errors
    record.checkpoints = {"best": best_ckpt}
    if hist.status == "ok":
        final_ckpt = os.path.join(run_dir, "checkpoint_final.pt")
        save_checkpoint(final_ckpt, net, [], cfg.training.epochs, cfg.config_hash())
        record.checkpoints["final"] = final_ckpt
        record.adapter_weights = adapter_weight_matrix(net)
        if cfg.timing_repetitions:
            record.wall_time = measure_wall_time(step_timer(net, cfg, dataset, seed), cfg.timing_repetitions).to_dict()
    record.peak_rss_bytes = peak_rss_bytes()
    save_record(record)
    return record


def save_record(record: RunRecord) -> str:
    path = os.path.join(record.run_dir, "summary.json")
    write_atomic(path, json.dumps(record.to_dict(), indent=1, sort_keys=True) + "\n")
    return path


def load_record(path: str) -> RunRecord:
    """Load a run from its directory or its ``summary.json``."""
    if os.path.isdir(path):
        path = os.path.join(path, "summary.json")
    with open(path) as fh:
        return RunRecord.from_dict(json.load(fh))


def _run_one(args):
    cfg_dict, seed = args
    try:
        return run(RunConfig.from_dict(cfg_dict), seed).to_dict()
    except Exception as exc:  # recorded, the sweep continues
        return {"_error": f"{type(exc).__name__}: {exc}", "config": cfg_dict, "seed": seed}


def sweep(configs: list[RunConfig], workers: int = 1, dataset: Optional[Dataset] = None) -> list[RunRecord]:
    """Run every config for each of its seeds; a failed run is recorded and the rest continue.

    ``workers > 1`` runs independent configs in separate processes (each run
    already owns a distinct output directory).
    """
    jobs = [(c.to_dict(), s) for c in configs for s in c.seeds]
    if workers > 1:
        import multiprocessing as mp

        with mp.get_context("spawn").Pool(workers) as pool:
            results = pool.map(_run_one, jobs)
    else:
        results = []
        for cfg_dict, s in jobs:
            try:
                results.append(run(RunConfig.from_dict(cfg_dict), s, dataset).to_dict())
            except Exception as exc:
                results.append({"_error": f"{type(exc).__name__}: {exc}", "config": cfg_dict, "seed": s})
    records = []
    for res in results:
        if "_error" in res:
            cfg = RunConfig.from_dict(res["config"])
            rec = RunRecord(res["config"], res["seed"], os.path.join(cfg.output_dir, cfg.run_name(res["seed"])), fingerprint())
            rec.status, rec.failure = "failed", res["_error"]
            os.makedirs(rec.run_dir, exist_ok=True)
            save_record(rec)
            records.append(rec)
        else:
            records.append(RunRecord.from_dict(res))
    return records
