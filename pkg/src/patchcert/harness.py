"""Experiment orchestration: run configs, per-image records, metrics and reports.

Config files are plain text, one ``key = value`` per line; ``#`` starts a
comment and blank lines are ignored.  Unknown keys are errors.  Every
resolved value (defaults included) is echoed into report headers together
with a fingerprint, the first 16 hex digits of the SHA-256 of the canonical
``key=value`` listing.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import attack as atk
from .analysis import stability_experiment, write_rows
from .certify import DefenseConfig, certify_batch, detect_batch
from .data import Dataset, load_cifar, load_idx, synthetic
from .errors import ConfigError, DataError, FormatError
from .model import ModelSpec, build_model, forward
from .sin import SINConfig, pruned_forward_batch
from .train import TrainConfig, accuracy, train
from .weights import load_tensor, load_weights, save_tensor, save_weights

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunConfig:
    # model and data
    model: str = "model.pcrt"
    vanilla_model: str = "vanilla.pcrt"
    data: str = "synthetic"           # synthetic | idx | cifar
    train_data: str = ""              # idx: "images,labels"; cifar: comma-separated batches
    test_data: str = ""
    classes: int = 4
    size: int = 16
    contrast: float = 0.3
    head: str = "max"
    train_n: int = 1200
    eval_n: int = 200
    data_seed: int = 1
    # defence
    winner_rate: float = 0.2
    layer: int = -1                   # -1: the model's default superficial layer
    patch: int = 2
    r: int = 3
    tau: float = 0.3
    alert_cluster_min: int = 1
    # training
    seed: int = 0
    epochs: int = 10
    lr: float = 0.02
    finetune_epochs: int = 3
    finetune_lr: float = 0.01
    # attack
    attack_patch: int = 4
    target: int = 0
    steps: int = 200
    step_size: float = 0.25
    alpha: float = 0.0
    attack_n: int = 200
    patch_file: str = "patch.pcrt"
    # orchestration
    workers: int = 1
    out: str = "out"

    def __post_init__(self):
        checks = [
            (self.data in ("synthetic", "idx", "cifar"), "data must be synthetic, idx or cifar"),
            (0.0 < self.winner_rate <= 1.0, "winner_rate must lie in (0, 1]"),
            (0.0 <= self.tau <= 1.0, "tau must lie in [0, 1]"),
            (self.patch >= 1 and self.r >= 1 and self.attack_patch >= 1, "patch sizes and r must be >= 1"),
            (self.alert_cluster_min >= 1, "alert_cluster_min must be >= 1"),
            (self.workers >= 1, "workers must be >= 1"),
            (self.alpha >= 0, "alpha must be >= 0"),
            (self.steps >= 0 and self.epochs >= 0 and self.finetune_epochs >= 0, "counts must be >= 0"),
            (self.train_n >= 1 and self.eval_n >= 1 and self.attack_n >= 1, "dataset sizes must be >= 1"),
            (self.head in ("gap", "max"), "head must be gap or max"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @property
    def sin(self) -> SINConfig:
        return SINConfig(self.winner_rate, None if self.layer < 0 else self.layer)

    @property
    def defense(self) -> DefenseConfig:
        return DefenseConfig(self.patch, self.r, self.tau, self.sin, self.alert_cluster_min)

    def attack(self, prune=True) -> atk.AttackConfig:
        return atk.AttackConfig(self.target, self.steps, self.step_size, self.attack_patch,
                                self.alpha, None, self.seed, self.sin if prune else None)

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in dataclasses.fields(self)]

    def canonical(self) -> str:
        return "".join(f"{k}={v!r}\n" for k, v in sorted(self.items()))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def _coerce(name: str, raw, default):
    if isinstance(raw, str):
        raw = raw.strip()
    try:
        if isinstance(default, bool):
            if str(raw).lower() in ("1", "true", "yes"):
                return True
            if str(raw).lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        return type(default)(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot read {raw!r} as {type(default).__name__}") from None


def parse_config_text(text: str, overrides=None) -> RunConfig:
    defaults = RunConfig()
    known = dict(defaults.items())
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, val, known[key])
    for key, val in (overrides or {}).items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _coerce(key, val, known[key])
    return RunConfig(**values)


def load_config(path=None, overrides=None) -> RunConfig:
    text = ""
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        text = p.read_text()
    return parse_config_text(text, overrides)


# ---------------------------------------------------------------------------
# data and models
# ---------------------------------------------------------------------------

def _load_source(cfg: RunConfig, spec: str, train_split: bool) -> Dataset:
    n = cfg.train_n if train_split else cfg.eval_n
    if cfg.data == "synthetic":
        seed = cfg.data_seed if train_split else cfg.data_seed + 1000
        return synthetic(n, seed=seed, classes=cfg.classes, size=cfg.size, contrast=cfg.contrast)
    if not spec:
        raise ConfigError(f"data={cfg.data} needs {'train_data' if train_split else 'test_data'}")
    paths = [s.strip() for s in spec.split(",") if s.strip()]
    if cfg.data == "idx":
        if len(paths) != 2:
            raise ConfigError("idx data takes 'images_path,labels_path'")
        ds = load_idx(paths[0], paths[1], cfg.classes)
    else:
        ds = load_cifar(paths, cfg.classes)
    return ds.subset(np.arange(min(n, len(ds))))


def train_set(cfg: RunConfig) -> Dataset:
    return _load_source(cfg, cfg.train_data, True)


def eval_set(cfg: RunConfig) -> Dataset:
    return _load_source(cfg, cfg.test_data, False)


def load_model(path) -> ModelSpec:
    if not Path(path).is_file():
        raise DataError(f"model file not found: {path}")
    return load_weights(path)


def _check_compatible(model: ModelSpec, ds: Dataset):
    if tuple(model.input_shape) != ds.shape:
        raise DataError(f"dataset images {ds.shape} do not match model input {model.input_shape}")
    if ds.num_classes > model.num_classes:
        raise DataError(f"dataset has {ds.num_classes} classes, model only {model.num_classes}")


def train_models(cfg: RunConfig, ds: Dataset):
    """Vanilla training followed by winner-take-all finetuning."""
    base = build_model(ds.shape, ds.num_classes, seed=cfg.seed, head=cfg.head)
    vanilla = train(base, ds.images, ds.labels, TrainConfig(cfg.epochs, cfg.lr, seed=cfg.seed))
    layer = None if cfg.layer < 0 else cfg.layer
    pruned = train(vanilla, ds.images, ds.labels,
                   TrainConfig(cfg.finetune_epochs, cfg.finetune_lr, seed=cfg.seed + 1,
                               winner_rate=cfg.winner_rate, superficial_layer=layer))
    return vanilla, pruned


# ---------------------------------------------------------------------------
# per-image records and metrics
# ---------------------------------------------------------------------------

def _outcome_dict(o) -> dict:
    if o.is_alert:
        return {"alert": True, "strong": o.strong, "recovered": o.recovered_label,
                "suspects": [[w.top, w.left, w.height, w.width] for w in o.suspect_windows]}
    return {"alert": False, "label": o.label}


def _chunk_records(model, images, labels, ids, defense, patched, locs):
    t0 = time.perf_counter()
    cert = certify_batch(model, images, labels, defense)
    det = detect_batch(model, images, defense)
    recs = []
    if patched is not None:
        att_pred = pruned_forward_batch(model, patched, defense.sin)[0].labels
        att_det = detect_batch(model, patched, defense)
    wall = (time.perf_counter() - t0) * 1000 / max(len(images), 1)
    for n in range(len(images)):
        rec = {"id": int(ids[n]), "label": int(labels[n]), "pruned_label": cert[n].pruned_label,
               "certified": cert[n].certified, "evaluated_count": cert[n].evaluated_count,
               "failing_window": None if cert[n].failing_window is None else list(dataclasses.astuple(cert[n].failing_window)),
               "detect": _outcome_dict(det[n])}
        if patched is not None:
            rec["attack"] = {"loc": [int(v) for v in locs[n]], "pruned_label": int(att_pred[n]),
                             "detect": _outcome_dict(att_det[n])}
        rec["wall_ms"] = round(wall, 3)
        recs.append(rec)
    return recs


def _job(args):
    return _chunk_records(*args)


def image_records(model, ds: Dataset, defense: DefenseConfig, workers=1, patch=None,
                  attack_cfg=None, chunk=32) -> list:
    """Per-image records ordered by id; identical for any worker count."""
    patched, locs = None, None
    if patch is not None:
        locs = atk.patch_locations(len(ds), model.input_shape, attack_cfg)
        patched = atk._paste(ds.images.astype(model.dtype), np.asarray(patch, model.dtype), locs)
    jobs = []
    for s in range(0, len(ds), chunk):
        sl = slice(s, s + chunk)
        jobs.append((model, ds.images[sl], ds.labels[sl], np.arange(len(ds))[sl], defense,
                     None if patched is None else patched[sl], None if locs is None else locs[sl]))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_job, jobs))
    else:
        parts = [_job(j) for j in jobs]
    return [r for part in parts for r in part]


def metrics(records) -> dict:
    """Aggregate per-image records.

    clean_acc: detection on the benign image returns the true label without alert.
    certified_acc: certified and pruned prediction correct.
    attacked_acc / recovered_acc / detection_rate need attack records and are
    NaN otherwise; recovered_acc takes the recovered label for alerts.
    """
    if not records:
        raise ConfigError("metrics needs at least one record")
    n = len(records)
    clean = sum((not r["detect"]["alert"]) and r["detect"]["label"] == r["label"] for r in records)
    cert = sum(r["certified"] and r["pruned_label"] == r["label"] for r in records)
    out = {"n": n, "clean_acc": clean / n, "certified_acc": cert / n,
           "avg_windows": float(np.mean([r["evaluated_count"] for r in records]))}
    att = [r for r in records if "attack" in r]
    if att:
        out["attacked_acc"] = float(np.mean([r["attack"]["pruned_label"] == r["label"] for r in att]))
        out["detection_rate"] = float(np.mean([r["attack"]["detect"]["alert"] for r in att]))

        def final(r):
            d = r["attack"]["detect"]
            return d["recovered"] if d["alert"] else d["label"]

        out["recovered_acc"] = float(np.mean([final(r) == r["label"] for r in att]))
        alerted = [r for r in att if r["attack"]["detect"]["alert"]]
        out["alerted"] = len(alerted)
        if alerted:
            out["alerted_attacked_acc"] = float(np.mean([r["attack"]["pruned_label"] == r["label"] for r in alerted]))
            out["alerted_recovered_acc"] = float(np.mean([final(r) == r["label"] for r in alerted]))
    else:
        out.update(attacked_acc=float("nan"), recovered_acc=float("nan"), detection_rate=float("nan"))
    out["avg_wall_ms"] = float(np.mean([r["wall_ms"] for r in records]))
    return out


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ["metric", "value", "fingerprint", "wall_ms"]


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if np.isnan(v) else f"{v:.6f}"
    return str(v)


def header_lines(cfg: RunConfig, command: str) -> list:
    return [f"command={command}", f"fingerprint={cfg.fingerprint()}"] + \
        [f"config {k}={v!r}" for k, v in sorted(cfg.items())]


def write_report(path, cfg: RunConfig, command: str, rows, wall_ms: float = 0.0) -> None:
    """CSV report: ``#`` header lines, then metric rows.  ``wall_ms`` is the only non-deterministic column."""
    fp = cfg.fingerprint()
    buf = io.StringIO()
    for line in header_lines(cfg, command):
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for name, value in rows:
        w.writerow([name, _fmt(value), fp, f"{wall_ms:.3f}"])
    Path(path).write_text(buf.getvalue())


def write_records(path, cfg: RunConfig, command: str, records) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"command": command, "fingerprint": cfg.fingerprint(),
                             "config": dict(cfg.items())}, sort_keys=True) + "\n")
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def csv_body(path, drop=("wall_ms",)) -> str:
    """Report rows without the header comments and without wall-clock columns."""
    lines = [l for l in Path(path).read_text().splitlines() if not l.startswith("#")]
    rows = list(csv.reader(lines))
    keep = [i for i, c in enumerate(rows[0]) if c not in drop]
    return "\n".join(",".join(r[i] for i in keep) for r in rows) + "\n"


def validate_report(path) -> RunConfig:
    """Re-hash the echoed config and check it against every fingerprint in the report."""
    text = Path(path).read_text()
    values, stated = {}, None
    known = dict(RunConfig().items())
    for line in text.splitlines():
        if not line.startswith("# "):
            continue
        body = line[2:]
        if body.startswith("fingerprint="):
            stated = body.split("=", 1)[1]
        elif body.startswith("config "):
            key, val = body[7:].split("=", 1)
            if key not in known:
                raise FormatError(f"unknown config key {key!r} in report header")
            values[key] = _coerce(key, val.strip("'"), known[key])
    if stated is None:
        raise FormatError("report has no fingerprint header")
    cfg = RunConfig(**values)
    if cfg.fingerprint() != stated:
        raise FormatError(f"fingerprint {stated} does not match re-hashed config {cfg.fingerprint()}")
    lines = [l for l in text.splitlines() if not l.startswith("#")]
    for row in csv.DictReader(lines):
        if row["fingerprint"] != stated:
            raise FormatError(f"row {row['metric']} carries fingerprint {row['fingerprint']}")
    return cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _prepare(cfg: RunConfig):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _finish(cfg, command, rows, t0, records=None):
    out = _prepare(cfg)
    wall = (time.perf_counter() - t0) * 1000
    write_report(out / f"{command}.csv", cfg, command, rows, wall)
    if records is not None:
        write_records(out / f"{command}.jsonl", cfg, command, records)
    return dict(rows)


def run_train(cfg: RunConfig) -> dict:
    t0 = time.perf_counter()
    ds, test = train_set(cfg), eval_set(cfg)
    vanilla, pruned = train_models(cfg, ds)
    save_weights(vanilla, cfg.vanilla_model)
    save_weights(pruned, cfg.model)
    rows = [("vanilla_acc", accuracy(vanilla, test.images, test.labels)),
            ("pruned_acc", accuracy(pruned, test.images, test.labels, cfg.sin))]
    return _finish(cfg, "train", rows, t0)


def _metric_rows(m: dict):
    return [(k, v) for k, v in m.items() if k != "avg_wall_ms"]


def run_certify(cfg: RunConfig) -> dict:
    t0 = time.perf_counter()
    model, ds = load_model(cfg.model), eval_set(cfg)
    _check_compatible(model, ds)
    recs = image_records(model, ds, cfg.defense, cfg.workers)
    m = metrics(recs)
    return _finish(cfg, "certify", _metric_rows(m) + [("merged_windows", len(cfg.defense.plan(model)))], t0, recs)


def run_attack(cfg: RunConfig) -> dict:
    t0 = time.perf_counter()
    model = load_model(cfg.model)
    src = train_set(cfg).subset(np.arange(min(cfg.attack_n, cfg.train_n)))
    _check_compatible(model, src)
    patch, trace = atk.optimize_patch(model, src.images, cfg.attack())
    save_tensor(patch, cfg.patch_file)
    ds = eval_set(cfg)
    ev = atk.evaluate_attack(model, ds.images, ds.labels, patch, cfg.attack(), cfg.defense)
    rows = [("objective_start", float(trace[0])), ("objective_end", float(trace[-1]))] + sorted(ev.items())
    return _finish(cfg, "attack", rows, t0)


def _load_patch(cfg: RunConfig, model: ModelSpec):
    if not Path(cfg.patch_file).is_file():
        raise DataError(f"patch file not found: {cfg.patch_file}")
    patch = load_tensor(cfg.patch_file)
    want = (model.input_shape[0], cfg.attack_patch, cfg.attack_patch)
    if patch.shape != want:
        raise DataError(f"patch shape {patch.shape} does not match {want}")
    return patch


def run_detect(cfg: RunConfig, with_patch: bool = False, command: str = "detect") -> dict:
    t0 = time.perf_counter()
    model, ds = load_model(cfg.model), eval_set(cfg)
    _check_compatible(model, ds)
    patch = _load_patch(cfg, model) if with_patch else None
    recs = image_records(model, ds, cfg.defense, cfg.workers, patch, cfg.attack())
    return _finish(cfg, command, _metric_rows(metrics(recs)), t0, recs)


def run_recover(cfg: RunConfig) -> dict:
    return run_detect(cfg, with_patch=True, command="recover")


def run_analyze(cfg: RunConfig) -> dict:
    t0 = time.perf_counter()
    model, ds = load_model(cfg.vanilla_model), eval_set(cfg)
    _check_compatible(model, ds)
    patched = None
    if Path(cfg.patch_file).is_file():
        patch = _load_patch(cfg, model)
        locs = atk.patch_locations(len(ds), model.input_shape, cfg.attack())
        patched = atk._paste(ds.images, patch, locs)
    res = stability_experiment(model, ds.images, ds.labels, cfg.sin, patched)
    out = _prepare(cfg)
    write_rows(out / "analyze_images.csv", res.pop("rows"), header_lines(cfg, "analyze"))
    return _finish(cfg, "analyze", sorted(res.items()), t0)


SWEEP_PARAMS = {"tau": "tau", "kappa": "winner_rate", "patch": "patch", "layer": "layer"}


def parse_patch_value(v: str, cfg: RunConfig) -> int:
    """``"3"`` is a side in pixels, ``"2%"`` a fraction of the image area."""
    v = v.strip()
    if v.endswith("%"):
        frac = float(v[:-1]) / 100
        return max(1, int(round(float(np.sqrt(frac * cfg.size * cfg.size)))))
    return int(v)


def run_sweep(cfg: RunConfig, param: str, values) -> dict:
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"cannot sweep {param!r}; choose from {sorted(SWEEP_PARAMS)}")
    t0 = time.perf_counter()
    model, ds = load_model(cfg.model), eval_set(cfg)
    _check_compatible(model, ds)
    key = SWEEP_PARAMS[param]
    values = [v.strip() for v in values]
    if param == "patch" and values and values[-1].endswith("%"):
        # "1,2,3%" reads as 1%, 2%, 3%
        values = [v if v.endswith("%") else v + "%" for v in values]
    rows = []
    for raw in values:
        val = parse_patch_value(raw, cfg) if param == "patch" else _coerce(key, raw, getattr(cfg, key))
        sub = cfg.replace(**{key: val})
        recs = image_records(model, ds, sub.defense, cfg.workers)
        m = metrics(recs)
        tag = f"{param}={raw}"
        rows += [(f"{tag}:merged_windows", len(sub.defense.plan(model))),
                 (f"{tag}:clean_acc", m["clean_acc"]),
                 (f"{tag}:certified_acc", m["certified_acc"]),
                 (f"{tag}:avg_windows", m["avg_windows"]),
                 (f"{tag}:pruned_acc", accuracy(model, ds.images, ds.labels, sub.sin))]
    return _finish(cfg, f"sweep_{param}", rows, t0)


def vanilla_accuracy(model: ModelSpec, ds: Dataset) -> float:
    return float(np.mean(forward(model, ds.images).labels == ds.labels))
