"""``certkit`` command line: fixture, generate, train, certify, sweep, analyze.

Experiments are described by flat ``key = value`` config files; flags given
on the command line override the file. Every output directory gets one
``manifest.json`` recording the resolved config, its hash, input and output
digests and the wall-clock duration.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .analysis import (
    Series,
    certification_confusion,
    cdf_series,
    comparison_table,
    gap_gain_csv,
    gap_gain_fit,
    gap_gain_points,
    robust_overfitting_report,
    svg_plot,
)
from .certify import (
    ThreatModel,
    certify_dataset,
    over_robustness_report,
    radius_cdf,
    records_from_csv,
    records_to_csv,
    soundness_oracle,
)
from .data import (
    LabeledDataset,
    MixedDataConfig,
    balanced_counts,
    fit_generator,
    load_csv_dataset,
    load_dataset,
    sample_generator,
    save_dataset,
)
from .errors import CertkitError, ConfigError, FitError, FormatError, NumericError, ValidationError
from .fixtures import digits_splits, moons_splits
from .lipnet import FAMILIES, SIZE_PRESETS, NormKind, build_network, load_checkpoint, save_checkpoint
from .train import ExperimentRecord, TrainConfig, TrainingDiverged, train

log = logging.getLogger("certkit")

EXIT_USAGE, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 2, 3, 4, 5
AUX_MULTIPLIERS = {"none": 0, "1x": 1, "5x": 5, "10x": 10}
MANIFEST = "manifest.json"


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class ExperimentConfig:
    train_data: str = ""
    test_data: str = ""
    pool_dir: str = ""
    fixture: str = "digits"
    n_train: int = 500
    n_test: int = 1000
    fixture_seed: int = 0
    norm: str = "l2"
    family: str = ""
    size: str = "S"
    dropout: str = "off"
    dropout_rate: float = 0.1
    epochs: int = 100
    batch_size: int = 50
    lr: float = 0.05
    momentum: float = 0.9
    scheduler: str = "cosine"
    milestones: str = ""
    decay: float = 0.1
    margin_temp: float = 1.0
    eval_every: int = 1
    train_eval_size: int = 1000
    epsilon: str = ""
    aux: str = "none"
    ratio: float = 0.7
    rank: int = 8
    floor: float = 1e-3
    # resample: fresh pool draw each epoch; walk: step through the pool without repeats
    pool_reuse: str = "resample"
    seed: int = 0
    sweep_ratios: str = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0"
    sweep_epoch_steps: int = 3
    sweep_sizes: str = "XS,S,M,L"
    base_dir: str = field(default="", compare=False)

    def __post_init__(self):
        if self.fixture not in ("digits", "moons"):
            raise ConfigError(f"fixture must be digits or moons, got {self.fixture!r}")
        NormKind.parse(self.norm)
        if self.family and self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; choose from {sorted(FAMILIES)}")
        if self.family and FAMILIES[self.family] is not NormKind.parse(self.norm):
            raise ConfigError(f"family {self.family} needs norm {FAMILIES[self.family].value}, not {self.norm}")
        if self.size not in SIZE_PRESETS:
            raise ConfigError(f"size must be one of {sorted(SIZE_PRESETS)}")
        if self.dropout not in ("on", "off"):
            raise ConfigError("dropout must be on or off")
        if self.aux not in AUX_MULTIPLIERS:
            raise ConfigError(f"aux must be one of {list(AUX_MULTIPLIERS)}")
        if self.pool_reuse not in ("resample", "walk"):
            raise ConfigError("pool_reuse must be resample or walk")
        if not 0.0 <= self.ratio <= 1.0:
            raise ConfigError(f"ratio must lie in [0, 1], got {self.ratio}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.n_train < 1 or self.n_test < 1 or self.rank < 0 or self.sweep_epoch_steps < 1:
            raise ConfigError("n_train, n_test, sweep_epoch_steps must be positive and rank non-negative")
        if self.epsilon:
            _parse_fraction(self.epsilon, "epsilon")

    @property
    def effective_ratio(self) -> float:
        return 0.0 if self.aux == "none" else self.ratio

    def threat(self) -> ThreatModel:
        if self.epsilon:
            return ThreatModel(self.norm, float(_parse_fraction(self.epsilon, "epsilon")))
        return ThreatModel.default(self.norm)

    def train_config(self) -> TrainConfig:
        ms = tuple(int(v) for v in _split(self.milestones))
        return TrainConfig(
            epochs=self.epochs, threat=self.threat(), batch_size=self.batch_size, lr=self.lr,
            momentum=self.momentum, scheduler=self.scheduler, milestones=ms, decay=self.decay,
            dropout_enabled=self.dropout == "on", margin_temp=self.margin_temp,
            eval_every=self.eval_every, train_eval_size=self.train_eval_size, seed=self.seed,
        )

    def resolved(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.resolved(), sort_keys=True).encode()).hexdigest()

    def tags(self) -> dict[str, str]:
        family = self.family or _default_family(self.norm)
        return {"model_family": family, "model_size": self.size, "epochs": str(self.epochs),
                "aux_amount": self.aux, "ratio": f"{self.effective_ratio:g}",
                "dropout": self.dropout, "scheduler": self.scheduler, "seed": str(self.seed)}

    def path(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() or not self.base_dir else Path(self.base_dir) / q


def _default_family(norm: str) -> str:
    from .lipnet import default_family
    return default_family(NormKind.parse(norm))


def _split(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _parse_fraction(text: str, what: str) -> Fraction:
    try:
        return Fraction(str(text).strip())
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"{what} must be a number or fraction such as 8/255, got {text!r}") from None


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig) if f.name != "base_dir"}


def _coerce(key: str, raw: str):
    kind = type(_FIELDS[key].default)
    try:
        return kind(raw) if kind is not str else raw
    except ValueError:
        raise ConfigError(f"config key {key!r} expects {kind.__name__}, got {raw!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def load_config(path: str | None, overrides: dict | None = None) -> ExperimentConfig:
    values: dict[str, object] = {}
    base = ""
    if path:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise _io_error(p, exc) from None
        values = parse_config_text(text, str(p))
        base = str(p.resolve().parent)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return ExperimentConfig(**values, base_dir=base)


def render_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.resolved().items())


# ---------------------------------------------------------------- manifests


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    inputs: dict[str, str]
    outputs: dict[str, str]
    duration_s: float
    config: dict = field(default_factory=dict)
    tags: dict = field(default_factory=dict)
    version: str = __version__

    def write(self, directory: Path) -> Path:
        path = directory / MANIFEST
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, directory: Path) -> "RunManifest":
        path = Path(directory) / MANIFEST
        try:
            data = json.loads(path.read_text())
        except OSError as exc:
            raise _io_error(path, exc) from None
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid manifest JSON ({exc.msg})") from None
        return cls(**data)

    def verify(self, directory: Path) -> list[str]:
        """Names of outputs whose digest no longer matches."""
        bad = []
        for name, digest in sorted(self.outputs.items()):
            p = Path(directory) / name
            if not p.is_file() or sha256_file(p) != digest:
                bad.append(name)
        return bad


def _finish(directory: Path, command: str, cfg: ExperimentConfig | None, inputs: Sequence[Path],
            outputs: Sequence[str], started: float, extra_tags: dict | None = None) -> RunManifest:
    m = RunManifest(
        command=command,
        config_hash=cfg.digest() if cfg else "",
        seed=cfg.seed if cfg else 0,
        inputs={str(p): sha256_file(p) for p in inputs},
        outputs={name: sha256_file(directory / name) for name in sorted(outputs)},
        duration_s=round(time.perf_counter() - started, 3),
        config=cfg.resolved() if cfg else {},
        tags={**(cfg.tags() if cfg else {}), **(extra_tags or {})},
    )
    m.write(directory)
    return m


def _io_error(path: Path, exc: OSError) -> FormatError:
    err = FormatError(f"cannot read {path}: {exc.strerror or exc}")
    err.path = str(path)
    return err


# ---------------------------------------------------------------- data plumbing


def read_dataset(path: Path) -> LabeledDataset:
    if not path.is_file():
        raise _io_error(path, FileNotFoundError(2, "no such file"))
    if path.suffix == ".csv":
        return load_csv_dataset(path)
    return load_dataset(path)


def load_splits(cfg: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset, list[Path]]:
    if cfg.train_data:
        tr_path = cfg.path(cfg.train_data)
        if not cfg.test_data:
            raise ConfigError("train_data is set but test_data is missing")
        te_path = cfg.path(cfg.test_data)
        return read_dataset(tr_path), read_dataset(te_path), [tr_path, te_path]
    splits = digits_splits if cfg.fixture == "digits" else moons_splits
    train_ds, test_ds = splits(cfg.n_train, cfg.n_test, seed=cfg.fixture_seed)
    return train_ds, test_ds, []


def generate_pools(train_ds: LabeledDataset, cfg: ExperimentConfig, amounts=("1x", "5x", "10x")):
    g = fit_generator(train_ds, rank=cfg.rank, floor=cfg.floor, seed=cfg.seed)
    pools = {}
    for a in amounts:
        n = AUX_MULTIPLIERS[a] * len(train_ds)
        # each pool has its own stream so sizes can be generated independently
        pools[a] = sample_generator(g, balanced_counts(n, train_ds.num_classes), seed=cfg.seed * 1000 + AUX_MULTIPLIERS[a])
    return pools


def pool_for(cfg: ExperimentConfig, train_ds: LabeledDataset) -> tuple[LabeledDataset | None, list[Path]]:
    if cfg.aux == "none":
        return None, []
    if cfg.pool_dir:
        p = cfg.path(cfg.pool_dir) / f"pool_{cfg.aux}.ldst"
        return read_dataset(p), [p]
    return generate_pools(train_ds, cfg, (cfg.aux,))[cfg.aux], []


# ---------------------------------------------------------------- commands


def run_training(cfg: ExperimentConfig, out: Path) -> ExperimentRecord:
    """Train one configuration into ``out`` and return its record."""
    started = time.perf_counter()
    out.mkdir(parents=True, exist_ok=True)
    train_ds, test_ds, inputs = load_splits(cfg)
    pool, pool_inputs = pool_for(cfg, train_ds)
    net = build_network(cfg.norm, train_ds.dim, train_ds.num_classes, size=cfg.size,
                        family=cfg.family or None,
                        dropout_rate=cfg.dropout_rate if cfg.dropout == "on" else 0.0,
                        seed=cfg.seed, init_data=train_ds.inputs)
    mix = MixedDataConfig(train_ds, pool, cfg.effective_ratio, batch_size=cfg.batch_size, seed=cfg.seed,
                          replacement_across_epochs=cfg.pool_reuse == "resample")
    tcfg = cfg.train_config()

    def progress(row):
        log.info("epoch %d lr %.4g loss %.4f train %.2f/%.2f test %.2f/%.2f", row.epoch, row.lr, row.loss,
                 row.train_clean, row.train_cert, row.test_clean, row.test_cert)

    try:
        result = train(net, mix, test_ds, tcfg, progress=progress)
    except TrainingDiverged as exc:
        save_checkpoint(exc.checkpoint, out / "last_good.lipn")
        (out / "record.csv").write_text(exc.record.to_csv())
        raise
    record = result.record
    record.tags.update(cfg.tags())
    (out / "record.csv").write_text(record.to_csv())
    save_checkpoint(result.best, out / "best.lipn")
    save_checkpoint(result.last, out / "last.lipn")
    records, _ = certify_dataset(result.best, test_ds.inputs, test_ds.labels, tcfg.threat)
    (out / "test_records.csv").write_text(records_to_csv(records))
    (out / "config.txt").write_text(render_config(cfg))
    _finish(out, "train", cfg, inputs + pool_inputs,
            ["record.csv", "best.lipn", "last.lipn", "test_records.csv", "config.txt"], started)
    return record


def cmd_fixture(args) -> int:
    started = time.perf_counter()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = digits_splits if args.name == "digits" else moons_splits
    tr, te = splits(args.n_train, args.n_test, seed=args.seed)
    save_dataset(tr, out / "train.ldst")
    save_dataset(te, out / "test.ldst")
    _finish(out, "fixture", None, [], ["train.ldst", "test.ldst"], started,
            {"fixture": args.name, "seed": str(args.seed)})
    print(f"wrote {len(tr)} train and {len(te)} test samples to {out}")
    return 0


def cmd_generate(args) -> int:
    started = time.perf_counter()
    cfg = load_config(args.config, {"seed": args.seed})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_ds, _, inputs = load_splits(cfg)
    pools = generate_pools(train_ds, cfg)
    names = []
    for a, ds in pools.items():
        save_dataset(ds, out / f"pool_{a}.ldst")
        names.append(f"pool_{a}.ldst")
        print(f"pool {a}: {len(ds)} samples, class counts {ds.class_counts().tolist()}")
    _finish(out, "generate", cfg, inputs[:1], names, started)
    return 0


def _train_overrides(args) -> dict:
    return {"aux": args.aux, "ratio": args.ratio, "epochs": args.epochs, "size": args.size,
            "dropout": args.dropout, "scheduler": args.scheduler, "norm": args.norm, "seed": args.seed,
            "family": args.family}


def cmd_train(args) -> int:
    cfg = load_config(args.config, _train_overrides(args))
    record = run_training(cfg, Path(args.out))
    b = record.best
    print(f"best epoch {b.epoch}: test clean {b.test_clean:.2f}%, test certified {b.test_cert:.2f}%, "
          f"gap {record.generalization_gap_at_best:.2f}")
    return 0


def cmd_certify(args) -> int:
    started = time.perf_counter()
    ckpt, ds_path = Path(args.checkpoint), Path(args.dataset)
    if not ckpt.is_file():
        raise _io_error(ckpt, FileNotFoundError(2, "no such file"))
    net = load_checkpoint(ckpt)
    ds = read_dataset(ds_path)
    norm = NormKind.parse(args.norm) if args.norm else net.norm
    if norm is not net.norm:
        raise ConfigError(f"checkpoint is a {net.norm.value} network; cannot certify under {norm.value}")
    threat = ThreatModel(norm, float(_parse_fraction(args.epsilon, "epsilon"))) if args.epsilon \
        else ThreatModel.default(norm)
    records, summary = certify_dataset(net, ds.inputs, ds.labels, threat)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "records.csv").write_text(records_to_csv(records))
    over = over_robustness_report(records, threat)
    (out / "summary.csv").write_text(
        "n,epsilon,clean_acc,certified_acc,frac_radius_ge_eps,frac_radius_ge_2eps,mean_certified_radius\n"
        f"{summary.n},{threat.epsilon:.9g},{summary.clean_acc:.9g},{summary.certified_acc:.9g},"
        f"{over.fraction_above_eps:.9g},{over.fraction_above_2eps:.9g},{over.mean_radius_certified:.9g}\n")
    names = ["records.csv", "summary.csv"]
    print(f"n {summary.n}  clean {100 * summary.clean_acc:.2f}%  certified {100 * summary.certified_acc:.2f}%"
          f"  (eps {threat.epsilon:.6g}, {threat.norm.value})")
    violations = 0
    if args.oracle:
        mode = "grid" if ds.dim <= 2 else "random"
        lines = ["sample_id,sound,evaluated"]
        for r in records:
            if not r.certified:
                continue
            v = soundness_oracle(net, ds.inputs[r.sample_id], r, threat, mode=mode, seed=r.sample_id)
            violations += not v.sound
            lines.append(f"{r.sample_id},{int(v.sound)},{v.evaluated}")
        (out / "oracle.csv").write_text("\n".join(lines) + "\n")
        names.append("oracle.csv")
        print(f"soundness oracle ({mode}): {len(lines) - 1} certified points, {violations} violations")
    _finish(out, "certify", None, [ckpt, ds_path], names, started,
            {"norm": norm.value, "epsilon": f"{threat.epsilon:.9g}"})
    if violations:
        raise NumericError(f"soundness oracle found {violations} violating certificates")
    return 0


def sweep_grid(kind: str, cfg: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    """Named grid points for one sweep dimension."""
    rep = dataclasses.replace
    if kind == "ratio":
        aux = cfg.aux if cfg.aux != "none" else "5x"
        ratios = [float(r) for r in _split(cfg.sweep_ratios)]
        return [(f"ratio_{r:.2f}", rep(cfg, aux=aux, ratio=r)) for r in ratios]
    if kind == "aux":
        return [(f"aux_{a}", rep(cfg, aux=a)) for a in AUX_MULTIPLIERS]
    aux = cfg.aux if cfg.aux != "none" else "5x"
    if kind == "epochs":
        points = [rep(cfg, epochs=cfg.epochs * 2**i) for i in range(cfg.sweep_epoch_steps)]
    elif kind == "size":
        points = [rep(cfg, size=s) for s in _split(cfg.sweep_sizes)]
    else:
        raise ConfigError(f"unknown sweep dimension {kind!r}")
    grid = []
    for p in points:
        label = f"e{p.epochs}" if kind == "epochs" else f"size_{p.size}"
        grid += [(f"{label}_none", rep(p, aux="none")), (f"{label}_{aux}", rep(p, aux=aux))]
    return grid


def _sweep_worker(job) -> str:
    name, cfg, out = job
    run_training(cfg, Path(out))
    return name


def worker_count() -> int:
    raw = os.environ.get("CERTKIT_THREADS", "")
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CERTKIT_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("CERTKIT_THREADS must be >= 1")
    return n


def cmd_sweep(args) -> int:
    started = time.perf_counter()
    cfg = load_config(args.config, {"seed": args.seed})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = sweep_grid(args.dimension, cfg)
    jobs = [(name, c, str(out / name)) for name, c in grid]
    workers = min(worker_count(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_sweep_worker, jobs))
    else:
        for job in jobs:
            log.info("sweep point %s", job[0])
            _sweep_worker(job)
    records = []
    lines = ["run,aux_amount,ratio,epochs,model_size,best_epoch,train_clean,test_clean,test_cert,gap"]
    for name, c in grid:
        rec = ExperimentRecord.from_csv((out / name / "record.csv").read_text(), c.tags())
        records.append(rec)
        b = rec.best
        lines.append(f"{name},{c.aux},{c.effective_ratio:g},{c.epochs},{c.size},{b.epoch},"
                     f"{b.train_clean:.4f},{b.test_clean:.4f},{b.test_cert:.4f},{rec.generalization_gap_at_best:.4f}")
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    names = ["sweep.csv"]
    if args.dimension == "ratio":
        xs = [c.effective_ratio for _, c in grid]
        svg = svg_plot([Series("test certified", xs, [r.best.test_cert for r in records]),
                        Series("test clean", xs, [r.best.test_clean for r in records])],
                       "accuracy vs generated ratio", "generated ratio", "accuracy (%)")
    else:
        table = comparison_table(records)
        (out / "comparison.csv").write_text(table.to_csv())
        (out / "comparison.txt").write_text(table.to_text())
        names += ["comparison.csv", "comparison.txt"]
        print(table.to_text(), end="")
        series = []
        for amount in table.amounts():
            xs = list(range(len(table.rows)))
            series.append(Series(f"cert {amount}", xs, [r.cert.get(amount, np.nan) for r in table.rows], "scatter"))
        series = [s for s in series if np.all(np.isfinite(s.y))]
        svg = svg_plot(series, f"{args.dimension} sweep", "row", "test certified (%)")
    (out / "sweep.svg").write_text(svg)
    names.append("sweep.svg")
    _finish(out, f"sweep {args.dimension}", cfg, [], names, started, {"dimension": args.dimension})
    print(f"{len(grid)} runs written to {out}")
    return 0


def _collect_runs(paths: Sequence[str]) -> list[tuple[str, Path, ExperimentRecord]]:
    runs = []
    for p in map(Path, paths):
        if not p.is_dir():
            raise _io_error(p, FileNotFoundError(2, "not a run directory"))
        candidates = [p] if (p / "record.csv").is_file() else sorted(q for q in p.iterdir() if (q / "record.csv").is_file())
        if not candidates:
            raise FormatError(f"{p}: no record.csv found in directory or its subdirectories")
        for run in candidates:
            m = RunManifest.read(run)
            rec = ExperimentRecord.from_csv((run / "record.csv").read_text(), m.tags)
            runs.append((run.name if run != p or len(paths) > 1 else p.name, run, rec))
    names = [r[0] for r in runs]
    if len(set(names)) != len(names):
        # fall back to parent-qualified names
        runs = [(f"{d.parent.name}_{d.name}", d, rec) for _, d, rec in runs]
    return runs


def cmd_analyze(args) -> int:
    started = time.perf_counter()
    runs = _collect_runs(args.runs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names, inputs = [], []
    for _, d, _ in runs:
        inputs.append(d / "record.csv")
        if (d / "test_records.csv").is_file():
            inputs.append(d / "test_records.csv")

    lines = ["run,best_epoch,last_epoch,epoch_distance,cert_delta"]
    for name, _, rec in runs:
        rep = robust_overfitting_report(rec)
        lines.append(f"{name},{rec.best_epoch},{rec.last.epoch},{rep.epoch_distance},{rep.cert_delta:.4f}")
    (out / "overfitting.csv").write_text("\n".join(lines) + "\n")
    names.append("overfitting.csv")

    records = [rec for _, _, rec in runs]
    tagged = [r for r in records if "aux_amount" in r.tags]
    points = gap_gain_points(tagged, strict=False)
    unpaired = sum(r.tags["aux_amount"] != "none" for r in tagged) - len(points)
    if unpaired:
        log.warning("%d aux runs have no matching baseline; left out of the gap-gain fit", unpaired)
    if points:
        try:
            fits = gap_gain_fit(points, group_by_family=True)
        except FitError as exc:
            log.warning("gap-gain fit skipped: %s", exc)
            fits = {}
        (out / "gap_gain.csv").write_text(gap_gain_csv(points, fits))
        series = [Series("runs", [p.base_gap for p in points], [p.delta_cert for p in points], "scatter")]
        xs = np.array([p.base_gap for p in points])
        for fam, f in fits.items():
            series.append(Series(f"{fam} fit (r2 {f.r2:.2f})", [xs.min(), xs.max()], list(f.predict([xs.min(), xs.max()]))))
        (out / "gap_gain.svg").write_text(svg_plot(series, "certified gain vs generalization gap",
                                                   "base generalization gap (points)", "certified gain (points)"))
        names += ["gap_gain.csv", "gap_gain.svg"]

    cert_records = {}
    for name, d, _ in runs:
        if (d / "test_records.csv").is_file():
            cert_records[name] = records_from_csv((d / "test_records.csv").read_text())
    pairs = []
    if len(runs) == 2:
        pairs.append((runs[0][0], runs[1][0]))
    else:
        base = {}
        for name, _, rec in runs:
            if rec.tags.get("aux_amount", "none") == "none":
                base[_pair_key(rec.tags)] = name
        for name, _, rec in runs:
            b = base.get(_pair_key(rec.tags))
            if b is not None and b != name:
                pairs.append((b, name))
    for a, b in pairs:
        if a in cert_records and b in cert_records:
            cm = certification_confusion(cert_records[a], cert_records[b])
            fname = f"confusion_{a}__{b}.csv"
            (out / fname).write_text(cm.to_csv())
            names.append(fname)

    cdf_lines = ["run,threshold,all,correct,incorrect"]
    for name, recs in cert_records.items():
        top = max([r.radius for r in recs] + [1e-6])
        thresholds = np.linspace(0.0, top, 51)
        split = radius_cdf(recs, thresholds, split_by_correct=True)
        allc = radius_cdf(recs, thresholds)
        for t, a, c, i in zip(thresholds, allc, split["correct"], split["incorrect"]):
            cdf_lines.append(f"{name},{t:.6g},{a:.6g},{c:.6g},{i:.6g}")
        fname = f"cdf_{name}.svg"
        (out / fname).write_text(svg_plot(cdf_series(recs, thresholds, name), f"certification radii: {name}",
                                          "radius", "samples with radius >= x"))
        names.append(fname)
    if cert_records:
        (out / "radius_cdf.csv").write_text("\n".join(cdf_lines) + "\n")
        names.append("radius_cdf.csv")
    try:
        table = comparison_table(records)
    except ValidationError as exc:
        log.warning("comparison table skipped: %s", exc)
    else:
        (out / "comparison.csv").write_text(table.to_csv())
        names.append("comparison.csv")
    _finish(out, "analyze", None, inputs, names, started)
    print(f"analyzed {len(runs)} runs into {out}")
    return 0


def _pair_key(tags) -> tuple:
    return tuple(sorted((k, v) for k, v in tags.items() if k not in ("aux_amount", "ratio")))


# ---------------------------------------------------------------- parser


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    # overrides default to None so the config file can supply the value
    def _get_help_string(self, action):
        if action.default is None:
            return action.help
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    p = argparse.ArgumentParser(prog="certkit", formatter_class=fmt,
                                description="Train and certify Lipschitz networks with generated auxiliary data.")
    p.add_argument("--version", action="version", version=f"certkit {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", required=True)

    f = sub.add_parser("fixture", formatter_class=fmt, help="export a bundled dataset")
    f.add_argument("name", choices=("digits", "moons"))
    f.add_argument("--out", required=True, help="output directory")
    f.add_argument("--n-train", type=int, default=500)
    f.add_argument("--n-test", type=int, default=1000)
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(func=cmd_fixture)

    g = sub.add_parser("generate", formatter_class=fmt, help="fit the generator and write 1x/5x/10x pools")
    g.add_argument("config", help="experiment config file")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=None, help="override config seed")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", formatter_class=fmt, help="train one configuration",
                       description="Flags default to the config file value; listed defaults apply when both are absent.")
    t.add_argument("config", nargs="?", default=None, help="experiment config file")
    t.add_argument("--out", required=True, help="output directory")
    d = ExperimentConfig()
    t.add_argument("--aux", choices=tuple(AUX_MULTIPLIERS), default=None, help=f"generated pool size (config default {d.aux})")
    t.add_argument("--ratio", type=float, default=None, help=f"generated fraction per batch (config default {d.ratio})")
    t.add_argument("--epochs", type=int, default=None, help=f"training epochs (config default {d.epochs})")
    t.add_argument("--size", choices=tuple(SIZE_PRESETS), default=None, help=f"model size (config default {d.size})")
    t.add_argument("--dropout", choices=("on", "off"), default=None, help=f"dropout layers (config default {d.dropout})")
    t.add_argument("--scheduler", choices=("cosine", "multistep"), default=None,
                   help=f"learning-rate schedule (config default {d.scheduler})")
    t.add_argument("--norm", choices=("l2", "linf"), default=None, help=f"threat norm (config default {d.norm})")
    t.add_argument("--family", choices=tuple(sorted(FAMILIES)), default=None,
                   help="layer family (config default: orthogonal for l2, linfdist for linf)")
    t.add_argument("--seed", type=int, default=None, help=f"random seed (config default {d.seed})")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("certify", formatter_class=fmt, help="certify a checkpoint on a dataset")
    c.add_argument("checkpoint", help="network checkpoint (.lipn)")
    c.add_argument("dataset", help="dataset file (.ldst or .csv)")
    c.add_argument("--out", required=True, help="output directory")
    c.add_argument("--epsilon", default=None, help="threat radius, e.g. 8/255 (default 8/255 linf, 36/255 l2)")
    c.add_argument("--norm", choices=("l2", "linf"), default=None, help="threat norm (default: checkpoint norm)")
    c.add_argument("--oracle", action="store_true", help="search each certified ball for a label flip")
    c.set_defaults(func=cmd_certify)

    s = sub.add_parser("sweep", formatter_class=fmt, help="run a grid over one dimension")
    s.add_argument("dimension", choices=("ratio", "epochs", "size", "aux"))
    s.add_argument("config", help="experiment config file")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, default=None, help="override config seed")
    s.set_defaults(func=cmd_sweep)

    a = sub.add_parser("analyze", formatter_class=fmt, help="analyze trained run directories")
    a.add_argument("runs", nargs="+", help="run or sweep directories")
    a.add_argument("--out", required=True, help="output directory")
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, ValidationError) as exc:
        print(f"certkit: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as exc:
        print(f"certkit: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"certkit: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"certkit: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CertkitError as exc:
        print(f"certkit: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
