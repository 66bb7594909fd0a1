"""Experiment grid, repeated runs, sweeps and the alpha/gamma sensitivity tables."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import multiprocessing as mp
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import nn
from .data import Dataset, SyntheticSpec, class_counts, generate_synthetic, filter_samples, split, stack_samples
from .labels import CLASS_ABBREV, LabelKind, N_CLASSES
from .losses import LossConfig, class_weights
from .metrics import MetricsReport, evaluate, mean_reports
from .optim import AdamState
from .train import TrainConfig, train

log = logging.getLogger(__name__)

GRID_ALPHAS = (0.1, 0.25, 0.5, 0.75, 0.9)
GRID_GAMMAS = (1, 2, 5)
ENCODINGS = (LabelKind.OneHot, LabelKind.ConfidencePartial)


@dataclass(frozen=True)
class Profile:
    name: str
    n_samples: int
    patch_size: int
    epochs: int
    batch_size: int

    def synthetic_spec(self, **kw) -> SyntheticSpec:
        return SyntheticSpec(n_samples=self.n_samples, patch_size=self.patch_size, **kw)

    def train_config(self, **kw) -> TrainConfig:
        kw.setdefault("epochs", self.epochs)
        kw.setdefault("batch_size", self.batch_size)
        return TrainConfig(**kw)


PROFILES = {
    "desk": Profile("desk", n_samples=6000, patch_size=16, epochs=50, batch_size=128),
    "paper": Profile("paper", n_samples=127_000, patch_size=50, epochs=200, batch_size=512),
}


@dataclass
class ExperimentConfig:
    name: str
    encoding: LabelKind
    loss: LossConfig
    class_weights_enabled: bool = False
    train: TrainConfig = field(default_factory=lambda: PROFILES["desk"].train_config())
    repetitions: int = 2
    base_seed: int = 0
    group: int = 0
    dataset: Optional[str] = None

    def __post_init__(self):
        self.encoding = LabelKind(self.encoding)
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.encoding not in ENCODINGS:
            raise ValueError(f"experiments train on one-hot or confidence-partial labels, not {self.encoding}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "group": self.group,
            "encoding": self.encoding.value,
            "loss": self.loss.to_dict(),
            "class_weights_enabled": self.class_weights_enabled,
            "train": self.train.to_dict(),
            "repetitions": self.repetitions,
            "base_seed": self.base_seed,
            "dataset": self.dataset,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(
            name=d["name"],
            encoding=LabelKind(d["encoding"]),
            loss=LossConfig.from_dict(d["loss"]),
            class_weights_enabled=bool(d.get("class_weights_enabled", False)),
            train=TrainConfig.from_dict(d["train"]) if "train" in d else PROFILES["desk"].train_config(),
            repetitions=int(d.get("repetitions", 2)),
            base_seed=int(d.get("base_seed", 0)),
            group=int(d.get("group", 0)),
            dataset=d.get("dataset"),
        )

    def fingerprint(self) -> str:
        """Hash of everything that defines the experiment except seeds, name and repetition count."""
        d = self.to_dict()
        for key in ("name", "base_seed", "repetitions", "dataset"):
            d.pop(key)
        d["train"].pop("seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def alpha_gamma(self) -> tuple:
        return self.loss.effective_alpha, self.loss.effective_gamma


def derive_seed(base_seed: int, fingerprint: str, repetition: int, purpose: str) -> int:
    h = hashlib.sha256(f"{base_seed}:{fingerprint}:{repetition}:{purpose}".encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


# -- grid -------------------------------------------------------------------------


@dataclass(frozen=True)
class GroupSpec:
    """One block of the experiment table."""

    loss: str
    encodings: tuple = ENCODINGS
    class_weights: tuple = (False,)
    alphas: tuple = (1.0,)
    gammas: tuple = (0.0,)
    group: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "GroupSpec":
        return cls(
            loss=d["loss"],
            encodings=tuple(LabelKind(e) for e in d.get("encodings", [e.value for e in ENCODINGS])),
            class_weights=tuple(bool(x) for x in d.get("class_weights", [False])),
            alphas=tuple(float(a) for a in d.get("alphas", [1.0])),
            gammas=tuple(float(g) for g in d.get("gammas", [0.0])),
            group=int(d.get("group", 0)),
        )


DEFAULT_GROUPS = (
    GroupSpec("cce", ENCODINGS, class_weights=(True, False), group=1),
    GroupSpec("focal", ENCODINGS, alphas=GRID_ALPHAS, gammas=GRID_GAMMAS, group=2),
)


def _short(enc: LabelKind) -> str:
    return {LabelKind.OneHot: "onehot", LabelKind.ConfidencePartial: "partial"}[enc]


def build_grid(groups: Optional[Sequence[GroupSpec]] = None, *, train: TrainConfig | None = None,
               repetitions: int = 2, base_seed: int = 0, dataset: str | None = None) -> list[ExperimentConfig]:
    """Expand groups into configs. The default is the 34-run table:
    4 CCE runs (encoding x class weights) and 2 x 15 focal runs (encoding x alpha x gamma)."""
    groups = DEFAULT_GROUPS if groups is None else groups
    train = train or PROFILES["desk"].train_config()
    out = []
    for g in groups:
        for enc in g.encodings:
            if g.loss == "cce":
                for w in g.class_weights:
                    name = f"g{g.group}-cce-{_short(enc)}-{'weighted' if w else 'unweighted'}"
                    out.append(ExperimentConfig(name, enc, LossConfig.cce(), w, train, repetitions,
                                                base_seed, g.group, dataset))
            elif g.loss == "focal":
                for w in g.class_weights:
                    for a in g.alphas:
                        for gm in g.gammas:
                            name = f"g{g.group}-focal-{_short(enc)}-a{a:g}-g{gm:g}" + ("-weighted" if w else "")
                            out.append(ExperimentConfig(name, enc, LossConfig.focal(a, gm), w, train,
                                                        repetitions, base_seed, g.group, dataset))
            else:
                raise ValueError(f"unknown loss {g.loss!r} in grid group")
    return out


# -- running ------------------------------------------------------------------------


@dataclass
class RunReport:
    config: dict
    repetitions: list  # MetricsReport per repetition (test split)
    mean: MetricsReport
    histories: list  # per repetition: list of {"epoch", "loss", "accuracy"}
    train_accuracy: float
    val_accuracy: list
    class_weights: Optional[list]
    seeds: list
    optimizer: dict
    batch_reduction: str = "mean"
    wall_clock_seconds: float = 0.0

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {
            "config": self.config,
            "repetitions": [r.to_dict() for r in self.repetitions],
            "mean": self.mean.to_dict(),
            "histories": self.histories,
            "train_accuracy": self.train_accuracy,
            "val_accuracy": self.val_accuracy,
            "class_weights": self.class_weights,
            "seeds": self.seeds,
            "optimizer": self.optimizer,
            "batch_reduction": self.batch_reduction,
        }
        if include_timing:
            d["wall_clock_seconds"] = self.wall_clock_seconds
        return d

    def canonical_json(self) -> str:
        """Serialization without wall-clock time; identical runs give identical bytes."""
        return json.dumps(self.to_dict(include_timing=False), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(
            config=d["config"],
            repetitions=[MetricsReport.from_dict(r) for r in d["repetitions"]],
            mean=MetricsReport.from_dict(d["mean"]),
            histories=d["histories"],
            train_accuracy=d["train_accuracy"],
            val_accuracy=d["val_accuracy"],
            class_weights=d["class_weights"],
            seeds=d["seeds"],
            optimizer=d["optimizer"],
            batch_reduction=d.get("batch_reduction", "mean"),
            wall_clock_seconds=d.get("wall_clock_seconds", 0.0),
        )

    @property
    def experiment(self) -> ExperimentConfig:
        return ExperimentConfig.from_dict(self.config)


def run_experiment(config: ExperimentConfig, dataset: Dataset, spec=None) -> RunReport:
    """Train and test ``config.repetitions`` independently seeded networks; average their test metrics."""
    t0 = time.perf_counter()
    tr, va, te = dataset.part("train"), dataset.part("val"), dataset.part("test")
    y_train = tr.labels[config.encoding]

    weights = None
    if config.class_weights_enabled:
        counts = np.bincount(np.argmax(y_train, axis=1), minlength=N_CLASSES)
        weights = class_weights(counts)
    loss = config.loss.with_weights(weights)

    fp = config.fingerprint()
    reps, histories, seeds, val_acc, train_acc = [], [], [], [], []
    state = AdamState(lr=config.train.lr)
    for r in range(config.repetitions):
        init_seed = derive_seed(config.base_seed, fp, r, "init")
        train_seed = derive_seed(config.base_seed, fp, r, "train")
        net = nn.build_network(spec, seed=init_seed)
        tcfg = replace(config.train, seed=train_seed, loss=loss)
        net, history, state = train(net, tr.pixels, y_train, tcfg, truth=tr.truth)
        reps.append(evaluate(nn.predict(net, te.pixels), te.truth))
        if len(va):
            val_acc.append(float(np.mean(nn.predict(net, va.pixels) == va.truth)))
        histories.append([asdict(h) for h in history])
        train_acc.append(history[-1].accuracy)
        seeds.append({"init": init_seed, "train": train_seed})
        log.info("%s rep %d: test acc %.4f wF1 %.4f", config.name, r, reps[-1].accuracy, reps[-1].weighted_f1)

    return RunReport(
        config=config.to_dict(),
        repetitions=reps,
        mean=mean_reports(reps),
        histories=histories,
        train_accuracy=float(np.mean(train_acc)),
        val_accuracy=val_acc,
        class_weights=None if weights is None else weights.tolist(),
        seeds=seeds,
        optimizer=state.hyperparams(),
        wall_clock_seconds=time.perf_counter() - t0,
    )


_WORKER_DATASET: Optional[Dataset] = None


def _init_worker(dataset):
    global _WORKER_DATASET
    _WORKER_DATASET = dataset


def _run_in_worker(config_dict):
    return run_experiment(ExperimentConfig.from_dict(config_dict), _WORKER_DATASET).to_dict()


SUMMARY_COLUMNS = (
    ["name", "group", "encoding", "loss", "alpha", "gamma", "class_weights", "repetitions",
     "train_accuracy", "test_accuracy", "weighted_f1", "weighted_precision", "weighted_recall"]
    + [f"f1_{c}" for c in CLASS_ABBREV]
    + [f"recall_{c}" for c in CLASS_ABBREV]
    + ["test_accuracy_spread", "weighted_f1_spread"]
)


def summary_row(report: RunReport) -> dict:
    c = report.config
    loss = LossConfig.from_dict(c["loss"])
    m = report.mean
    accs = [r.accuracy for r in report.repetitions]
    f1s = [r.weighted_f1 for r in report.repetitions]
    row = {
        "name": c["name"],
        "group": c["group"],
        "encoding": c["encoding"],
        "loss": loss.kind,
        "alpha": loss.effective_alpha,
        "gamma": loss.effective_gamma,
        "class_weights": c["class_weights_enabled"],
        "repetitions": c["repetitions"],
        "train_accuracy": report.train_accuracy,
        "test_accuracy": m.accuracy,
        "weighted_f1": m.weighted_f1,
        "weighted_precision": m.weighted_precision,
        "weighted_recall": m.weighted_recall,
        "test_accuracy_spread": max(accs) - min(accs),
        "weighted_f1_spread": max(f1s) - min(f1s),
    }
    for i, abbrev in enumerate(CLASS_ABBREV):
        row[f"f1_{abbrev}"] = m.per_class_f1[i]
        row[f"recall_{abbrev}"] = m.per_class_recall[i]
    return row


def best_row(rows: Sequence[dict]) -> dict:
    """Highest weighted F1; ties go to higher test accuracy, then the lowest (alpha, gamma).

    CCE rows count as alpha=1, gamma=0, the focal settings that reduce to CCE.
    """
    if not rows:
        raise ValueError("no rows")
    return min(rows, key=lambda r: (-r["weighted_f1"], -r["test_accuracy"], r["alpha"], r["gamma"]))


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def summary_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in SUMMARY_COLUMNS])
    return buf.getvalue()


@dataclass
class SweepResult:
    reports: list
    rows: list
    best: dict


def run_sweep(grid: Sequence[ExperimentConfig], dataset: Dataset, parallelism: int = 1,
              out_dir=None) -> SweepResult:
    """Run every config; results come back in grid order whatever the parallelism.

    Each config derives its own seeds, so reports do not depend on which
    worker ran them or where they sit in the grid.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("empty grid")
    if parallelism <= 1:
        reports = [run_experiment(cfg, dataset) for cfg in grid]
    else:
        ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else None
        with ProcessPoolExecutor(max_workers=parallelism, mp_context=ctx,
                                 initializer=_init_worker, initargs=(dataset,)) as pool:
            reports = [RunReport.from_dict(d) for d in pool.map(_run_in_worker, [c.to_dict() for c in grid])]
    rows = [summary_row(r) for r in reports]
    result = SweepResult(reports, rows, best_row(rows))
    if out_dir is not None:
        write_sweep(out_dir, result)
    return result


def write_sweep(out_dir, result: SweepResult) -> None:
    out = Path(out_dir)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    timings = {}
    for rep in result.reports:
        name = rep.config["name"]
        (out / "reports" / f"{name}.json").write_text(rep.canonical_json())
        timings[name] = rep.wall_clock_seconds
    (out / "summary.csv").write_text(summary_csv(result.rows))
    (out / "best.json").write_text(json.dumps(result.best, indent=1))
    (out / "timings.json").write_text(json.dumps(timings, indent=1))


# -- sensitivity -------------------------------------------------------------------------

SENSITIVITY_METRICS = ("weighted_f1", "test_accuracy", "train_accuracy", "weighted_precision", "weighted_recall")


def mean_curve(report: RunReport) -> list[dict]:
    """Epoch-wise mean of the repetitions' training curves."""
    hist = report.histories
    out = []
    for e in range(len(hist[0])):
        out.append({
            "epoch": hist[0][e]["epoch"],
            "loss": float(np.mean([h[e]["loss"] for h in hist])),
            "accuracy": float(np.mean([h[e]["accuracy"] for h in hist])),
        })
    return out


def sensitivity_report(reports: Sequence[RunReport], out_dir=None) -> dict:
    """Alpha x gamma metric matrices per encoding plus per-run training curves."""
    tables = {}
    curves = {}
    by_enc = {}
    for rep in reports:
        loss = LossConfig.from_dict(rep.config["loss"])
        if loss.kind != "focal":
            continue
        by_enc.setdefault(rep.config["encoding"], []).append((loss.alpha, loss.gamma, rep))
    for enc, items in by_enc.items():
        alphas = sorted({a for a, _, _ in items})
        gammas = sorted({g for _, g, _ in items})
        mats = {k: np.full((len(alphas), len(gammas)), np.nan) for k in SENSITIVITY_METRICS}
        for a, g, rep in items:
            row = summary_row(rep)
            for k in SENSITIVITY_METRICS:
                mats[k][alphas.index(a), gammas.index(g)] = row[k]
            curves[(enc, a, g)] = mean_curve(rep)
        tables[enc] = {"alphas": alphas, "gammas": gammas, "metrics": {k: v.tolist() for k, v in mats.items()}}

    if out_dir is not None:
        out = Path(out_dir)
        (out / "curves").mkdir(parents=True, exist_ok=True)
        (out / "sensitivity.json").write_text(json.dumps(tables, indent=1))
        for (enc, a, g), curve in curves.items():
            with open(out / "curves" / f"{enc}_a{a:g}_g{g:g}.csv", "w", newline="") as fh:
                w = csv.DictWriter(fh, ["epoch", "loss", "accuracy"], lineterminator="\n")
                w.writeheader()
                w.writerows(curve)
    return {"tables": tables, "curves": curves}


# -- datasets for experiments -----------------------------------------------------------


def synthetic_dataset(spec: SyntheticSpec, seed: int = 0, ratios=(0.81, 0.09, 0.10),
                      apply_filter: bool = True) -> Dataset:
    samples = generate_synthetic(spec, seed=seed)
    if apply_filter:
        samples = filter_samples(samples)
    arrays = stack_samples(samples)
    meta = {"source": "synthetic", "seed": seed, "spec": spec.to_dict(),
            "class_counts": class_counts(samples).tolist()}
    return Dataset(arrays, split(len(samples), ratios, seed=seed), meta)
