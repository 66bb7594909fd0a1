"""Command-line entry point: ``icepll <command> ...`` (or ``python3 -m icepll``).

Global flags go before the command::

    icepll --seed 0 --profile desk --out runs/data gen-data
    icepll --out runs/sweep --parallelism 4 sweep --data runs/data/manifest.json

Every command writes JSON reports under ``--out``; sweep summaries are CSV
with the column order of ``experiments.SUMMARY_COLUMNS``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import data, experiments as ex, labels, losses, metrics, nn
from .train import TrainConfig, train

log = logging.getLogger("icepll")


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _dataset(args) -> data.Dataset:
    if args.data:
        return data.load_dataset(args.data)
    profile = ex.PROFILES[args.profile]
    log.info("no --data given; generating the %s synthetic dataset with seed %d", profile.name, args.seed)
    return ex.synthetic_dataset(profile.synthetic_spec(), seed=args.seed)


# -- commands -----------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    profile = ex.PROFILES[args.profile]
    spec = data.SyntheticSpec.from_dict(_read_json(args.spec)) if args.spec else profile.synthetic_spec()
    if args.n_samples is not None:
        spec = replace(spec, n_samples=args.n_samples)
    if args.patch_size is not None:
        spec = replace(spec, patch_size=args.patch_size)
    ds = ex.synthetic_dataset(spec, seed=args.seed, apply_filter=not args.no_filter)
    manifest = data.save_dataset(_out(args), ds.arrays, ds.split, ds.meta)
    print(manifest)
    return 0


def cmd_ingest(args) -> int:
    samples = data.ingest_scene(args.raster, args.annotations, patch=args.patch, pixel_spacing=args.pixel_spacing)
    n_raw = len(samples)
    samples = data.filter_samples(samples)
    if not samples:
        raise data.EmptyDataset("no patches survived filtering")
    meta = {"source": str(args.raster), "patches": n_raw, "kept": len(samples), "seed": args.seed,
            "class_counts": data.class_counts(samples).tolist()}
    manifest = data.save_dataset(_out(args), data.stack_samples(samples), data.split(samples, seed=args.seed), meta)
    print(manifest)
    return 0


def cmd_encode(args) -> int:
    polygons = labels.read_polygon_file(args.polygons)
    dest = Path(args.output) if args.output else _out(args) / "labels.csv"
    n = labels.write_encoding_csv(dest, polygons)
    print(f"{n} polygons -> {dest}")
    return 0


def _experiment_from_json(path, args) -> ex.ExperimentConfig:
    d = _read_json(path) if path else {}
    d.setdefault("name", "cli")
    d.setdefault("encoding", labels.LabelKind.ConfidencePartial.value)
    d.setdefault("loss", losses.LossConfig.focal(0.25, 1).to_dict())
    if "train" not in d:
        d["train"] = ex.PROFILES[args.profile].train_config(seed=args.seed).to_dict()
    d.setdefault("base_seed", args.seed)
    return ex.ExperimentConfig.from_dict(d)


def cmd_train(args) -> int:
    cfg = _experiment_from_json(args.config, args)
    ds = _dataset(args)
    tr = ds.part("train")
    y = tr.labels[cfg.encoding]
    loss = cfg.loss
    if cfg.class_weights_enabled:
        loss = loss.with_weights(losses.class_weights(np.bincount(np.argmax(y, axis=1), minlength=labels.N_CLASSES)))
    tcfg = replace(cfg.train, loss=loss)
    net = nn.build_network(seed=args.seed)
    net, history, state = train(net, tr.pixels, y, tcfg, truth=tr.truth)
    out = _out(args)
    nn.save_checkpoint(net, out / "model.tnet", meta={"config": cfg.to_dict(), "init_seed": args.seed})
    _write_json(out / "history.json", {"config": cfg.to_dict(), "train": tcfg.to_dict(),
                                       "optimizer": state.hyperparams(),
                                       "history": [asdict(h) for h in history]})
    last = history[-1]
    print(f"epoch {last.epoch}: loss {last.loss:.6f} train accuracy {last.accuracy:.4f} -> {out / 'model.tnet'}")
    return 0


def cmd_evaluate(args) -> int:
    net, meta = nn.load_checkpoint(args.checkpoint)
    ds = _dataset(args)
    part = ds.part(args.split)
    report = metrics.evaluate(nn.predict(net, part.pixels), part.truth)
    out = _out(args)
    report.to_json(out / f"metrics_{args.split}.json")
    metrics.write_confusion_csv(out / f"confusion_{args.split}.csv", report.confusion)
    print(report.table())
    return 0


def _grid(args) -> list[ex.ExperimentConfig]:
    profile = ex.PROFILES[args.profile]
    d = _read_json(args.grid) if args.grid else {}
    tcfg = TrainConfig.from_dict(d["train"]) if "train" in d else profile.train_config()
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    groups = [ex.GroupSpec.from_dict(g) for g in d["groups"]] if "groups" in d else None
    reps = args.repetitions if args.repetitions is not None else int(d.get("repetitions", 2))
    return ex.build_grid(groups, train=tcfg, repetitions=reps, base_seed=int(d.get("base_seed", args.seed)),
                         dataset=args.data)


def cmd_sweep(args) -> int:
    grid = _grid(args)
    ds = _dataset(args)
    out = _out(args)
    log.info("running %d configs with parallelism %d", len(grid), args.parallelism)
    result = ex.run_sweep(grid, ds, args.parallelism, out_dir=out)
    ex.sensitivity_report(result.reports, out_dir=out)
    print(f"{len(result.rows)} configs -> {out / 'summary.csv'}; best: {result.best['name']} "
          f"(weighted F1 {result.best['weighted_f1']:.4f})")
    return 0


def _floats(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split(",")], dtype=np.float64)


def cmd_loss_eval(args) -> int:
    z, y = _floats(args.logits), _floats(args.labels)
    weights = _floats(args.weights) if args.weights else None
    for name, v in (("logits", z), ("labels", y), ("weights", weights)):
        if v is not None and v.shape != (labels.N_CLASSES,):
            raise losses.LengthMismatch(f"--{name} needs {labels.N_CLASSES} values, got {v.size}")
    cfg = losses.LossConfig("focal" if args.focal else "cce", args.alpha, args.gamma, weights)
    result = {
        "config": cfg.to_dict(),
        "probabilities": losses.softmax(z).tolist(),
        "loss": float(losses.sample_loss(z, y, cfg)),
        "gradient": losses.loss_gradient(z, y, cfg).tolist(),
    }
    text = json.dumps(result, indent=1)
    print(text)
    if args.out != ".":
        _write_json(_out(args) / "loss_eval.json", result)
    return 0


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="icepll", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0, help="base seed (default 0)")
    p.add_argument("--parallelism", type=int, default=1, help="worker processes for sweeps")
    p.add_argument("--profile", choices=sorted(ex.PROFILES), default="desk", help="scale defaults")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--spec", help="SyntheticSpec JSON (default: profile spec)")
    g.add_argument("--n-samples", type=int)
    g.add_argument("--patch-size", type=int)
    g.add_argument("--no-filter", action="store_true", help="keep samples the concentration/border filter drops")
    g.set_defaults(func=cmd_gen_data)

    i = sub.add_parser("ingest", help="tile an annotated scene into a dataset")
    i.add_argument("--raster", required=True)
    i.add_argument("--annotations", required=True)
    i.add_argument("--patch", type=int, default=50)
    i.add_argument("--pixel-spacing", type=float)
    i.set_defaults(func=cmd_ingest)

    e = sub.add_parser("encode", help="polygon JSON -> label CSV")
    e.add_argument("polygons")
    e.add_argument("--output", help="CSV path (default: <out>/labels.csv)")
    e.set_defaults(func=cmd_encode)

    t = sub.add_parser("train", help="train one network")
    t.add_argument("--config", help="experiment config JSON")
    t.add_argument("--data", help="dataset manifest (default: generate for the profile)")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("evaluate", help="score a checkpoint on a split")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--data")
    v.add_argument("--split", choices=("train", "val", "test"), default="test")
    v.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="run an experiment grid")
    s.add_argument("--grid", help="grid JSON with optional groups/train/repetitions/base_seed")
    s.add_argument("--data")
    s.add_argument("--repetitions", type=int)
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_sweep)

    l = sub.add_parser("loss-eval", help="loss, probabilities and gradient for one logit vector")
    l.add_argument("--logits", required=True, help="comma separated, 6 values")
    l.add_argument("--labels", required=True, help="comma separated, 6 values")
    l.add_argument("--focal", action="store_true")
    l.add_argument("--alpha", type=float, default=1.0)
    l.add_argument("--gamma", type=float, default=0.0)
    l.add_argument("--weights", help="comma separated class weights")
    l.set_defaults(func=cmd_loss_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"icepll {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
