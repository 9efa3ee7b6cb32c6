"""``rmnet`` command line: gen-data, train, eval, retrieve, check, bench.

Exit codes: 0 success, 2 configuration or usage error, 3 training divergence,
4 invariance violation, 5 index/model fingerprint mismatch.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .audit import audit
from .autodiff import ContractError
from .checkpoint import Checkpoint, CheckpointError
from .config import RunConfig, parse_kv
from .data import Normalizer, SynthSpec, gen_synthetic, load_dataset
from .metrics import (ConfusionMatrix, MetricError, kappa, kappa_band, map_at_10, mrr_at_10,
                      per_class_metrics)
from .model import Model, build_model
from .retrieval import FingerprintMismatch, RetrievalIndex, build_index, embed, fingerprint
from .rotation import ConfigError
from .training import DivergenceError, predict, train

log = logging.getLogger("rmnet")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_INVARIANCE, EXIT_FINGERPRINT = 0, 2, 3, 4, 5
SPEED_LIMIT = 4.5


class UsageError(ConfigError):
    pass


# ----------------------------------------------------------------- reporting

class Report:
    """Line-delimited ``key=value`` report, echoed to stdout and optionally saved."""

    def __init__(self):
        self.lines: list[str] = []

    def kv(self, **items) -> None:
        self.line(" ".join(f"{k}={_fmt(v)}" for k, v in items.items()))

    def line(self, text: str) -> None:
        self.lines.append(text)
        print(text, flush=True)

    def table(self, header: list[str], rows: list[list]) -> None:
        self.line("# " + "\t".join(header))
        for row in rows:
            self.line("\t".join(_fmt(v) for v in row))

    def save(self, path) -> None:
        if path:
            Path(path).write_text("\n".join(self.lines) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


# --------------------------------------------------------------- checkpoints

def save_model(path, model: Model, cfg: RunConfig, classes: list[str], norm: Normalizer) -> Path:
    tensors = dict(model.state_dict())
    tensors["norm.mean"] = norm.mean
    tensors["norm.std"] = norm.std
    text = cfg.to_text() + f"classes = {','.join(classes)}\n"
    return Checkpoint(tensors, text).save(path)


def load_model(path, strict: bool = False) -> tuple[Model, RunConfig, list[str], Normalizer, str]:
    ckpt = Checkpoint.load(path)
    values = parse_kv(ckpt.text)
    classes = values.pop("classes", "").split(",")
    cfg = RunConfig().update(values)
    cfg.strict = cfg.strict or strict
    tensors = dict(ckpt.tensors)
    norm = Normalizer(tensors.pop("norm.mean"), tensors.pop("norm.std"))
    model = build_model(cfg.graph(len(classes)), seed=cfg.seed)
    model.load_state_dict(tensors)
    return model, cfg, classes, norm, fingerprint(tensors)


def save_index(path, index: RetrievalIndex) -> Path:
    table = [(i, int(l)) for i, l in zip(index.ids, index.labels)]
    return Checkpoint({"embeddings": index.embeddings}, f"fingerprint = {index.fingerprint}\n", table).save(path)


def load_index(path) -> RetrievalIndex:
    ckpt = Checkpoint.load(path)
    if ckpt.table is None or "embeddings" not in ckpt.tensors:
        raise CheckpointError(f"{path} is not a retrieval index")
    ids, labels = zip(*ckpt.table) if ckpt.table else ((), ())
    return RetrievalIndex(list(ids), np.array(labels), ckpt.tensors["embeddings"], parse_kv(ckpt.text)["fingerprint"])


# ------------------------------------------------------------------ commands

def cmd_gen_data(args) -> int:
    spec = SynthSpec(n=args.n, classes=args.classes, seed=args.seed, noise=args.noise,
                     min_angle=args.min_angle, max_angle=args.max_angle)
    man = gen_synthetic(spec, args.out, force=args.force)
    Report().kv(out=args.out, files=len(man.rows), classes=len(man.classes), seed=spec.seed)
    return EXIT_OK


def _run_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)
                 if f.name != "strict" and getattr(args, f.name, None) is not None}
    cfg.update(overrides)
    if args.strict:
        cfg.strict = True
    if not cfg.data:
        raise UsageError("no dataset given (--data or 'data' in the config file)")
    if not cfg.out:
        raise UsageError("no checkpoint path given (--out or 'out' in the config file)")
    return cfg


def cmd_train(args) -> int:
    cfg = _run_config(args)
    data = load_dataset(cfg.data, seed=cfg.split_seed)
    graph = cfg.graph(len(data.classes))
    model = build_model(graph, seed=cfg.seed)
    out = Path(cfg.out)
    report = Report()
    report.kv(structure=graph.label, span=cfg.rm, params=model.num_parameters(), classes=len(data.classes),
              train=len(data.train), val=len(data.val), test=len(data.test))
    if graph.canvas():
        report.kv(canvas=graph.canvas(), interp=graph.rm.interp, theta=graph.rm.theta_degrees, k=graph.rm.k)
    train(model, data, cfg.train_config(), on_epoch=lambda rec: report.line(rec.to_line()))
    save_model(out, model, cfg, data.classes, data.norm)
    report.kv(checkpoint=out, fingerprint=fingerprint(model.state_dict()))
    report.save(out.with_suffix(out.suffix + ".log"))
    return EXIT_OK


def _dataset_for(args, cfg: RunConfig):
    root = args.data or cfg.data
    if not root:
        raise UsageError("no dataset given (--data)")
    return load_dataset(root, seed=cfg.split_seed)


def cmd_eval(args) -> int:
    model, cfg, classes, norm, _ = load_model(args.ckpt, args.strict)
    data = _dataset_for(args, cfg)
    split = getattr(data, args.split)
    logits, _ = predict(model, split, norm)
    cm = ConfusionMatrix.from_predictions(split.labels, logits.argmax(axis=1), len(classes))
    rep = per_class_metrics(cm)
    k = kappa(cm)
    report = Report()
    report.kv(split=args.split, n=cm.n, accuracy=float(np.trace(cm.counts)) / cm.n,
              avg_precision=rep.average_precision, avg_sensitivity=rep.average_sensitivity,
              avg_specificity=rep.average_specificity, kappa=k, kappa_band=kappa_band(k))
    for key, cls in rep.undefined.items():
        report.kv(undefined=key, classes=",".join(classes[c] for c in cls))
    report.table(["class", "precision", "sensitivity", "specificity"],
                 [[classes[c], rep.precision[c], rep.sensitivity[c], rep.specificity[c]] for c in range(len(classes))])
    report.save(args.report)
    return EXIT_OK


def cmd_retrieve(args) -> int:
    model, cfg, classes, norm, fp = load_model(args.ckpt, args.strict)
    data = _dataset_for(args, cfg)
    if args.index and Path(args.index).exists():
        index = load_index(args.index)
        index.check(fp)
    else:
        index = build_index(model, data.train, norm, fp)
        if args.index:
            save_index(args.index, index)
    ranked = index.search(embed(model, data.test, norm), data.test.labels)
    report = Report()
    report.kv(database=len(index), queries=len(data.test), fingerprint=fp,
              map10=map_at_10(ranked), mrr10=mrr_at_10(ranked))
    report.save(args.report)
    return EXIT_OK


def cmd_check(args) -> int:
    model, *_ = load_model(args.ckpt, args.strict)
    result = audit(model, probes=args.probes, seed=args.seed)
    report = Report()
    for line in result.lines():
        report.line(line)
    report.save(args.report)
    return EXIT_INVARIANCE if result.failed else EXIT_OK


def cmd_bench(args) -> int:
    from . import bench

    report = Report()
    suites = {"speed", "interp", "synthetic"} if args.suite == "all" else {args.suite}
    if "speed" in suites:
        r = bench.speed_ratio(k=args.k)
        report.kv(bench="speed", k=r["k"], solo_s=r["solo_s"], rm_s=r["rm_s"], ratio=r["ratio"],
                  limit=SPEED_LIMIT, status="PASS" if r["ratio"] <= SPEED_LIMIT else "FAIL")
    if "interp" in suites:
        for theta, err in bench.interpolation_errors().items():
            report.kv(bench="interp", theta=theta, roundtrip_error=err)
    if "synthetic" in suites:
        thetas = tuple(float(t) for t in args.thetas.split(","))
        results = bench.synthetic_benchmark(seeds=tuple(range(args.seeds)), thetas=thetas, epochs=args.epochs,
                                            train_max_angle=args.train_max_angle)
        for r in results:
            report.line(r.to_line())
        for label, s in bench.summarize(results).items():
            report.kv(summary=label, **s)
    report.save(args.report)
    return EXIT_OK


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rmnet", description="Rotation meanout networks: train, evaluate, audit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic rotated-shape dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=800)
    g.add_argument("--classes", type=int, default=8)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise", type=float, default=0.08)
    g.add_argument("--min-angle", type=float, default=0.0)
    g.add_argument("--max-angle", type=float, default=360.0)
    g.add_argument("--force", action="store_true", help="overwrite an existing dataset")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--config", help="key = value file; flags override it")
    for f in fields(RunConfig):
        if f.name != "strict":
            t.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None)
    t.add_argument("--strict", action="store_true", help="sequential, bitwise-reproducible execution")
    t.set_defaults(fn=cmd_train)

    for name, fn, helptext in (("eval", cmd_eval, "classification metrics on a split"),
                               ("retrieve", cmd_retrieve, "mAP@10 / mRR@10 of test queries against train"),
                               ("check", cmd_check, "rotation equivariance / invariance audit")):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("--ckpt", required=True)
        c.add_argument("--report", help="also write the report to this file")
        c.add_argument("--strict", action="store_true")
        if name != "check":
            c.add_argument("--data", help="dataset root (default: the one used for training)")
        if name == "eval":
            c.add_argument("--split", choices=("train", "val", "test"), default="test")
        if name == "retrieve":
            c.add_argument("--index", help="index file; built from the train split and saved when absent")
        if name == "check":
            c.add_argument("--probes", type=int, default=4)
            c.add_argument("--seed", type=int, default=0)
        c.set_defaults(fn=fn)

    b = sub.add_parser("bench", help="speed, interpolation and synthetic-accuracy benchmarks")
    b.add_argument("--suite", choices=("speed", "interp", "synthetic", "all"), default="speed")
    b.add_argument("--k", type=int, default=4)
    b.add_argument("--seeds", type=int, default=3)
    b.add_argument("--epochs", type=int, default=12)
    b.add_argument("--thetas", default="90")
    b.add_argument("--train-max-angle", type=float, default=45.0,
                   help="training orientations lie in [0, this); the test split is always uniform")
    b.add_argument("--report")
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except FingerprintMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FINGERPRINT
    except (ConfigError, ContractError, MetricError, CheckpointError, FileExistsError,
            FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc, UsageError):
            parser.print_usage(sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
