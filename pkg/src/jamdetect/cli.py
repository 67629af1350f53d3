"""Command-line pipeline: generate, featurize, tokenize, train, evaluate, report.

Exit codes: 0 success, 1 contract or usage error, 2 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import evaluation as EV
from . import features as F
from . import pipeline as P
from . import synth as S
from . import tokenizer as T
from . import trainer as TR
from .model import Model, ModelConfig, build

log = logging.getLogger("jamdetect")

EXIT_OK, EXIT_CONTRACT, EXIT_IO = 0, 1, 2
SPLITS = ("train", "val", "test")

# keys that shape the synthetic scenario grid rather than one scenario
GRID_KEYS = {"scenarios": 8, "conditions": ("LoS", "NLoS"), "attacker_choices": (1, 2, 3, 4),
             "power_choices": (10.0, 20.0), "distance_choices": (100.0, 200.0, 500.0, 1000.0)}
CONFIG_CLASSES = (S.ScenarioConfig, P.PipelineConfig, ModelConfig, TR.TrainConfig)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONTRACT, f"{self.prog}: error: {message}\n")


# -- flat config ------------------------------------------------------------

def _field_types() -> dict:
    out = {k: type(v) for k, v in GRID_KEYS.items()}
    for cls in CONFIG_CLASSES:
        for f in dataclasses.fields(cls):
            default = f.default if f.default is not dataclasses.MISSING else None
            out.setdefault(f.name, type(default) if default is not None else str)
    return out


def _coerce(key: str, raw, kind):
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(raw, list) else raw
    s = raw.strip()
    if kind is bool:
        if s.lower() in ("1", "true", "yes", "on"):
            return True
        if s.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"config key {key}: expected a boolean, got {raw!r}")
    if kind is tuple:
        items = [x.strip() for x in s.strip("()[]").split(",") if x.strip()]
        return tuple(_number(x) for x in items)
    if kind in (int, float):
        try:
            v = _number(s)
        except ValueError:
            raise UsageError(f"config key {key}: expected a number, got {raw!r}") from None
        if isinstance(v, str):
            raise UsageError(f"config key {key}: expected a number, got {raw!r}")
        return int(v) if kind is int and float(v).is_integer() else v
    return s


def _number(s: str):
    for conv in (int, float):
        try:
            return conv(s)
        except ValueError:
            pass
    return s


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines (``#`` comments) or a flat JSON object."""
    types = _field_types()
    if text.lstrip().startswith("{"):
        raw = json.loads(text)
        if not isinstance(raw, dict) or any(isinstance(v, dict) for v in raw.values()):
            raise UsageError("JSON config must be a flat object")
    else:
        raw = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"config line {lineno}: expected key = value")
            k, v = (p.strip() for p in line.split("=", 1))
            raw[k] = v
    out = {}
    for k, v in raw.items():
        if k not in types:
            raise UsageError(f"unknown config key {k!r}")
        out[k] = _coerce(k, v, types[k])
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def _pick(cls, cfg: dict, drop: Sequence[str] = ()) -> dict:
    names = {f.name for f in dataclasses.fields(cls)} - set(drop)
    return {k: v for k, v in cfg.items() if k in names}


# -- data helpers -----------------------------------------------------------

def synthetic_records(cfg: dict, seed: int) -> list[S.SignalRecord]:
    grid = {**GRID_KEYS, **{k: cfg[k] for k in GRID_KEYS if k in cfg}}
    overrides = _pick(S.ScenarioConfig, cfg, drop=("condition", "attackers", "attacker_power_dbm",
                                                    "distance_m", "seed", "length"))
    configs = P.scenario_grid(int(grid["scenarios"]), int(cfg.get("length", 10_000)), seed=seed,
                              conditions=grid["conditions"], attackers=grid["attacker_choices"],
                              powers=grid["power_choices"], distances=grid["distance_choices"],
                              **overrides)
    return P.generate_records(configs)


def _write_splits(ds: P.Dataset, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        T.save_sequences(getattr(ds, name), out_dir / f"{name}.csv")
    ds.bundle.save(out_dir / "bundle.json")


def _model_config(cfg: dict, block_size: int, bundle: F.FeatureBundle | None) -> ModelConfig:
    mc = _pick(ModelConfig, cfg, drop=("block_size",))
    if "period_hints" not in mc and bundle is not None:
        mc["period_hints"] = (float(bundle.signals["rssi"].width), float(bundle.window))
    return ModelConfig(block_size=block_size, **mc)


# -- subcommands ------------------------------------------------------------

def cmd_generate(args, cfg: dict) -> int:
    fields = _pick(S.ScenarioConfig, cfg)
    for name in ("condition", "attackers", "length", "terrestrial_users"):
        if getattr(args, name) is not None:
            fields[name] = getattr(args, name)
    if args.power is not None:
        fields["attacker_power_dbm"] = args.power
    if args.distance is not None:
        fields["distance_m"] = args.distance
    if args.unrestricted:
        fields["unrestricted"] = True
    fields["seed"] = args.seed if args.seed is not None else fields.get("seed", 0)
    sc = S.ScenarioConfig.from_dict(fields)
    out = Path(args.out or f"{sc.condition.lower()}_a{sc.attackers}_s{sc.seed}.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    S.export(S.generate(sc), out)
    print(f"wrote {out} and {S.sidecar_path(out)}")
    return EXIT_OK


def cmd_featurize(args, cfg: dict) -> int:
    records = [S.load(p) for p in args.input]
    pc = P.PipelineConfig(**_pick(P.PipelineConfig, cfg))
    bundle_path = Path(args.bundle)
    if args.fit:
        bundle = P.fit_bundle(records, None, pc)
        bundle_path.parent.mkdir(parents=True, exist_ok=True)
        bundle.save(bundle_path)
        print(f"fitted bundle on {len(records)} record(s) -> {bundle_path}")
    else:
        bundle = F.FeatureBundle.load(bundle_path)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with out.open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            width = max(bundle.signals[k].width for k in F.SIGNALS)
            w.writerow(["record", "signal", "row"] + [f"v{i}" for i in range(width)])
            for i, r in enumerate(records):
                for kind in F.SIGNALS:
                    em, _ = F.enhance(getattr(r, kind), bundle.signals[kind])
                    for j, row in enumerate(em.matrix):
                        w.writerow([i, kind, j] + [repr(float(v)) for v in row])
        print(f"wrote enhanced matrices -> {out}")
    return EXIT_OK


def cmd_tokenize(args, cfg: dict) -> int:
    records = [S.load(p) for p in args.input]
    pc = P.PipelineConfig(**_pick(P.PipelineConfig, cfg))
    out_dir = Path(args.out_dir)
    if args.bundle:
        bundle = F.FeatureBundle.load(args.bundle)
        out_dir.mkdir(parents=True, exist_ok=True)
        seqs = [s for r in records for s in P.record_sequences(r, bundle, pc)]
        T.save_sequences(seqs, out_dir / "tokens.csv")
        print(f"wrote {len(seqs)} sequences -> {out_dir / 'tokens.csv'}")
    else:
        ds = P.build_dataset(records, pc)
        _write_splits(ds, out_dir)
        print(f"wrote train/val/test ({len(ds.train)}/{len(ds.val)}/{len(ds.test)}) -> {out_dir}")
    return EXIT_OK


def cmd_train(args, cfg: dict) -> int:
    work = Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    tc_fields = {**_pick(TR.TrainConfig, cfg), "seed": seed}
    if args.epochs is not None:
        tc_fields["epochs"] = args.epochs
    tcfg = TR.TrainConfig(**tc_fields)

    data_dir = Path(args.data) if args.data else work / "data"
    bundle = None
    if args.data:
        if (data_dir / "bundle.json").exists():
            bundle = F.FeatureBundle.load(data_dir / "bundle.json")
    else:
        pc = P.PipelineConfig(**_pick(P.PipelineConfig, cfg))
        ds = P.build_dataset(synthetic_records(cfg, seed), pc)
        _write_splits(ds, data_dir)
        bundle = ds.bundle
        log.info("synthetic data: %d/%d/%d sequences of length %d",
                 len(ds.train), len(ds.val), len(ds.test), ds.block_size)
    train = T.load_sequences(data_dir / "train.csv")
    val = T.load_sequences(data_dir / "val.csv")
    if not train or not val:
        raise UsageError("training and validation sets must be non-empty")

    if args.resume:
        trainer = TR.Trainer.load(args.resume, tcfg)
    else:
        model = build(_model_config(cfg, len(train[0]), bundle), seed=seed)
        trainer = TR.Trainer(model, tcfg)
    print(f"model parameters: {trainer.model.num_parameters()}")

    def checkpoint(_rec):
        trainer.save(work / "state.npz")

    history = trainer.fit(train, val, callback=checkpoint)
    trainer.model.save(work / "model.npz")
    trainer.ema_model().save(work / "ema.npz")
    prev = []
    hist_json = work / "history.json"
    if args.resume and hist_json.exists():
        prev = [TR.EpochRecord(**d) for d in json.loads(hist_json.read_text(encoding="utf-8"))]
    history = prev + history
    TR.history_to_csv(history, work / "history.csv")
    TR.history_to_json(history, hist_json)
    print(f"trained {len(history)} epoch(s) -> {work / 'model.npz'}")
    return EXIT_OK


def cmd_evaluate(args, cfg: dict) -> int:
    work = Path(args.workdir)
    model = Model.load(args.model or work / ("ema.npz" if args.ema else "model.npz"))
    test = T.load_sequences(args.test or work / "data" / "test.csv")
    rep = EV.evaluate(model, test)
    out = Path(args.out or work / f"metrics.{args.format}")
    out.parent.mkdir(parents=True, exist_ok=True)
    EV.report(rep, out, args.format)
    m = rep.metrics
    print(f"accuracy {m['accuracy']:.4f} (majority {m['majority_rate']:.4f}) "
          f"f1 {m['f1']:.4f} entropy {m['mean_entropy']:.4f} -> {out}")
    return EXIT_OK


def cmd_report(args, cfg: dict) -> int:
    src = Path(args.input)
    rep = EV.read_csv(src) if src.suffix.lower() == ".csv" else EV.read_json(src)
    out = Path(args.out or src.with_suffix(f".{args.format}"))
    EV.report(rep, out, args.format)
    rows = rep.by_distance
    print("distance_m  count  accuracy")
    for r in rows:
        print(f"{r['distance_m']:>10g}  {r['count']:>5d}  {r['accuracy']:.4f}")
    print(f"wrote {out}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    def globals_parser(default):
        g = _Parser(add_help=False)
        g.add_argument("--seed", type=int, default=default, help="global seed")
        g.add_argument("--config", default=default, help="flat key = value (or JSON) config file")
        g.add_argument("--quiet", action="store_true", default=default or False,
                       help="suppress progress logging")
        return g

    # subcommands repeat the global flags but must not overwrite values given earlier
    common = globals_parser(argparse.SUPPRESS)
    p = _Parser(prog="jamdetect", description=__doc__.splitlines()[0], parents=[globals_parser(None)])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", parents=[common], help="simulate one scenario to CSV")
    g.add_argument("--condition")
    g.add_argument("--attackers", type=int)
    g.add_argument("--length", type=int)
    g.add_argument("--terrestrial-users", dest="terrestrial_users", type=int)
    g.add_argument("--power", type=float, help="attacker power, dBm")
    g.add_argument("--distance", type=float, help="UAV distance, m")
    g.add_argument("--unrestricted", action="store_true")
    g.add_argument("--out")
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("featurize", parents=[common], help="fit or apply the PCA feature bundle")
    f.add_argument("--input", nargs="+", required=True)
    f.add_argument("--bundle", required=True)
    f.add_argument("--fit", action="store_true")
    f.add_argument("--out", help="optional CSV of enhanced matrices")
    f.set_defaults(func=cmd_featurize)

    t = sub.add_parser("tokenize", parents=[common], help="token sequences from signal CSVs")
    t.add_argument("--input", nargs="+", required=True)
    t.add_argument("--bundle", help="apply a fitted bundle instead of fitting on the train split")
    t.add_argument("--out-dir", dest="out_dir", default="run/data")
    t.set_defaults(func=cmd_tokenize)

    tr = sub.add_parser("train", parents=[common], help="train a model (synthetic data if --data is absent)")
    tr.add_argument("--data", help="directory with train.csv and val.csv")
    tr.add_argument("--workdir", default="run")
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--resume", help="training state checkpoint to continue from")
    tr.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", parents=[common], help="score a model on a test set")
    e.add_argument("--workdir", default="run")
    e.add_argument("--model")
    e.add_argument("--test")
    e.add_argument("--ema", action="store_true", help="use the EMA weights")
    e.add_argument("--format", choices=("json", "csv"), default="json")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", parents=[common], help="convert a metrics file and print per-distance rows")
    r.add_argument("--input", required=True)
    r.add_argument("--format", choices=("json", "csv"), default="csv")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


CONTRACT_ERRORS = (ValueError, KeyError, TypeError, UsageError, ArithmeticError)


def main(argv: Sequence[str] | None = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except OSError as exc:
        print(f"jamdetect: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except CONTRACT_ERRORS as exc:
        print(f"jamdetect: error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    raise SystemExit(main())
