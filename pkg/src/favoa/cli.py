"""Command-line entry point: ``favoa {gen-data,train,eval,analyze,gradcheck}``.

Every run is described by one JSON config file, optionally amended with
``--set section.key=value``.  Exit codes: 0 ok, 2 config or input error,
3 numeric failure, 4 undefined metric.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from favoa import contribution as C
from favoa import gradcheck as G
from favoa.data import FeaturizedSet, FeatureStoreProvider, featurize, load_dataset
from favoa.errors import ConfigError, FavoaError, FormatError, NumericError, UndefinedMetricError
from favoa.metrics import evaluate, report_from_csv, write_scores_csv
from favoa.model import FavoaParams, ModelConfig, load_params, predict, save_params
from favoa.synth import GeneratorConfig, generate
from favoa.tensor import corrupt_gradient
from favoa.train import Schedule, TrainConfig, load_checkpoint, save_checkpoint, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_METRIC = 0, 2, 3, 4


@dataclass
class RunConfig:
    """Parsed run description; sections mirror the JSON file."""

    seed: int
    output_dir: Path
    dataset: Path | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    split: str = "val"
    bin_width: float = 0.025

    def snapshot(self) -> dict:
        return {
            "seed": self.seed,
            "output_dir": str(self.output_dir),
            "dataset": None if self.dataset is None else str(self.dataset),
            "model": asdict(self.model),
            "train": asdict(self.train),
            "generator": asdict(self.generator),
            "split": self.split,
            "bin_width": self.bin_width,
        }


_TRAIN_KEYS = {"epochs", "batch_size", "beta1", "beta2", "eps"}
_SCHEDULE_KEYS = {"gamma_0", "eta", "period"}


def read_json(path: str | Path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return obj


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``a.b=value`` assignments; values are parsed as JSON when possible."""
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = raw
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {p} is not a section")
        node[leaf] = parsed
    return raw


def _build(cls, section: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**section)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def build_run_config(raw: dict, base_dir: Path = Path(".")) -> RunConfig:
    if "seed" not in raw:
        raise ConfigError("config must set 'seed'")
    if not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool):
        raise ConfigError(f"seed must be an integer, got {raw['seed']!r}")
    if "output_dir" not in raw:
        raise ConfigError("config must set 'output_dir'")
    seed = raw["seed"]

    model = _build(ModelConfig, dict(raw.get("model", {})), "model")
    model.validate()

    tsec = dict(raw.get("train", {}))
    unknown = set(tsec) - _TRAIN_KEYS - _SCHEDULE_KEYS
    if unknown:
        raise ConfigError(f"unknown keys in train: {sorted(unknown)}")
    schedule = Schedule(**{k: tsec[k] for k in _SCHEDULE_KEYS & set(tsec)})
    tc = TrainConfig(seed=seed, schedule=schedule, **{k: tsec[k] for k in _TRAIN_KEYS & set(tsec)})
    if tc.epochs < 0 or tc.batch_size < 1:
        raise ConfigError("train.epochs must be >= 0 and train.batch_size >= 1")

    gsec = dict(raw.get("generator", {}))
    gsec.setdefault("seed", seed)
    gen = _build(GeneratorConfig, gsec, "generator")
    gen.validate()

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base_dir / p

    dataset = resolve(raw["dataset"]) if raw.get("dataset") is not None else None
    return RunConfig(
        seed=seed,
        output_dir=resolve(raw["output_dir"]),
        dataset=dataset,
        model=model,
        train=tc,
        generator=gen,
        split=raw.get("split", "val"),
        bin_width=float(raw.get("bin_width", 0.025)),
    )


def load_run_config(path: str | Path, overrides: list[str]) -> RunConfig:
    raw = apply_overrides(read_json(path), overrides or [])
    return build_run_config(raw, Path(path).resolve().parent)


def _require(path: Path | None, what: str) -> Path:
    if path is None:
        raise ConfigError(f"no {what} configured")
    if not path.exists():
        raise ConfigError(f"{what} {path} does not exist")
    return path


def _featurized(rc: RunConfig, split: str) -> FeaturizedSet:
    ds = load_dataset(_require(rc.dataset, "dataset"))
    if ds.dims.get("u") != rc.model.d_u or ds.dims.get("a") != rc.model.d_a:
        raise ConfigError(f"dataset dims {ds.dims} do not match model d_u={rc.model.d_u}, d_a={rc.model.d_a}")
    provider = FeatureStoreProvider(ds)
    return featurize(ds, provider, ds.split(split), rc.model.L, rc.model.S, rc.model.tau)


def _load_model(rc: RunConfig, params_path: Path) -> FavoaParams:
    _require(params_path, "parameter file")
    return load_params(params_path, rc.model)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(rc: RunConfig, args) -> int:
    rc.output_dir.mkdir(parents=True, exist_ok=True)
    manifest = generate(rc.generator, rc.output_dir)
    ds = load_dataset(manifest)
    counts = {s: len(ds.split(s)) for s in ("train", "val")}
    print(f"wrote {manifest} ({len(ds.scenes)} scenes, {len(ds.entries)} entries; "
          f"train {counts['train']}, val {counts['val']})")
    return EXIT_OK


def cmd_train(rc: RunConfig, args) -> int:
    out = rc.output_dir
    out.mkdir(parents=True, exist_ok=True)
    train_set = _featurized(rc, "train")
    val_set = _featurized(rc, "val")
    start = 0
    state = None
    if args.resume:
        params, ck_config, state, start = load_checkpoint(_require(Path(args.resume), "checkpoint"))
        if ck_config.dims() != rc.model.dims():
            raise ConfigError(f"checkpoint dims {ck_config.dims()} differ from config {rc.model.dims()}")
        print(f"resumed from {args.resume} at epoch {start}")
    else:
        params = FavoaParams.init(rc.model, rc.seed)

    sched = rc.train.schedule
    for e in range(start, rc.train.epochs):
        if e == start or e % sched.period == 0:
            print(f"schedule: epoch {e} rate {sched.rate(e):.6g}")

    report_path = out / "report.jsonl"
    ckpt_path = out / "checkpoint.bin"
    mode = "a" if args.resume else "w"
    with open(report_path, mode) as fh:
        def on_epoch(rec, st):
            fh.write(rec.to_json() + "\n")
            fh.flush()
            save_checkpoint(ckpt_path, params, rc.model, st, rec.epoch + 1)
            print(f"epoch {rec.epoch:3d}  rate {rec.rate:.3g}  loss {rec.mean_loss:.6f}")

        train(params, rc.model, train_set, val_set, rc.train, state=state, start_epoch=start, on_epoch=on_epoch)
    save_params(params, out / "params.bin", rc.model)
    (out / "run_config.json").write_text(json.dumps(rc.snapshot(), indent=2, sort_keys=True) + "\n")
    print(f"wrote {out / 'params.bin'} and {report_path}")
    return EXIT_OK


def cmd_eval(rc: RunConfig, args) -> int:
    out = rc.output_dir
    out.mkdir(parents=True, exist_ok=True)
    if args.scores:
        report = report_from_csv(_require(Path(args.scores), "scores file"))
    else:
        params = _load_model(rc, Path(args.params))
        data = _featurized(rc, args.split or rc.split)
        q, _ = predict(params, rc.model, data.context, data.voice)
        write_scores_csv(out / "scores.csv", data.ids, q, [e.raw_label for e in data.entries])
        report = evaluate(q, data.labels, data.ids)
    (out / "metrics.json").write_text(report.to_json() + "\n")
    print(report.to_json())
    return EXIT_OK


def cmd_analyze(rc: RunConfig, args) -> int:
    out = rc.output_dir
    out.mkdir(parents=True, exist_ok=True)
    params = _load_model(rc, Path(args.params))
    data = _featurized(rc, args.split or rc.split)
    width = args.bin_width if args.bin_width is not None else rc.bin_width
    records, hist, summary = C.analyze(params, rc.model, data, width)
    C.write_records_csv(out / "contributions.csv", records)
    C.write_histogram_csv(out / "histogram.csv", hist)
    C.write_summary_json(out / "summary.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seeds = range(args.seed, args.seed + args.seeds)
    if args.corrupt:
        with corrupt_gradient(args.corrupt, args.factor):
            results = G.run_all(seeds, samples=args.samples)
    else:
        results = G.run_all(seeds, samples=args.samples)
    worst: dict[str, G.CheckResult] = {}
    for r in results:
        if r.name not in worst or r.max_rel_error > worst[r.name].max_rel_error:
            worst[r.name] = r
    failed = [r for r in worst.values() if not r.passed]
    for name, r in worst.items():
        status = "ok  " if r.passed else "FAIL"
        print(f"{status} {name:24s} max_rel_error {r.max_rel_error:.3e} (seed {r.seed})")
    if failed:
        print("failed: " + ", ".join(r.name for r in failed))
        return 1
    print(f"all {len(worst)} checks passed over {len(seeds)} seeds")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="favoa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("config", help="run config JSON")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. train.epochs=5 (repeatable)")
        return p

    with_config("gen-data", "generate a synthetic dataset into output_dir")
    p = with_config("train", "train a model on the configured dataset")
    p.add_argument("--resume", help="checkpoint written by an earlier run")
    p = with_config("eval", "score a split and compute mAP, AUC and balanced accuracy")
    p.add_argument("--params", help="parameter file to evaluate")
    p.add_argument("--scores", help="evaluate an existing scores CSV instead")
    p.add_argument("--split", help="dataset split (default from config)")
    p = with_config("analyze", "per-entry degree of contribution and its histogram")
    p.add_argument("--params", required=True, help="parameter file to analyze")
    p.add_argument("--split", help="dataset split (default from config)")
    p.add_argument("--bin-width", type=float, help="histogram bin width (default from config)")

    p = sub.add_parser("gradcheck", help="finite-difference check of every op, layer and the full model")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--seeds", type=int, default=20, help="number of consecutive seeds")
    p.add_argument("--samples", type=int, default=24, help="coordinates checked per tensor")
    p.add_argument("--corrupt", metavar="OP", help="scale the gradient rule of OP (checker self-test)")
    p.add_argument("--factor", type=float, default=1.5, help="scale used with --corrupt")
    return parser


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "analyze": cmd_analyze}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        if args.command == "eval" and not (args.params or args.scores):
            raise ConfigError("eval needs --params or --scores")
        rc = load_run_config(args.config, args.overrides)
        return COMMANDS[args.command](rc, args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except UndefinedMetricError as exc:
        print(f"undefined metric: {exc}", file=sys.stderr)
        return EXIT_METRIC
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FavoaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
