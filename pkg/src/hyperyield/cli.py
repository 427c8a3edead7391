"""Command-line pipeline: synth -> train -> predict -> evaluate -> render.

Config files are INI-style (``key = value`` under ``[section]`` headers)::

    [run]
    field_dir = field
    train_years = 2016, 2017
    test_year = 2018
    model_n = 5
    seed = 0

    [train]
    batch_size = 96
    epochs = 500
"""
from __future__ import annotations

import argparse
import configparser
import logging
import sys
from contextlib import nullcontext
from dataclasses import dataclass, fields, replace
from pathlib import Path

from . import mlr
from .mapgen import predict_map
from .metrics import evaluate, write_table
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.network import ModelConfig
from .raster import Normalizer, read_raster, write_raster
from .render import PALETTES, render
from .sampling import assemble_years, split_train_val
from .synth import SynthSpec, generate, read_manifest, write_field
from .training import TrainConfig, train, write_history

logger = logging.getLogger("hyperyield")

CHECKPOINT_NAME = "checkpoint.h3dr"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    field_dir: Path
    train_years: tuple[int, ...]
    test_year: int
    model_n: int = 5
    seed: int = 0
    out: Path = Path("run")
    max_overlap: float = 0.75
    train: TrainConfig = TrainConfig()

    def __post_init__(self):
        if self.model_n not in (1, 3, 5):
            raise ConfigError(f"model_n must be 1, 3 or 5, got {self.model_n}")
        if not self.train_years:
            raise ConfigError("train_years is empty")
        if self.test_year in self.train_years:
            raise ConfigError(f"test year {self.test_year} is also listed as a training year")


def _read_ini(path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return parser


def _coerce(value: str, kind):
    if kind is bool:
        return value.strip().lower() in ("1", "true", "yes", "on")
    if kind in (int, float, str):
        return kind(value.strip())
    if value.strip().lower() in ("", "none"):
        return None
    return int(value)


def load_synth_spec(path) -> SynthSpec:
    parser = _read_ini(path)
    if not parser.has_section("synth"):
        raise ConfigError(f"{path} has no [synth] section")
    section = parser["synth"]
    known = {f.name: f.type for f in fields(SynthSpec)}
    kinds = {"height": int, "width": int, "years": int, "seed": int, "mask": str, "noise": float,
             "response": str, "cell_size": float, "relief": float, "first_year": int,
             "strip_width": int}
    kwargs = {}
    for key, value in section.items():
        if key == "test_years":
            continue
        if key not in known:
            raise ConfigError(f"unknown [synth] key {key!r}")
        try:
            kwargs[key] = _coerce(value, kinds[key])
        except ValueError:
            raise ConfigError(f"bad value for {key}: {value!r}") from None
    try:
        return SynthSpec(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_run_config(path) -> RunConfig:
    parser = _read_ini(path)
    if not parser.has_section("run"):
        raise ConfigError(f"{path} has no [run] section")
    run = parser["run"]
    base = Path(path).resolve().parent
    try:
        field_dir = Path(run["field_dir"])
        years = tuple(int(y) for y in run["train_years"].replace(",", " ").split())
        test_year = int(run["test_year"])
    except KeyError as exc:
        raise ConfigError(f"[run] is missing {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"bad year list: {exc}") from None

    tc = {}
    if parser.has_section("train"):
        kinds = {"batch_size": int, "epochs": int, "seed": int, "rho": float, "eps": float,
                 "patience": None}
        for key, value in parser["train"].items():
            if key not in kinds:
                raise ConfigError(f"unknown [train] key {key!r}")
            tc[key] = _coerce(value, kinds[key])
    seed = int(run.get("seed", "0"))
    tc.setdefault("seed", seed)
    out = Path(run.get("out", "run"))
    return RunConfig(
        field_dir=field_dir if field_dir.is_absolute() else base / field_dir,
        train_years=years,
        test_year=test_year,
        model_n=int(run.get("model_n", "5")),
        seed=seed,
        out=out if out.is_absolute() else base / out,
        max_overlap=float(run.get("max_overlap", "0.75")),
        train=TrainConfig(**tc),
    )


def _year_files(field_dir: Path, year: int):
    for row in read_manifest(field_dir):
        if row["year"] == year:
            return field_dir / row["features"], field_dir / row["yield"]
    raise ConfigError(f"year {year} is not listed in {field_dir / 'manifest.csv'}")


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    changes = {}
    if getattr(args, "model_n", None) is not None:
        changes["model_n"] = args.model_n
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
        changes["train"] = replace(cfg.train, seed=args.seed)
    if getattr(args, "out", None) is not None:
        changes["out"] = Path(args.out)
    if getattr(args, "epochs", None) is not None:
        changes["train"] = replace(changes.get("train", cfg.train), epochs=args.epochs)
    return replace(cfg, **changes) if changes else cfg


def _train_years(cfg: RunConfig):
    per_year = []
    for year in cfg.train_years:
        feat, yld = _year_files(cfg.field_dir, year)
        per_year.append((year, read_raster(feat), read_raster(yld)))
    return per_year


def cmd_synth(args) -> int:
    spec = load_synth_spec(args.config)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    parser = _read_ini(args.config)
    test_years = int(parser["synth"].get("test_years", "1"))
    out = Path(args.out or "field")
    manifest = write_field(generate(spec), out, test_years)
    print(f"wrote {spec.years} years to {out} ({manifest.name})")
    return 0


def cmd_train(args) -> int:
    cfg = _apply_overrides(load_run_config(args.config), args)
    samples = assemble_years(_train_years(cfg), 5, cfg.model_n, cfg.max_overlap)
    if len(samples) < 10:
        raise ConfigError(f"only {len(samples)} training patches; need at least 10")
    split = split_train_val(samples, cfg.seed)
    result = train(split, cfg.train, ModelConfig(out_size=cfg.model_n))
    result.checkpoint.meta.update(
        {"train_years": list(cfg.train_years), "test_year": cfg.test_year,
         "samples": len(samples)}
    )
    cfg.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.checkpoint, cfg.out / CHECKPOINT_NAME)
    write_history(result.history, cfg.out / "loss.csv")
    print(
        f"trained N={cfg.model_n} on {len(split.train)}+{len(split.validation)} patches; "
        f"best epoch {result.best_epoch}; wrote {cfg.out / CHECKPOINT_NAME}"
    )
    return 0


def cmd_predict(args) -> int:
    cfg = None
    if args.config:
        cfg = _apply_overrides(load_run_config(args.config), args)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else (cfg.out / CHECKPOINT_NAME if cfg else None)
    if ckpt_path is None:
        raise ConfigError("predict needs --checkpoint or --config")
    if args.features:
        features = read_raster(args.features)
    elif cfg is not None:
        year = args.year if args.year is not None else cfg.test_year
        features = read_raster(_year_files(cfg.field_dir, year)[0])
    else:
        raise ConfigError("predict needs --features or --config")
    ckpt = load_checkpoint(ckpt_path)
    if ckpt.normalizer is not None and ckpt.normalizer.channels != features.channels:
        raise ConfigError(
            f"features have {features.channels} channels, checkpoint expects {ckpt.normalizer.channels}"
        )
    result = predict_map(ckpt, features)
    out = Path(args.out) if args.out else (cfg.out if cfg else Path("."))
    out.mkdir(parents=True, exist_ok=True)
    write_raster(result.yield_map, out / "prediction.frst")
    write_raster(result.count_raster(), out / "counts.frst")
    print(f"wrote {out / 'prediction.frst'} ({int(result.yield_map.mask.sum())} cells)")
    return 0


def _parse_pred(spec: str):
    label, sep, path = spec.partition("=")
    if not sep:
        return Path(spec).stem, Path(spec)
    return label, Path(path)


def cmd_evaluate(args) -> int:
    truth = read_raster(args.truth)
    reports = {}
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    preds = [_parse_pred(p) for p in args.pred]
    single = len(preds) == 1 and "=" not in args.pred[0]
    for label, path in preds:
        pred = read_raster(path)
        if not truth.same_grid(pred):
            raise ConfigError(f"{path} grid {pred.shape[:2]} differs from truth {truth.shape[:2]}")
        key = "value" if single else label
        report = evaluate(truth, pred)
        reports[key] = report
        prefix = "" if single else f"{label}_"
        write_raster(report.square_error_map, out / f"{prefix}square_error.frst")
        write_raster(report.ssim_map_3, out / f"{prefix}ssim3.frst")
        write_raster(report.ssim_map_11, out / f"{prefix}ssim11.frst")
    write_table(reports, out / "metrics.csv")
    write_table(reports, out / "metrics_raw.csv", raw=True)
    for key, report in reports.items():
        values = ", ".join(f"{k} {v:.4f}" for k, v in report.table_values().items())
        print(f"{key}: {values}")
    return 0


def cmd_render(args) -> int:
    raster = read_raster(args.raster)
    render(raster, args.out, args.palette)
    print(f"wrote {args.out}")
    return 0


def cmd_baseline(args) -> int:
    cfg = _apply_overrides(load_run_config(args.config), args)
    samples = assemble_years(_train_years(cfg), 5, 1, cfg.max_overlap)
    split = split_train_val(samples, cfg.seed)
    norm = Normalizer.fit_arrays((s.x_patch, s.x_mask) for s in split.train)
    x, y = mlr.center_cells(split.train, norm)
    model = mlr.fit_mlr(x, y)
    features = read_raster(_year_files(cfg.field_dir, cfg.test_year)[0])
    result = predict_map(mlr.window_predictor(model), features, out_size=1, normalizer=norm)
    cfg.out.mkdir(parents=True, exist_ok=True)
    mlr.write_coefficients(model, cfg.out / "mlr_coefficients.csv")
    write_raster(result.yield_map, cfg.out / "prediction.frst")
    print(f"wrote {cfg.out / 'mlr_coefficients.csv'} and {cfg.out / 'prediction.frst'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None, help="BLAS thread count")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None, help="output directory (or file for render)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hyperyield", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic multi-year field")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_synth)

    for name, func, help_ in (
        ("train", cmd_train, "train Hyper3DNetReg on the training years"),
        ("baseline", cmd_baseline, "fit the MLR baseline and predict the test year"),
    ):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--config", required=True)
        p.add_argument("--model-n", type=int, choices=(1, 3, 5), default=None)
        p.add_argument("--epochs", type=int, default=None)
        p.set_defaults(func=func)

    p = sub.add_parser("predict", parents=[common], help="predict a full-field yield map")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--features", help="feature raster (defaults to the config's test year)")
    p.add_argument("--year", type=int, default=None)
    p.add_argument("--model-n", type=int, choices=(1, 3, 5), default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="compare predicted maps with the truth")
    p.add_argument("--truth", required=True)
    p.add_argument("--pred", action="append", required=True, help="[label=]prediction.frst")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("render", parents=[common], help="write a PGM/PPM heatmap")
    p.add_argument("raster")
    p.add_argument("--palette", choices=sorted(PALETTES), default="yield")
    p.set_defaults(func=cmd_render)
    return parser


def _thread_limit(n):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "render" and not args.out:
        print("error: render needs --out FILE.pgm|FILE.ppm", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except (ValueError, OSError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
