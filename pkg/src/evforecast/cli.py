"""Command-line pipeline: ingest -> series -> features -> train -> forecast -> report.

Each stage persists its artifacts under the output directory so later stages
can be rerun on their own.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import yaml

from . import engine, evalreport, features, gbt, ingest, neural, timeseries
from .engine import ModelSettings
from .features import HolidayCalendar, IdentitySchema, LagSpec
from .timeseries import Level, Resolution

log = logging.getLogger("evforecast")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
STAGES = ("ingest", "series", "features", "train", "forecast", "report")
OUTPUT_ENV = "EVFORECAST_OUTPUT_DIR"
ALL_MODELS = engine.MODEL_IDS + (engine.BASELINE_ID,)


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(problems))
        self.problems = problems


class StageError(RuntimeError):
    pass


# -- configuration ---------------------------------------------------------------------


@dataclass
class DatasetConfig:
    city: str
    path: str
    columns: dict
    timezone: str | None = None


@dataclass
class RunConfig:
    datasets: list[DatasetConfig]
    seed: int
    output_dir: str
    train_fraction: float = 0.8
    plans: list[str] = field(default_factory=lambda: ["Short", "Mid", "Long"])
    models: dict[str, bool] = field(default_factory=lambda: {m: True for m in engine.MODEL_IDS})
    lags: dict[str, list[int]] = field(default_factory=dict)
    holidays: str | None = None
    model_settings: dict = field(default_factory=dict)

    @property
    def enabled_models(self) -> list[str]:
        return [m for m in ALL_MODELS if self.models.get(m)]

    def lagspec(self, resolution: Resolution) -> LagSpec:
        if resolution.label in self.lags:
            return LagSpec(resolution, tuple(self.lags[resolution.label]))
        return LagSpec.default(resolution)

    def settings(self) -> ModelSettings:
        ms = self.model_settings
        return ModelSettings(
            gbt=gbt.GbtConfig(**ms.get("gbt", {})),
            rnn=neural.RnnConfig(**ms.get("rnn", {})),
            transformer=neural.TransformerConfig(**ms.get("transformer", {})),
        )

    def canonical(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.canonical(), sort_keys=True).encode()).hexdigest()


def _known(cls, d: dict, where: str, problems: list[str]) -> None:
    allowed = {f.name for f in fields(cls)}
    for k in d:
        if k not in allowed:
            problems.append(f"{where}: unknown key {k!r}")


def parse_config(raw: object, base: Path, output_override: str | None = None) -> RunConfig:
    """Validate a decoded config mapping; every problem is collected before raising."""
    problems: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError(["config must be a mapping"])
    _known(RunConfig, raw, "config", problems)

    datasets = []
    raw_ds = raw.get("datasets")
    if not isinstance(raw_ds, list) or not raw_ds:
        problems.append("datasets: at least one dataset is required")
        raw_ds = []
    for i, d in enumerate(raw_ds):
        where = f"datasets[{i}]"
        if not isinstance(d, dict):
            problems.append(f"{where}: must be a mapping")
            continue
        _known(DatasetConfig, d, where, problems)
        city = d.get("city")
        if city not in {c.value for c in ingest.City}:
            problems.append(f"{where}.city: {city!r} is not one of {[c.value for c in ingest.City]}")
        path = d.get("path")
        if not isinstance(path, str):
            problems.append(f"{where}.path: missing")
        cols = d.get("columns")
        if not isinstance(cols, dict):
            problems.append(f"{where}.columns: mapping of canonical field to source column(s) is required")
        else:
            lacking = [f for f in ingest.CANONICAL_FIELDS if f not in cols]
            if lacking:
                problems.append(f"{where}.columns: missing canonical fields {lacking}")
        tz = d.get("timezone")
        if tz is not None and tz != ingest.UTC_NATIVE:
            try:
                ingest.resolve_zone(tz)
            except ValueError:
                problems.append(f"{where}.timezone: unknown zone {tz!r}")
        if city == ingest.City.CUSTOM.value and tz is None:
            problems.append(f"{where}.timezone: required for Custom datasets")
        if isinstance(path, str) and isinstance(cols, dict):
            p = Path(path)
            datasets.append(DatasetConfig(str(city), str(p if p.is_absolute() else base / p), cols, tz))
    cities = [d.city for d in datasets]
    if len(set(cities)) != len(cities):
        problems.append("datasets: each city may appear only once")

    seed = raw.get("seed")
    if not isinstance(seed, int) or isinstance(seed, bool):
        problems.append("seed: an explicit integer seed is required")
    tf = raw.get("train_fraction", 0.8)
    if not isinstance(tf, (int, float)) or not 0.0 < tf < 1.0:
        problems.append("train_fraction: must lie strictly between 0 and 1")
    plans = raw.get("plans", ["Short", "Mid", "Long"])
    if not isinstance(plans, list) or not plans or any(p not in engine.PLANS for p in plans):
        problems.append(f"plans: choose a non-empty subset of {list(engine.PLANS)}")
    models = raw.get("models", {m: True for m in engine.MODEL_IDS})
    if not isinstance(models, dict) or any(m not in ALL_MODELS for m in models):
        problems.append(f"models: keys must be among {list(ALL_MODELS)}")
    elif not any(models.values()):
        problems.append("models: at least one model must be enabled")
    lags = raw.get("lags", {})
    if not isinstance(lags, dict):
        problems.append("lags: must map a resolution label to offsets")
        lags = {}
    for label, offs in lags.items():
        try:
            LagSpec(Resolution.from_label(label), tuple(offs))
        except (ValueError, TypeError) as exc:
            problems.append(f"lags.{label}: {exc}")
    holidays = raw.get("holidays")
    if holidays is not None:
        hp = Path(holidays)
        holidays = str(hp if hp.is_absolute() else base / hp)
        if not Path(holidays).is_file():
            problems.append(f"holidays: file {holidays} does not exist")
    ms = raw.get("model_settings", {})
    if not isinstance(ms, dict):
        problems.append("model_settings: must be a mapping")
        ms = {}
    for key, cls in (("gbt", gbt.GbtConfig), ("rnn", neural.RnnConfig), ("transformer", neural.TransformerConfig)):
        try:
            cls(**ms.get(key, {}))
        except (TypeError, ValueError) as exc:
            problems.append(f"model_settings.{key}: {exc}")
    for key in ms:
        if key not in ("gbt", "rnn", "transformer"):
            problems.append(f"model_settings: unknown block {key!r}")
    out = output_override or raw.get("output_dir")
    if not isinstance(out, str) or not out:
        problems.append(f"output_dir: required (or set {OUTPUT_ENV})")
    if problems:
        raise ConfigError(problems)
    out_path = Path(out)
    return RunConfig(
        datasets=datasets,
        seed=seed,
        output_dir=str(out_path if out_path.is_absolute() else base / out_path),
        train_fraction=float(tf),
        plans=[p for p in engine.PLANS if p in plans],
        models={m: bool(models.get(m, False)) for m in ALL_MODELS},
        lags={k: list(v) for k, v in lags.items()},
        holidays=holidays,
        model_settings=ms,
    )


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError([f"config file {path} not found"]) from None
    except yaml.YAMLError as exc:
        raise ConfigError([f"config file {path} is not valid YAML: {exc}"]) from None
    return parse_config(raw, path.parent, os.environ.get(OUTPUT_ENV) or None)


# -- artifact helpers ---------------------------------------------------------------------


def atomic_write(path: Path, write: Callable[[Path], None]) -> Path:
    """Write via ``write(tmp)`` then rename over ``path``."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    os.close(fd)
    try:
        write(Path(tmp))
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def atomic_text(path: Path, text: str) -> Path:
    return atomic_write(path, lambda p: p.write_text(text, encoding="utf-8"))


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Workspace:
    """Paths and run metadata under one output directory."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = Path(cfg.output_dir)
        self.meta_path = self.root / "run_meta.json"

    def sessions(self, city: str) -> Path:
        return self.root / "ingest" / f"sessions_{city}.csv"

    def manifests(self) -> Path:
        return self.root / "ingest" / "manifests.jsonl"

    def station_map(self, city: str) -> Path:
        return self.root / "series" / f"stations_{city}.json"

    def series(self, city: str, res: Resolution, level: Level) -> Path:
        return self.root / "series" / f"{city}_{res.label}_{level.value}.csv"

    def features(self, city: str, plan: str, level: Level) -> Path:
        return self.root / "features" / f"{city}_{plan}_{level.value}.csv"

    def normalizers(self, city: str, plan: str) -> Path:
        return self.root / "features" / f"{city}_{plan}_normalizers.json"

    def model(self, city: str, plan: str, level: Level, model: str) -> Path:
        return self.root / "models" / f"{city}_{plan}_{level.value}_{model}.txt"

    def forecast(self, city: str, plan: str, model: str) -> Path:
        return self.root / "forecasts" / f"{city}_{plan}_{model}.csv"

    def expected(self, stage: str) -> list[Path]:
        cfg = self.cfg
        cities = [d.city for d in cfg.datasets]
        if stage == "ingest":
            return [self.manifests()] + [self.sessions(c) for c in cities]
        if stage == "series":
            out = []
            for c in cities:
                out.append(self.station_map(c))
                for p in cfg.plans:
                    out += [self.series(c, engine.PLANS[p].resolution, lv) for lv in Level]
            return out
        if stage == "features":
            return [self.normalizers(c, p) for c in cities for p in cfg.plans] + [
                self.features(c, p, lv) for c in cities for p in cfg.plans for lv in Level]
        if stage == "train":
            return [self.model(c, p, lv, m) for c in cities for p in cfg.plans for lv in Level
                    for m in cfg.enabled_models]
        if stage == "forecast":
            return [self.forecast(c, p, m) for c in cities for p in cfg.plans for m in cfg.enabled_models]
        if stage == "report":
            return [self.root / "metrics.csv"] + [self.root / f"report_{c}_{p}.md" for c in cities for p in cfg.plans]
        raise ValueError(stage)

    def require(self, stage: str) -> None:
        missing = [p for p in self.expected(stage) if not p.is_file()]
        if missing:
            raise StageError(
                f"artifacts of stage '{stage}' are missing (e.g. {missing[0]}); run `--stage {stage}` first"
            )

    def read_meta(self) -> dict:
        if self.meta_path.is_file():
            return json.loads(self.meta_path.read_text(encoding="utf-8"))
        return {}

    def check_hash(self, overwrite: bool) -> None:
        meta = self.read_meta()
        old = meta.get("config_hash")
        if old and old != self.cfg.digest() and not overwrite:
            raise ConfigError([
                f"{self.root} holds artifacts from a different configuration "
                f"(hash {old[:12]} vs {self.cfg.digest()[:12]}); pass --overwrite to replace them"
            ])

    def record(self, stage: str, seconds: float) -> None:
        meta = self.read_meta()
        if meta.get("config_hash") != self.cfg.digest():
            meta = {"config_hash": self.cfg.digest(), "stages": {}}
        meta["stages"][stage] = {
            "seconds": round(seconds, 3),
            "artifacts": {str(p.relative_to(self.root)): sha256_file(p) for p in self.expected(stage)},
        }
        atomic_text(self.meta_path, json.dumps(meta, indent=2, sort_keys=True) + "\n")


# -- stages ---------------------------------------------------------------------------------


def _holidays(cfg: RunConfig) -> HolidayCalendar:
    return HolidayCalendar.load(cfg.holidays) if cfg.holidays else features.default_calendar()


def stage_ingest(ws: Workspace, jobs: int) -> None:
    manifests = []
    for d in ws.cfg.datasets:
        m = ingest.default_manifest(d.city, d.path, d.columns)
        if d.timezone:
            m.timezone = d.timezone
        records, m = ingest.parse_sessions(m)
        atomic_write(ws.sessions(d.city), lambda p, r=records: ingest.write_sessions(r, p))
        manifests.append(m)
        log.info("%s: %d sessions parsed, %d dropped", d.city, m.records_parsed, m.dropped_total)
    atomic_write(ws.manifests(), lambda p: ingest.write_manifests(manifests, p))


def stage_series(ws: Workspace, jobs: int) -> None:
    for d in ws.cfg.datasets:
        records = ingest.read_sessions(ws.sessions(d.city))
        station_region = ingest.station_regions(records)
        atomic_text(ws.station_map(d.city), json.dumps(station_region, indent=1, sort_keys=True) + "\n")
        span = timeseries.default_span(records)
        for res in sorted({engine.PLANS[p].resolution for p in ws.cfg.plans}, key=lambda r: r.seconds):
            levels = timeseries.build_levels(timeseries.rasterize(records, res, span), station_region, d.city)
            for lv, series in levels.items():
                atomic_write(ws.series(d.city, res, lv), lambda p, s=series: timeseries.write_series(s.values(), p))


def _load_levels(ws: Workspace, city: str, res: Resolution) -> dict[Level, dict]:
    return {lv: timeseries.read_series(ws.series(city, res, lv), lv, res) for lv in Level}


def _city_context(ws: Workspace, city: str):
    station_region = json.loads(ws.station_map(city).read_text(encoding="utf-8"))
    schema = IdentitySchema(tuple(sorted(station_region)), tuple(sorted(set(station_region.values()))))
    return station_region, schema


def _level_data(ws: Workspace, city: str, plan_label: str, level: Level, holidays) -> engine.LevelData:
    plan = engine.plan_for(plan_label)
    station_region, schema = _city_context(ws, city)
    series = timeseries.read_series(ws.series(city, plan.resolution, level), level, plan.resolution)
    return engine.prepare_level(city, level, series, plan, ws.cfg.lagspec(plan.resolution), schema,
                                station_region, ws.cfg.train_fraction, holidays)


def stage_features(ws: Workspace, jobs: int) -> None:
    holidays = _holidays(ws.cfg)
    for d in ws.cfg.datasets:
        for p in ws.cfg.plans:
            norms = {}
            for lv in Level:
                data = _level_data(ws, d.city, p, lv, holidays)
                atomic_write(ws.features(d.city, p, lv), lambda path, m=data.matrix: m.to_csv(path))
                norms[lv.value] = {**data.normalizer.to_dict(), "train_end": data.train.stop,
                                   "length": len(data.test) + len(data.train)}
            atomic_text(ws.normalizers(d.city, p), json.dumps(norms, indent=1, sort_keys=True) + "\n")


def _train_task(args) -> str:
    cfg_dict, city, plan, level_value, model_id = args
    cfg = _config_from_dict(cfg_dict)
    ws = Workspace(cfg)
    level = Level(level_value)
    data = _level_data(ws, city, plan, level, _holidays(cfg))
    t = time.perf_counter()
    trained = engine.train_model(model_id, data, cfg.seed, cfg.settings())
    path = ws.model(city, plan, level, model_id)
    atomic_write(path, lambda p: engine.save_model(model_id, trained, p))
    result = getattr(trained, "result", None)
    if result is not None:
        atomic_write(Path(str(path) + ".history.csv"), result.write_history)
    return f"{city}/{plan}/{level.value}/{model_id} trained in {time.perf_counter() - t:.1f}s"


def _config_from_dict(d: dict) -> RunConfig:
    d = dict(d)
    d["datasets"] = [DatasetConfig(**x) for x in d["datasets"]]
    return RunConfig(**d)


def _run_tasks(fn, tasks: list, jobs: int) -> list:
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


def stage_train(ws: Workspace, jobs: int) -> None:
    cfg = ws.cfg
    tasks = [(cfg.canonical(), d.city, p, lv.value, m)
             for d in cfg.datasets for p in cfg.plans for lv in Level for m in cfg.enabled_models]
    for msg in _run_tasks(_train_task, tasks, jobs):
        log.info(msg)


def _forecast_task(args) -> str:
    cfg_dict, city, plan, model_id = args
    cfg = _config_from_dict(cfg_dict)
    ws = Workspace(cfg)
    holidays = _holidays(cfg)
    runs = []
    for lv in Level:
        data = _level_data(ws, city, plan, lv, holidays)
        trained = engine.load_model(model_id, ws.model(city, plan, lv, model_id), data)
        runs.extend(engine.forecast_level(model_id, trained, data))
    atomic_write(ws.forecast(city, plan, model_id), lambda p: engine.write_runs(runs, p))
    return f"{city}/{plan}/{model_id}: {len(runs)} runs"


def stage_forecast(ws: Workspace, jobs: int) -> None:
    cfg = ws.cfg
    tasks = [(cfg.canonical(), d.city, p, m) for d in cfg.datasets for p in cfg.plans for m in cfg.enabled_models]
    for msg in _run_tasks(_forecast_task, tasks, jobs):
        log.info(msg)


def report_settings(cfg: RunConfig) -> dict:
    lag_text = "; ".join(
        f"{r.label} {list(cfg.lagspec(r).offsets)}" for r in sorted(
            {engine.PLANS[p].resolution for p in cfg.plans}, key=lambda r: r.seconds)
    )
    plans = "; ".join(
        f"{p}: {engine.PLANS[p].resolution.label} base, depth {engine.PLANS[p].depth}, "
        f"scored steps {list(engine.PLANS[p].report_steps)}, origin stride {engine.PLANS[p].stride}"
        for p in cfg.plans
    )
    return {
        "train_fraction": cfg.train_fraction,
        "seed": cfg.seed,
        "lags": lag_text,
        "plans": plans,
        "test_partition": "all intervals after the train prefix; origins cover every full horizon window",
        "validation": f"last {int(engine.VALIDATION_FRACTION * 100)}% of the train partition",
        "normalization": "pooled z-score per city, resolution and level (train partition); "
                         "ARIMA per entity, mapped onto the pooled scale",
        "arima": "CSS fit on the capped train tail, no refit across origins",
    }


def stage_report(ws: Workspace, jobs: int) -> None:
    cfg = ws.cfg
    paths = [ws.forecast(d.city, p, m) for d in cfg.datasets for p in cfg.plans for m in cfg.enabled_models]
    cells = evalreport.recompute(paths, cfg.enabled_models)
    settings = report_settings(cfg)
    atomic_text(ws.root / "metrics.csv", evalreport.cells_to_csv(cells, settings))
    for d in cfg.datasets:
        for p in cfg.plans:
            text = evalreport.render_markdown([c for c in cells if c.dataset == d.city], p, settings,
                                              cfg.enabled_models)
            atomic_text(ws.root / f"report_{d.city}_{p}.md", text)


STAGE_FUNCS = {
    "ingest": stage_ingest,
    "series": stage_series,
    "features": stage_features,
    "train": stage_train,
    "forecast": stage_forecast,
    "report": stage_report,
}


def run(config_path: str | Path, stage: str = "all", jobs: int = 1, overwrite: bool = False) -> int:
    """Run one stage (or the whole chain); returns the process exit status."""
    try:
        cfg = load_config(config_path)
        ws = Workspace(cfg)
        ws.check_hash(overwrite)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    order = list(STAGES) if stage == "all" else [stage]
    try:
        first = STAGES.index(order[0])
        if first > 0:
            ws.require(STAGES[first - 1])
        ws.root.mkdir(parents=True, exist_ok=True)
        for name in order:
            t = time.perf_counter()
            log.info("stage %s", name)
            STAGE_FUNCS[name](ws, jobs)
            ws.record(name, time.perf_counter() - t)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ingest.IngestError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - surface any stage failure as a runtime error
        log.exception("stage failed")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evforecast", description="EV charging demand forecasting benchmark")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run one pipeline stage or all of them")
    p.add_argument("--config", required=True, help="YAML run configuration")
    p.add_argument("--stage", default="all", choices=STAGES + ("all",))
    p.add_argument("--jobs", type=int, default=1, help="worker processes for train and forecast")
    p.add_argument("--overwrite", action="store_true", help="replace artifacts from a different config")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_VALIDATION
    return run(args.config, args.stage, args.jobs, args.overwrite)


if __name__ == "__main__":
    sys.exit(main())
