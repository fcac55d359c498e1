"""Recursive walk-forward forecasting over horizon plans and aggregation levels."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np
import pandas as pd

from . import arima, gbt, neural
from .features import (
    FeatureMatrix,
    HolidayCalendar,
    IdentitySchema,
    LagSpec,
    Normalizer,
    build_matrix,
    calendar_matrix,
    chronological_split,
    fit_normalizer,
    static_rows,
    validation_start,
)
from .timeseries import EnergySeries, Level, Resolution

MODEL_IDS = ("ARIMA", "XGBoost", "GRU", "LSTM", "Transformer")
BASELINE_ID = "Persistence"
POOLED_MODELS = {"XGBoost", "GRU", "LSTM", "Transformer", BASELINE_ID}
VALIDATION_FRACTION = 0.1


class EngineError(RuntimeError):
    pass


@dataclass(frozen=True)
class HorizonPlan:
    label: str
    resolution: Resolution
    depth: int  # recursion depth in base intervals
    report_steps: tuple[int, ...]  # 1-based recursion steps that are scored
    stride: int  # origin spacing in base intervals
    step_labels: tuple[str, ...]

    @property
    def n_steps(self) -> int:
        return len(self.report_steps)


PLANS = {
    "Short": HorizonPlan("Short", Resolution.TEN_MIN, 3, (1, 2, 3), 1, ("10min", "20min", "30min")),
    "Mid": HorizonPlan("Mid", Resolution.HOURLY, 8, (2, 4, 6, 8), 2, ("2h", "4h", "6h", "8h")),
    "Long": HorizonPlan("Long", Resolution.DAILY, 5, (1, 2, 3, 4, 5), 1, ("1d", "2d", "3d", "4d", "5d")),
}


def plan_for(label: str) -> HorizonPlan:
    try:
        return PLANS[label]
    except KeyError:
        raise ValueError(f"unknown horizon plan {label!r}; expected one of {sorted(PLANS)}") from None


# -- lag state and recursion -------------------------------------------------------


class LagState:
    """Per-origin buffer of the newest ``depth`` normalized values, oldest first."""

    def __init__(self, z: np.ndarray, origins: np.ndarray, depth: int):
        origins = np.asarray(origins, dtype=np.int64)
        if len(origins) and origins.min() < depth:
            raise EngineError(f"origin {int(origins.min())} has fewer than {depth} observed values behind it")
        self.depth = depth
        self.buffer = z[origins[:, None] + np.arange(-depth, 0)[None, :]].astype(np.float64)

    def lags(self, offsets: Sequence[int]) -> np.ndarray:
        return np.column_stack([self.buffer[:, self.depth - o] for o in offsets])

    def push(self, values: np.ndarray) -> None:
        self.buffer = np.concatenate([self.buffer[:, 1:], np.asarray(values, dtype=np.float64)[:, None]], axis=1)


class Predictor(Protocol):
    def predict_rows(self, X: np.ndarray) -> np.ndarray: ...


def walk_forward(
    predictor: Predictor,
    z: np.ndarray,
    static: np.ndarray,
    lagspec: LagSpec,
    origins: np.ndarray,
    depth: int,
    on_step: Callable[[int, LagState], None] | None = None,
) -> np.ndarray:
    """Recursive forecasts, one row per origin (the first target index).

    Each origin starts from observed lags; step k's prediction is pushed into
    the lag state before step k + 1. Origins never share state.
    """
    origins = np.asarray(origins, dtype=np.int64)
    if origins.size and origins.max() + depth > len(z):
        raise EngineError("forecast window runs past the end of the series")
    state = LagState(np.asarray(z, dtype=np.float64), origins, lagspec.max_lag)
    out = np.empty((len(origins), depth))
    for k in range(depth):
        X = np.hstack([state.lags(lagspec.offsets), static[origins + k]])
        pred = np.asarray(predictor.predict_rows(X), dtype=np.float64)
        if not np.all(np.isfinite(pred)):
            raise EngineError(f"non-finite prediction at step {k + 1}")
        out[:, k] = pred
        state.push(pred)
        if on_step is not None:
            on_step(k + 1, state)
    return out


def origins_for(test: range, plan: HorizonPlan) -> np.ndarray:
    return np.arange(test.start, test.stop - plan.depth + 1, plan.stride, dtype=np.int64)


# -- forecast runs -------------------------------------------------------------------

RUN_COLUMNS = ["city", "model", "level", "plan", "entity_id", "origin_utc", "step", "prediction", "actual"]


@dataclass
class ForecastRun:
    city: str
    model: str
    level: Level
    plan: str
    entity_id: str
    origins: list[datetime]
    predictions: np.ndarray  # origins x reported steps, normalized
    actuals: np.ndarray

    def __post_init__(self) -> None:
        self.predictions = np.asarray(self.predictions, dtype=np.float64)
        self.actuals = np.asarray(self.actuals, dtype=np.float64)
        if self.predictions.shape != self.actuals.shape or self.predictions.shape[0] != len(self.origins):
            raise EngineError("predictions, actuals and origins disagree in shape")
        if not np.all(np.isfinite(self.predictions)):
            raise EngineError(f"{self.model}/{self.entity_id}: non-finite predictions")

    def to_frame(self) -> pd.DataFrame:
        n, s = self.predictions.shape
        return pd.DataFrame(
            {
                "city": self.city,
                "model": self.model,
                "level": self.level.value,
                "plan": self.plan,
                "entity_id": self.entity_id,
                "origin_utc": np.repeat([o.strftime("%Y-%m-%dT%H:%M:%SZ") for o in self.origins], s),
                "step": np.tile(np.arange(1, s + 1), n),
                "prediction": [repr(float(v)) for v in self.predictions.ravel()],
                "actual": [repr(float(v)) for v in self.actuals.ravel()],
            },
            columns=RUN_COLUMNS,
        )


def write_runs(runs: Sequence[ForecastRun], path: str | Path) -> None:
    frames = [r.to_frame() for r in runs]
    frame = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=RUN_COLUMNS)
    frame.to_csv(path, index=False)


def read_runs(path: str | Path) -> list[ForecastRun]:
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    if list(frame.columns) != RUN_COLUMNS:
        raise EngineError(f"{path}: unexpected columns {list(frame.columns)}")
    runs = []
    keys = ["city", "model", "level", "plan", "entity_id"]
    for key, grp in frame.groupby(keys, sort=False):
        steps = grp["step"].astype(int).to_numpy()
        s = int(steps.max())
        origins = list(dict.fromkeys(grp["origin_utc"]))
        shape = (len(origins), s)
        runs.append(
            ForecastRun(
                key[0], key[1], Level(key[2]), key[3], key[4],
                [datetime.strptime(o, "%Y-%m-%dT%H:%M:%SZ").replace(tzinfo=timezone.utc) for o in origins],
                np.array([float(v) for v in grp["prediction"]]).reshape(shape),
                np.array([float(v) for v in grp["actual"]]).reshape(shape),
            )
        )
    return runs


# -- per-level data ------------------------------------------------------------------


@dataclass
class LevelData:
    """Everything needed to train and walk forward at one (city, plan, level)."""

    city: str
    level: Level
    plan: HorizonPlan
    lagspec: LagSpec
    series: dict[str, EnergySeries]
    train: range
    test: range
    normalizer: Normalizer
    matrix: FeatureMatrix
    static: dict[str, np.ndarray]

    @property
    def t0(self) -> datetime:
        return next(iter(self.series.values())).t0

    def z(self, entity_id: str) -> np.ndarray:
        return self.normalizer.transform(self.series[entity_id].values)

    def origins(self) -> np.ndarray:
        return origins_for(self.test, self.plan)

    def fit_and_validation(self) -> tuple[FeatureMatrix, FeatureMatrix]:
        vs = validation_start(len(self.train), VALIDATION_FRACTION)
        t = self.matrix.t_index
        in_train = t < self.train.stop
        fit = self.matrix.select(in_train & (t < vs))
        val = self.matrix.select(in_train & (t >= vs))
        if len(fit) == 0 or len(val) == 0:
            raise EngineError(
                f"{self.city}/{self.plan.label}/{self.level.value}: train partition too short for a validation tail"
            )
        return fit, val


def prepare_level(
    city: str,
    level: Level,
    series: Mapping[str, EnergySeries],
    plan: HorizonPlan,
    lagspec: LagSpec,
    schema: IdentitySchema,
    station_region: Mapping[str, str],
    train_fraction: float = 0.8,
    holidays: HolidayCalendar | None = None,
) -> LevelData:
    if not series:
        raise EngineError(f"{city}: no {level.value} series at {plan.resolution.label}")
    ordered = {k: series[k] for k in sorted(series)}
    ref = next(iter(ordered.values()))
    if ref.resolution is not plan.resolution:
        raise EngineError(f"{plan.label} needs {plan.resolution.label} series, got {ref.resolution.label}")
    train, test = chronological_split(len(ref), train_fraction, lagspec.max_lag)
    if len(test) < plan.depth:
        raise EngineError(f"test partition of {len(test)} intervals is shorter than the {plan.label} horizon")
    # one scale per level, pooled over that level's entities, train partition only
    normalizer = fit_normalizer(np.concatenate([s.values[: train.stop] for s in ordered.values()]))
    matrix = build_matrix(list(ordered.values()), lagspec, normalizer, city, schema, station_region, holidays)
    cal = calendar_matrix(ref.t0, ref.resolution, len(ref), city, holidays)
    static = {k: static_rows(s, city, schema, station_region, calendar=cal) for k, s in ordered.items()}
    return LevelData(city, level, plan, lagspec, ordered, train, test, normalizer, matrix, static)


# -- models ----------------------------------------------------------------------------


def run_seed(seed: int, *parts: str) -> int:
    digest = hashlib.sha256("/".join((str(seed),) + parts).encode()).digest()
    return int.from_bytes(digest[:4], "little")


class PersistencePredictor:
    """Last observed value, carried forward through the recursion."""

    name = BASELINE_ID

    def __init__(self, lagspec: LagSpec):
        if lagspec.offsets[0] != 1:
            raise EngineError("persistence needs lag offset 1")

    def predict_rows(self, X: np.ndarray) -> np.ndarray:
        return X[:, 0].copy()


class GbtPredictor:
    name = "XGBoost"

    def __init__(self, ensemble: gbt.Ensemble):
        self.ensemble = ensemble

    def predict_rows(self, X: np.ndarray) -> np.ndarray:
        return self.ensemble.predict(X)

    def save(self, path: str | Path) -> None:
        self.ensemble.save(path)

    @classmethod
    def load(cls, path: str | Path) -> "GbtPredictor":
        return cls(gbt.Ensemble.load(path))


class NeuralPredictor:
    def __init__(self, model: neural.SequenceRegressor, n_lags: int, result: neural.TrainResult | None = None):
        self.model = model
        self.n_lags = n_lags
        self.result = result
        self.name = {"gru": "GRU", "lstm": "LSTM", "transformer": "Transformer"}[model.arch]

    def predict_rows(self, X: np.ndarray) -> np.ndarray:
        seq, static = neural.rows_to_samples(X, self.n_lags)
        return self.model.predict(seq, static)

    def save(self, path: str | Path) -> None:
        self.model.save(path)

    @classmethod
    def load(cls, path: str | Path, n_lags: int) -> "NeuralPredictor":
        return cls(neural.load_model(path), n_lags)


@dataclass
class ArimaBank:
    """Independent per-entity fits on per-entity standardized series."""

    models: dict[str, arima.ArimaModel | None]
    normalizers: dict[str, Normalizer]
    name: str = "ARIMA"

    def save(self, path: str | Path) -> None:
        lines = []
        for eid in sorted(self.models):
            rec = json.loads(arima.model_record(eid, self.models[eid]))
            rec["norm_mean"], rec["norm_std"] = self.normalizers[eid].mean, self.normalizers[eid].std
            lines.append(json.dumps(rec, sort_keys=True))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ArimaBank":
        models, norms = {}, {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line:
                continue
            rec = json.loads(line)
            eid, m = arima.model_from_record(line)
            models[eid] = m
            norms[eid] = Normalizer(rec["norm_mean"], rec["norm_std"])
        return cls(models, norms)


@dataclass
class ModelSettings:
    gbt: gbt.GbtConfig = field(default_factory=gbt.GbtConfig)
    rnn: neural.RnnConfig = field(default_factory=neural.RnnConfig)
    transformer: neural.TransformerConfig = field(default_factory=neural.TransformerConfig)


def train_model(model_id: str, data: LevelData, seed: int, settings: ModelSettings = ModelSettings()):
    """Fit one model at one (city, plan, level) on the train partition."""
    s = run_seed(seed, data.city, data.plan.label, data.level.value, model_id)
    if model_id == BASELINE_ID:
        return PersistencePredictor(data.lagspec)
    if model_id == "ARIMA":
        models, norms = {}, {}
        for eid, series in data.series.items():
            norm = fit_normalizer(series.values[: data.train.stop])
            z = norm.transform(series.values)
            models[eid] = arima.fit_capped(z[: data.train.stop], data.plan.resolution)
            norms[eid] = norm
        return ArimaBank(models, norms)
    fit, val = data.fit_and_validation()
    if model_id == "XGBoost":
        return GbtPredictor(gbt.boost(fit.X, fit.y, val.X, val.y, settings.gbt, seed=s))
    if model_id in ("GRU", "LSTM", "Transformer"):
        arch = model_id.lower()
        cfg = settings.transformer if arch == "transformer" else settings.rnn
        n_static = fit.X.shape[1] - fit.n_lags
        model = neural.make_model(arch, fit.n_lags, n_static, cfg, seed=s)
        result = neural.train(model, neural.samples_from_matrix(fit), neural.samples_from_matrix(val), seed=s)
        return NeuralPredictor(model, fit.n_lags, result)
    raise EngineError(f"unknown model {model_id!r}")


def save_model(model_id: str, trained, path: str | Path) -> None:
    if model_id == BASELINE_ID:
        Path(path).write_text("persistence\n", encoding="utf-8")
    else:
        trained.save(path)


def load_model(model_id: str, path: str | Path, data: LevelData):
    if model_id == BASELINE_ID:
        return PersistencePredictor(data.lagspec)
    if model_id == "ARIMA":
        return ArimaBank.load(path)
    if model_id == "XGBoost":
        return GbtPredictor.load(path)
    return NeuralPredictor.load(path, len(data.lagspec.offsets))


def forecast_entity(trained, data: LevelData, entity_id: str, on_step=None) -> np.ndarray:
    """Full-depth normalized forecasts (origins x depth) for one entity."""
    origins = data.origins()
    z = data.z(entity_id)
    if isinstance(trained, ArimaBank):
        model = trained.models[entity_id]
        norm = trained.normalizers[entity_id]
        own = norm.transform(data.series[entity_id].values)
        if model is None:
            own_pred = np.repeat(own[origins - 1][:, None], data.plan.depth, axis=1)
        else:
            own_pred = arima.forecast_origins(model, own, origins, data.plan.depth)
        # map from the entity's own scale onto the level's shared scale
        return data.normalizer.transform(norm.inverse(own_pred))
    return walk_forward(trained, z, data.static[entity_id], data.lagspec, origins, data.plan.depth, on_step)


def forecast_level(model_id: str, trained, data: LevelData) -> list[ForecastRun]:
    origins = data.origins()
    if len(origins) == 0:
        raise EngineError(f"{data.city}/{data.plan.label}/{data.level.value}: no forecast origins")
    cols = np.asarray(data.plan.report_steps) - 1
    ref = next(iter(data.series.values()))
    stamps = [ref.timestamp(int(o)) for o in origins]
    runs = []
    for eid in data.series:
        full = forecast_entity(trained, data, eid)
        z = data.z(eid)
        actual = z[origins[:, None] + np.arange(data.plan.depth)[None, :]]
        runs.append(ForecastRun(data.city, model_id, data.level, data.plan.label, eid, stamps,
                                full[:, cols], actual[:, cols]))
    return runs


def forecast_levels(
    city: str,
    model_id: str,
    plan: HorizonPlan,
    levels: Mapping[Level, Mapping[str, EnergySeries]],
    schema: IdentitySchema,
    station_region: Mapping[str, str],
    lagspec: LagSpec | None = None,
    train_fraction: float = 0.8,
    seed: int = 0,
    settings: ModelSettings = ModelSettings(),
    holidays: HolidayCalendar | None = None,
) -> dict[Level, list[ForecastRun]]:
    """Train and walk forward one model at every level of one city."""
    lagspec = lagspec or LagSpec.default(plan.resolution)
    out = {}
    for level in Level:
        if level not in levels or not levels[level]:
            raise EngineError(f"{city}: missing {level.value} series")
        data = prepare_level(city, level, levels[level], plan, lagspec, schema, station_region,
                             train_fraction, holidays)
        out[level] = forecast_level(model_id, train_model(model_id, data, seed, settings), data)
    return out
