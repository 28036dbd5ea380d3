//! Candidate forecasters per (object, metric): fit on a training span, score
//! one step ahead on a holdout span, pick the best, predict recursively.

pub mod correct;

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Metric, MetricKey, ObjectId, Quality, Timestamp, Window, DAY, HOUR};
use crate::store::{CubeStore, FactRecord, ObjectSel, StoreError};

pub use self::correct::{online_correct, CorrectionDecision, CorrectionLogEntry, CorrectionPolicy, Watcher};

/// Relative singular-value cutoff below which a design is treated as rank
/// deficient.
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ForecastError {
    #[error("series too short: {got} points, {needed} needed")]
    SeriesTooShort { needed: usize, got: usize },
    #[error("holdout has no scorable points")]
    NoScorablePoints,
    #[error("degenerate design for {0}")]
    DegenerateDesign(String),
    #[error("no candidates to select from")]
    EmptyCandidates,
    #[error("exogenous value missing at {0}")]
    MissingExogenous(Timestamp),
    #[error("lagged value unavailable for step at {0}")]
    InsufficientLags(Timestamp),
    #[error("series timestamps are not on a regular grid at {0}")]
    IrregularSeries(Timestamp),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("no stored series for {object}/{metric}")]
    UnknownSeries { object: ObjectId, metric: Metric },
    #[error("store error: {0}")]
    Store(String),
}

impl From<StoreError> for ForecastError {
    fn from(e: StoreError) -> Self {
        ForecastError::Store(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub ts: Timestamp,
    #[serde(with = "crate::model::nan_as_null")]
    pub value: f64,
    pub quality: Quality,
}

impl SeriesPoint {
    /// May feed a model as an input or a fitting target.
    pub fn usable(&self) -> bool {
        self.quality.is_scorable() && self.value.is_finite()
    }

    /// May be scored against.
    pub fn scorable(&self) -> bool {
        self.quality == Quality::Good && self.value.is_finite()
    }
}

/// A regular time series with optional exogenous driver (outdoor
/// temperature), keyed by timestamp so it can run past the series end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesWindow {
    pub object_id: ObjectId,
    pub metric: Metric,
    pub step: i64,
    pub points: Vec<SeriesPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exog: Option<BTreeMap<Timestamp, f64>>,
}

impl SeriesWindow {
    /// Series of good points at `start, start + step, ...`.
    pub fn regular(object_id: ObjectId, metric: Metric, start: Timestamp, step: i64, values: &[f64]) -> Self {
        SeriesWindow {
            object_id,
            metric,
            step,
            points: values
                .iter()
                .enumerate()
                .map(|(i, &value)| SeriesPoint {
                    ts: start + i as i64 * step,
                    value,
                    quality: Quality::Good,
                })
                .collect(),
            exog: None,
        }
    }

    /// Reads actuals from the store onto a regular grid over `window`; grid
    /// slots without a fact become `Missing` points.
    pub fn from_store(
        store: &CubeStore,
        object: &ObjectId,
        metric: Metric,
        window: Window,
        step: i64,
    ) -> Result<Self, ForecastError> {
        if step <= 0 || !window.is_valid() {
            return Err(ForecastError::InvalidSpec("bad window or step".into()));
        }
        let facts = store.facts(
            &ObjectSel::Set(BTreeSet::from([object.clone()])),
            &BTreeSet::from([MetricKey::Actual(metric)]),
            window,
        );
        let by_ts: BTreeMap<Timestamp, &FactRecord> = facts.iter().map(|f| (f.ts, f)).collect();
        let points = (window.from..window.to)
            .step_by(step as usize)
            .map(|ts| match by_ts.get(&ts) {
                Some(f) => SeriesPoint {
                    ts,
                    value: f.value,
                    quality: f.quality,
                },
                None => SeriesPoint {
                    ts,
                    value: f64::NAN,
                    quality: Quality::Missing,
                },
            })
            .collect();
        Ok(SeriesWindow {
            object_id: object.clone(),
            metric,
            step,
            points,
            exog: None,
        })
    }

    pub fn with_exog(mut self, exog: BTreeMap<Timestamp, f64>) -> Self {
        self.exog = Some(exog);
        self
    }

    pub fn validate(&self) -> Result<(), ForecastError> {
        if self.step <= 0 {
            return Err(ForecastError::InvalidSpec("step must be positive".into()));
        }
        for w in self.points.windows(2) {
            if w[1].ts - w[0].ts != self.step {
                return Err(ForecastError::IrregularSeries(w[1].ts));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn end_ts(&self) -> Option<Timestamp> {
        self.points.last().map(|p| p.ts)
    }

    fn history(&self) -> Vec<Option<f64>> {
        self.points.iter().map(|p| p.usable().then_some(p.value)).collect()
    }

    fn exog_at(&self, ts: Timestamp) -> Option<f64> {
        self.exog.as_ref()?.get(&ts).copied().filter(|v| v.is_finite())
    }

    /// Copy truncated to points with `ts < until`.
    pub fn until(&self, until: Timestamp) -> SeriesWindow {
        SeriesWindow {
            points: self.points.iter().filter(|p| p.ts < until).copied().collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelSpec {
    SeasonalNaive { season: usize },
    MovingAverage { window: usize },
    LinearExog { lags: Vec<usize>, exog: bool },
}

impl ModelSpec {
    pub fn family_rank(&self) -> u8 {
        match self {
            ModelSpec::SeasonalNaive { .. } => 0,
            ModelSpec::MovingAverage { .. } => 1,
            ModelSpec::LinearExog { .. } => 2,
        }
    }

    pub fn validate(&self) -> Result<(), ForecastError> {
        match self {
            ModelSpec::SeasonalNaive { season: 0 } => Err(ForecastError::InvalidSpec("season must be >= 1".into())),
            ModelSpec::MovingAverage { window: 0 } => Err(ForecastError::InvalidSpec("window must be >= 1".into())),
            ModelSpec::LinearExog { lags, .. } if lags.is_empty() || lags.contains(&0) => {
                Err(ForecastError::InvalidSpec("lags must be non-empty and positive".into()))
            }
            _ => Ok(()),
        }
    }

    /// Longest look-back the model needs.
    pub fn memory(&self) -> usize {
        match self {
            ModelSpec::SeasonalNaive { season } => *season,
            ModelSpec::MovingAverage { window } => *window,
            ModelSpec::LinearExog { lags, .. } => lags.iter().copied().max().unwrap_or(0),
        }
    }

    pub fn label(&self) -> String {
        match self {
            ModelSpec::SeasonalNaive { season } => format!("seasonal_naive(S={season})"),
            ModelSpec::MovingAverage { window } => format!("moving_average(k={window})"),
            ModelSpec::LinearExog { lags, exog } => {
                let l: Vec<String> = lags.iter().map(usize::to_string).collect();
                format!("linear_exog(L={{{}}}, exog={})", l.join(","), if *exog { "on" } else { "off" })
            }
        }
    }
}

/// seasonal_naive(24), moving_average(3), moving_average(24),
/// linear_exog({1,2,24,168}) with and without exogenous input.
pub fn default_grid() -> Vec<ModelSpec> {
    vec![
        ModelSpec::SeasonalNaive { season: 24 },
        ModelSpec::MovingAverage { window: 3 },
        ModelSpec::MovingAverage { window: 24 },
        ModelSpec::LinearExog {
            lags: vec![1, 2, 24, 168],
            exog: false,
        },
        ModelSpec::LinearExog {
            lags: vec![1, 2, 24, 168],
            exog: true,
        },
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Trailing steps held out for scoring.
    pub holdout: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            holdout: (14 * DAY / HOUR) as usize,
        }
    }
}

impl FitConfig {
    /// Fourteen days at the given step.
    pub fn for_step(step: i64) -> Self {
        FitConfig {
            holdout: ((14 * DAY) / step.max(1)).max(1) as usize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub object_id: ObjectId,
    pub metric: Metric,
    pub spec: ModelSpec,
    /// Intercept, lag weights in spec order, then the exogenous weight.
    pub coefficients: Vec<f64>,
    pub train_window: Window,
    pub holdout_window: Window,
    pub holdout_mae: f64,
    pub holdout_points: usize,
    pub fitted_at_version: u64,
    /// Last timestamp of the series the model was fitted on.
    pub fitted_through: Timestamp,
    pub step: i64,
}

/// A candidate that could not be fitted, and why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedCandidate {
    pub spec: ModelSpec,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub fitted: Vec<FittedModel>,
    pub skipped: Vec<SkippedCandidate>,
}

/// One-step prediction at index `t` from `history` (values before `t` are
/// read; `t` itself is not). `None` if an input is unavailable.
pub fn one_step(
    spec: &ModelSpec,
    coefficients: &[f64],
    history: &[Option<f64>],
    t: usize,
    exog: Option<f64>,
) -> Option<f64> {
    let raw = match spec {
        ModelSpec::SeasonalNaive { season } => history[t.checked_sub(*season)?]?,
        ModelSpec::MovingAverage { window } => {
            let from = t.checked_sub(*window)?;
            let mut acc = 0.0;
            for v in &history[from..t] {
                acc += (*v)?;
            }
            acc / *window as f64
        }
        ModelSpec::LinearExog { lags, exog: uses_exog } => {
            let mut acc = coefficients[0];
            for (j, lag) in lags.iter().enumerate() {
                acc += coefficients[1 + j] * history[t.checked_sub(*lag)?]?;
            }
            if *uses_exog {
                acc += coefficients[1 + lags.len()] * exog?;
            }
            acc
        }
    };
    Some(raw.max(0.0))
}

fn fit_linear(
    series: &SeriesWindow,
    history: &[Option<f64>],
    lags: &[usize],
    uses_exog: bool,
    train_end: usize,
) -> Result<Vec<f64>, ForecastError> {
    let label = ModelSpec::LinearExog {
        lags: lags.to_vec(),
        exog: uses_exog,
    }
    .label();
    let max_lag = lags.iter().copied().max().unwrap_or(0);
    let cols = 1 + lags.len() + usize::from(uses_exog);
    let mut rows: Vec<f64> = Vec::new();
    let mut target: Vec<f64> = Vec::new();
    'row: for t in max_lag..train_end {
        let Some(y) = history[t] else { continue };
        let mut row = Vec::with_capacity(cols);
        row.push(1.0);
        for lag in lags {
            match history[t - lag] {
                Some(v) => row.push(v),
                None => continue 'row,
            }
        }
        if uses_exog {
            match series.exog_at(series.points[t].ts) {
                Some(x) => row.push(x),
                None => continue 'row,
            }
        }
        rows.extend(row);
        target.push(y);
    }
    let n = target.len();
    if n < cols {
        return Err(ForecastError::DegenerateDesign(format!("{label}: {n} usable rows for {cols} coefficients")));
    }
    let x = DMatrix::from_row_slice(n, cols, &rows);
    let y = DVector::from_vec(target);
    let svd = x.svd(true, true);
    let max_sv = svd.singular_values.max();
    let min_sv = svd.singular_values.min();
    if !(max_sv > 0.0) || min_sv <= RANK_TOLERANCE * max_sv {
        return Err(ForecastError::DegenerateDesign(format!(
            "{label}: design rank deficient (singular values {min_sv:e} / {max_sv:e})"
        )));
    }
    let beta = svd
        .solve(&y, 0.0)
        .map_err(|e| ForecastError::DegenerateDesign(format!("{label}: {e}")))?;
    Ok(beta.iter().copied().collect())
}

/// Mean absolute one-step error over scorable points with index in
/// `from..to`, and how many points were scored.
pub fn holdout_mae(
    spec: &ModelSpec,
    coefficients: &[f64],
    series: &SeriesWindow,
    from: usize,
    to: usize,
) -> Option<(f64, usize)> {
    let history = series.history();
    let mut total = 0.0;
    let mut n = 0usize;
    for t in from..to {
        let p = &series.points[t];
        if !p.scorable() {
            continue;
        }
        if let Some(pred) = one_step(spec, coefficients, &history, t, series.exog_at(p.ts)) {
            total += (pred - p.value).abs();
            n += 1;
        }
    }
    (n > 0).then(|| (total / n as f64, n))
}

/// Fits every candidate on the series minus its trailing holdout and
/// scores it on the holdout. Candidates that cannot be fitted are reported
/// in `skipped` rather than failing the whole call.
pub fn fit_candidates(
    series: &SeriesWindow,
    grid: &[ModelSpec],
    config: FitConfig,
    store_version: u64,
) -> Result<FitReport, ForecastError> {
    series.validate()?;
    for spec in grid {
        spec.validate()?;
    }
    let longest = grid.iter().map(ModelSpec::memory).max().unwrap_or(0);
    let needed = 2 * longest + config.holdout;
    if config.holdout == 0 || series.len() < needed {
        return Err(ForecastError::SeriesTooShort {
            needed: needed.max(1),
            got: series.len(),
        });
    }
    let n = series.len();
    let train_end = n - config.holdout;
    if !series.points[train_end..].iter().any(SeriesPoint::scorable) {
        return Err(ForecastError::NoScorablePoints);
    }
    let history = series.history();
    let train_window = Window::new(series.points[0].ts, series.points[train_end].ts);
    let holdout_window = Window::new(series.points[train_end].ts, series.points[n - 1].ts + series.step);

    let mut report = FitReport {
        fitted: Vec::new(),
        skipped: Vec::new(),
    };
    for spec in grid {
        let coefficients = match spec {
            ModelSpec::LinearExog { lags, exog } => {
                if *exog && series.exog.is_none() {
                    report.skipped.push(SkippedCandidate {
                        spec: spec.clone(),
                        reason: "no exogenous series supplied".into(),
                    });
                    continue;
                }
                match fit_linear(series, &history, lags, *exog, train_end) {
                    Ok(c) => c,
                    Err(e) => {
                        report.skipped.push(SkippedCandidate {
                            spec: spec.clone(),
                            reason: e.to_string(),
                        });
                        continue;
                    }
                }
            }
            _ => Vec::new(),
        };
        match holdout_mae(spec, &coefficients, series, train_end, n) {
            Some((mae, points)) => report.fitted.push(FittedModel {
                object_id: series.object_id.clone(),
                metric: series.metric,
                spec: spec.clone(),
                coefficients,
                train_window,
                holdout_window,
                holdout_mae: mae,
                holdout_points: points,
                fitted_at_version: store_version,
                fitted_through: series.points[n - 1].ts,
                step: series.step,
            }),
            None => report.skipped.push(SkippedCandidate {
                spec: spec.clone(),
                reason: "no holdout point could be predicted".into(),
            }),
        }
    }
    Ok(report)
}

/// Lowest holdout MAE; ties go to fewer coefficients, then family order,
/// then list position.
pub fn select_best(fitted: &[FittedModel]) -> Result<FittedModel, ForecastError> {
    fitted
        .iter()
        .enumerate()
        .min_by(|(ia, a), (ib, b)| {
            a.holdout_mae
                .total_cmp(&b.holdout_mae)
                .then(a.coefficients.len().cmp(&b.coefficients.len()))
                .then(a.spec.family_rank().cmp(&b.spec.family_rank()))
                .then(ia.cmp(ib))
        })
        .map(|(_, m)| m.clone())
        .ok_or(ForecastError::EmptyCandidates)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastPoint {
    pub ts: Timestamp,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub model: FittedModel,
    pub horizon: usize,
    pub points: Vec<ForecastPoint>,
}

/// Recursive multi-step forecast continuing `series`. Each predicted value
/// (clamped at zero) feeds later steps.
pub fn predict(model: &FittedModel, series: &SeriesWindow, horizon: usize) -> Result<Forecast, ForecastError> {
    if horizon == 0 {
        return Err(ForecastError::InvalidSpec("horizon must be at least 1".into()));
    }
    series.validate()?;
    let end = series
        .end_ts()
        .ok_or(ForecastError::InsufficientLags(model.fitted_through))?;
    let mut history = series.history();
    let mut points = Vec::with_capacity(horizon);
    for h in 1..=horizon {
        let ts = end + h as i64 * series.step;
        let uses_exog = matches!(model.spec, ModelSpec::LinearExog { exog: true, .. });
        let exog = if uses_exog {
            Some(series.exog_at(ts).ok_or(ForecastError::MissingExogenous(ts))?)
        } else {
            None
        };
        let t = history.len();
        let value = one_step(&model.spec, &model.coefficients, &history, t, exog)
            .ok_or(ForecastError::InsufficientLags(ts))?;
        history.push(Some(value));
        points.push(ForecastPoint { ts, value });
    }
    Ok(Forecast {
        model: model.clone(),
        horizon,
        points,
    })
}

/// Fit, select and report in one call.
pub fn fit_and_select(
    series: &SeriesWindow,
    grid: &[ModelSpec],
    config: FitConfig,
    store_version: u64,
) -> Result<(FittedModel, FitReport), ForecastError> {
    let report = fit_candidates(series, grid, config, store_version)?;
    let best = select_best(&report.fitted)?;
    Ok((best, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistReport {
    pub metric: MetricKey,
    pub written: usize,
    /// Points already stored with the same value.
    pub unchanged: usize,
    /// Points already stored with a different value; left untouched.
    pub conflicts: Vec<Timestamp>,
    pub store_version: u64,
}

/// Writes forecast points under `forecast.<metric>`, or
/// `scenario.<name>.<metric>` when a scenario is named. Stored facts are
/// never overwritten: points that collide with a different stored value are
/// skipped and reported.
pub fn persist_forecast(
    store: &CubeStore,
    forecast: &Forecast,
    scenario: Option<&str>,
) -> Result<PersistReport, ForecastError> {
    let key = MetricKey::forecast_for(forecast.model.metric, scenario);
    let object = forecast.model.object_id.clone();
    let mut report = PersistReport {
        metric: key.clone(),
        written: 0,
        unchanged: 0,
        conflicts: Vec::new(),
        store_version: store.version(),
    };
    let (Some(first), Some(last)) = (forecast.points.first(), forecast.points.last()) else {
        return Ok(report);
    };
    let existing: BTreeMap<Timestamp, f64> = store
        .facts(
            &ObjectSel::Set(BTreeSet::from([object.clone()])),
            &BTreeSet::from([key.clone()]),
            Window::new(first.ts, last.ts + 1),
        )
        .into_iter()
        .map(|f| (f.ts, f.value))
        .collect();
    let mut records = Vec::new();
    for p in &forecast.points {
        match existing.get(&p.ts) {
            Some(v) if v.to_bits() == p.value.to_bits() => report.unchanged += 1,
            Some(_) => report.conflicts.push(p.ts),
            None => records.push(FactRecord {
                object_id: object.clone(),
                metric: key.clone(),
                ts: p.ts,
                value: p.value,
                quality: Quality::Good,
            }),
        }
    }
    if !records.is_empty() {
        report.written = records.len();
        report.store_version = store.append(records)?.store_version;
    }
    Ok(report)
}

/// Everything needed to fit, select, predict and persist for one series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRequest {
    pub object_id: ObjectId,
    pub metric: Metric,
    pub horizon: usize,
    /// Training series; defaults to the whole stored stream.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<Window>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<ModelSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout: Option<usize>,
    #[serde(default = "default_step")]
    pub step: i64,
}

fn default_step() -> i64 {
    HOUR
}

impl ForecastRequest {
    pub fn new(object_id: ObjectId, metric: Metric, horizon: usize) -> Self {
        ForecastRequest {
            object_id,
            metric,
            horizon,
            window: None,
            scenario: None,
            grid: None,
            holdout: None,
            step: HOUR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastOutcome {
    pub forecast: Forecast,
    pub fit: FitReport,
    pub persisted: PersistReport,
}

/// Reads the series from the store, fits the grid, predicts and persists.
/// `exog` supplies the outdoor temperature by timestamp, including the
/// forecast horizon, for candidates that use it.
pub fn run_forecast(
    store: &CubeStore,
    request: &ForecastRequest,
    exog: Option<&BTreeMap<Timestamp, f64>>,
) -> Result<ForecastOutcome, ForecastError> {
    let key = MetricKey::Actual(request.metric);
    let unknown = || ForecastError::UnknownSeries {
        object: request.object_id.clone(),
        metric: request.metric,
    };
    let window = match request.window {
        Some(w) => w,
        None => {
            let (first, last) = store.stream_span(&request.object_id, &key).ok_or_else(unknown)?;
            Window::new(first, last + 1)
        }
    };
    if !store.has_stream(&request.object_id, &key) {
        return Err(unknown());
    }
    let version = store.version();
    let mut series = SeriesWindow::from_store(store, &request.object_id, request.metric, window, request.step)?;
    if let Some(x) = exog {
        series = series.with_exog(x.clone());
    }
    let grid = request.grid.clone().unwrap_or_else(default_grid);
    let config = request
        .holdout
        .map(|holdout| FitConfig { holdout })
        .unwrap_or_else(|| FitConfig::for_step(request.step));
    let (model, fit) = fit_and_select(&series, &grid, config, version)?;
    let forecast = predict(&model, &series, request.horizon)?;
    let persisted = persist_forecast(store, &forecast, request.scenario.as_deref())?;
    Ok(ForecastOutcome {
        forecast,
        fit,
        persisted,
    })
}
