//! Online correction: score a fitted model against actuals that arrived
//! after its fit and refit when the rolling relative error drifts too far.

use serde::{Deserialize, Serialize};

use super::{fit_and_select, one_step, FitConfig, FittedModel, ForecastError, ModelSpec, SeriesPoint, SeriesWindow};
use crate::model::Timestamp;

/// Floor for the denominator of the relative error.
const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrectionPolicy {
    /// Refit when the rolling relative error exceeds this.
    pub threshold: f64,
    /// Number of most recent one-step forecasts in the rolling error.
    pub eval_window: usize,
}

impl Default for CorrectionPolicy {
    fn default() -> Self {
        CorrectionPolicy {
            threshold: 0.15,
            eval_window: 24,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum CorrectionDecision {
    Kept {
        error: Option<f64>,
        evaluated: usize,
    },
    Refit {
        error: f64,
        evaluated: usize,
        previous: ModelSpec,
        model: Box<FittedModel>,
    },
}

impl CorrectionDecision {
    pub fn is_refit(&self) -> bool {
        matches!(self, CorrectionDecision::Refit { .. })
    }

    pub fn error(&self) -> Option<f64> {
        match self {
            CorrectionDecision::Kept { error, .. } => *error,
            CorrectionDecision::Refit { error, .. } => Some(*error),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionLogEntry {
    pub at: Timestamp,
    pub error: Option<f64>,
    pub evaluated: usize,
    pub action: String,
    pub model: String,
}

/// Rolling mean of `|predicted - actual| / max(actual, 1e-6)` over the last
/// `eval_window` steps after `model.fitted_through`. Returns the error and
/// the number of points it covers.
pub fn rolling_error(model: &FittedModel, actuals: &SeriesWindow, eval_window: usize) -> Option<(f64, usize)> {
    let first_new = actuals.points.partition_point(|p| p.ts <= model.fitted_through);
    let n = actuals.len();
    let from = first_new.max(n.saturating_sub(eval_window));
    if from >= n {
        return None;
    }
    let lo = from.saturating_sub(model.spec.memory());
    let history: Vec<Option<f64>> = actuals.points[lo..]
        .iter()
        .map(|p| p.usable().then_some(p.value))
        .collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for t in from..n {
        let p: &SeriesPoint = &actuals.points[t];
        if !p.scorable() {
            continue;
        }
        if let Some(pred) = one_step(&model.spec, &model.coefficients, &history, t - lo, actuals.exog_at(p.ts)) {
            total += (pred - p.value).abs() / p.value.max(RELATIVE_FLOOR);
            count += 1;
        }
    }
    (count > 0).then(|| (total / count as f64, count))
}

/// Keeps the model or refits it on all of `actuals`. A refit scores
/// candidates on the last `eval_window` steps so the fresh regime decides
/// the selection.
pub fn online_correct(
    model: &FittedModel,
    actuals: &SeriesWindow,
    policy: &CorrectionPolicy,
    grid: &[ModelSpec],
    store_version: u64,
) -> Result<CorrectionDecision, ForecastError> {
    if policy.eval_window == 0 || !(policy.threshold >= 0.0) {
        return Err(ForecastError::InvalidSpec("eval_window must be >= 1 and threshold >= 0".into()));
    }
    match rolling_error(model, actuals, policy.eval_window) {
        Some((error, evaluated)) if error > policy.threshold => {
            let config = FitConfig {
                holdout: policy.eval_window,
            };
            let (fresh, _) = fit_and_select(actuals, grid, config, store_version)?;
            Ok(CorrectionDecision::Refit {
                error,
                evaluated,
                previous: model.spec.clone(),
                model: Box::new(fresh),
            })
        }
        Some((error, evaluated)) => Ok(CorrectionDecision::Kept {
            error: Some(error),
            evaluated,
        }),
        None => Ok(CorrectionDecision::Kept {
            error: None,
            evaluated: 0,
        }),
    }
}

/// Streaming form of [`online_correct`]: feed actuals one at a time.
#[derive(Debug, Clone)]
pub struct Watcher {
    model: FittedModel,
    series: SeriesWindow,
    policy: CorrectionPolicy,
    grid: Vec<ModelSpec>,
    log: Vec<CorrectionLogEntry>,
    refits: usize,
}

impl Watcher {
    pub fn new(model: FittedModel, series: SeriesWindow, policy: CorrectionPolicy, grid: Vec<ModelSpec>) -> Self {
        Watcher {
            model,
            series,
            policy,
            grid,
            log: Vec::new(),
            refits: 0,
        }
    }

    pub fn model(&self) -> &FittedModel {
        &self.model
    }

    pub fn series(&self) -> &SeriesWindow {
        &self.series
    }

    pub fn log(&self) -> &[CorrectionLogEntry] {
        &self.log
    }

    pub fn refits(&self) -> usize {
        self.refits
    }

    /// Appends the next actual (and its exogenous value, if any) and
    /// re-evaluates the current model.
    pub fn observe(&mut self, point: SeriesPoint, exog: Option<f64>) -> Result<CorrectionDecision, ForecastError> {
        if let Some(end) = self.series.end_ts() {
            if point.ts != end + self.series.step {
                return Err(ForecastError::IrregularSeries(point.ts));
            }
        }
        if let Some(x) = exog {
            self.series.exog.get_or_insert_with(Default::default).insert(point.ts, x);
        }
        self.series.points.push(point);
        let decision = online_correct(
            &self.model,
            &self.series,
            &self.policy,
            &self.grid,
            self.model.fitted_at_version,
        )?;
        let (action, label) = match &decision {
            CorrectionDecision::Refit { model, .. } => ("refit", model.spec.label()),
            CorrectionDecision::Kept { .. } => ("kept", self.model.spec.label()),
        };
        log::debug!("correction at {}: {action} ({label})", point.ts);
        self.log.push(CorrectionLogEntry {
            at: point.ts,
            error: decision.error(),
            evaluated: match &decision {
                CorrectionDecision::Kept { evaluated, .. } | CorrectionDecision::Refit { evaluated, .. } => *evaluated,
            },
            action: action.into(),
            model: label,
        });
        if let CorrectionDecision::Refit { model, .. } = &decision {
            self.model = (**model).clone();
            self.refits += 1;
        }
        Ok(decision)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecast::{default_grid, FitConfig};
    use crate::model::{Metric, ObjectId, Quality, HOUR};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::TAU;

    fn daily(t: usize, rng: &mut ChaCha8Rng) -> f64 {
        100.0 * (1.0 + 0.05 * (TAU * t as f64 / 24.0).sin()) * (1.0 + rng.random_range(-0.01..0.01))
    }

    #[test]
    fn step_change_triggers_one_refit_that_recovers() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let base: Vec<f64> = (0..1000).map(|t| daily(t, &mut rng)).collect();
        let series = SeriesWindow::regular(ObjectId::new("o"), Metric::HeatEnergyKwh, 0, HOUR, &base);
        let (naive, _) =
            fit_and_select(&series, &[ModelSpec::SeasonalNaive { season: 24 }], FitConfig::default(), 0).unwrap();
        let policy = CorrectionPolicy::default();
        let mut w = Watcher::new(naive, series, policy, default_grid());
        let mut first_refit = None;
        for t in 1000..1200 {
            let v = daily(t, &mut rng) * if t >= 1100 { 2.0 } else { 1.0 };
            let d = w
                .observe(
                    SeriesPoint {
                        ts: t as i64 * HOUR,
                        value: v,
                        quality: Quality::Good,
                    },
                    None,
                )
                .unwrap();
            if d.is_refit() && first_refit.is_none() {
                first_refit = Some(t);
            }
        }
        assert_eq!(w.refits(), 1);
        let at = first_refit.unwrap();
        assert!(at >= 1100);
        let after: Vec<&CorrectionLogEntry> = w.log().iter().filter(|e| e.at > (at as i64) * HOUR).collect();
        let settled = after
            .iter()
            .take(policy.eval_window)
            .any(|e| e.error.is_some_and(|x| x <= policy.threshold));
        assert!(settled);
    }

    #[test]
    fn nothing_new_keeps_model() {
        let v: Vec<f64> = (0..800).map(|t| 1.0 + (t % 24) as f64).collect();
        let s = SeriesWindow::regular(ObjectId::new("o"), Metric::HeatEnergyKwh, 0, HOUR, &v);
        let (m, _) = fit_and_select(&s, &default_grid(), FitConfig::default(), 0).unwrap();
        let d = online_correct(&m, &s, &CorrectionPolicy::default(), &default_grid(), 0).unwrap();
        assert_eq!(
            d,
            CorrectionDecision::Kept {
                error: None,
                evaluated: 0
            }
        );
    }
}
