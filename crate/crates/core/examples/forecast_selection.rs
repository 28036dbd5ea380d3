//! Fits the candidate grid on one heating point, prints each candidate's
//! holdout error and persists the winner's day-ahead forecast.

use heatgrid::fixture::{Fixture, FixtureConfig};
use heatgrid::forecast::{default_grid, fit_candidates, run_forecast, select_best, FitConfig, ForecastRequest, SeriesWindow};
use heatgrid::model::{Metric, Window, HOUR};
use heatgrid::store::{CubeStore, FactRecord, StoreConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fx = Fixture::new(FixtureConfig {
        hours: 24 * 60,
        ..FixtureConfig::kuznetsk_small()
    });
    let store = CubeStore::in_memory(StoreConfig::default())?;
    store.append(fx.readings().iter().map(FactRecord::from).collect())?;
    let object = fx.object_ids()[0].clone();
    let weather = fx.weather(fx.config.start_ts, fx.config.end_ts() + 24 * HOUR);

    let span = Window::new(fx.config.start_ts, fx.config.end_ts());
    let series = SeriesWindow::from_store(&store, &object, Metric::HeatEnergyKwh, span, HOUR)?.with_exog(weather.clone());
    let report = fit_candidates(&series, &default_grid(), FitConfig::default(), store.version())?;
    let mut ranked = report.fitted.clone();
    ranked.sort_by(|a, b| a.holdout_mae.total_cmp(&b.holdout_mae));
    for m in &ranked {
        println!("{:<32} mae {:>9.4} kWh over {} points", m.spec.label(), m.holdout_mae, m.holdout_points);
    }
    for s in &report.skipped {
        println!("{:<32} skipped: {}", s.spec.label(), s.reason);
    }
    println!("selected {}", select_best(&report.fitted)?.spec.label());

    let out = run_forecast(&store, &ForecastRequest::new(object, Metric::HeatEnergyKwh, 24), Some(&weather))?;
    for p in out.forecast.points.iter().take(6) {
        println!("  {} {:.3}", p.ts, p.value);
    }
    println!("persisted {} points under {}", out.persisted.written, out.persisted.metric);
    Ok(())
}
