//! Feeds actuals one at a time to a fitted model; when a regime change
//! pushes the rolling error over the threshold the model is refitted.

use heatgrid::forecast::correct::{CorrectionPolicy, Watcher};
use heatgrid::forecast::{default_grid, fit_and_select, FitConfig, SeriesPoint, SeriesWindow};
use heatgrid::model::{Metric, ObjectId, Quality, HOUR};

fn load(t: usize) -> f64 {
    let daily = [0.6, 0.55, 0.5, 0.5, 0.55, 0.7, 0.9, 1.0, 0.95, 0.85, 0.8, 0.8];
    40.0 * daily[(t % 24) / 2]
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let history: Vec<f64> = (0..24 * 35).map(load).collect();
    let series = SeriesWindow::regular(ObjectId::new("obj-01"), Metric::HeatEnergyKwh, 0, HOUR, &history);
    let grid = default_grid();
    let (model, _) = fit_and_select(&series, &grid, FitConfig::default(), 0)?;
    println!("initial model {}", model.spec.label());

    let mut watcher = Watcher::new(model, series, CorrectionPolicy::default(), grid);
    // A cold snap doubles demand from the third day on.
    for t in history.len()..history.len() + 24 * 5 {
        let k = if t >= history.len() + 48 { 2.0 } else { 1.0 };
        let point = SeriesPoint {
            ts: t as i64 * HOUR,
            value: k * load(t),
            quality: Quality::Good,
        };
        let d = watcher.observe(point, None)?;
        if d.is_refit() {
            println!("hour {t}: refit, rolling error {:.3} -> {}", d.error().unwrap_or(0.0), watcher.model().spec.label());
        }
    }
    println!("{} refits, final model {}", watcher.refits(), watcher.model().spec.label());
    Ok(())
}
