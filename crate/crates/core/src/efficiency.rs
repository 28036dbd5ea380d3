//! Per-object efficiency indicators over a window: metered consumption, a
//! supply/return heat balance and the forecast error against actuals.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::model::{Metric, MetricKey, ObjectId, Timestamp, Window};
use crate::store::{CubeStore, FactRecord, ObjectSel};

/// Heat carried by one cubic metre of water per kelvin, in kWh.
pub const WATER_KWH_PER_M3_K: f64 = 1.163;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub object_id: ObjectId,
    /// Metered heat energy.
    pub consumption_kwh: Option<f64>,
    /// Heat implied by flow and supply/return temperatures, over hours
    /// where all three are present.
    pub balance_kwh: Option<f64>,
    /// `balance_kwh - consumption_kwh` over the same hours.
    pub losses_proxy_kwh: Option<f64>,
    /// Mean absolute error of the persisted forecast against actuals.
    pub forecast_mae_kwh: Option<f64>,
    pub forecast_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub window: Window,
    pub store_version: u64,
    pub rows: Vec<EfficiencyRow>,
}

#[derive(Default)]
struct Hour {
    heat: Option<f64>,
    flow: Option<f64>,
    supply: Option<f64>,
    ret: Option<f64>,
    forecast: Option<f64>,
}

pub fn efficiency_report(store: &CubeStore, window: Window) -> EfficiencyReport {
    let version = store.version();
    let keys: BTreeSet<MetricKey> = [
        MetricKey::Actual(Metric::HeatEnergyKwh),
        MetricKey::Actual(Metric::FlowM3h),
        MetricKey::Actual(Metric::SupplyTempC),
        MetricKey::Actual(Metric::ReturnTempC),
        MetricKey::Forecast(Metric::HeatEnergyKwh),
    ]
    .into();
    let mut grid: BTreeMap<ObjectId, BTreeMap<Timestamp, Hour>> = BTreeMap::new();
    for f in store.facts(&ObjectSel::All, &keys, window) {
        let FactRecord {
            object_id,
            metric,
            ts,
            value,
            quality,
        } = f;
        if !quality.is_scorable() || !value.is_finite() {
            continue;
        }
        let h = grid.entry(object_id).or_default().entry(ts).or_default();
        let slot = match metric {
            MetricKey::Forecast(_) => &mut h.forecast,
            MetricKey::Actual(Metric::HeatEnergyKwh) => &mut h.heat,
            MetricKey::Actual(Metric::FlowM3h) => &mut h.flow,
            MetricKey::Actual(Metric::SupplyTempC) => &mut h.supply,
            MetricKey::Actual(Metric::ReturnTempC) => &mut h.ret,
            _ => continue,
        };
        *slot = Some(value);
    }
    let rows = grid
        .into_iter()
        .map(|(object_id, hours)| {
            let mut consumption = None::<f64>;
            let mut balance = None::<f64>;
            let mut matched_heat = 0.0;
            let mut err = 0.0;
            let mut n = 0usize;
            for h in hours.values() {
                if let Some(q) = h.heat {
                    *consumption.get_or_insert(0.0) += q;
                }
                if let (Some(q), Some(flow), Some(s), Some(r)) = (h.heat, h.flow, h.supply, h.ret) {
                    *balance.get_or_insert(0.0) += flow * (s - r) * WATER_KWH_PER_M3_K;
                    matched_heat += q;
                }
                if let (Some(q), Some(p)) = (h.heat, h.forecast) {
                    err += (p - q).abs();
                    n += 1;
                }
            }
            EfficiencyRow {
                object_id,
                consumption_kwh: consumption,
                balance_kwh: balance,
                losses_proxy_kwh: balance.map(|b| b - matched_heat),
                forecast_mae_kwh: (n > 0).then(|| err / n as f64),
                forecast_points: n,
            }
        })
        .collect();
    EfficiencyReport {
        window,
        store_version: version,
        rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Quality;
    use crate::store::StoreConfig;

    fn fact(metric: MetricKey, ts: i64, value: f64) -> FactRecord {
        FactRecord {
            object_id: ObjectId::new("a"),
            metric,
            ts,
            value,
            quality: Quality::Good,
        }
    }

    #[test]
    fn balance_and_forecast_error() {
        let store = CubeStore::in_memory(StoreConfig::default()).unwrap();
        store
            .append(vec![
                fact(Metric::HeatEnergyKwh.into(), 0, 100.0),
                fact(Metric::FlowM3h.into(), 0, 4.0),
                fact(Metric::SupplyTempC.into(), 0, 70.0),
                fact(Metric::ReturnTempC.into(), 0, 45.0),
                fact(Metric::HeatEnergyKwh.into(), 3600, 50.0),
                fact(MetricKey::Forecast(Metric::HeatEnergyKwh), 3600, 56.0),
            ])
            .unwrap();
        let r = efficiency_report(&store, Window::new(0, 7200));
        let row = &r.rows[0];
        assert_eq!(row.consumption_kwh, Some(150.0));
        let balance = 4.0 * 25.0 * WATER_KWH_PER_M3_K;
        assert_eq!(row.balance_kwh, Some(balance));
        assert_eq!(row.losses_proxy_kwh, Some(balance - 100.0));
        assert_eq!((row.forecast_mae_kwh, row.forecast_points), (Some(6.0), 1));
    }
}
