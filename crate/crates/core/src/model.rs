//! Domain vocabulary shared by every layer of the pipeline.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// UTC epoch seconds.
pub type Timestamp = i64;

pub const HOUR: i64 = 3_600;
pub const DAY: i64 = 86_400;

/// A monitoring object (heating point, building, substation).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObjectId(pub String);

impl ObjectId {
    pub fn new(id: impl Into<String>) -> Self {
        ObjectId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ObjectId {
    fn from(s: &str) -> Self {
        ObjectId(s.to_string())
    }
}

/// Canonical measured quantities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    HeatEnergyKwh,
    FlowM3h,
    SupplyTempC,
    ReturnTempC,
    ElectricKwh,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::HeatEnergyKwh,
        Metric::FlowM3h,
        Metric::SupplyTempC,
        Metric::ReturnTempC,
        Metric::ElectricKwh,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Metric::HeatEnergyKwh => "heat_energy_kwh",
            Metric::FlowM3h => "flow_m3h",
            Metric::SupplyTempC => "supply_temp_c",
            Metric::ReturnTempC => "return_temp_c",
            Metric::ElectricKwh => "electric_kwh",
        }
    }

    pub fn dimension(self) -> Dimension {
        match self {
            Metric::HeatEnergyKwh | Metric::ElectricKwh => Dimension::Energy,
            Metric::FlowM3h => Dimension::Flow,
            Metric::SupplyTempC | Metric::ReturnTempC => Dimension::Temperature,
        }
    }

    /// Resolves both canonical names and the short device-side codes.
    pub fn from_code(code: &str) -> Option<Metric> {
        Some(match code {
            "heat_energy_kwh" | "heat_energy" | "heat" => Metric::HeatEnergyKwh,
            "flow_m3h" | "flow" => Metric::FlowM3h,
            "supply_temp_c" | "supply_temp" | "t_supply" => Metric::SupplyTempC,
            "return_temp_c" | "return_temp" | "t_return" => Metric::ReturnTempC,
            "electric_kwh" | "electric_energy" | "electric" => Metric::ElectricKwh,
            _ => return None,
        })
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Energy,
    Flow,
    Temperature,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid metric key `{0}`")]
pub struct BadMetricKey(pub String);

/// Column key of the fact store: an actual metric, a forecast of one, or a
/// named what-if scenario forecast.
///
/// Textual forms: `heat_energy_kwh`, `forecast.heat_energy_kwh`,
/// `scenario.<name>.heat_energy_kwh`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MetricKey {
    Actual(Metric),
    Forecast(Metric),
    Scenario { name: String, metric: Metric },
}

impl MetricKey {
    pub fn metric(&self) -> Metric {
        match self {
            MetricKey::Actual(m) | MetricKey::Forecast(m) => *m,
            MetricKey::Scenario { metric, .. } => *metric,
        }
    }

    pub fn is_forecast(&self) -> bool {
        !matches!(self, MetricKey::Actual(_))
    }

    /// Namespace used when persisting a forecast: the default forecast set or
    /// a scenario set.
    pub fn forecast_for(metric: Metric, scenario: Option<&str>) -> MetricKey {
        match scenario {
            None => MetricKey::Forecast(metric),
            Some(name) => MetricKey::Scenario {
                name: name.to_string(),
                metric,
            },
        }
    }
}

impl From<Metric> for MetricKey {
    fn from(m: Metric) -> Self {
        MetricKey::Actual(m)
    }
}

impl fmt::Display for MetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricKey::Actual(m) => write!(f, "{m}"),
            MetricKey::Forecast(m) => write!(f, "forecast.{m}"),
            MetricKey::Scenario { name, metric } => write!(f, "scenario.{name}.{metric}"),
        }
    }
}

impl FromStr for MetricKey {
    type Err = BadMetricKey;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || BadMetricKey(s.to_string());
        let canonical = |code: &str| {
            Metric::ALL
                .into_iter()
                .find(|m| m.code() == code)
                .ok_or_else(bad)
        };
        if let Some(rest) = s.strip_prefix("forecast.") {
            return Ok(MetricKey::Forecast(canonical(rest)?));
        }
        if let Some(rest) = s.strip_prefix("scenario.") {
            let (name, code) = rest.rsplit_once('.').ok_or_else(bad)?;
            if name.is_empty() || name.contains('.') {
                return Err(bad());
            }
            return Ok(MetricKey::Scenario {
                name: name.to_string(),
                metric: canonical(code)?,
            });
        }
        Ok(MetricKey::Actual(canonical(s)?))
    }
}

impl Serialize for MetricKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MetricKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Provenance flag carried by every canonical reading. Ordered from best to
/// worst; `Missing` marks a gap placeholder with no usable value.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Quality {
    #[default]
    Good,
    Interpolated,
    Suspect,
    Missing,
}

impl Quality {
    /// Usable as a model input or a scoring target.
    pub fn is_scorable(self) -> bool {
        matches!(self, Quality::Good | Quality::Interpolated)
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Quality> {
        Some(match c {
            0 => Quality::Good,
            1 => Quality::Interpolated,
            2 => Quality::Suspect,
            3 => Quality::Missing,
            _ => return None,
        })
    }
}

/// Half-open time interval `[from, to)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Window {
    pub from: Timestamp,
    pub to: Timestamp,
}

impl Window {
    pub fn new(from: Timestamp, to: Timestamp) -> Self {
        Window { from, to }
    }

    pub fn is_valid(&self) -> bool {
        self.from < self.to
    }

    pub fn contains(&self, ts: Timestamp) -> bool {
        self.from <= ts && ts < self.to
    }

    pub fn overlaps(&self, other: &Window) -> bool {
        self.from < other.to && other.from < self.to
    }

    pub fn shift(&self, by: i64) -> Window {
        Window::new(self.from + by, self.to + by)
    }
}

/// Serde adapter writing non-finite values as JSON `null` and reading
/// `null` back as NaN.
pub mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}
