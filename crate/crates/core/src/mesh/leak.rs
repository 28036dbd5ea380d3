//! Leak localization from ORC-wire anomaly magnitudes measured at terminals.
//!
//! Each instrumented terminal at distance `d` from the leak reads a magnitude
//! `severity / (1 + d)`. The nearest terminal reads the peak; the leak lies in
//! the adjacent segment whose weaker end reads more. Within the segment the
//! position follows by equating the implied severity at both ends.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Mesh, Pipeline};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakEvent {
    pub pipeline_id: String,
    pub true_pos: f64,
    pub onset: i64,
    pub severity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakLocation {
    pub pipeline_id: String,
    pub segment: (String, String),
    pub est_pos: f64,
    pub confidence: f64,
}

/// What the API exposes for a localized leak.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakAlert {
    pub pipeline_id: String,
    pub segment: (String, String),
    pub est_pos: f64,
    pub onset: i64,
    pub confidence: f64,
    pub detected_at: i64,
}

impl LeakAlert {
    pub fn new(event: &LeakEvent, location: LeakLocation, detected_at: i64) -> Self {
        LeakAlert {
            pipeline_id: location.pipeline_id,
            segment: location.segment,
            est_pos: location.est_pos,
            onset: event.onset,
            confidence: location.confidence,
            detected_at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LeakError {
    #[error("no leak signal")]
    NoLeak,
    #[error("unknown pipeline `{0}`")]
    UnknownPipeline(String),
    #[error("position {pos} outside pipeline of length {length}")]
    OutsidePipeline { pos: f64, length: f64 },
    #[error("segment around terminal `{0}` lacks instrumented terminals")]
    UninstrumentedSegment(String),
}

/// Noise-free magnitude per terminal; `None` where there is no tap.
pub fn terminal_magnitudes(pipeline: &Pipeline, event: &LeakEvent) -> Vec<Option<f64>> {
    pipeline
        .terminals
        .iter()
        .map(|t| {
            t.instrumented
                .then(|| event.severity / (1.0 + (t.pipeline_pos - event.true_pos).abs()))
        })
        .collect()
}

/// Localizes from measured magnitudes, one per terminal in pipeline order.
pub fn locate(pipeline: &Pipeline, magnitudes: &[Option<f64>]) -> Result<LeakLocation, LeakError> {
    let terms = &pipeline.terminals;
    // Peak terminal; ties go downstream.
    let mut peak: Option<(usize, f64)> = None;
    for (i, m) in magnitudes.iter().enumerate() {
        if let Some(m) = *m {
            if m > 0.0 && peak.is_none_or(|(_, best)| m >= best) {
                peak = Some((i, m));
            }
        }
    }
    let (peak, _) = peak.ok_or(LeakError::NoLeak)?;

    let mut candidates = Vec::new();
    for (l, r) in [(peak.wrapping_sub(1), peak), (peak, peak + 1)] {
        if l >= terms.len() || r >= terms.len() {
            continue;
        }
        match (magnitudes[l], magnitudes[r]) {
            (Some(a), Some(b)) => candidates.push((l, a, b)),
            _ => return Err(LeakError::UninstrumentedSegment(terms[peak].terminal_id.clone())),
        }
    }
    // Stronger weak end wins; on a tie the downstream segment is later in
    // the list and `>=` keeps it.
    let mut best: Option<(usize, f64, f64)> = None;
    for c in candidates {
        if best.is_none_or(|b| c.1.min(c.2) >= b.1.min(b.2)) {
            best = Some(c);
        }
    }
    let (l, a_l, a_r) =
        best.ok_or_else(|| LeakError::UninstrumentedSegment(terms[peak].terminal_id.clone()))?;
    let (p_l, p_r) = (terms[l].pipeline_pos, terms[l + 1].pipeline_pos);
    let est = ((a_r * (1.0 + p_r) - a_l * (1.0 - p_l)) / (a_l + a_r)).clamp(p_l, p_r);

    // Agreement of every tap with the fitted (position, severity) pair.
    let severity = a_l * (1.0 + (est - p_l));
    let mut residual = 0.0;
    let mut n = 0usize;
    for (t, m) in terms.iter().zip(magnitudes) {
        if let Some(m) = m {
            let predicted = severity / (1.0 + (t.pipeline_pos - est).abs());
            residual += (m - predicted).abs() / predicted;
            n += 1;
        }
    }
    let confidence = 1.0 / (1.0 + residual / n as f64);

    Ok(LeakLocation {
        pipeline_id: pipeline.pipeline_id.clone(),
        segment: (terms[l].terminal_id.clone(), terms[l + 1].terminal_id.clone()),
        est_pos: est,
        confidence,
    })
}

pub fn localize_leak(mesh: &Mesh, event: &LeakEvent) -> Result<LeakLocation, LeakError> {
    let pipeline = mesh
        .pipelines
        .get(&event.pipeline_id)
        .ok_or_else(|| LeakError::UnknownPipeline(event.pipeline_id.clone()))?;
    if !(0.0..=pipeline.length).contains(&event.true_pos) {
        return Err(LeakError::OutsidePipeline {
            pos: event.true_pos,
            length: pipeline.length,
        });
    }
    if !(event.severity > 0.0) {
        return Err(LeakError::NoLeak);
    }
    locate(pipeline, &terminal_magnitudes(pipeline, event))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_topology, MeshConfig, PipelineConfig, SegmentConfig};

    fn mesh(uninstrumented: Vec<f64>) -> Mesh {
        build_topology(&MeshConfig {
            params: Default::default(),
            segments: vec![SegmentConfig {
                id: "s".into(),
                coordinator: "c".into(),
                position: [0.0, 0.0],
                nodes: vec![],
            }],
            pipelines: vec![PipelineConfig {
                id: "main".into(),
                length: 1500.0,
                spacing: None,
                uplink: "c".into(),
                repeaters: true,
                uninstrumented,
                bearing: 0.0,
            }],
        })
        .unwrap()
    }

    fn leak(pos: f64) -> LeakEvent {
        LeakEvent {
            pipeline_id: "main".into(),
            true_pos: pos,
            onset: 0,
            severity: 0.8,
        }
    }

    #[test]
    fn mid_segment_leak() {
        let loc = localize_leak(&mesh(vec![]), &leak(450.0)).unwrap();
        assert_eq!(loc.segment, ("T300".to_string(), "T600".to_string()));
        assert!((loc.est_pos - 450.0).abs() < 1e-9);
        assert!((loc.confidence - 1.0).abs() < 1e-12);
    }

    #[test]
    fn terminal_leak_goes_downstream() {
        let loc = localize_leak(&mesh(vec![]), &leak(600.0)).unwrap();
        assert_eq!(loc.segment, ("T600".to_string(), "T900".to_string()));
        assert_eq!(loc.est_pos, 600.0);
        let end = localize_leak(&mesh(vec![]), &leak(1500.0)).unwrap();
        assert_eq!(end.segment, ("T1200".to_string(), "T1500".to_string()));
        let start = localize_leak(&mesh(vec![]), &leak(0.0)).unwrap();
        assert_eq!(start.segment, ("T0".to_string(), "T300".to_string()));
    }

    #[test]
    fn missing_tap_is_reported() {
        assert_eq!(
            localize_leak(&mesh(vec![600.0]), &leak(500.0)),
            Err(LeakError::UninstrumentedSegment("T300".into()))
        );
        let mut none = leak(500.0);
        none.severity = 0.0;
        assert_eq!(localize_leak(&mesh(vec![]), &none), Err(LeakError::NoLeak));
    }

    #[test]
    fn noise_lowers_confidence_and_estimate_stays_in_segment() {
        let m = mesh(vec![]);
        let p = &m.pipelines["main"];
        let mut mags = terminal_magnitudes(p, &leak(710.0));
        for (i, v) in mags.iter_mut().enumerate() {
            *v = v.map(|x| x * if i % 2 == 0 { 1.05 } else { 0.95 });
        }
        let loc = locate(p, &mags).unwrap();
        assert!(loc.confidence < 1.0);
        assert!((600.0..=900.0).contains(&loc.est_pos));
    }
}
