//! Tracking-error metrics: mean absolute errors over the whole run plus
//! per-signal overshoot and settling time around target step events.

use serde::{Deserialize, Serialize};

use crate::sim::trace::SimTrace;
use crate::sim::SimError;

/// Target jumps larger than these count as step events (bar, fraction).
const EVENT_THRESHOLD: [f64; 2] = [0.01, 0.005];
/// Settling band as a fraction of the step magnitude.
const SETTLING_BAND: f64 = 0.02;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean absolute intake-pressure tracking error, bar.
    pub mae_pim: f64,
    /// Mean absolute EGR-rate tracking error, fraction.
    pub mae_egr: f64,
    /// Worst overshoot per signal across step events, percent of step size;
    /// absent when the run contains no step events for that signal.
    pub overshoot_pct: [Option<f64>; 2],
    /// Worst 2%-band settling time per signal across step events, s; absent
    /// when there are no events or a response never settles in its window.
    pub settling_time_s: [Option<f64>; 2],
}

/// Compute metrics from a trace. Step events are detected per signal from
/// target jumps; each event's window runs to the next event on the same
/// signal or the end of the trace.
pub fn compute_metrics(trace: &SimTrace) -> Result<Metrics, SimError> {
    if trace.records.is_empty() {
        return Err(SimError::EmptyTrace);
    }
    let n = trace.records.len() as f64;
    let mut mae = [0.0f64; 2];
    for rec in &trace.records {
        mae[0] += (rec.x[0] - rec.r[0]).abs();
        mae[1] += (rec.x[1] - rec.r[1]).abs();
    }
    mae[0] /= n;
    mae[1] /= n;

    let mut overshoot: [Option<f64>; 2] = [None, None];
    let mut settling: [Option<f64>; 2] = [None, None];
    for s in 0..2 {
        let events = detect_events(trace, s);
        for (idx, &(start, step)) in events.iter().enumerate() {
            let end = events
                .get(idx + 1)
                .map(|&(next, _)| next)
                .unwrap_or(trace.records.len());
            let r_new = trace.records[start].r[s];
            let dir = step.signum();
            let mut peak = 0.0f64;
            for rec in &trace.records[start..end] {
                peak = peak.max(dir * (rec.x[s] - r_new));
            }
            let os = 100.0 * peak / step.abs();
            overshoot[s] = Some(overshoot[s].map_or(os, |prev: f64| prev.max(os)));

            let band = SETTLING_BAND * step.abs();
            let mut settle_idx = None;
            for k in (start..end).rev() {
                if (trace.records[k].x[s] - r_new).abs() > band {
                    break;
                }
                settle_idx = Some(k);
            }
            if let Some(k) = settle_idx {
                let t = (k - start) as f64 * trace.sample_period;
                settling[s] = Some(settling[s].map_or(t, |prev: f64| prev.max(t)));
            }
        }
    }

    Ok(Metrics {
        mae_pim: mae[0],
        mae_egr: mae[1],
        overshoot_pct: overshoot,
        settling_time_s: settling,
    })
}

/// (start index, signed step size) of each target step event on signal `s`.
fn detect_events(trace: &SimTrace, s: usize) -> Vec<(usize, f64)> {
    let mut events = Vec::new();
    for k in 1..trace.records.len() {
        let dr = trace.records[k].r[s] - trace.records[k - 1].r[s];
        if dr.abs() > EVENT_THRESHOLD[s] {
            events.push((k, dr));
        }
    }
    events
}
