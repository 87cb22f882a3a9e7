//! Tumbling-window time series over send timestamps.

use std::collections::BTreeMap;

use serde::Serialize;

use super::{Dataset, PairFilter};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WindowPoint {
    pub window_start_wall_us: i64,
    pub mean_rtt_us: f64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowSeries {
    pub window_s: f64,
    pub points: Vec<WindowPoint>,
}

impl WindowSeries {
    /// Mean of window means weighted by window counts.
    pub fn weighted_mean(&self) -> Option<f64> {
        let total: u64 = self.points.iter().map(|p| p.count).sum();
        (total > 0).then(|| {
            self.points.iter().map(|p| p.mean_rtt_us * p.count as f64).sum::<f64>() / total as f64
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("window_start_wall_us,mean_rtt_us,count\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.window_start_wall_us, p.mean_rtt_us, p.count));
        }
        out
    }
}

/// Windows are aligned to multiples of `window_s` since the Unix epoch; empty
/// windows are omitted.
pub fn window_series(ds: &Dataset, window_s: f64, filter: &PairFilter) -> WindowSeries {
    assert!(window_s > 0.0, "window must be positive");
    let width_us = (window_s * 1e6).round().max(1.0) as i64;
    let mut acc: BTreeMap<i64, (i128, u64)> = BTreeMap::new();
    for o in ds.observations.iter().filter(|o| filter.matches(ds, o)) {
        let start = o.send_wall_ts_us.div_euclid(width_us) * width_us;
        let e = acc.entry(start).or_insert((0, 0));
        e.0 += o.rtt_us as i128;
        e.1 += 1;
    }
    WindowSeries {
        window_s,
        points: acc
            .into_iter()
            .map(|(start, (sum, n))| WindowPoint {
                window_start_wall_us: start,
                mean_rtt_us: sum as f64 / n as f64,
                count: n,
            })
            .collect(),
    }
}
