//! Order statistics, summaries, histograms, CDFs and the two-sample t-test.

use std::collections::BTreeMap;

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use super::AnalysisError;

/// Nearest-rank percentile over an already sorted slice: the element at
/// 1-based rank `ceil(p/100 * N)`.
pub fn percentile_sorted(sorted: &[i64], p: f64) -> Result<i64, AnalysisError> {
    if sorted.is_empty() {
        return Err(AnalysisError::EmptySamples);
    }
    assert!(p > 0.0 && p <= 100.0, "percentile {p} outside (0, 100]");
    let n = sorted.len();
    Ok(sorted[nearest_rank(p, n).clamp(1, n) - 1])
}

/// `ceil(p/100 * n)`, computed in integers when `p` has at most six
/// decimals so that ranks landing exactly on an integer are not pushed up by
/// binary rounding of `p`.
fn nearest_rank(p: f64, n: usize) -> usize {
    let micro = (p * 1e6).round();
    if (p * 1e6 - micro).abs() < 1e-6 * p.max(1.0) {
        let num = micro as u128 * n as u128;
        num.div_ceil(100_000_000) as usize
    } else {
        ((p * n as f64) / 100.0).ceil() as usize
    }
}

pub fn percentile(samples: &[i64], p: f64) -> Result<i64, AnalysisError> {
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    percentile_sorted(&sorted, p)
}

/// One row of the latency statistics table. Latencies in microseconds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsSummary {
    pub count: usize,
    pub median: i64,
    pub p5: i64,
    pub p25: i64,
    pub mean: f64,
    pub p90: i64,
    pub p95: i64,
    pub p99: i64,
    pub p999: i64,
    pub p9999: i64,
    pub p99999: i64,
    pub max: i64,
}

impl StatsSummary {
    pub const COLUMNS: [&'static str; 11] = [
        "median", "p5", "p25", "mean", "p90", "p95", "p99", "p999", "p9999", "p99999", "max",
    ];

    /// Values in [`StatsSummary::COLUMNS`] order.
    pub fn values(&self) -> [f64; 11] {
        [
            self.median as f64,
            self.p5 as f64,
            self.p25 as f64,
            self.mean,
            self.p90 as f64,
            self.p95 as f64,
            self.p99 as f64,
            self.p999 as f64,
            self.p9999 as f64,
            self.p99999 as f64,
            self.max as f64,
        ]
    }
}

pub fn mean(samples: &[i64]) -> f64 {
    let sum: i128 = samples.iter().map(|&x| x as i128).sum();
    sum as f64 / samples.len() as f64
}

pub fn summarize(samples: &[i64]) -> Result<StatsSummary, AnalysisError> {
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    summarize_sorted(&sorted)
}

pub fn summarize_sorted(sorted: &[i64]) -> Result<StatsSummary, AnalysisError> {
    let p = |q| percentile_sorted(sorted, q);
    Ok(StatsSummary {
        count: sorted.len(),
        median: p(50.0)?,
        p5: p(5.0)?,
        p25: p(25.0)?,
        mean: mean(sorted),
        p90: p(90.0)?,
        p95: p(95.0)?,
        p99: p(99.0)?,
        p999: p(99.9)?,
        p9999: p(99.99)?,
        p99999: p(99.999)?,
        max: *sorted.last().unwrap(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub bin_width_us: i64,
    /// Lower bin edge to count; bins are `[edge, edge + width)`.
    pub bins: BTreeMap<i64, u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.bins.values().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("lower_edge_us,upper_edge_us,count\n");
        for (edge, n) in &self.bins {
            out.push_str(&format!("{edge},{},{n}\n", edge + self.bin_width_us));
        }
        out
    }
}

/// Smallest auto bin width.
pub const MIN_AUTO_BIN_US: i64 = 5;

/// Freedman–Diaconis width `2 * IQR / cbrt(N)`, rounded up, at least 5 μs.
pub fn auto_bin_width(sorted: &[i64]) -> Result<i64, AnalysisError> {
    let iqr = (percentile_sorted(sorted, 75.0)? - percentile_sorted(sorted, 25.0)?) as f64;
    let width = 2.0 * iqr / (sorted.len() as f64).cbrt();
    Ok((width.ceil() as i64).max(MIN_AUTO_BIN_US))
}

/// Pass `bin_width_us = 0` for automatic binning.
pub fn histogram(samples: &[i64], bin_width_us: i64) -> Result<Histogram, AnalysisError> {
    if samples.is_empty() {
        return Err(AnalysisError::EmptySamples);
    }
    assert!(bin_width_us >= 0, "negative bin width");
    let width = if bin_width_us == 0 {
        let mut sorted = samples.to_vec();
        sorted.sort_unstable();
        auto_bin_width(&sorted)?
    } else {
        bin_width_us
    };
    let mut bins = BTreeMap::new();
    for &x in samples {
        *bins.entry(x.div_euclid(width) * width).or_insert(0) += 1;
    }
    Ok(Histogram {
        bin_width_us: width,
        bins,
    })
}

/// Empirical CDF: one point per distinct value, fraction of samples `<=` it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CdfPoints {
    pub points: Vec<(i64, f64)>,
}

impl CdfPoints {
    /// Points whose cumulative fraction lies in `[from, 1]`, e.g. `0.95` for
    /// the top 5% of observations.
    pub fn zoom(&self, from: f64) -> CdfPoints {
        CdfPoints {
            points: self.points.iter().copied().filter(|&(_, f)| f >= from).collect(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("rtt_us,fraction\n");
        for (v, f) in &self.points {
            out.push_str(&format!("{v},{f}\n"));
        }
        out
    }
}

pub fn cdf(samples: &[i64]) -> Result<CdfPoints, AnalysisError> {
    if samples.is_empty() {
        return Err(AnalysisError::EmptySamples);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let mut points: Vec<(i64, f64)> = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n as f64;
        match points.last_mut() {
            Some(last) if last.0 == v => last.1 = frac,
            _ => points.push((v, frac)),
        }
    }
    Ok(CdfPoints { points })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TResult {
    pub t_statistic: f64,
    /// Two-sided.
    pub p_value: f64,
    pub df: f64,
}

/// Above this many degrees of freedom the p-value uses the normal
/// approximation.
pub const NORMAL_APPROX_DF: f64 = 1000.0;

/// Student's two-sample t-test with pooled variance.
pub fn two_sample_t(a: &[f64], b: &[f64]) -> Result<TResult, AnalysisError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(AnalysisError::InsufficientSamples {
            need: 2,
            have: a.len().min(b.len()),
        });
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let ma = a.iter().sum::<f64>() / na;
    let mb = b.iter().sum::<f64>() / nb;
    let ssa: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let ssb: f64 = b.iter().map(|x| (x - mb).powi(2)).sum();
    let df = na + nb - 2.0;
    let pooled = (ssa + ssb) / df;
    let se = (pooled * (1.0 / na + 1.0 / nb)).sqrt();
    let diff = ma - mb;
    if se == 0.0 {
        if diff == 0.0 {
            return Err(AnalysisError::ZeroVariance);
        }
        return Ok(TResult {
            t_statistic: diff.signum() * f64::INFINITY,
            p_value: 0.0,
            df,
        });
    }
    let t = diff / se;
    let tail = if df > NORMAL_APPROX_DF {
        Normal::standard().sf(t.abs())
    } else {
        StudentsT::new(0.0, 1.0, df).expect("df > 0").sf(t.abs())
    };
    Ok(TResult {
        t_statistic: t,
        p_value: (2.0 * tail).clamp(0.0, 1.0),
        df,
    })
}
