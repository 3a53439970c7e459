//! Wall-time scaling of in-context prediction in the number of students and
//! in the horizon.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::Predictor;
use crate::data::split_indices;
use crate::encoding::build_tables;
use crate::error::Result;
use crate::eval::median;
use crate::minipfn::{MiniPfn, MiniPfnWeights};
use crate::synth::{synth_dataset, SynthParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchParams {
    pub sizes: Vec<usize>,
    pub horizons: Vec<usize>,
    /// Students used while varying the horizon.
    pub fixed_students: usize,
    /// Horizon used while varying the number of students.
    pub fixed_horizon: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchParams {
    fn default() -> Self {
        Self {
            sizes: vec![128, 256, 512, 1024],
            horizons: vec![5, 10, 15, 20],
            fixed_students: 256,
            fixed_horizon: 10,
            repeats: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    Students,
    Horizon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub axis: Axis,
    pub n_students: usize,
    pub horizon: usize,
    pub n_context: usize,
    pub n_query: usize,
    pub median_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub slope_students: Option<f64>,
    pub slope_horizon: Option<f64>,
}

/// Least-squares slope of `ln y` against `ln x`; `None` with fewer than two distinct `x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = xs.iter().zip(ys).filter(|(x, y)| **x > 0.0 && **y > 0.0).map(|(x, y)| (x.ln(), y.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if pts.len() < 2 || sxx < 1e-12 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

fn time_cell(model: &MiniPfn, n_students: usize, horizon: usize, params: &BenchParams, axis: Axis) -> Result<BenchRow> {
    let ds = synth_dataset(&SynthParams {
        n_students,
        min_len: horizon + 1,
        max_len: horizon + 10,
        seed: params.seed,
        ..Default::default()
    });
    let split = split_indices(n_students, 0.8, params.seed)?;
    let tables = build_tables(&ds, &split, horizon, horizon, horizon - 1)?;
    let mut times = Vec::with_capacity(params.repeats);
    for _ in 0..params.repeats.max(1) {
        let start = Instant::now();
        let scores = model.predict(&tables.train, &tables.test)?;
        times.push(start.elapsed().as_secs_f64());
        std::hint::black_box(scores);
    }
    Ok(BenchRow {
        axis,
        n_students,
        horizon,
        n_context: tables.train.n_rows(),
        n_query: tables.test.n_rows(),
        median_seconds: median(&times),
    })
}

pub fn run_bench(weights: MiniPfnWeights, params: &BenchParams) -> Result<BenchReport> {
    weights.config.check_width(params.horizons.iter().copied().chain([params.fixed_horizon]).max().unwrap_or(2))?;
    let model = MiniPfn::new(std::sync::Arc::new(weights));
    let mut rows = Vec::new();
    for &n in &params.sizes {
        rows.push(time_cell(&model, n, params.fixed_horizon, params, Axis::Students)?);
    }
    for &t in &params.horizons {
        rows.push(time_cell(&model, params.fixed_students, t, params, Axis::Horizon)?);
    }
    let slope = |axis: Axis, x: fn(&BenchRow) -> usize| {
        let sel: Vec<&BenchRow> = rows.iter().filter(|r| r.axis == axis).collect();
        let xs: Vec<f64> = sel.iter().map(|r| x(r) as f64).collect();
        let ys: Vec<f64> = sel.iter().map(|r| r.median_seconds).collect();
        loglog_slope(&xs, &ys)
    };
    let slope_students = slope(Axis::Students, |r| r.n_students);
    let slope_horizon = slope(Axis::Horizon, |r| r.horizon);
    Ok(BenchReport {
        rows,
        slope_students,
        slope_horizon,
    })
}

pub fn write_bench_csv<W: Write>(report: &BenchReport, mut out: W) -> std::io::Result<()> {
    writeln!(out, "axis,n_students,T,n_context,n_query,median_seconds")?;
    for r in &report.rows {
        let axis = match r.axis {
            Axis::Students => "N",
            Axis::Horizon => "T",
        };
        writeln!(out, "{axis},{},{},{},{},{}", r.n_students, r.horizon, r.n_context, r.n_query, r.median_seconds)?;
    }
    Ok(())
}
