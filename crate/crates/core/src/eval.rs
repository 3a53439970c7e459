//! The live evaluation protocol and its report formats.
//!
//! At horizon `T` train students contribute their first `T` interactions
//! and test students their first `T - 1` outcomes plus the question and
//! skill of interaction `T`, whose correctness is held out.

use std::fmt::Write as _;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::Predictor;
use crate::data::{Dataset, Split};
use crate::encoding::build_tables;
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, PredictionRecord};

pub const CSV_HEADER: &str = "dataset,model,T,auc,accuracy,logloss,n_test_rows,fit_seconds,predict_seconds,epochs";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiveSchedule {
    horizons: Vec<usize>,
}

impl LiveSchedule {
    pub fn new(horizons: Vec<usize>) -> Result<Self> {
        if horizons.is_empty() {
            return Err(Error::InvalidArgument("schedule is empty".into()));
        }
        if horizons[0] < 2 || horizons.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "schedule must be strictly increasing with every T >= 2, got {horizons:?}"
            )));
        }
        Ok(Self { horizons })
    }

    pub fn horizons(&self) -> &[usize] {
        &self.horizons
    }
}

impl Default for LiveSchedule {
    fn default() -> Self {
        Self {
            horizons: vec![5, 10, 15, 20],
        }
    }
}

/// Result of one model at one horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub dataset: String,
    pub model: String,
    #[serde(rename = "T")]
    pub horizon: usize,
    /// `None` when the test labels at this horizon hold a single class.
    pub auc: Option<f64>,
    pub accuracy: f64,
    pub logloss: f64,
    pub n_test_rows: usize,
    pub fit_seconds: f64,
    pub predict_seconds: f64,
    pub epochs: usize,
}

impl EvalEntry {
    pub fn total_seconds(&self) -> f64 {
        self.fit_seconds + self.predict_seconds
    }
}

/// All horizons of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub model: String,
    pub entries: Vec<EvalEntry>,
    /// Median over horizons of fit plus predict seconds.
    pub median_seconds: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Run `predictor` over every horizon of `schedule`.
pub fn run_live_eval(
    predictor: &mut dyn Predictor,
    dataset: &Dataset,
    dataset_name: &str,
    split: &Split,
    schedule: &LiveSchedule,
) -> Result<(EvalReport, Vec<PredictionRecord>)> {
    let model = predictor.name().to_string();
    let mut entries = Vec::with_capacity(schedule.horizons().len());
    let mut records = Vec::new();
    for &t in schedule.horizons() {
        let encode_start = Instant::now();
        let tables = build_tables(dataset, split, t, t, t - 1)?;
        let encode_seconds = encode_start.elapsed().as_secs_f64();

        let fit_start = Instant::now();
        predictor.prepare(&tables.train)?;
        let fit_seconds = fit_start.elapsed().as_secs_f64();

        let predict_start = Instant::now();
        let scores = predictor.predict(&tables.train, &tables.test)?;
        let predict_seconds = predict_start.elapsed().as_secs_f64() + encode_seconds;

        let expected = tables.test.n_rows();
        if scores.len() != expected {
            return Err(Error::WrongLength {
                model,
                got: scores.len(),
                expected,
            });
        }
        if let Some(row) = scores.iter().position(|s| !(s.is_finite() && (0.0..=1.0).contains(s))) {
            return Err(Error::InvalidScore { model, row });
        }
        let cell: Vec<PredictionRecord> = tables
            .test
            .rows
            .iter()
            .zip(&scores)
            .zip(&tables.test_labels)
            .map(|((row, &score), &truth)| PredictionRecord {
                student_idx: row.student_idx,
                horizon: t,
                score,
                truth,
            })
            .collect();
        let metrics = compute_metrics(&cell)?;
        log::debug!("{model} T={t}: {metrics:?}");
        entries.push(EvalEntry {
            dataset: dataset_name.to_string(),
            model: model.clone(),
            horizon: t,
            auc: metrics.auc,
            accuracy: metrics.accuracy,
            logloss: metrics.logloss,
            n_test_rows: cell.len(),
            fit_seconds,
            predict_seconds,
            epochs: predictor.epochs(),
        });
        records.extend(cell);
    }
    let totals: Vec<f64> = entries.iter().map(EvalEntry::total_seconds).collect();
    Ok((
        EvalReport {
            dataset: dataset_name.to_string(),
            model,
            entries,
            median_seconds: median(&totals),
        },
        records,
    ))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

pub fn write_csv<W: Write>(reports: &[EvalReport], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for e in reports.iter().flat_map(|r| &r.entries) {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            e.dataset,
            e.model,
            e.horizon,
            fmt_opt(e.auc),
            e.accuracy,
            e.logloss,
            e.n_test_rows,
            e.fit_seconds,
            e.predict_seconds,
            e.epochs
        )?;
    }
    Ok(())
}

/// Flat JSON array of every entry.
pub fn to_json(reports: &[EvalReport]) -> String {
    let entries: Vec<&EvalEntry> = reports.iter().flat_map(|r| &r.entries).collect();
    serde_json::to_string_pretty(&entries).expect("entries serialize")
}

/// One row per model, one AUC column per horizon, then the median time.
pub fn format_table(reports: &[EvalReport], schedule: &LiveSchedule) -> String {
    let name_w = reports.iter().map(|r| r.model.len()).max().unwrap_or(5).max(5);
    let mut s = String::new();
    let _ = write!(s, "{:<name_w$}", "Model");
    for t in schedule.horizons() {
        let _ = write!(s, " {:>6}", format!("T={t}"));
    }
    let _ = writeln!(s, " {:>10}", "Time (s)");
    for r in reports {
        let _ = write!(s, "{:<name_w$}", r.model);
        for t in schedule.horizons() {
            let cell = r
                .entries
                .iter()
                .find(|e| e.horizon == *t)
                .and_then(|e| e.auc)
                .map_or_else(|| "NA".to_string(), |a| format!("{a:.3}"));
            let _ = write!(s, " {cell:>6}");
        }
        let _ = writeln!(s, " {:>10.4}", r.median_seconds);
    }
    s
}

/// `a/b time ratio = r` for every pair of models, in report order.
pub fn speedup_lines(reports: &[EvalReport]) -> Vec<String> {
    let mut lines = Vec::new();
    for (i, a) in reports.iter().enumerate() {
        for b in &reports[i + 1..] {
            let r = a.median_seconds / b.median_seconds;
            lines.push(format!("{}/{} time ratio = {r:.2}", a.model, b.model));
        }
    }
    lines
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

struct Panel<'a> {
    title: &'a str,
    top: f64,
    series: Vec<(&'a str, Vec<(f64, f64)>)>,
}

fn draw_panel(svg: &mut String, panel: &Panel<'_>, xs: &[usize]) {
    let (left, width, height) = (70.0, 460.0, 200.0);
    let top = panel.top;
    let ys: Vec<f64> = panel.series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)).collect();
    let (mut lo, mut hi) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &y| (l.min(y), h.max(y)));
    if !lo.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    if hi - lo < 1e-9 {
        lo -= 0.5;
        hi += 0.5;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let x_lo = *xs.first().unwrap_or(&0) as f64;
    let x_hi = (*xs.last().unwrap_or(&1) as f64).max(x_lo + 1.0);
    let px = |x: f64| left + (x - x_lo) / (x_hi - x_lo) * width;
    let py = |y: f64| top + height - (y - lo) / (hi - lo) * height;
    let _ = writeln!(
        svg,
        r#"<rect x="{left}" y="{top}" width="{width}" height="{height}" fill="none" stroke="dimgray"/>"#
    );
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="13" text-anchor="middle">{}</text>"#, left + width / 2.0, top - 8.0, panel.title);
    for &x in xs {
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{}" font-size="11" text-anchor="middle">T={x}</text>"#, px(x as f64), top + height + 15.0);
    }
    for k in 0..=4 {
        let y = lo + (hi - lo) * f64::from(k) / 4.0;
        let _ = writeln!(svg, r#"<text x="{}" y="{:.1}" font-size="10" text-anchor="end">{y:.3}</text>"#, left - 5.0, py(y) + 3.0);
    }
    for (i, (name, pts)) in panel.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" "));
        for &(x, y) in pts {
            let _ = writeln!(svg, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, px(x), py(y));
        }
        let ly = top + 14.0 + 14.0 * i as f64;
        let _ = writeln!(svg, r#"<text x="{}" y="{ly}" font-size="11" fill="{color}">{name}</text>"#, left + width + 10.0);
    }
}

/// Two stacked line charts: AUC against T, then fit plus predict time against T.
pub fn render_svg(reports: &[EvalReport], schedule: &LiveSchedule) -> String {
    let xs = schedule.horizons();
    let auc = Panel {
        title: "AUC",
        top: 30.0,
        series: reports
            .iter()
            .map(|r| {
                let pts = r.entries.iter().filter_map(|e| e.auc.map(|a| (e.horizon as f64, a))).collect();
                (r.model.as_str(), pts)
            })
            .collect(),
    };
    let time = Panel {
        title: "Time per T (s)",
        top: 290.0,
        series: reports
            .iter()
            .map(|r| (r.model.as_str(), r.entries.iter().map(|e| (e.horizon as f64, e.total_seconds())).collect()))
            .collect(),
    };
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="640" height="530" font-family="sans-serif">"#);
    draw_panel(&mut svg, &auc, xs);
    draw_panel(&mut svg, &time, xs);
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_rules() {
        assert!(LiveSchedule::new(vec![5, 10]).is_ok());
        assert!(LiveSchedule::new(vec![10, 5]).is_err());
        assert!(LiveSchedule::new(vec![1, 5]).is_err());
        assert!(LiveSchedule::new(vec![5, 5]).is_err());
        assert!(LiveSchedule::new(vec![]).is_err());
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    fn report(model: &str, auc: Option<f64>, secs: f64) -> EvalReport {
        EvalReport {
            dataset: "d".into(),
            model: model.into(),
            entries: vec![EvalEntry {
                dataset: "d".into(),
                model: model.into(),
                horizon: 5,
                auc,
                accuracy: 0.5,
                logloss: 0.7,
                n_test_rows: 3,
                fit_seconds: secs,
                predict_seconds: 0.0,
                epochs: 1,
            }],
            median_seconds: secs,
        }
    }

    #[test]
    fn table_formats_three_decimals() {
        let s = LiveSchedule::new(vec![5]).unwrap();
        let t = format_table(&[report("gbdt", Some(0.76612), 1.0)], &s);
        assert!(t.contains("0.766"));
        assert_eq!(t.lines().count(), 2);
    }

    #[test]
    fn speedup_uses_median_ratio() {
        let lines = speedup_lines(&[report("gbdt", None, 3.0), report("minipfn", None, 1.5)]);
        assert_eq!(lines, vec!["gbdt/minipfn time ratio = 2.00"]);
    }

    #[test]
    fn csv_marks_missing_auc() {
        let mut buf = Vec::new();
        write_csv(&[report("lr", None, 0.5)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(CSV_HEADER));
        assert!(text.lines().nth(1).unwrap().starts_with("d,lr,5,NA,"));
    }

    #[test]
    fn svg_is_well_formed() {
        let s = LiveSchedule::new(vec![5]).unwrap();
        let svg = render_svg(&[report("lr", Some(0.7), 0.5)], &s);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
    }
}
