//! Cohort summaries, box-plot statistics and outlier listings.

use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{write_lines, CaseMetrics, Metric};
use crate::phantom::Cohort;

/// Summary of one metric over one cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub metric: Metric,
    pub n: usize,
    /// Cases whose value is undefined for this metric.
    pub excluded: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Sample standard deviation; `None` for a single case.
    pub sd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortSummary {
    pub cohort: Cohort,
    pub cases: usize,
    pub flagged: usize,
    pub metrics: Vec<MetricSummary>,
}

/// Values sorted ascending, so summaries do not depend on case order.
fn sorted_values(cases: &[&CaseMetrics], m: Metric) -> (Vec<f64>, usize) {
    let mut v: Vec<f64> = cases.iter().filter_map(|c| c.get(m)).collect();
    let excluded = cases.len() - v.len();
    v.sort_by(f64::total_cmp);
    (v, excluded)
}

fn summarize_values(metric: Metric, v: &[f64], excluded: usize) -> Option<MetricSummary> {
    let n = v.len();
    if n == 0 {
        return None;
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    let sd = (n > 1).then(|| {
        let ss: f64 = v.iter().map(|x| (x - mean).powi(2)).sum();
        (ss / (n - 1) as f64).sqrt()
    });
    Some(MetricSummary {
        metric,
        n,
        excluded,
        min: v[0],
        max: v[n - 1],
        mean,
        sd,
    })
}

/// Summarizes the cases of one cohort. Metrics with no defined value are
/// left out.
pub fn summarize(cohort: Cohort, cases: &[CaseMetrics]) -> Result<CohortSummary> {
    let mine: Vec<&CaseMetrics> = cases.iter().filter(|c| c.cohort == cohort).collect();
    if mine.is_empty() {
        return Err(Error::data(format!("no {cohort} cases to summarize")));
    }
    let metrics = Metric::ALL
        .iter()
        .filter_map(|&m| {
            let (v, excluded) = sorted_values(&mine, m);
            summarize_values(m, &v, excluded)
        })
        .collect();
    Ok(CohortSummary {
        cohort,
        cases: mine.len(),
        flagged: mine.iter().filter(|c| c.flagged()).count(),
        metrics,
    })
}

/// Summaries of every cohort present, normal first.
pub fn summarize_all(cases: &[CaseMetrics]) -> Result<Vec<CohortSummary>> {
    if cases.is_empty() {
        return Err(Error::data("no cases to summarize"));
    }
    [Cohort::Normal, Cohort::Covid]
        .into_iter()
        .filter(|&c| cases.iter().any(|x| x.cohort == c))
        .map(|c| summarize(c, cases))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxplotData {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    /// Most extreme values inside the Tukey fences.
    pub whisker_low: f64,
    pub whisker_high: f64,
    /// `q1 - 1.5·IQR` and `q3 + 1.5·IQR`.
    pub fence_low: f64,
    pub fence_high: f64,
    pub outliers: Vec<f64>,
}

/// Quantile of sorted data with linear interpolation between order
/// statistics at position `(n - 1)·p`.
pub fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Quartiles, Tukey whiskers and outliers; needs at least four values.
pub fn boxplot_data(values: &[f64]) -> Result<BoxplotData> {
    if values.len() < 4 {
        return Err(Error::data(format!("box plot needs at least 4 values, got {}", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("box plot values must be finite"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&v, 0.25);
    let median = quantile_sorted(&v, 0.5);
    let q3 = quantile_sorted(&v, 0.75);
    let iqr = q3 - q1;
    let fence_low = q1 - 1.5 * iqr;
    let fence_high = q3 + 1.5 * iqr;
    let inside = v.iter().copied().filter(|&x| x >= fence_low && x <= fence_high);
    let whisker_low = inside.clone().fold(f64::INFINITY, f64::min);
    let whisker_high = inside.fold(f64::NEG_INFINITY, f64::max);
    let outliers = v.iter().copied().filter(|&x| x < fence_low || x > fence_high).collect();
    Ok(BoxplotData {
        q1,
        median,
        q3,
        whisker_low,
        whisker_high,
        fence_low,
        fence_high,
        outliers,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierEntry {
    pub case_id: String,
    pub cohort: Cohort,
    pub metric: Metric,
    pub value: f64,
    /// The fence that was crossed.
    pub bound: f64,
}

/// Cases with any metric outside their cohort's Tukey fences, sorted by
/// case id and then metric. Cohort-metric pairs with fewer than four
/// defined values are skipped.
pub fn outlier_report(cases: &[CaseMetrics]) -> Vec<OutlierEntry> {
    let mut out = Vec::new();
    for cohort in [Cohort::Normal, Cohort::Covid] {
        let mine: Vec<&CaseMetrics> = cases.iter().filter(|c| c.cohort == cohort).collect();
        for m in Metric::ALL {
            let (v, _) = sorted_values(&mine, m);
            let Ok(b) = boxplot_data(&v) else { continue };
            for c in &mine {
                let Some(x) = c.get(m) else { continue };
                let bound = if x < b.fence_low {
                    b.fence_low
                } else if x > b.fence_high {
                    b.fence_high
                } else {
                    continue;
                };
                out.push(OutlierEntry {
                    case_id: c.case_id.clone(),
                    cohort,
                    metric: m,
                    value: x,
                    bound,
                });
            }
        }
    }
    out.sort_by(|a, b| a.case_id.cmp(&b.case_id).then(a.metric.cmp(&b.metric)));
    out
}

pub const SUMMARY_FILE: &str = "summary.csv";
pub const BOXPLOT_FILE: &str = "boxplot.csv";
pub const OUTLIERS_FILE: &str = "outliers.txt";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `summary.csv`, `boxplot.csv` and `outliers.txt` into `dir`.
///
/// Returns warnings for box plots skipped because a cohort has fewer than
/// four defined values.
pub fn write_report(cases: &[CaseMetrics], dir: &Path) -> Result<Vec<String>> {
    let summaries = summarize_all(cases)?;
    std::fs::create_dir_all(dir)?;
    let mut warnings = Vec::new();

    let mut w = csv::Writer::from_path(dir.join(SUMMARY_FILE))?;
    w.write_record(["cohort", "metric", "n", "excluded", "min", "max", "mean", "sd"])?;
    for s in &summaries {
        for m in &s.metrics {
            w.write_record([
                s.cohort.to_string(),
                m.metric.label().to_string(),
                m.n.to_string(),
                m.excluded.to_string(),
                m.min.to_string(),
                m.max.to_string(),
                m.mean.to_string(),
                opt(m.sd),
            ])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(BOXPLOT_FILE))?;
    w.write_record([
        "cohort",
        "metric",
        "q1",
        "median",
        "q3",
        "whisker_low",
        "whisker_high",
        "outliers",
    ])?;
    for s in &summaries {
        let mine: Vec<&CaseMetrics> = cases.iter().filter(|c| c.cohort == s.cohort).collect();
        for m in Metric::BOXPLOT {
            let (v, _) = sorted_values(&mine, m);
            match boxplot_data(&v) {
                Ok(b) => w.write_record([
                    s.cohort.to_string(),
                    m.label().to_string(),
                    b.q1.to_string(),
                    b.median.to_string(),
                    b.q3.to_string(),
                    b.whisker_low.to_string(),
                    b.whisker_high.to_string(),
                    b.outliers.iter().map(f64::to_string).collect::<Vec<_>>().join(";"),
                ])?,
                Err(_) => warnings.push(format!(
                    "{} {}: {} values, box plot skipped",
                    s.cohort,
                    m.label(),
                    v.len()
                )),
            }
        }
    }
    w.flush()?;

    let mut lines = Vec::new();
    for s in &summaries {
        let flagged: Vec<&str> = cases
            .iter()
            .filter(|c| c.cohort == s.cohort && c.flagged())
            .map(|c| c.case_id.as_str())
            .collect();
        lines.push(format!(
            "# {}: {} cases, {} with undefined metrics{}{}",
            s.cohort,
            s.cases,
            s.flagged,
            if flagged.is_empty() { "" } else { ": " },
            flagged.join(" ")
        ));
    }
    for e in outlier_report(cases) {
        lines.push(format!(
            "{}\t{}\t{}\t{}\t{}",
            e.case_id,
            e.cohort,
            e.metric.key(),
            e.value,
            e.bound
        ));
    }
    write_lines(&dir.join(OUTLIERS_FILE), &lines)?;
    Ok(warnings)
}
