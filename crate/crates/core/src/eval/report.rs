use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::stats::{correlate, CorrelationResult};
use crate::error::{Error, Result};
use crate::gating::{stratify_by_mi, GateMetric, GateMetrics, Quartile, StratificationResult};
use crate::regions::BBox;

/// ΔIoU below this counts as a failure.
pub const FAILURE_THRESHOLD: f64 = -0.20;

const BUCKETS: [(&str, f64, f64); 3] = [
    ("[0,0.2)", 0.0, 0.2),
    ("[0.2,0.8]", 0.2, 0.8),
    ("(0.8,1]", 0.8, 1.0),
];

/// Outcome of fusing one evaluation region on its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub region_id: String,
    pub scene_id: String,
    pub bbox: BBox,
    pub area: usize,
    pub metrics: GateMetrics,
    pub stage1_passed: bool,
    pub passed_gate: bool,
    pub base_iou: f32,
    pub fused_iou: f32,
    /// `fused_iou - base_iou`, absolute IoU points.
    pub delta_iou: f32,
    pub success: bool,
}

/// What `run` writes and `eval` reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecords {
    pub policy: String,
    pub records: Vec<RegionRecord>,
}

impl RunRecords {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub retrieved: usize,
    pub total: usize,
    pub fraction: f64,
    /// `1 - fraction`: saving relative to retrieving for every region.
    pub reduction_vs_always_on: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementSummary {
    pub regions: usize,
    pub mean_base_iou: f64,
    pub mean_fused_iou: f64,
    pub mean_delta_iou: f64,
    /// `mean_fused / mean_base - 1`, when the base mean is non-zero.
    pub relative_improvement: Option<f64>,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketSummary {
    pub label: String,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_delta_iou: Option<f64>,
    pub success_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureSummary {
    pub threshold: f64,
    pub count: usize,
    pub mean_base_iou: Option<f64>,
    pub mean_similarity: Option<f64>,
    pub region_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    pub region_count: usize,
    pub cost: CostSummary,
    /// Regions that passed the gate.
    pub targeted: ImprovementSummary,
    /// Every region, as if retrieval were always on.
    pub always_on: ImprovementSummary,
    /// Each metric against ΔIoU over regions that had retrieval matches.
    pub correlations: Vec<CorrelationResult>,
    /// Metrics whose correlation is undefined on this data.
    pub undefined_correlations: Vec<String>,
    pub stratification: Option<StratificationResult>,
    /// Base-IoU buckets over every region.
    pub buckets: Vec<BucketSummary>,
    pub failures: FailureSummary,
    pub records: Vec<RegionRecord>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn summarize<'a>(records: impl Iterator<Item = &'a RegionRecord> + Clone) -> ImprovementSummary {
    let regions = records.clone().count();
    let mean_base_iou = mean(records.clone().map(|r| r.base_iou as f64)).unwrap_or(0.0);
    let mean_fused_iou = mean(records.clone().map(|r| r.fused_iou as f64)).unwrap_or(0.0);
    let mean_delta_iou = mean(records.clone().map(|r| r.delta_iou as f64)).unwrap_or(0.0);
    let success_rate = mean(records.map(|r| if r.success { 1.0 } else { 0.0 })).unwrap_or(0.0);
    ImprovementSummary {
        regions,
        mean_base_iou,
        mean_fused_iou,
        mean_delta_iou,
        relative_improvement: (mean_base_iou > 0.0).then(|| mean_fused_iou / mean_base_iou - 1.0),
        success_rate,
    }
}

fn bucket_of(base_iou: f32) -> usize {
    if base_iou < 0.2 {
        0
    } else if base_iou <= 0.8 {
        1
    } else {
        2
    }
}

pub fn evaluate(records: &[RegionRecord], policy: &str) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Validation("no region records to evaluate".into()));
    }
    let n = records.len();
    let retrieved = records.iter().filter(|r| r.passed_gate).count();
    let fraction = retrieved as f64 / n as f64;

    let with_matches: Vec<&RegionRecord> = records
        .iter()
        .filter(|r| r.metrics.best_similarity.is_some())
        .collect();
    let mut correlations = Vec::new();
    let mut undefined_correlations = Vec::new();
    for metric in GateMetric::ALL {
        let (xs, ys): (Vec<f64>, Vec<f64>) = with_matches
            .iter()
            .filter_map(|r| Some((metric.value(&r.metrics)?, r.delta_iou as f64)))
            .unzip();
        match correlate(metric.name(), &xs, &ys) {
            Ok(c) => correlations.push(c),
            Err(_) => undefined_correlations.push(metric.name().to_string()),
        }
    }

    let population: Vec<GateMetrics> = records.iter().map(|r| r.metrics.clone()).collect();
    let deltas: Vec<f64> = records.iter().map(|r| r.delta_iou as f64).collect();
    let stratification = if n >= 4 {
        Some(stratify_by_mi(&population, Some(&deltas))?)
    } else {
        None
    };

    let buckets = BUCKETS
        .iter()
        .enumerate()
        .map(|(i, &(label, lower, upper))| {
            let members = records.iter().filter(|r| bucket_of(r.base_iou) == i);
            BucketSummary {
                label: label.to_string(),
                lower,
                upper,
                count: members.clone().count(),
                mean_delta_iou: mean(members.clone().map(|r| r.delta_iou as f64)),
                success_rate: mean(members.map(|r| if r.success { 1.0 } else { 0.0 })),
            }
        })
        .collect();

    let failed: Vec<&RegionRecord> = records
        .iter()
        .filter(|r| r.delta_iou < FAILURE_THRESHOLD as f32)
        .collect();
    let failures = FailureSummary {
        threshold: FAILURE_THRESHOLD,
        count: failed.len(),
        mean_base_iou: mean(failed.iter().map(|r| r.base_iou as f64)),
        mean_similarity: mean(
            failed
                .iter()
                .filter_map(|r| r.metrics.best_similarity.map(f64::from)),
        ),
        region_ids: failed.iter().map(|r| r.region_id.clone()).collect(),
    };

    Ok(EvalReport {
        policy: policy.to_string(),
        region_count: n,
        cost: CostSummary {
            retrieved,
            total: n,
            fraction,
            reduction_vs_always_on: 1.0 - fraction,
        },
        targeted: summarize(records.iter().filter(|r| r.passed_gate)),
        always_on: summarize(records.iter()),
        correlations,
        undefined_correlations,
        stratification,
        buckets,
        failures,
        records: records.to_vec(),
    })
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Formats like C's `%.9g`.
pub fn fmt_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent in scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..9).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_fraction(mantissa), exp.abs())
    } else {
        let decimals = (8 - exp) as usize;
        trim_fraction(&format!("{x:.decimals$}")).to_string()
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_sig9).unwrap_or_default()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const REGION_COLUMNS: [&str; 21] = [
    "region_id",
    "scene_id",
    "x0",
    "y0",
    "x1",
    "y1",
    "area",
    "uncertainty",
    "mean_mi",
    "mean_entropy",
    "mean_epkl",
    "max_prob",
    "margin",
    "best_similarity",
    "combined_oracle",
    "base_iou",
    "fused_iou",
    "delta_iou",
    "stage1_passed",
    "passed_gate",
    "success",
];

fn region_row(r: &RegionRecord) -> Vec<String> {
    let m = &r.metrics;
    let f = |v: f32| fmt_sig9(v as f64);
    vec![
        r.region_id.clone(),
        r.scene_id.clone(),
        r.bbox.x0.to_string(),
        r.bbox.y0.to_string(),
        r.bbox.x1.to_string(),
        r.bbox.y1.to_string(),
        r.area.to_string(),
        f(m.uncertainty),
        f(m.mean_mi),
        f(m.mean_entropy),
        f(m.mean_epkl),
        f(m.max_prob),
        f(m.margin),
        opt(m.best_similarity.map(f64::from)),
        opt(m.combined_oracle.map(f64::from)),
        f(r.base_iou),
        f(r.fused_iou),
        f(r.delta_iou),
        r.stage1_passed.to_string(),
        r.passed_gate.to_string(),
        r.success.to_string(),
    ]
}

/// Mean ΔIoU when only the top `k` regions by `metric` are fused, for `k`
/// at every 5% of the population.
fn cost_curve(report: &EvalReport) -> Vec<Vec<String>> {
    let n = report.records.len();
    let mut rows = Vec::new();
    for metric in GateMetric::ALL {
        let mut scored: Vec<(f64, &RegionRecord)> = report
            .records
            .iter()
            .filter_map(|r| Some((metric.value(&r.metrics)?, r)))
            .collect();
        if scored.len() != n {
            continue;
        }
        scored.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| a.1.region_id.cmp(&b.1.region_id))
        });
        for step in 1..=20 {
            let fraction = step as f64 / 20.0;
            let k = (fraction * n as f64).floor() as usize;
            if k == 0 {
                continue;
            }
            let delta = mean(scored[..k].iter().map(|(_, r)| r.delta_iou as f64)).unwrap_or(0.0);
            rows.push(vec![
                metric.name().to_string(),
                fmt_sig9(fraction),
                k.to_string(),
                fmt_sig9(delta),
            ]);
        }
    }
    rows.push(vec![
        format!("policy:{}", report.policy),
        fmt_sig9(report.cost.fraction),
        report.cost.retrieved.to_string(),
        fmt_sig9(report.targeted.mean_delta_iou),
    ]);
    rows
}

/// Writes `report.json`, `regions.csv` and `plots/*.csv` under `dir`.
pub fn emit_report(report: &EvalReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let plots = dir.join("plots");
    fs::create_dir_all(&plots).map_err(|e| Error::io(&plots, e))?;

    let json_path = dir.join("report.json");
    let mut text = serde_json::to_string_pretty(report).map_err(|e| Error::json(&json_path, e))?;
    text.push('\n');
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;

    let rows: Vec<Vec<String>> = report.records.iter().map(region_row).collect();
    write_rows(&dir.join("regions.csv"), &REGION_COLUMNS, &rows)?;

    let mut scatter = Vec::new();
    for metric in GateMetric::ALL {
        for r in &report.records {
            if let Some(v) = metric.value(&r.metrics) {
                scatter.push(vec![
                    metric.name().to_string(),
                    r.region_id.clone(),
                    fmt_sig9(v),
                    fmt_sig9(r.delta_iou as f64),
                ]);
            }
        }
    }
    write_rows(
        &plots.join("metric_scatter.csv"),
        &["metric", "region_id", "value", "delta_iou"],
        &scatter,
    )?;

    let mut bars = Vec::new();
    if let Some(s) = &report.stratification {
        for band in &s.bands {
            let (lower, upper) = match band.quartile {
                Quartile::Q1 => (None, Some(s.cuts[0])),
                Quartile::Q2 => (Some(s.cuts[0]), Some(s.cuts[1])),
                Quartile::Q3 => (Some(s.cuts[1]), Some(s.cuts[2])),
                Quartile::Q4 => (Some(s.cuts[2]), None),
            };
            let c = band.similarity_correlation.as_ref();
            bars.push(vec![
                format!("{:?}", band.quartile),
                opt(lower),
                opt(upper),
                band.count.to_string(),
                opt(c.map(|c| c.r)),
                opt(c.map(|c| c.p)),
                c.map(|c| c.n.to_string()).unwrap_or_default(),
            ]);
        }
    }
    write_rows(
        &plots.join("quartile_correlation.csv"),
        &["quartile", "mi_lower", "mi_upper", "count", "r", "p", "n"],
        &bars,
    )?;

    write_rows(
        &plots.join("cost_curve.csv"),
        &["metric", "fraction", "regions", "mean_delta_iou"],
        &cost_curve(report),
    )
}
