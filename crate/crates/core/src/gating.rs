//! Region-level gating signals, mutual-information quartile stratification,
//! and the gate policies that decide which regions get retrieval.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{correlate, region_iou, CorrelationResult};
use crate::regions::{percentile_sorted, RegionProposal};
use crate::retrieval::RetrievalMatch;
use crate::uncertainty::{EnsembleAnalysis, UncertaintyKind};

/// Every candidate gating signal for one region. Means are taken over the
/// region's component pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateMetrics {
    pub region_id: String,
    pub scene_id: String,
    /// Mean of the configured uncertainty kind (the region score).
    pub uncertainty: f32,
    pub mean_mi: f32,
    pub mean_entropy: f32,
    pub mean_epkl: f32,
    /// Mean of the top class probability of the ensemble mean.
    pub max_prob: f32,
    /// Mean of top-1 minus top-2 probability of the ensemble mean.
    pub margin: f32,
    pub best_similarity: Option<f32>,
    pub base_iou: Option<f32>,
    /// `uncertainty * (1 - base_iou)`; needs ground truth.
    pub combined_oracle: Option<f32>,
}

/// Ground truth for oracle metrics.
#[derive(Debug, Clone, Copy)]
pub struct GroundTruth<'a> {
    pub labels: &'a [i32],
    pub void_label: i32,
}

pub fn compute_metrics(
    region: &RegionProposal,
    analysis: &EnsembleAnalysis,
    kind: UncertaintyKind,
    base_pred: &[i32],
    truth: Option<GroundTruth<'_>>,
) -> Result<GateMetrics> {
    let mean = &analysis.mean;
    if base_pred.len() != mean.pixels() || region.image_height * region.image_width != mean.pixels()
    {
        return Err(Error::Shape(format!(
            "region `{}` does not match a {}x{} prediction",
            region.region_id, mean.height, mean.width
        )));
    }

    let (mut max_sum, mut margin_sum) = (0f64, 0f64);
    for &p in &region.pixels {
        let (mut top1, mut top2) = (f32::NEG_INFINITY, f32::NEG_INFINITY);
        for v in mean.pixel(p) {
            if v > top1 {
                top2 = top1;
                top1 = v;
            } else if v > top2 {
                top2 = v;
            }
        }
        max_sum += top1 as f64;
        margin_sum += (top1 - top2) as f64;
    }
    let n = region.pixels.len().max(1) as f64;

    let uncertainty = region.masked_mean(&analysis.map(kind).values);
    let base_iou = match truth {
        Some(t) => {
            let pred = region.bbox.crop(base_pred, mean.width);
            let gt = region.bbox.crop(t.labels, mean.width);
            Some(region_iou(&pred, &gt, mean.classes, t.void_label)?)
        }
        None => None,
    };

    Ok(GateMetrics {
        region_id: region.region_id.clone(),
        scene_id: region.scene_id.clone(),
        uncertainty,
        mean_mi: region.masked_mean(&analysis.mutual_information.values),
        mean_entropy: region.masked_mean(&analysis.entropy.values),
        mean_epkl: region.masked_mean(&analysis.epkl.values),
        max_prob: (max_sum / n) as f32,
        margin: (margin_sum / n) as f32,
        best_similarity: None,
        combined_oracle: base_iou.map(|b| uncertainty * (1.0 - b)),
        base_iou,
    })
}

/// A scalar gating signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMetric {
    Uncertainty,
    Mi,
    Entropy,
    Epkl,
    MaxProb,
    InvMaxProb,
    Margin,
    InvMargin,
    Similarity,
    /// `uncertainty * (1 - max_prob)`
    UncertaintyXInvMaxProb,
    /// `uncertainty * epkl`
    UncertaintyXEpkl,
    BaseIou,
    CombinedOracle,
}

impl GateMetric {
    pub const ALL: [GateMetric; 13] = [
        GateMetric::Uncertainty,
        GateMetric::Mi,
        GateMetric::Entropy,
        GateMetric::Epkl,
        GateMetric::MaxProb,
        GateMetric::InvMaxProb,
        GateMetric::Margin,
        GateMetric::InvMargin,
        GateMetric::Similarity,
        GateMetric::UncertaintyXInvMaxProb,
        GateMetric::UncertaintyXEpkl,
        GateMetric::BaseIou,
        GateMetric::CombinedOracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GateMetric::Uncertainty => "uncertainty",
            GateMetric::Mi => "mi",
            GateMetric::Entropy => "entropy",
            GateMetric::Epkl => "epkl",
            GateMetric::MaxProb => "max_prob",
            GateMetric::InvMaxProb => "inv_max_prob",
            GateMetric::Margin => "margin",
            GateMetric::InvMargin => "inv_margin",
            GateMetric::Similarity => "similarity",
            GateMetric::UncertaintyXInvMaxProb => "uncertainty_x_inv_max_prob",
            GateMetric::UncertaintyXEpkl => "uncertainty_x_epkl",
            GateMetric::BaseIou => "base_iou",
            GateMetric::CombinedOracle => "combined_oracle",
        }
    }

    pub fn needs_ground_truth(self) -> bool {
        matches!(self, GateMetric::BaseIou | GateMetric::CombinedOracle)
    }

    pub fn value(self, m: &GateMetrics) -> Option<f64> {
        let v = match self {
            GateMetric::Uncertainty => m.uncertainty,
            GateMetric::Mi => m.mean_mi,
            GateMetric::Entropy => m.mean_entropy,
            GateMetric::Epkl => m.mean_epkl,
            GateMetric::MaxProb => m.max_prob,
            GateMetric::InvMaxProb => 1.0 - m.max_prob,
            GateMetric::Margin => m.margin,
            GateMetric::InvMargin => 1.0 - m.margin,
            GateMetric::Similarity => m.best_similarity?,
            GateMetric::UncertaintyXInvMaxProb => m.uncertainty * (1.0 - m.max_prob),
            GateMetric::UncertaintyXEpkl => m.uncertainty * m.mean_epkl,
            GateMetric::BaseIou => m.base_iou?,
            GateMetric::CombinedOracle => m.combined_oracle?,
        };
        Some(v as f64)
    }
}

impl FromStr for GateMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GateMetric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Gate(format!("unknown gate metric `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Quartile {
    Q1,
    Q2,
    Q3,
    Q4,
}

impl Quartile {
    pub const ALL: [Quartile; 4] = [Quartile::Q1, Quartile::Q2, Quartile::Q3, Quartile::Q4];

    /// Half-open bands: Q1 below c25, Q2 `[c25, c50)`, Q3 `[c50, c75)`,
    /// Q4 at or above c75.
    pub fn of(value: f64, cuts: &[f64; 3]) -> Quartile {
        if value >= cuts[2] {
            Quartile::Q4
        } else if value >= cuts[1] {
            Quartile::Q3
        } else if value >= cuts[0] {
            Quartile::Q2
        } else {
            Quartile::Q1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuartileStats {
    pub quartile: Quartile,
    pub count: usize,
    /// Similarity vs. ΔIoU within the band; absent when undefined.
    pub similarity_correlation: Option<CorrelationResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratificationResult {
    /// 25th, 50th and 75th percentiles of `mean_mi`.
    pub cuts: [f64; 3],
    pub assignments: Vec<Quartile>,
    pub bands: Vec<QuartileStats>,
}

impl StratificationResult {
    pub fn members(&self, q: Quartile) -> impl Iterator<Item = usize> + '_ {
        self.assignments
            .iter()
            .enumerate()
            .filter(move |(_, &a)| a == q)
            .map(|(i, _)| i)
    }
}

/// Splits the population into mutual-information quartiles. When `deltas`
/// are given, each band also reports the similarity-vs-ΔIoU correlation.
pub fn stratify_by_mi(
    population: &[GateMetrics],
    deltas: Option<&[f64]>,
) -> Result<StratificationResult> {
    if population.len() < 4 {
        return Err(Error::Gate(format!(
            "need at least 4 regions to stratify, got {}",
            population.len()
        )));
    }
    if let Some(d) = deltas {
        if d.len() != population.len() {
            return Err(Error::Shape(format!(
                "{} deltas for {} regions",
                d.len(),
                population.len()
            )));
        }
    }
    let mut sorted: Vec<f64> = population.iter().map(|m| m.mean_mi as f64).collect();
    sorted.sort_by(f64::total_cmp);
    let cuts = [
        percentile_sorted(&sorted, 25.0),
        percentile_sorted(&sorted, 50.0),
        percentile_sorted(&sorted, 75.0),
    ];
    let assignments: Vec<Quartile> = population
        .iter()
        .map(|m| Quartile::of(m.mean_mi as f64, &cuts))
        .collect();

    let bands = Quartile::ALL
        .iter()
        .map(|&q| {
            let idx: Vec<usize> = (0..population.len())
                .filter(|&i| assignments[i] == q)
                .collect();
            let similarity_correlation = deltas.and_then(|d| {
                let (xs, ys): (Vec<f64>, Vec<f64>) = idx
                    .iter()
                    .filter_map(|&i| Some((population[i].best_similarity? as f64, d[i])))
                    .unzip();
                correlate(&format!("similarity_{q:?}"), &xs, &ys).ok()
            });
            QuartileStats {
                quartile: q,
                count: idx.len(),
                similarity_correlation,
            }
        })
        .collect();

    Ok(StratificationResult {
        cuts,
        assignments,
        bands,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum GatePolicy {
    #[default]
    /// Q3 mutual-information band, then the better half by similarity.
    TwoStage,
    AlwaysOn,
    Never,
    /// Top quarter by `uncertainty * (1 - base_iou)`.
    OracleCombinedTop25,
    #[serde(rename = "topk_by")]
    TopKBy {
        metric: GateMetric,
        fraction: f32,
    },
}

impl GatePolicy {
    pub fn name(&self) -> String {
        match self {
            GatePolicy::TwoStage => "two_stage".into(),
            GatePolicy::AlwaysOn => "always_on".into(),
            GatePolicy::Never => "never".into(),
            GatePolicy::OracleCombinedTop25 => "oracle_combined_top25".into(),
            GatePolicy::TopKBy { metric, fraction } => {
                format!("topk_by_{}_{fraction}", metric.name())
            }
        }
    }
}

impl fmt::Display for GatePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub region_id: String,
    pub policy: String,
    pub passed: bool,
    pub stage1_passed: bool,
    pub metrics: GateMetrics,
    pub matches: Vec<RetrievalMatch>,
}

/// Descending by value, ascending by region id on ties.
fn rank_desc(population: &[GateMetrics], idx: &mut [usize], value: impl Fn(usize) -> f64) {
    idx.sort_by(|&a, &b| {
        value(b)
            .total_cmp(&value(a))
            .then_with(|| population[a].region_id.cmp(&population[b].region_id))
    });
}

fn top_fraction(
    population: &[GateMetrics],
    metric: GateMetric,
    fraction: f32,
) -> Result<Vec<usize>> {
    let values = population
        .iter()
        .map(|m| {
            metric.value(m).ok_or_else(|| {
                Error::Gate(format!(
                    "metric `{}` unavailable for region `{}`{}",
                    metric.name(),
                    m.region_id,
                    if metric.needs_ground_truth() {
                        " (requires ground truth)"
                    } else {
                        ""
                    }
                ))
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    let k = (fraction as f64 * population.len() as f64).floor() as usize;
    let mut idx: Vec<usize> = (0..population.len()).collect();
    rank_desc(population, &mut idx, |i| values[i]);
    idx.truncate(k);
    Ok(idx)
}

/// Applies `policy` to the population. `retrieve(i)` returns the matches for
/// region `i`; it is only called for regions that survive stage one.
pub fn gate(
    policy: &GatePolicy,
    population: &[GateMetrics],
    mut retrieve: impl FnMut(usize) -> Vec<RetrievalMatch>,
) -> Result<Vec<GateDecision>> {
    let name = policy.name();
    let mut decisions: Vec<GateDecision> = population
        .iter()
        .map(|m| GateDecision {
            region_id: m.region_id.clone(),
            policy: name.clone(),
            passed: false,
            stage1_passed: false,
            metrics: m.clone(),
            matches: Vec::new(),
        })
        .collect();

    let mut run_stage_one = |decisions: &mut [GateDecision], selected: &[usize]| {
        for &i in selected {
            let d = &mut decisions[i];
            d.stage1_passed = true;
            d.matches = retrieve(i);
            d.metrics.best_similarity = d.matches.first().map(|m| m.region_similarity);
        }
    };

    match policy {
        GatePolicy::Never => {}
        GatePolicy::AlwaysOn => {
            let all: Vec<usize> = (0..population.len()).collect();
            run_stage_one(&mut decisions, &all);
            for d in &mut decisions {
                d.passed = !d.matches.is_empty();
            }
        }
        GatePolicy::TwoStage => {
            if population.is_empty() {
                return Ok(decisions);
            }
            let strat = stratify_by_mi(population, None)?;
            let band: Vec<usize> = strat.members(Quartile::Q3).collect();
            run_stage_one(&mut decisions, &band);
            let keep = band.len() / 2;
            let mut ranked: Vec<usize> = band
                .into_iter()
                .filter(|&i| !decisions[i].matches.is_empty())
                .collect();
            let sims: Vec<f64> = decisions
                .iter()
                .map(|d| {
                    d.metrics
                        .best_similarity
                        .map_or(f64::NEG_INFINITY, f64::from)
                })
                .collect();
            rank_desc(population, &mut ranked, |i| sims[i]);
            for &i in ranked.iter().take(keep) {
                decisions[i].passed = true;
            }
        }
        GatePolicy::OracleCombinedTop25 => {
            let chosen = top_fraction(population, GateMetric::CombinedOracle, 0.25)?;
            run_stage_one(&mut decisions, &chosen);
            for &i in &chosen {
                decisions[i].passed = !decisions[i].matches.is_empty();
            }
        }
        GatePolicy::TopKBy { metric, fraction } => {
            if !(0.0..=1.0).contains(fraction) {
                return Err(Error::Gate(format!("fraction {fraction} outside [0, 1]")));
            }
            if *metric == GateMetric::Similarity {
                // Similarity only exists after retrieval, so every region is
                // retrieved before ranking.
                let all: Vec<usize> = (0..population.len()).collect();
                run_stage_one(&mut decisions, &all);
                let mut ranked: Vec<usize> = all
                    .into_iter()
                    .filter(|&i| !decisions[i].matches.is_empty())
                    .collect();
                let sims: Vec<f64> = decisions
                    .iter()
                    .map(|d| {
                        d.metrics
                            .best_similarity
                            .map_or(f64::NEG_INFINITY, f64::from)
                    })
                    .collect();
                rank_desc(population, &mut ranked, |i| sims[i]);
                let k = (*fraction as f64 * population.len() as f64).floor() as usize;
                for &i in ranked.iter().take(k) {
                    decisions[i].passed = true;
                }
            } else {
                let chosen = top_fraction(population, *metric, *fraction)?;
                run_stage_one(&mut decisions, &chosen);
                for &i in &chosen {
                    decisions[i].passed = !decisions[i].matches.is_empty();
                }
            }
        }
    }
    Ok(decisions)
}

/// Orders decisions the way reports list them.
pub fn by_region_id(a: &GateDecision, b: &GateDecision) -> Ordering {
    a.region_id.cmp(&b.region_id)
}
