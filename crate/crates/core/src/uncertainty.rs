//! Probability maps and pixel-level uncertainty from a TTA ensemble.
//!
//! All logarithms are natural. Probabilities are clamped below at
//! [`PROB_EPS`] before every log so one-hot pixels stay finite. Per-pixel
//! sums over classes run left to right in f64, which keeps outputs
//! bit-stable for a given build.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROB_EPS: f64 = 1e-12;

/// Class probabilities laid out `[C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl ProbMap {
    pub fn new(classes: usize, height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != classes * height * width {
            return Err(Error::Shape(format!(
                "probability map [{classes}, {height}, {width}] given {} values",
                values.len()
            )));
        }
        Ok(ProbMap {
            classes,
            height,
            width,
            values,
        })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn get(&self, class: usize, pixel: usize) -> f32 {
        self.values[class * self.pixels() + pixel]
    }

    /// Class vector at a flat pixel index.
    pub fn pixel(&self, pixel: usize) -> impl Iterator<Item = f32> + '_ {
        let n = self.pixels();
        (0..self.classes).map(move |c| self.values[c * n + pixel])
    }

    /// Per-pixel argmax; the lowest class index wins ties.
    pub fn argmax(&self) -> Vec<i32> {
        (0..self.pixels())
            .map(|p| {
                let mut best = 0;
                let mut best_v = f32::NEG_INFINITY;
                for (c, v) in self.pixel(p).enumerate() {
                    if v > best_v {
                        best = c;
                        best_v = v;
                    }
                }
                best as i32
            })
            .collect()
    }

    fn same_shape(&self, other: &ProbMap) -> bool {
        self.classes == other.classes && self.height == other.height && self.width == other.width
    }

    /// Largest deviation of any pixel's class sum from 1.
    pub fn max_simplex_error(&self) -> f64 {
        (0..self.pixels())
            .map(|p| (self.pixel(p).map(f64::from).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyKind {
    Entropy,
    MutualInformation,
    Epkl,
}

impl UncertaintyKind {
    pub fn name(self) -> &'static str {
        match self {
            UncertaintyKind::Entropy => "entropy",
            UncertaintyKind::MutualInformation => "mutual_information",
            UncertaintyKind::Epkl => "epkl",
        }
    }
}

/// Per-pixel uncertainty, `[H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    pub kind: UncertaintyKind,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

/// Softmax along the class axis of one `[C, H, W]` logit block, stabilised
/// by subtracting the per-pixel maximum.
pub fn softmax(logits: &[f32], classes: usize, height: usize, width: usize) -> Result<ProbMap> {
    let n = height * width;
    if logits.len() != classes * n {
        return Err(Error::Shape(format!(
            "logits for [{classes}, {height}, {width}] given {} values",
            logits.len()
        )));
    }
    let mut out = vec![0f32; logits.len()];
    let mut exps = vec![0f64; classes];
    for p in 0..n {
        let max = (0..classes)
            .map(|c| logits[c * n + p])
            .fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut sum = 0.0;
        for (c, e) in exps.iter_mut().enumerate() {
            *e = (logits[c * n + p] as f64 - max).exp();
            sum += *e;
        }
        for (c, e) in exps.iter().enumerate() {
            out[c * n + p] = (e / sum) as f32;
        }
    }
    ProbMap::new(classes, height, width, out)
}

/// Softmax for every member of a `[K, C, H, W]` ensemble.
pub fn softmax_logits(
    logits: &[f32],
    members: usize,
    classes: usize,
    height: usize,
    width: usize,
) -> Result<Vec<ProbMap>> {
    let block = classes * height * width;
    if logits.len() != members * block {
        return Err(Error::Shape(format!(
            "ensemble logits [{members}, {classes}, {height}, {width}] given {} values",
            logits.len()
        )));
    }
    logits
        .chunks_exact(block.max(1))
        .take(members)
        .map(|chunk| softmax(chunk, classes, height, width))
        .collect()
}

fn check_members(members: &[ProbMap]) -> Result<&ProbMap> {
    let first = members
        .first()
        .ok_or_else(|| Error::Shape("empty ensemble".into()))?;
    if members.len() < 2 {
        return Err(Error::Validation(format!(
            "ensemble of {} member(s), need at least 2",
            members.len()
        )));
    }
    if let Some(bad) = members.iter().position(|m| !first.same_shape(m)) {
        return Err(Error::Shape(format!(
            "member {bad} is [{}, {}, {}], member 0 is [{}, {}, {}]",
            members[bad].classes,
            members[bad].height,
            members[bad].width,
            first.classes,
            first.height,
            first.width
        )));
    }
    Ok(first)
}

/// Arithmetic mean of the member distributions.
pub fn ensemble_mean(members: &[ProbMap]) -> Result<ProbMap> {
    let first = check_members(members)?;
    let k = members.len() as f64;
    let values = (0..first.values.len())
        .map(|i| {
            let mut sum = 0.0f64;
            for m in members {
                sum += m.values[i] as f64;
            }
            (sum / k) as f32
        })
        .collect();
    ProbMap::new(first.classes, first.height, first.width, values)
}

#[inline]
fn clamped_ln(p: f64) -> f64 {
    p.max(PROB_EPS).ln()
}

fn pixel_entropy(map: &ProbMap, pixel: usize) -> f64 {
    let mut h = 0.0;
    for p in map.pixel(pixel) {
        let p = p as f64;
        h -= p * clamped_ln(p);
    }
    h.max(0.0)
}

fn kl(p: &ProbMap, q: &ProbMap, pixel: usize) -> f64 {
    let mut d = 0.0;
    for (a, b) in p.pixel(pixel).zip(q.pixel(pixel)) {
        let a = a as f64;
        d += a * (clamped_ln(a) - clamped_ln(b as f64));
    }
    d
}

/// Entropy of the ensemble mean at every pixel.
pub fn predictive_entropy(mean: &ProbMap) -> UncertaintyMap {
    UncertaintyMap {
        kind: UncertaintyKind::Entropy,
        height: mean.height,
        width: mean.width,
        values: (0..mean.pixels())
            .map(|p| pixel_entropy(mean, p) as f32)
            .collect(),
    }
}

/// Entropy of the mean minus the mean member entropy, clamped at zero.
pub fn mutual_information(members: &[ProbMap]) -> Result<UncertaintyMap> {
    let mean = ensemble_mean(members)?;
    Ok(mutual_information_with_mean(members, &mean))
}

fn mutual_information_with_mean(members: &[ProbMap], mean: &ProbMap) -> UncertaintyMap {
    let k = members.len() as f64;
    let values = (0..mean.pixels())
        .map(|p| {
            let total = pixel_entropy(mean, p) as f32 as f64;
            let mut member_sum = 0.0;
            for m in members {
                member_sum += pixel_entropy(m, p);
            }
            (total - member_sum / k).max(0.0) as f32
        })
        .collect();
    UncertaintyMap {
        kind: UncertaintyKind::MutualInformation,
        height: mean.height,
        width: mean.width,
        values,
    }
}

/// Mean KL divergence over all K(K-1) ordered member pairs.
pub fn epkl(members: &[ProbMap]) -> Result<UncertaintyMap> {
    let first = check_members(members)?;
    let k = members.len();
    let pairs = (k * (k - 1)) as f64;
    let values = (0..first.pixels())
        .map(|p| {
            let mut sum = 0.0;
            for (i, a) in members.iter().enumerate() {
                for (j, b) in members.iter().enumerate() {
                    if i != j {
                        sum += kl(a, b, p);
                    }
                }
            }
            (sum / pairs).max(0.0) as f32
        })
        .collect();
    Ok(UncertaintyMap {
        kind: UncertaintyKind::Epkl,
        height: first.height,
        width: first.width,
        values,
    })
}

/// Member probabilities, their mean, and all three uncertainty maps.
#[derive(Debug, Clone)]
pub struct EnsembleAnalysis {
    pub members: Vec<ProbMap>,
    pub mean: ProbMap,
    pub entropy: UncertaintyMap,
    pub mutual_information: UncertaintyMap,
    pub epkl: UncertaintyMap,
}

impl EnsembleAnalysis {
    pub fn from_logits(
        logits: &[f32],
        members: usize,
        classes: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let members = softmax_logits(logits, members, classes, height, width)?;
        let mean = ensemble_mean(&members)?;
        let entropy = predictive_entropy(&mean);
        let mutual_information = mutual_information_with_mean(&members, &mean);
        let epkl = epkl(&members)?;
        Ok(EnsembleAnalysis {
            members,
            mean,
            entropy,
            mutual_information,
            epkl,
        })
    }

    pub fn map(&self, kind: UncertaintyKind) -> &UncertaintyMap {
        match kind {
            UncertaintyKind::Entropy => &self.entropy,
            UncertaintyKind::MutualInformation => &self.mutual_information,
            UncertaintyKind::Epkl => &self.epkl,
        }
    }
}
