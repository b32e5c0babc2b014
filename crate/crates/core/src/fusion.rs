//! Similarity-weighted blending of retrieved label maps into the base
//! prediction. Blending happens in probability space inside each region's
//! box; pixels outside every fused box are left untouched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regions::BBox;
use crate::retrieval::{MemoryBank, RetrievalMatch};
use crate::uncertainty::ProbMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    /// Blend weight at similarity 1.
    pub lambda_max: f32,
    /// Softmax temperature over match similarities.
    pub temperature: f32,
    pub label_smoothing: f32,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            lambda_max: 0.5,
            temperature: 0.1,
            label_smoothing: 0.0,
        }
    }
}

impl FusionConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(0.0..=1.0).contains(&self.lambda_max) {
            out.push(format!(
                "fusion.lambda_max {} outside [0, 1]",
                self.lambda_max
            ));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            out.push(format!(
                "fusion.temperature {} must be > 0",
                self.temperature
            ));
        }
        if !(0.0..0.5).contains(&self.label_smoothing) {
            out.push(format!(
                "fusion.label_smoothing {} outside [0, 0.5)",
                self.label_smoothing
            ));
        }
        out
    }
}

/// Smoothed one-hot encoding of a label crop. Void pixels become uniform.
pub fn label_to_prob(
    labels: &[i32],
    height: usize,
    width: usize,
    classes: usize,
    smoothing: f32,
    void_label: i32,
) -> Result<ProbMap> {
    if labels.len() != height * width {
        return Err(Error::Shape(format!(
            "label crop {height}x{width} given {} values",
            labels.len()
        )));
    }
    let n = height * width;
    let on = 1.0 - smoothing;
    let off = if classes > 1 {
        smoothing / (classes - 1) as f32
    } else {
        0.0
    };
    let uniform = 1.0 / classes as f32;
    let mut values = vec![0f32; classes * n];
    for (p, &l) in labels.iter().enumerate() {
        if l == void_label || l < 0 || l as usize >= classes {
            for c in 0..classes {
                values[c * n + p] = uniform;
            }
        } else {
            for c in 0..classes {
                values[c * n + p] = if c == l as usize { on } else { off };
            }
        }
    }
    ProbMap::new(classes, height, width, values)
}

/// Nearest-neighbour resize; source index `floor((i + 0.5) * src / dst)`.
pub fn resize_nearest(crop: &ProbMap, height: usize, width: usize) -> ProbMap {
    assert!(height > 0 && width > 0, "resize target must be non-empty");
    if crop.height == height && crop.width == width {
        return crop.clone();
    }
    let src_index = |i: usize, src: usize, dst: usize| {
        (((i as f64 + 0.5) * src as f64 / dst as f64).floor() as usize).min(src - 1)
    };
    let rows: Vec<usize> = (0..height)
        .map(|i| src_index(i, crop.height, height))
        .collect();
    let cols: Vec<usize> = (0..width)
        .map(|j| src_index(j, crop.width, width))
        .collect();
    let (src_n, dst_n) = (crop.pixels(), height * width);
    let mut values = vec![0f32; crop.classes * dst_n];
    for c in 0..crop.classes {
        for (i, &si) in rows.iter().enumerate() {
            for (j, &sj) in cols.iter().enumerate() {
                values[c * dst_n + i * width + j] = crop.values[c * src_n + si * crop.width + sj];
            }
        }
    }
    ProbMap {
        classes: crop.classes,
        height,
        width,
        values,
    }
}

/// Weighted blend of one region. `retrieved` pairs each match similarity
/// with its probability crop, already resized to the base crop.
pub fn fuse_region(
    base: &ProbMap,
    retrieved: &[(f32, ProbMap)],
    cfg: &FusionConfig,
) -> Result<ProbMap> {
    if retrieved.is_empty() {
        return Err(Error::Fusion("no retrieved maps to fuse".into()));
    }
    if let Some((_, bad)) = retrieved.iter().find(|(_, q)| {
        q.classes != base.classes || q.height != base.height || q.width != base.width
    }) {
        return Err(Error::Shape(format!(
            "retrieved crop [{}, {}, {}] does not match base crop [{}, {}, {}]",
            bad.classes, bad.height, bad.width, base.classes, base.height, base.width
        )));
    }

    let sims: Vec<f64> = retrieved
        .iter()
        .map(|(s, _)| (*s as f64).max(0.0))
        .collect();
    let best = sims.iter().copied().fold(0.0, f64::max);
    let alpha = cfg.lambda_max as f64 * best;
    if alpha == 0.0 {
        return Ok(base.clone());
    }
    let tau = cfg.temperature as f64;
    let exps: Vec<f64> = sims.iter().map(|s| ((s - best) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    let weights: Vec<f64> = exps.iter().map(|e| e / z).collect();

    let n = base.pixels();
    let mut out = vec![0f32; base.values.len()];
    let mut mixed = vec![0f64; base.classes];
    for p in 0..n {
        let mut sum = 0.0;
        for (c, slot) in mixed.iter_mut().enumerate() {
            let i = c * n + p;
            let mut r = 0.0;
            for (w, (_, q)) in weights.iter().zip(retrieved) {
                r += w * q.values[i] as f64;
            }
            *slot = (1.0 - alpha) * base.values[i] as f64 + alpha * r;
            sum += *slot;
        }
        for (c, v) in mixed.iter().enumerate() {
            out[c * n + p] = (v / sum) as f32;
        }
    }
    ProbMap::new(base.classes, base.height, base.width, out)
}

pub fn crop_probs(map: &ProbMap, bbox: &BBox) -> ProbMap {
    let (h, w) = (bbox.height(), bbox.width());
    let n = map.pixels();
    let mut values = Vec::with_capacity(map.classes * h * w);
    for c in 0..map.classes {
        let plane = &map.values[c * n..(c + 1) * n];
        values.extend(bbox.crop(plane, map.width));
    }
    ProbMap {
        classes: map.classes,
        height: h,
        width: w,
        values,
    }
}

pub fn paste_probs(map: &mut ProbMap, bbox: &BBox, crop: &ProbMap) {
    let n = map.pixels();
    let cn = crop.pixels();
    for c in 0..map.classes {
        for (i, y) in (bbox.y0..=bbox.y1).enumerate() {
            let dst = c * n + y * map.width + bbox.x0;
            let src = c * cn + i * crop.width;
            map.values[dst..dst + crop.width].copy_from_slice(&crop.values[src..src + crop.width]);
        }
    }
}

/// Probability crops for each match, resized to `(height, width)`.
pub fn retrieved_crops(
    bank: &MemoryBank,
    matches: &[RetrievalMatch],
    height: usize,
    width: usize,
    cfg: &FusionConfig,
) -> Result<Vec<(f32, ProbMap)>> {
    matches
        .iter()
        .map(|m| {
            let entry = bank.entries.get(m.entry).ok_or_else(|| {
                Error::Fusion(format!("match references missing entry {}", m.entry))
            })?;
            let q = label_to_prob(
                &entry.label_crop,
                entry.bbox.height(),
                entry.bbox.width(),
                bank.class_count,
                cfg.label_smoothing,
                bank.void_label,
            )?;
            Ok((m.region_similarity, resize_nearest(&q, height, width)))
        })
        .collect()
}

/// Fuses one region of `map` in place with its matches.
pub fn fuse_in_place(
    map: &mut ProbMap,
    bbox: &BBox,
    matches: &[RetrievalMatch],
    bank: &MemoryBank,
    cfg: &FusionConfig,
) -> Result<()> {
    let base = crop_probs(map, bbox);
    let retrieved = retrieved_crops(bank, matches, base.height, base.width, cfg)?;
    let fused = fuse_region(&base, &retrieved, cfg)?;
    paste_probs(map, bbox, &fused);
    Ok(())
}

/// A gated region and its retrieval matches.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionTask {
    pub bbox: BBox,
    pub matches: Vec<RetrievalMatch>,
}

impl FusionTask {
    fn top_similarity(&self) -> f32 {
        self.matches
            .iter()
            .map(|m| m.region_similarity)
            .fold(f32::NEG_INFINITY, f32::max)
    }
}

/// Applies every task to a copy of `base`, in descending order of top-match
/// similarity (ties keep input order). Each fusion reads the probabilities
/// left by the previous ones, so overlapping boxes compose sequentially.
pub fn apply_fusion(
    base: &ProbMap,
    tasks: &[FusionTask],
    bank: &MemoryBank,
    cfg: &FusionConfig,
) -> Result<ProbMap> {
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    order.sort_by(|&a, &b| {
        tasks[b]
            .top_similarity()
            .total_cmp(&tasks[a].top_similarity())
    });

    let mut out = base.clone();
    for i in order {
        let task = &tasks[i];
        if !task.bbox.fits(base.height, base.width) {
            return Err(Error::Fusion(format!(
                "box {:?} outside {}x{} map",
                task.bbox, base.height, base.width
            )));
        }
        if task.matches.is_empty() {
            continue;
        }
        fuse_in_place(&mut out, &task.bbox, &task.matches, bank, cfg)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pixel(p: &[f32]) -> ProbMap {
        ProbMap::new(p.len(), 1, 1, p.to_vec()).unwrap()
    }

    #[test]
    fn one_hot_labels() {
        let q = label_to_prob(&[1, 255], 1, 2, 3, 0.0, 255).unwrap();
        assert_eq!(q.pixel(0).collect::<Vec<_>>(), [0.0, 1.0, 0.0]);
        assert_eq!(q.pixel(1).collect::<Vec<_>>(), [1.0 / 3.0; 3]);
    }

    #[test]
    fn smoothed_labels() {
        let q = label_to_prob(&[0], 1, 1, 2, 0.1, 255).unwrap();
        assert!((q.values[0] - 0.9).abs() < 1e-7);
        assert!((q.values[1] - 0.1).abs() < 1e-7);
    }

    #[test]
    fn resize_identity_and_constant() {
        let m = ProbMap::new(
            2,
            2,
            3,
            vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4],
        )
        .unwrap();
        assert_eq!(resize_nearest(&m, 2, 3), m);
        let one = pixel(&[0.25, 0.75]);
        let big = resize_nearest(&one, 3, 4);
        assert!(big.values[..12].iter().all(|&v| v == 0.25));
        assert!(big.values[12..].iter().all(|&v| v == 0.75));
    }

    #[test]
    fn resize_2x2_to_4x4_replicates_blocks() {
        let m = ProbMap::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let big = resize_nearest(&m, 4, 4);
        #[rustfmt::skip]
        let expect = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(big.values, expect);
    }

    #[test]
    fn zero_lambda_is_identity() {
        let base = pixel(&[0.6, 0.4]);
        let cfg = FusionConfig {
            lambda_max: 0.0,
            ..Default::default()
        };
        let out = fuse_region(&base, &[(1.0, pixel(&[1.0, 0.0]))], &cfg).unwrap();
        assert_eq!(out, base);
    }

    #[test]
    fn full_trust_limit() {
        let cfg = FusionConfig {
            lambda_max: 1.0,
            ..Default::default()
        };
        let out = fuse_region(&pixel(&[0.6, 0.4]), &[(1.0, pixel(&[1.0, 0.0]))], &cfg).unwrap();
        assert_eq!(out.values, [1.0, 0.0]);
    }

    #[test]
    fn half_trust_blend() {
        let out = fuse_region(
            &pixel(&[0.6, 0.4]),
            &[(1.0, pixel(&[1.0, 0.0]))],
            &FusionConfig::default(),
        )
        .unwrap();
        assert!((out.values[0] - 0.8).abs() < 1e-7);
        assert!((out.values[1] - 0.2).abs() < 1e-7);
    }

    #[test]
    fn weights_favour_similar_matches() {
        // alpha = 0.5 * 0.9; weights exp(9)/(exp(9)+exp(1)) vs exp(1)/(...)
        let out = fuse_region(
            &pixel(&[0.5, 0.5]),
            &[(0.9, pixel(&[1.0, 0.0])), (0.1, pixel(&[0.0, 1.0]))],
            &FusionConfig::default(),
        )
        .unwrap();
        let w0 = 1.0 / (1.0 + (-8.0f64).exp());
        let alpha = 0.45;
        let expect = (1.0 - alpha) * 0.5 + alpha * w0;
        assert!((out.values[0] as f64 - expect).abs() < 1e-6);
    }

    #[test]
    fn negative_similarity_carries_no_weight() {
        let base = pixel(&[0.5, 0.5]);
        let out = fuse_region(
            &base,
            &[(-0.7, pixel(&[1.0, 0.0]))],
            &FusionConfig::default(),
        )
        .unwrap();
        assert_eq!(out, base);
    }

    #[test]
    fn empty_matches_rejected() {
        assert!(matches!(
            fuse_region(&pixel(&[0.5, 0.5]), &[], &FusionConfig::default()),
            Err(Error::Fusion(_))
        ));
    }

    #[test]
    fn crop_and_paste_round_trip() {
        let values: Vec<f32> = (0..2 * 3 * 4).map(|v| v as f32).collect();
        let mut m = ProbMap::new(2, 3, 4, values).unwrap();
        let b = BBox {
            x0: 1,
            y0: 1,
            x1: 2,
            y1: 2,
        };
        let c = crop_probs(&m, &b);
        assert_eq!(c.values, [5.0, 6.0, 9.0, 10.0, 17.0, 18.0, 21.0, 22.0]);
        let before = m.clone();
        paste_probs(&mut m, &b, &c);
        assert_eq!(m, before);
    }
}
