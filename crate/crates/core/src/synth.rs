//! Deterministic synthetic scenes: stripe and rectangle label maps, an
//! ensemble of corrupted noisy one-hot logits, and prototype embeddings.

use std::fs;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::SplitMix64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{Manifest, SceneBundle, SceneFiles, Split, DEFAULT_VOID_LABEL};

const PROTOTYPE_SALT: u64 = 0x05ee_dc1a_55e5_u64;
const LOGIT_AMPLITUDE: f32 = 6.0;
const EMBED_NOISE: f32 = 0.03;
const NOISE_CELL: usize = 12;
const FLIP_CANDIDATES: usize = 8;
const FLIP_MIN: usize = 14;
const FLIP_MAX: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub scene_count: usize,
    pub height: usize,
    pub width: usize,
    pub class_count: usize,
    pub ensemble_size: usize,
    pub embed_dim: usize,
    pub patch_size: usize,
    /// In `[0, 1]`; scales label flips, and logit noise.
    pub corruption_severity: f32,
    /// In `(0, 1)`; leading share of scenes placed in the bank split.
    pub bank_fraction: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            scene_count: 60,
            height: 96,
            width: 128,
            class_count: 19,
            ensemble_size: 5,
            embed_dim: 32,
            patch_size: 8,
            corruption_severity: 0.6,
            bank_fraction: 0.6,
        }
    }
}

impl SynthConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.scene_count < 2 {
            p.push(format!(
                "synth.scene_count must be >= 2, got {}",
                self.scene_count
            ));
        }
        if self.patch_size == 0 {
            p.push("synth.patch_size must be positive".into());
        }
        if self.height < self.patch_size || self.width < self.patch_size {
            p.push(format!(
                "synth image {}x{} is smaller than patch_size {}",
                self.height, self.width, self.patch_size
            ));
        }
        if self.class_count < 2 {
            p.push(format!(
                "synth.class_count must be >= 2, got {}",
                self.class_count
            ));
        }
        if self.ensemble_size < 2 {
            p.push(format!(
                "synth.ensemble_size must be >= 2, got {}",
                self.ensemble_size
            ));
        }
        if self.embed_dim == 0 {
            p.push("synth.embed_dim must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.corruption_severity) {
            p.push(format!(
                "synth.corruption_severity must be in [0, 1], got {}",
                self.corruption_severity
            ));
        }
        if !(self.bank_fraction > 0.0 && self.bank_fraction < 1.0) {
            p.push(format!(
                "synth.bank_fraction must be in (0, 1), got {}",
                self.bank_fraction
            ));
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// `ceil(bank_fraction * scene_count)`, kept within `[1, scene_count - 1]`.
    pub fn bank_scene_count(&self) -> usize {
        let n = (self.bank_fraction as f64 * self.scene_count as f64).ceil() as usize;
        n.clamp(1, self.scene_count.saturating_sub(1).max(1))
    }
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:04}")
}

fn index_hash(index: usize) -> u64 {
    SplitMix64::seed_from_u64(index as u64).next_u64()
}

fn normal(rng: &mut SplitMix64) -> f32 {
    rng.sample::<f64, _>(StandardNormal) as f32
}

/// One unit vector per class, shared by every scene of a seed.
pub fn class_prototypes(cfg: &SynthConfig) -> Vec<Vec<f32>> {
    let mut rng = SplitMix64::seed_from_u64(cfg.seed ^ PROTOTYPE_SALT);
    (0..cfg.class_count)
        .map(|_| {
            let v: Vec<f32> = (0..cfg.embed_dim).map(|_| normal(&mut rng)).collect();
            let norm = v
                .iter()
                .map(|x| x * x)
                .sum::<f32>()
                .sqrt()
                .max(f32::MIN_POSITIVE);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn draw_labels(rng: &mut SplitMix64, cfg: &SynthConfig) -> Vec<i32> {
    let (h, w, c) = (cfg.height, cfg.width, cfg.class_count);
    let mut labels = vec![0i32; h * w];

    let stripes = rng.gen_range(2..=4usize);
    let mut cuts: Vec<usize> = (1..stripes).map(|_| rng.gen_range(0..h)).collect();
    cuts.push(h);
    cuts.sort_unstable();
    let mut y0 = 0;
    for y1 in cuts {
        let class = rng.gen_range(0..c) as i32;
        labels[y0 * w..y1 * w].fill(class);
        y0 = y1;
    }

    let rects = rng.gen_range(2..=5usize);
    for _ in 0..rects {
        let rh = rng.gen_range((h / 8).max(1)..=(h / 3).max(1));
        let rw = rng.gen_range((w / 8).max(1)..=(w / 3).max(1));
        let ry = rng.gen_range(0..=h - rh);
        let rx = rng.gen_range(0..=w - rw);
        let class = rng.gen_range(0..c) as i32;
        for y in ry..ry + rh {
            labels[y * w + rx..y * w + rx + rw].fill(class);
        }
    }
    labels
}

struct FlipPatch {
    active: bool,
    y0: usize,
    x0: usize,
    y1: usize,
    x1: usize,
    offset: i32,
    wrong_members: Vec<bool>,
}

fn draw_flips(rng: &mut SplitMix64, cfg: &SynthConfig) -> Vec<FlipPatch> {
    let (h, w, k) = (cfg.height, cfg.width, cfg.ensemble_size);
    (0..FLIP_CANDIDATES)
        .map(|_| {
            let u: f32 = rng.gen();
            let ph = rng.gen_range(FLIP_MIN..=FLIP_MAX).min(h);
            let pw = rng.gen_range(FLIP_MIN..=FLIP_MAX).min(w);
            let y0 = rng.gen_range(0..=h - ph);
            let x0 = rng.gen_range(0..=w - pw);
            let offset = rng.gen_range(1..cfg.class_count) as i32;
            // A majority of members sees the wrong class, so the mean is wrong.
            let lo = k / 2 + 1;
            let hi = (k - 1).max(lo);
            let wrong = rng.gen_range(lo..=hi);
            let mut order: Vec<usize> = (0..k).collect();
            for i in (1..k).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            let mut wrong_members = vec![false; k];
            for &m in &order[..wrong] {
                wrong_members[m] = true;
            }
            FlipPatch {
                active: u < cfg.corruption_severity,
                y0,
                x0,
                y1: y0 + ph,
                x1: x0 + pw,
                offset,
                wrong_members,
            }
        })
        .collect()
}

/// Standard-normal field on a coarse grid, bilinearly upsampled.
struct SmoothField {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

impl SmoothField {
    fn draw(rng: &mut SplitMix64, h: usize, w: usize) -> Self {
        let rows = h / NOISE_CELL + 2;
        let cols = w / NOISE_CELL + 2;
        let values = (0..rows * cols).map(|_| normal(rng)).collect();
        SmoothField { rows, cols, values }
    }

    fn at(&self, y: usize, x: usize) -> f32 {
        let fy = y as f32 / NOISE_CELL as f32;
        let fx = x as f32 / NOISE_CELL as f32;
        let (r, c) = (fy as usize, fx as usize);
        let (r1, c1) = ((r + 1).min(self.rows - 1), (c + 1).min(self.cols - 1));
        let (ty, tx) = (fy - r as f32, fx - c as f32);
        let v = |r: usize, c: usize| self.values[r * self.cols + c];
        (1.0 - ty) * ((1.0 - tx) * v(r, c) + tx * v(r, c1))
            + ty * ((1.0 - tx) * v(r1, c) + tx * v(r1, c1))
    }
}

/// Builds scene `index`. Same `(cfg, index)` gives a bit-identical bundle.
pub fn generate_scene(cfg: &SynthConfig, index: usize) -> Result<SceneBundle> {
    let prototypes = class_prototypes(cfg);
    generate_with_prototypes(cfg, index, &prototypes)
}

fn generate_with_prototypes(
    cfg: &SynthConfig,
    index: usize,
    prototypes: &[Vec<f32>],
) -> Result<SceneBundle> {
    let mut rng = SplitMix64::seed_from_u64(cfg.seed ^ index_hash(index));
    let (h, w, c, k, d) = (
        cfg.height,
        cfg.width,
        cfg.class_count,
        cfg.ensemble_size,
        cfg.embed_dim,
    );
    let n = h * w;
    let severity = cfg.corruption_severity;

    let labels = draw_labels(&mut rng, cfg);
    let flips = draw_flips(&mut rng, cfg);

    let shared: Vec<SmoothField> = (0..c).map(|_| SmoothField::draw(&mut rng, h, w)).collect();
    let sigma_shared = 1.2 * severity;
    let sigma_member = 0.2 + 0.6 * severity;

    let mut logits = vec![0f32; k * c * n];
    for member in 0..k {
        let mut corrupted = labels.clone();
        for f in flips.iter().filter(|f| f.active && f.wrong_members[member]) {
            for y in f.y0..f.y1 {
                for x in f.x0..f.x1 {
                    let p = y * w + x;
                    corrupted[p] = (labels[p] + f.offset).rem_euclid(c as i32);
                }
            }
        }
        let own: Vec<SmoothField> = (0..c).map(|_| SmoothField::draw(&mut rng, h, w)).collect();
        let base = member * c * n;
        for y in 0..h {
            for x in 0..w {
                let seen = corrupted[y * w + x] as usize;
                for class in 0..c {
                    let hot = if class == seen { LOGIT_AMPLITUDE } else { 0.0 };
                    logits[base + class * n + y * w + x] = hot
                        + sigma_shared * shared[class].at(y, x)
                        + sigma_member * own[class].at(y, x);
                }
            }
        }
    }

    let ps = cfg.patch_size;
    let (rows, cols) = (h.div_ceil(ps), w.div_ceil(ps));
    let mut patch_embeddings = vec![0f32; d * rows * cols];
    let mut global_feature = vec![0f32; d];
    let mut acc = vec![0f32; d];
    for r in 0..rows {
        for q in 0..cols {
            acc.fill(0.0);
            let mut count = 0usize;
            for y in r * ps..((r + 1) * ps).min(h) {
                for x in q * ps..((q + 1) * ps).min(w) {
                    let proto = &prototypes[labels[y * w + x] as usize];
                    acc.iter_mut().zip(proto).for_each(|(a, p)| *a += p);
                    count += 1;
                }
            }
            for (j, a) in acc.iter().enumerate() {
                let v = a / count as f32 + EMBED_NOISE * normal(&mut rng);
                patch_embeddings[j * rows * cols + r * cols + q] = v;
                global_feature[j] += v;
            }
        }
    }
    global_feature
        .iter_mut()
        .for_each(|g| *g /= (rows * cols) as f32);

    Ok(SceneBundle {
        scene_id: scene_id(index),
        ensemble_size: k,
        class_count: c,
        height: h,
        width: w,
        logits,
        embed_dim: d,
        patch_rows: rows,
        patch_cols: cols,
        patch_embeddings,
        global_feature,
        labels,
        void_label: DEFAULT_VOID_LABEL,
    })
}

/// Generates every scene in parallel and writes them with a manifest at
/// `out_dir/manifest.json`. The first `bank_scene_count()` scenes form the
/// bank split.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let prototypes = class_prototypes(cfg);
    let bank_count = cfg.bank_scene_count();

    let scenes: Vec<SceneFiles> = (0..cfg.scene_count)
        .into_par_iter()
        .map(|i| {
            let split = if i < bank_count {
                Split::Bank
            } else {
                Split::Eval
            };
            let bundle = generate_with_prototypes(cfg, i, &prototypes)?;
            let files = SceneFiles::standard(&bundle.scene_id, split);
            bundle.write(out_dir, &files)?;
            Ok(files)
        })
        .collect::<Result<_>>()?;

    let manifest = Manifest::new(
        out_dir,
        cfg.class_count,
        DEFAULT_VOID_LABEL,
        cfg.patch_size,
        scenes,
    );
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::cosine;
    use crate::uncertainty::EnsembleAnalysis;

    fn small() -> SynthConfig {
        SynthConfig {
            scene_count: 6,
            height: 48,
            width: 64,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn default_bundle_shapes() {
        let cfg = SynthConfig::default();
        let b = generate_scene(&cfg, 0).unwrap();
        assert_eq!((b.ensemble_size, b.class_count), (5, 19));
        assert_eq!(b.logits.len(), 5 * 19 * 96 * 128);
        assert_eq!((b.patch_rows, b.patch_cols), (12, 16));
    }

    #[test]
    fn deterministic() {
        let cfg = small();
        assert_eq!(
            generate_scene(&cfg, 3).unwrap(),
            generate_scene(&cfg, 3).unwrap()
        );
        assert_ne!(
            generate_scene(&cfg, 3).unwrap().labels,
            generate_scene(&cfg, 4).unwrap().labels
        );
    }

    #[test]
    fn clean_logits_recover_labels() {
        let cfg = SynthConfig {
            corruption_severity: 0.0,
            ..small()
        };
        for i in 0..cfg.scene_count {
            let b = generate_scene(&cfg, i).unwrap();
            let a = EnsembleAnalysis::from_logits(
                &b.logits,
                b.ensemble_size,
                b.class_count,
                b.height,
                b.width,
            )
            .unwrap();
            let pred = a.mean.argmax();
            let agree = pred.iter().zip(&b.labels).filter(|(p, l)| p == l).count();
            assert!(
                agree as f64 >= 0.99 * b.labels.len() as f64,
                "scene {i}: {agree}"
            );
        }
    }

    #[test]
    fn shared_classes_have_similar_embeddings() {
        let cfg = small();
        let a = generate_scene(&cfg, 0).unwrap();
        let b = generate_scene(&cfg, 1).unwrap();
        // Patches lying fully inside one class, keyed by that class.
        let pure = |s: &SceneBundle| -> Vec<(i32, Vec<f32>)> {
            let ps = cfg.patch_size;
            let mut out = Vec::new();
            for r in 0..s.patch_rows {
                for q in 0..s.patch_cols {
                    let first = s.labels[r * ps * s.width + q * ps];
                    let uniform = (r * ps..(r + 1) * ps).all(|y| {
                        (q * ps..(q + 1) * ps).all(|x| s.labels[y * s.width + x] == first)
                    });
                    if uniform {
                        let n = s.patch_rows * s.patch_cols;
                        let v = (0..s.embed_dim)
                            .map(|j| s.patch_embeddings[j * n + r * s.patch_cols + q])
                            .collect();
                        out.push((first, v));
                    }
                }
            }
            out
        };
        let (pa, pb) = (pure(&a), pure(&b));
        let mut checked = 0;
        for (ca, va) in &pa {
            for (cb, vb) in &pb {
                if ca == cb {
                    assert!(cosine(va, vb) >= 0.9);
                    checked += 1;
                }
            }
        }
        assert!(checked > 0, "scenes share no class");
    }

    #[test]
    fn split_arithmetic() {
        let cfg = SynthConfig {
            scene_count: 12,
            bank_fraction: 0.6,
            ..SynthConfig::default()
        };
        assert_eq!(cfg.bank_scene_count(), 8);
        let cfg = SynthConfig {
            scene_count: 2,
            bank_fraction: 0.9,
            ..SynthConfig::default()
        };
        assert_eq!(cfg.bank_scene_count(), 1);
    }

    #[test]
    fn bad_config_lists_every_problem() {
        let cfg = SynthConfig {
            scene_count: 1,
            class_count: 1,
            corruption_severity: 2.0,
            bank_fraction: 1.0,
            ..SynthConfig::default()
        };
        match cfg.validate() {
            Err(Error::Config(p)) => assert_eq!(p.len(), 4),
            other => panic!("{other:?}"),
        }
    }
}
