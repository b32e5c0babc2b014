//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use regate::regions::BBox;
use regate::retrieval::{BankEntry, BankScene, MemoryBank};
use regate::uncertainty::UncertaintyKind;

pub fn rng(seed: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed)
}

/// Naive per-pixel softmax of `[K, C]` logits in f64.
pub fn member_probs(logits: &[Vec<f64>]) -> Vec<Vec<f64>> {
    logits
        .iter()
        .map(|l| {
            let e: Vec<f64> = l.iter().map(|v| v.exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|v| v / z).collect()
        })
        .collect()
}

fn clamped_ln(p: f64) -> f64 {
    p.max(1e-12).ln()
}

fn entropy_of(p: &[f64]) -> f64 {
    -p.iter().map(|&q| q * clamped_ln(q)).sum::<f64>()
}

/// `(entropy, mutual information, epkl)` of one pixel by direct loops.
#[allow(clippy::needless_range_loop)]
pub fn brute_uncertainty(probs: &[Vec<f64>]) -> (f64, f64, f64) {
    let k = probs.len();
    let c = probs[0].len();
    let mut mean = vec![0.0; c];
    for m in probs {
        for (j, v) in m.iter().enumerate() {
            mean[j] += v / k as f64;
        }
    }
    let h = entropy_of(&mean);
    let member_h: f64 = probs.iter().map(|m| entropy_of(m)).sum::<f64>() / k as f64;
    let mi = (h - member_h).max(0.0);
    let mut kl_sum = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            for t in 0..c {
                kl_sum += probs[i][t] * (clamped_ln(probs[i][t]) - clamped_ln(probs[j][t]));
            }
        }
    }
    let epkl = (kl_sum / (k * (k - 1)) as f64).max(0.0);
    (h, mi, epkl)
}

/// 8-connected components by breadth-first flood fill, in raster order of
/// first pixel, each sorted ascending.
pub fn flood_fill(mask: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask[q] && !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Mean per-class IoU from explicit pixel sets.
pub fn iou_by_sets(pred: &[i32], gt: &[i32], classes: usize, void: i32) -> f32 {
    let valid: HashSet<usize> = (0..gt.len())
        .filter(|&i| gt[i] != void && gt[i] >= 0 && (gt[i] as usize) < classes)
        .collect();
    let present: BTreeSet<i32> = valid.iter().map(|&i| gt[i]).collect();
    if present.is_empty() {
        return 1.0;
    }
    let mut sum = 0.0f64;
    for &c in &present {
        let g: HashSet<usize> = valid.iter().copied().filter(|&i| gt[i] == c).collect();
        let p: HashSet<usize> = valid.iter().copied().filter(|&i| pred[i] == c).collect();
        let inter = g.intersection(&p).count();
        let union = g.union(&p).count();
        sum += inter as f64 / union as f64;
    }
    (sum / present.len() as f64) as f32
}

pub fn unit(rng: &mut SplitMix64, d: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// A random bank of up to `max_entries` entries spread over `scenes`.
pub fn random_bank(
    rng: &mut SplitMix64,
    scenes: usize,
    max_entries: usize,
    d: usize,
) -> MemoryBank {
    let scene_list: Vec<BankScene> = (0..scenes)
        .map(|i| BankScene {
            scene_id: format!("b{i:03}"),
            global: unit(rng, d),
        })
        .collect();
    let n = rng.gen_range(1..=max_entries);
    let mut owners: Vec<usize> = (0..n).map(|_| rng.gen_range(0..scenes)).collect();
    owners.sort_unstable();
    let entries = owners
        .iter()
        .enumerate()
        .map(|(i, &s)| BankEntry {
            scene_id: scene_list[s].scene_id.clone(),
            region_id: format!("b{s:03}#{i:04}"),
            feature: unit(rng, d),
            bbox: BBox {
                x0: 0,
                y0: 0,
                x1: 1,
                y1: 1,
            },
            label_crop: vec![0; 4],
            source_uncertainty: 0.1,
        })
        .collect();
    MemoryBank {
        class_count: 2,
        embed_dim: d,
        void_label: 255,
        uncertainty_kind: UncertaintyKind::MutualInformation,
        scenes: scene_list,
        entries,
    }
}

/// Exhaustive search: every entry ranked by dot product, ties by ids.
pub fn flat_search(bank: &MemoryBank, query: &[f32], top: usize) -> Vec<(String, f32)> {
    let mut all: Vec<(f32, &str, &str)> = bank
        .entries
        .iter()
        .map(|e| {
            let dot = e
                .feature
                .iter()
                .zip(query)
                .map(|(a, b)| *a as f64 * *b as f64)
                .sum::<f64>() as f32;
            (dot, e.scene_id.as_str(), e.region_id.as_str())
        })
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)).then(a.2.cmp(b.2)));
    all.into_iter()
        .take(top)
        .map(|(s, _, r)| (r.to_string(), s))
        .collect()
}

/// Two-sided p-values from a 50-digit evaluation of `I_{1-r^2}((n-2)/2, 1/2)`,
/// indexed `[n][r]` for n in `ORACLE_N` and r in `ORACLE_R`.
pub const ORACLE_N: [usize; 4] = [5, 12, 100, 939];
pub const ORACLE_R: [f64; 7] = [0.05, 0.14, 0.31, 0.38, 0.6325, 0.9, -0.45];
#[allow(clippy::excessive_precision)]
pub const ORACLE_P: [[f64; 7]; 4] = [
    [
        9.3636455854316668e-1,
        8.2233048266826896e-1,
        6.1171199946580026e-1,
        5.2807938963406598e-1,
        2.5217164098009609e-1,
        3.7386073468498633e-2,
        4.4701412018308083e-1,
    ],
    [
        8.7736235949653625e-1,
        6.6431515057789499e-1,
        3.2678621414706388e-1,
        2.2305715730251093e-1,
        2.7308740359887815e-2,
        6.6444414062499929e-5,
        1.4213639115730285e-1,
    ],
    [
        6.2128997784530271e-1,
        1.6475649029241954e-1,
        1.6968246730388096e-3,
        9.6367951408984995e-5,
        1.6799057521475335e-12,
        4.0634052774905981e-37,
        2.6369788237603146e-6,
    ],
    [
        1.2575155262081548e-1,
        1.6657777007485515e-5,
        2.3054044397211173e-22,
        1.2656997487455116e-33,
        4.5602419712691635e-106,
        0.0,
        5.2694846388228701e-48,
    ],
];

/// Pearson r by the single-pass textbook formula.
pub fn closed_form_r(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (sx, sy) = (xs.iter().sum::<f64>(), ys.iter().sum::<f64>());
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let syy: f64 = ys.iter().map(|y| y * y).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

/// Synthesises, builds the bank, runs and evaluates under `base`, exactly as
/// the command-line workflow does.
pub fn full_pipeline(
    cfg: &regate::PipelineConfig,
    base: &std::path::Path,
) -> regate::Result<(regate::pipeline::RunOutput, regate::eval::EvalReport)> {
    use regate::pipeline::{build_bank_from_manifest, run, write_run};
    let paths = cfg.paths.resolved(base);
    let manifest = regate::synth::generate_dataset(&cfg.synth, &paths.data_dir)?;
    build_bank_from_manifest(&manifest, cfg)?.save(&paths.bank_dir)?;
    let manifest = regate::store::Manifest::load(&paths.manifest)?;
    let bank = MemoryBank::load(&paths.bank_dir)?;
    let out = run(&manifest, &bank, cfg)?;
    write_run(&out, &paths.out_dir)?;
    let report = regate::eval::evaluate(&out.records, &out.policy)?;
    regate::eval::emit_report(&report, &paths.out_dir)?;
    Ok((out, report))
}

/// Every file below `dir`, relative path to contents, in sorted order.
pub fn snapshot(dir: &std::path::Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    fn walk(
        root: &std::path::Path,
        dir: &std::path::Path,
        out: &mut std::collections::BTreeMap<String, Vec<u8>>,
    ) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = Default::default();
    walk(dir, dir, &mut out);
    out
}

/// Mean per-pixel mutual information over the first `scenes` synthetic scenes.
pub fn mean_mi(cfg: &regate::synth::SynthConfig, scenes: usize) -> f64 {
    use regate::uncertainty::EnsembleAnalysis;
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..scenes {
        let b = regate::synth::generate_scene(cfg, i).unwrap();
        let a = EnsembleAnalysis::from_logits(
            &b.logits,
            b.ensemble_size,
            b.class_count,
            b.height,
            b.width,
        )
        .unwrap();
        sum += a
            .mutual_information
            .values
            .iter()
            .map(|&v| v as f64)
            .sum::<f64>();
        count += a.mutual_information.values.len();
    }
    sum / count as f64
}
