//! End-to-end orchestration: bank construction, per-region retrieval and
//! counterfactual fusion, gating, and fused outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::info;
use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::eval::{region_iou, RegionRecord, RunRecords};
use crate::fusion::{apply_fusion, crop_probs, fuse_region, retrieved_crops, FusionTask};
use crate::gating::{compute_metrics, gate, GateDecision, GateMetrics, GroundTruth};
use crate::regions::BBox;
use crate::retrieval::{
    build_bank, query_hierarchical, roi_align, BankParams, MemoryBank, PatchGrid, RetrievalMatch,
};
use crate::store::{load_bundle, write_tensor, Manifest, SceneBundle, Split, Tensor};
use crate::uncertainty::{EnsembleAnalysis, ProbMap};

pub fn load_split(manifest: &Manifest, split: Split) -> Result<Vec<SceneBundle>> {
    manifest
        .scene_ids(split)
        .par_iter()
        .map(|id| load_bundle(manifest, id))
        .collect()
}

pub fn bank_params(cfg: &PipelineConfig, manifest: &Manifest) -> BankParams {
    BankParams {
        uncertainty_kind: cfg.uncertainty,
        keep_fraction: cfg.keep_fraction,
        regions: cfg.regions,
        patch_size: manifest.patch_size,
    }
}

/// Builds a bank from the manifest's bank split.
pub fn build_bank_from_manifest(manifest: &Manifest, cfg: &PipelineConfig) -> Result<MemoryBank> {
    let scenes = load_split(manifest, Split::Bank)?;
    if scenes.is_empty() {
        return Err(Error::Bank("manifest lists no bank scenes".into()));
    }
    let bank = build_bank(&scenes, &bank_params(cfg, manifest))?;
    info!(
        "bank built from {} scenes with {} entries",
        bank.scenes.len(),
        bank.entries.len()
    );
    Ok(bank)
}

/// One evaluation region with everything needed to gate and record it.
struct Candidate {
    metrics: GateMetrics,
    bbox: BBox,
    area: usize,
    matches: Vec<RetrievalMatch>,
    base_iou: f32,
    /// IoU if this region alone were fused.
    fused_iou: f32,
}

struct SceneWork {
    scene_id: String,
    base: ProbMap,
    candidates: Vec<Candidate>,
}

fn analyze_scene(
    bundle: &SceneBundle,
    bank: &MemoryBank,
    cfg: &PipelineConfig,
    patch_size: usize,
) -> Result<SceneWork> {
    let analysis = EnsembleAnalysis::from_logits(
        &bundle.logits,
        bundle.ensemble_size,
        bundle.class_count,
        bundle.height,
        bundle.width,
    )?;
    let base_pred = analysis.mean.argmax();
    let regions = crate::regions::extract_regions(
        analysis.map(cfg.uncertainty),
        &bundle.scene_id,
        &cfg.regions,
    );
    let grid = PatchGrid {
        values: &bundle.patch_embeddings,
        dim: bundle.embed_dim,
        rows: bundle.patch_rows,
        cols: bundle.patch_cols,
    };
    let truth = GroundTruth {
        labels: &bundle.labels,
        void_label: bundle.void_label,
    };

    let mut candidates = Vec::with_capacity(regions.len());
    for region in &regions {
        let mut metrics =
            compute_metrics(region, &analysis, cfg.uncertainty, &base_pred, Some(truth))?;
        let feature = roi_align(grid, &region.bbox, patch_size, &region.region_id)?;
        let matches = query_hierarchical(bank, &bundle.global_feature, &feature, &cfg.retrieval);
        metrics.best_similarity = matches.first().map(|m| m.region_similarity);

        let base_crop = crop_probs(&analysis.mean, &region.bbox);
        let retrieved = retrieved_crops(
            bank,
            &matches,
            base_crop.height,
            base_crop.width,
            &cfg.fusion,
        )?;
        let fused_crop = fuse_region(&base_crop, &retrieved, &cfg.fusion)?;
        let gt_crop = region.bbox.crop(&bundle.labels, bundle.width);
        let base_iou = metrics.base_iou.expect("ground truth supplied");
        let fused_iou = region_iou(
            &fused_crop.argmax(),
            &gt_crop,
            bundle.class_count,
            bundle.void_label,
        )?;
        candidates.push(Candidate {
            metrics,
            bbox: region.bbox,
            area: region.area,
            matches,
            base_iou,
            fused_iou,
        });
    }
    Ok(SceneWork {
        scene_id: bundle.scene_id.clone(),
        base: analysis.mean,
        candidates,
    })
}

#[derive(Debug, Clone)]
pub struct FusedScene {
    pub scene_id: String,
    pub base: ProbMap,
    pub fused: ProbMap,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub policy: String,
    pub records: Vec<RegionRecord>,
    pub decisions: Vec<GateDecision>,
    pub scenes: Vec<FusedScene>,
}

impl RunOutput {
    pub fn run_records(&self) -> RunRecords {
        RunRecords {
            policy: self.policy.clone(),
            records: self.records.clone(),
        }
    }
}

/// Analyses every evaluation scene, gates the pooled region population, and
/// fuses the regions that pass.
pub fn run(manifest: &Manifest, bank: &MemoryBank, cfg: &PipelineConfig) -> Result<RunOutput> {
    cfg.validate()?;
    if bank.class_count != manifest.class_count {
        return Err(Error::Bank(format!(
            "bank has {} classes, dataset {}",
            bank.class_count, manifest.class_count
        )));
    }
    let ids = manifest.scene_ids(Split::Eval);
    if ids.is_empty() {
        return Err(Error::Validation(
            "manifest lists no evaluation scenes".into(),
        ));
    }
    let work: Vec<SceneWork> = ids
        .par_iter()
        .map(|id| {
            let bundle = load_bundle(manifest, id)?;
            if bundle.embed_dim != bank.embed_dim {
                return Err(Error::Shape(format!(
                    "scene `{id}` embeds in {} dimensions, bank in {}",
                    bundle.embed_dim, bank.embed_dim
                )));
            }
            analyze_scene(&bundle, bank, cfg, manifest.patch_size)
        })
        .collect::<Result<_>>()?;

    let index: Vec<(usize, usize)> = work
        .iter()
        .enumerate()
        .flat_map(|(s, w)| (0..w.candidates.len()).map(move |r| (s, r)))
        .collect();
    let population: Vec<GateMetrics> = index
        .iter()
        .map(|&(s, r)| GateMetrics {
            best_similarity: None,
            ..work[s].candidates[r].metrics.clone()
        })
        .collect();
    info!(
        "{} evaluation regions across {} scenes",
        population.len(),
        work.len()
    );

    let decisions = gate(&cfg.gate, &population, |i| {
        let (s, r) = index[i];
        work[s].candidates[r].matches.clone()
    })?;

    let mut records = Vec::with_capacity(index.len());
    let mut tasks: Vec<Vec<FusionTask>> = vec![Vec::new(); work.len()];
    for (&(s, r), d) in index.iter().zip(&decisions) {
        let c = &work[s].candidates[r];
        if d.passed {
            tasks[s].push(FusionTask {
                bbox: c.bbox,
                matches: d.matches.clone(),
            });
        }
        let delta = c.fused_iou - c.base_iou;
        records.push(RegionRecord {
            region_id: c.metrics.region_id.clone(),
            scene_id: c.metrics.scene_id.clone(),
            bbox: c.bbox,
            area: c.area,
            metrics: c.metrics.clone(),
            stage1_passed: d.stage1_passed,
            passed_gate: d.passed,
            base_iou: c.base_iou,
            fused_iou: c.fused_iou,
            delta_iou: delta,
            success: delta > 0.0,
        });
    }

    let scenes = work
        .into_par_iter()
        .zip(tasks)
        .map(|(w, t)| {
            let fused = apply_fusion(&w.base, &t, bank, &cfg.fusion)?;
            Ok(FusedScene {
                scene_id: w.scene_id,
                base: w.base,
                fused,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(RunOutput {
        policy: cfg.gate.name(),
        records,
        decisions,
        scenes,
    })
}

/// Writes `fused/<scene>.npy` (`[C, H, W]` probabilities),
/// `fused/<scene>_labels.npy` (`[H, W]` argmax) and `records.json`.
pub fn write_run(out: &RunOutput, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let fused_dir = dir.join("fused");
    fs::create_dir_all(&fused_dir).map_err(|e| Error::io(&fused_dir, e))?;
    for s in &out.scenes {
        let f = &s.fused;
        write_tensor(
            fused_dir.join(format!("{}.npy", s.scene_id)),
            &Tensor::from_f32(vec![f.classes, f.height, f.width], f.values.clone())?,
        )?;
        write_tensor(
            fused_dir.join(format!("{}_labels.npy", s.scene_id)),
            &Tensor::from_i32(vec![f.height, f.width], f.argmax())?,
        )?;
    }
    out.run_records().save(dir.join("records.json"))
}

/// Human-readable bank summary.
pub fn describe_bank(bank: &MemoryBank) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "scenes       {}", bank.scenes.len());
    let _ = writeln!(s, "entries      {}", bank.entries.len());
    let _ = writeln!(s, "classes      {}", bank.class_count);
    let _ = writeln!(s, "embed_dim    {}", bank.embed_dim);
    let _ = writeln!(s, "uncertainty  {}", bank.uncertainty_kind.name());
    let norms: Vec<f64> = bank
        .entries
        .iter()
        .map(|e| {
            e.feature
                .iter()
                .map(|&v| v as f64 * v as f64)
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    if !norms.is_empty() {
        let min = norms.iter().copied().fold(f64::INFINITY, f64::min);
        let max = norms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(s, "feature norm min {min:.6} max {max:.6}");
    }
    let _ = writeln!(s, "per scene:");
    for scene in &bank.scenes {
        let _ = writeln!(
            s,
            "  {:<24} {}",
            scene.scene_id,
            bank.entries_of(&scene.scene_id).count()
        );
    }
    s
}
