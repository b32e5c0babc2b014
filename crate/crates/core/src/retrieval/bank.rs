use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::roi::{normalized, roi_align, PatchGrid, RegionFeature};
use crate::error::{Error, Result};
use crate::regions::{extract_regions, BBox, RegionParams, RegionProposal};
use crate::store::{read_tensor, write_tensor, SceneBundle, Tensor};
use crate::uncertainty::{EnsembleAnalysis, UncertaintyKind};

pub const BANK_VERSION: &str = "1";
pub const DEFAULT_KEEP_FRACTION: f32 = 0.25;
const NORM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankScene {
    pub scene_id: String,
    /// Unit-norm global feature.
    pub global: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub scene_id: String,
    pub region_id: String,
    /// Unit-norm region feature.
    pub feature: Vec<f32>,
    pub bbox: BBox,
    /// Ground-truth labels inside `bbox`, row-major.
    pub label_crop: Vec<i32>,
    pub source_uncertainty: f32,
}

/// Immutable store of scene globals and confidence-filtered region entries,
/// grouped by scene in `scenes` order.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub class_count: usize,
    pub embed_dim: usize,
    pub void_label: i32,
    pub uncertainty_kind: UncertaintyKind,
    pub scenes: Vec<BankScene>,
    pub entries: Vec<BankEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BankParams {
    pub uncertainty_kind: UncertaintyKind,
    pub keep_fraction: f32,
    pub regions: RegionParams,
    pub patch_size: usize,
}

/// Number of regions retained from a scene with `n` candidates.
pub fn retained_count(n: usize, keep_fraction: f32) -> usize {
    if n == 0 {
        0
    } else {
        ((keep_fraction as f64 * n as f64).floor() as usize).clamp(1, n)
    }
}

/// The `retained_count` lowest-score regions, ascending by score with ties
/// in their original order.
pub fn most_confident(mut regions: Vec<RegionProposal>, keep_fraction: f32) -> Vec<RegionProposal> {
    let keep = retained_count(regions.len(), keep_fraction);
    regions.sort_by(|a, b| a.score.total_cmp(&b.score));
    regions.truncate(keep);
    regions
}

struct SceneContribution {
    scene: BankScene,
    entries: Vec<BankEntry>,
}

fn scene_contribution(bundle: &SceneBundle, params: &BankParams) -> Result<SceneContribution> {
    let analysis = EnsembleAnalysis::from_logits(
        &bundle.logits,
        bundle.ensemble_size,
        bundle.class_count,
        bundle.height,
        bundle.width,
    )?;
    let regions = extract_regions(
        analysis.map(params.uncertainty_kind),
        &bundle.scene_id,
        &params.regions,
    );
    if regions.is_empty() {
        warn!(
            "scene `{}` has no uncertain regions; contributing its global feature only",
            bundle.scene_id
        );
    }
    let grid = PatchGrid {
        values: &bundle.patch_embeddings,
        dim: bundle.embed_dim,
        rows: bundle.patch_rows,
        cols: bundle.patch_cols,
    };
    let entries = most_confident(regions, params.keep_fraction)
        .into_iter()
        .map(|r| {
            let RegionFeature { vector, .. } =
                roi_align(grid, &r.bbox, params.patch_size, &r.region_id)?;
            Ok(BankEntry {
                scene_id: bundle.scene_id.clone(),
                label_crop: r.bbox.crop(&bundle.labels, bundle.width),
                region_id: r.region_id,
                feature: vector,
                bbox: r.bbox,
                source_uncertainty: r.score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let global = normalized(&bundle.global_feature).ok_or_else(|| {
        Error::Bank(format!(
            "scene `{}` has a zero global feature",
            bundle.scene_id
        ))
    })?;
    debug!(
        "bank scene `{}`: {} entries",
        bundle.scene_id,
        entries.len()
    );
    Ok(SceneContribution {
        scene: BankScene {
            scene_id: bundle.scene_id.clone(),
            global,
        },
        entries,
    })
}

/// Builds a bank from the given scenes. Scenes are processed in parallel and
/// assembled in input order.
pub fn build_bank(scenes: &[SceneBundle], params: &BankParams) -> Result<MemoryBank> {
    if !(params.keep_fraction > 0.0 && params.keep_fraction <= 1.0) {
        return Err(Error::Bank(format!(
            "keep_fraction {} outside (0, 1]",
            params.keep_fraction
        )));
    }
    let first = scenes
        .first()
        .ok_or_else(|| Error::Bank("no scenes to build a bank from".into()))?;
    if let Some(bad) = scenes
        .iter()
        .find(|s| s.class_count != first.class_count || s.embed_dim != first.embed_dim)
    {
        return Err(Error::Shape(format!(
            "scene `{}` disagrees with `{}` on class count or embedding width",
            bad.scene_id, first.scene_id
        )));
    }

    let parts = scenes
        .par_iter()
        .map(|s| scene_contribution(s, params))
        .collect::<Result<Vec<_>>>()?;

    let mut bank = MemoryBank {
        class_count: first.class_count,
        embed_dim: first.embed_dim,
        void_label: first.void_label,
        uncertainty_kind: params.uncertainty_kind,
        scenes: Vec::with_capacity(parts.len()),
        entries: Vec::new(),
    };
    for part in parts {
        bank.scenes.push(part.scene);
        bank.entries.extend(part.entries);
    }
    bank.validate()?;
    Ok(bank)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankIndex {
    version: String,
    class_count: usize,
    embed_dim: usize,
    void_label: i32,
    uncertainty_kind: UncertaintyKind,
    scenes: Vec<String>,
    entries: Vec<EntryIndex>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryIndex {
    scene_id: String,
    region_id: String,
    bbox: BBox,
    source_uncertainty: f32,
    /// Offset of this entry's crop in `label_crops.npy`.
    crop_offset: usize,
}

const INDEX_FILE: &str = "bank.json";
const GLOBALS_FILE: &str = "globals.npy";
const FEATURES_FILE: &str = "features.npy";
const CROPS_FILE: &str = "label_crops.npy";

impl MemoryBank {
    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// Checks grouping, dimensions, crop shapes and unit norms.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let ids: BTreeSet<&str> = self.scenes.iter().map(|s| s.scene_id.as_str()).collect();
        if ids.len() != self.scenes.len() {
            problems.push("duplicate scene ids".to_string());
        }
        let unit = |v: &[f32]| {
            let n = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
            (n - 1.0).abs() <= NORM_TOLERANCE
        };
        for s in &self.scenes {
            if s.global.len() != self.embed_dim || !unit(&s.global) {
                problems.push(format!(
                    "global feature of `{}` is not a unit {}-vector",
                    s.scene_id, self.embed_dim
                ));
            }
        }
        let order: Vec<&str> = self.scenes.iter().map(|s| s.scene_id.as_str()).collect();
        let mut cursor = 0;
        for e in &self.entries {
            match order[cursor..].iter().position(|&id| id == e.scene_id) {
                Some(offset) => cursor += offset,
                None if ids.contains(e.scene_id.as_str()) => problems.push(format!(
                    "entry `{}` is not grouped with its scene",
                    e.region_id
                )),
                None => problems.push(format!(
                    "entry `{}` references unknown scene `{}`",
                    e.region_id, e.scene_id
                )),
            }
            if e.feature.len() != self.embed_dim || !unit(&e.feature) {
                problems.push(format!(
                    "feature of `{}` is not a unit {}-vector",
                    e.region_id, self.embed_dim
                ));
            }
            if e.label_crop.len() != e.bbox.area() {
                problems.push(format!(
                    "label crop of `{}` has {} values for a {}x{} box",
                    e.region_id,
                    e.label_crop.len(),
                    e.bbox.height(),
                    e.bbox.width()
                ));
            }
            if let Some(bad) = e
                .label_crop
                .iter()
                .find(|&&l| l != self.void_label && !(0..self.class_count as i32).contains(&l))
            {
                problems.push(format!(
                    "label crop of `{}` holds invalid label {bad}",
                    e.region_id
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Bank(problems.join("; ")))
        }
    }

    /// Entries whose scene is `scene_id`.
    pub fn entries_of<'a>(
        &'a self,
        scene_id: &'a str,
    ) -> impl Iterator<Item = (usize, &'a BankEntry)> + 'a {
        self.entries
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.scene_id == scene_id)
    }

    /// Writes `bank.json` plus the global, feature and label-crop tensors.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

        let mut crop_offset = 0;
        let mut crops = Vec::new();
        let entries = self
            .entries
            .iter()
            .map(|e| {
                let idx = EntryIndex {
                    scene_id: e.scene_id.clone(),
                    region_id: e.region_id.clone(),
                    bbox: e.bbox,
                    source_uncertainty: e.source_uncertainty,
                    crop_offset,
                };
                crop_offset += e.label_crop.len();
                crops.extend_from_slice(&e.label_crop);
                idx
            })
            .collect();
        let index = BankIndex {
            version: BANK_VERSION.to_string(),
            class_count: self.class_count,
            embed_dim: self.embed_dim,
            void_label: self.void_label,
            uncertainty_kind: self.uncertainty_kind,
            scenes: self.scenes.iter().map(|s| s.scene_id.clone()).collect(),
            entries,
        };

        let index_path = dir.join(INDEX_FILE);
        let mut text =
            serde_json::to_string_pretty(&index).map_err(|e| Error::json(&index_path, e))?;
        text.push('\n');
        fs::write(&index_path, text).map_err(|e| Error::io(&index_path, e))?;

        let globals: Vec<f32> = self
            .scenes
            .iter()
            .flat_map(|s| s.global.iter().copied())
            .collect();
        write_tensor(
            dir.join(GLOBALS_FILE),
            &Tensor::from_f32(vec![self.scenes.len(), self.embed_dim], globals)?,
        )?;
        let features: Vec<f32> = self
            .entries
            .iter()
            .flat_map(|e| e.feature.iter().copied())
            .collect();
        write_tensor(
            dir.join(FEATURES_FILE),
            &Tensor::from_f32(vec![self.entries.len(), self.embed_dim], features)?,
        )?;
        write_tensor(
            dir.join(CROPS_FILE),
            &Tensor::from_i32(vec![crops.len()], crops)?,
        )?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let index_path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let index: BankIndex =
            serde_json::from_str(&text).map_err(|e| Error::json(&index_path, e))?;
        if index.version != BANK_VERSION {
            return Err(Error::Bank(format!(
                "bank version `{}` is not supported (expected `{BANK_VERSION}`)",
                index.version
            )));
        }
        let d = index.embed_dim;

        let globals = read_tensor(dir.join(GLOBALS_FILE))?;
        if globals.shape() != [index.scenes.len(), d] {
            return Err(Error::Bank(format!(
                "globals tensor is {:?}, index expects [{}, {d}]",
                globals.shape(),
                index.scenes.len()
            )));
        }
        let features = read_tensor(dir.join(FEATURES_FILE))?;
        if features.shape() != [index.entries.len(), d] {
            return Err(Error::Bank(format!(
                "features tensor is {:?}, index expects [{}, {d}]",
                features.shape(),
                index.entries.len()
            )));
        }
        let crops = read_tensor(dir.join(CROPS_FILE))?;
        let globals = globals.into_f32()?;
        let features = features.into_f32()?;
        let crops = crops.into_i32()?;

        let scenes = index
            .scenes
            .into_iter()
            .enumerate()
            .map(|(i, scene_id)| BankScene {
                scene_id,
                global: globals[i * d..(i + 1) * d].to_vec(),
            })
            .collect();
        let entries = index
            .entries
            .into_iter()
            .enumerate()
            .map(|(i, e)| {
                let end = e.crop_offset + e.bbox.area();
                let label_crop = crops
                    .get(e.crop_offset..end)
                    .ok_or_else(|| {
                        Error::Bank(format!(
                            "label crop of `{}` runs past the crop tensor",
                            e.region_id
                        ))
                    })?
                    .to_vec();
                Ok(BankEntry {
                    scene_id: e.scene_id,
                    region_id: e.region_id,
                    feature: features[i * d..(i + 1) * d].to_vec(),
                    bbox: e.bbox,
                    label_crop,
                    source_uncertainty: e.source_uncertainty,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let bank = MemoryBank {
            class_count: index.class_count,
            embed_dim: d,
            void_label: index.void_label,
            uncertainty_kind: index.uncertainty_kind,
            scenes,
            entries,
        };
        bank.validate()?;
        Ok(bank)
    }
}

/// Writes a bank directory.
pub fn save_bank(bank: &MemoryBank, dir: impl AsRef<Path>) -> Result<()> {
    bank.save(dir)
}

/// Reads a bank directory.
pub fn load_bank(dir: impl AsRef<Path>) -> Result<MemoryBank> {
    MemoryBank::load(dir)
}
