//! Pipeline configuration: defaults, overlaid by a JSON file, overlaid by
//! `key.path=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::gating::GatePolicy;
use crate::regions::RegionParams;
use crate::retrieval::{RetrievalParams, DEFAULT_KEEP_FRACTION};
use crate::synth::SynthConfig;
use crate::uncertainty::UncertaintyKind;

/// Relative paths resolve against the base directory given at run time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Where `synth` writes scenes and `manifest.json`.
    pub data_dir: PathBuf,
    pub manifest: PathBuf,
    pub bank_dir: PathBuf,
    /// Where `run` and `eval` write their outputs.
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: "data".into(),
            manifest: "data/manifest.json".into(),
            bank_dir: "bank".into(),
            out_dir: "out".into(),
        }
    }
}

impl PathsConfig {
    pub fn resolved(&self, base: &Path) -> PathsConfig {
        PathsConfig {
            data_dir: base.join(&self.data_dir),
            manifest: base.join(&self.manifest),
            bank_dir: base.join(&self.bank_dir),
            out_dir: base.join(&self.out_dir),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub synth: SynthConfig,
    pub uncertainty: UncertaintyKind,
    pub regions: RegionParams,
    pub retrieval: RetrievalParams,
    /// Share of each bank scene's regions kept, most confident first.
    pub keep_fraction: f32,
    pub fusion: FusionConfig,
    pub gate: GatePolicy,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            paths: PathsConfig::default(),
            synth: SynthConfig::default(),
            uncertainty: UncertaintyKind::MutualInformation,
            regions: RegionParams::default(),
            retrieval: RetrievalParams::default(),
            keep_fraction: DEFAULT_KEEP_FRACTION,
            fusion: FusionConfig::default(),
            gate: GatePolicy::TwoStage,
        }
    }
}

fn merge(dst: &mut Value, src: Value) {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                match d.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        d.insert(k, v);
                    }
                }
            }
        }
        (d, s) => *d = s,
    }
}

/// Sets `key.path` in `root` to `raw`, parsed as JSON when possible and
/// taken as a string otherwise.
fn apply_override(root: &mut Value, assignment: &str) -> std::result::Result<(), String> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| format!("override `{assignment}` is not key=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut slot = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = slot
            .as_object_mut()
            .ok_or_else(|| format!("`{}` is not a section", parts[..i].join(".")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        slot = obj
            .get_mut(*part)
            .ok_or_else(|| format!("unknown config section `{}`", parts[..=i].join(".")))?;
    }
    Ok(())
}

impl PipelineConfig {
    /// Defaults, then `file`, then each `key=value` in `overrides`.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(PipelineConfig::default())
            .map_err(|e| Error::Config(vec![e.to_string()]))?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let from_file: Value = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
            if !from_file.is_object() {
                return Err(Error::Config(vec![format!(
                    "{} must hold a JSON object",
                    path.display()
                )]));
            }
            merge(&mut value, from_file);
        }
        let mut problems = Vec::new();
        for o in overrides {
            if let Err(p) = apply_override(&mut value, o) {
                problems.push(p);
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let cfg: PipelineConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = self.synth.problems();
        if !(0.0..=100.0).contains(&self.regions.percentile) {
            p.push(format!(
                "regions.percentile {} outside [0, 100]",
                self.regions.percentile
            ));
        }
        if self.regions.min_area == 0 {
            p.push("regions.min_area must be >= 1".into());
        }
        if self.retrieval.top_images == 0 {
            p.push("retrieval.top_images must be >= 1".into());
        }
        if self.retrieval.top_regions == 0 {
            p.push("retrieval.top_regions must be >= 1".into());
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            p.push(format!(
                "keep_fraction {} outside (0, 1]",
                self.keep_fraction
            ));
        }
        p.extend(self.fusion.problems());
        if let GatePolicy::TopKBy { fraction, .. } = self.gate {
            if !(0.0..=1.0).contains(&fraction) {
                p.push(format!("gate.fraction {fraction} outside [0, 1]"));
            }
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
}
