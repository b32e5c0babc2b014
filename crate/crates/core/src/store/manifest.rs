use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::npy::{read_tensor, write_tensor};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: &str = "1";
pub const DEFAULT_VOID_LABEL: i32 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Bank,
    Eval,
}

/// One scene's tensor files, relative to the manifest directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFiles {
    pub scene_id: String,
    pub split: Split,
    pub logits: String,
    pub embeddings: String,
    pub global_feature: String,
    pub labels: String,
}

impl SceneFiles {
    /// Conventional file layout used by the synthesizer.
    pub fn standard(scene_id: &str, split: Split) -> Self {
        SceneFiles {
            scene_id: scene_id.to_string(),
            split,
            logits: format!("scenes/{scene_id}/logits.npy"),
            embeddings: format!("scenes/{scene_id}/embeddings.npy"),
            global_feature: format!("scenes/{scene_id}/global.npy"),
            labels: format!("scenes/{scene_id}/labels.npy"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: String,
    pub class_count: usize,
    pub void_label: i32,
    /// Pixels per side of one embedding patch.
    pub patch_size: usize,
    pub scenes: Vec<SceneFiles>,
    #[serde(skip)]
    root: PathBuf,
}

impl Manifest {
    pub fn new(
        root: impl Into<PathBuf>,
        class_count: usize,
        void_label: i32,
        patch_size: usize,
        scenes: Vec<SceneFiles>,
    ) -> Self {
        Manifest {
            version: MANIFEST_VERSION.to_string(),
            class_count,
            void_label,
            patch_size,
            scenes,
            root: root.into(),
        }
    }

    /// Reads and structurally validates a manifest. Tensor files are not
    /// opened; see [`Manifest::validate_all`].
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        manifest.root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        manifest.check_structure()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn scene_ids(&self, split: Split) -> Vec<&str> {
        self.scenes
            .iter()
            .filter(|s| s.split == split)
            .map(|s| s.scene_id.as_str())
            .collect()
    }

    pub fn scene(&self, scene_id: &str) -> Option<&SceneFiles> {
        self.scenes.iter().find(|s| s.scene_id == scene_id)
    }

    fn check_structure(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.version != MANIFEST_VERSION {
            problems.push(format!(
                "unsupported manifest version `{}` (expected `{MANIFEST_VERSION}`)",
                self.version
            ));
        }
        if self.class_count < 2 {
            problems.push(format!("class_count {} < 2", self.class_count));
        }
        if self.patch_size == 0 {
            problems.push("patch_size must be positive".to_string());
        }
        if (0..self.class_count as i64).contains(&(self.void_label as i64)) {
            problems.push(format!(
                "void_label {} collides with a class index",
                self.void_label
            ));
        }
        let mut seen = BTreeSet::new();
        for s in &self.scenes {
            if s.scene_id.is_empty() {
                problems.push("empty scene_id".to_string());
            }
            if !seen.insert(s.scene_id.as_str()) {
                problems.push(format!("duplicate scene_id `{}`", s.scene_id));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems.join("; ")))
        }
    }

    /// Loads every scene, checking that all files parse and that shapes
    /// agree across scenes.
    pub fn validate_all(&self) -> Result<()> {
        let mut embed_dim = None;
        for s in &self.scenes {
            let bundle = load_bundle(self, &s.scene_id)?;
            match embed_dim {
                None => embed_dim = Some(bundle.embed_dim),
                Some(d) if d != bundle.embed_dim => {
                    return Err(Error::Shape(format!(
                        "scene `{}` has embedding width {} but earlier scenes use {d}",
                        s.scene_id, bundle.embed_dim
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

/// Everything the engine knows about one image.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub scene_id: String,
    pub ensemble_size: usize,
    pub class_count: usize,
    pub height: usize,
    pub width: usize,
    /// Pre-softmax logits, `[K, C, H, W]`.
    pub logits: Vec<f32>,
    pub embed_dim: usize,
    pub patch_rows: usize,
    pub patch_cols: usize,
    /// `[D, Hp, Wp]`.
    pub patch_embeddings: Vec<f32>,
    /// `[D]`.
    pub global_feature: Vec<f32>,
    /// `[H, W]`, void pixels hold `void_label`.
    pub labels: Vec<i32>,
    pub void_label: i32,
}

impl SceneBundle {
    /// Assembles a bundle from its four tensors and checks every invariant.
    #[allow(clippy::too_many_arguments)]
    pub fn from_tensors(
        scene_id: &str,
        logits: Tensor,
        embeddings: Tensor,
        global: Tensor,
        labels: Tensor,
        class_count: usize,
        void_label: i32,
        patch_size: usize,
    ) -> Result<Self> {
        let ctx = |msg: String| Error::Validation(format!("scene `{scene_id}`: {msg}"));
        let shape_ctx = |msg: String| Error::Shape(format!("scene `{scene_id}`: {msg}"));

        let &[k, c, h, w] = logits.shape() else {
            return Err(shape_ctx(format!(
                "ensemble_logits must be [K, C, H, W], got {:?}",
                logits.shape()
            )));
        };
        if k < 2 {
            return Err(ctx(format!("ensemble size K = {k}, need at least 2")));
        }
        if c < 2 {
            return Err(ctx(format!("class count C = {c}, need at least 2")));
        }
        if c != class_count {
            return Err(shape_ctx(format!(
                "logits carry {c} classes, manifest declares {class_count}"
            )));
        }
        if h == 0 || w == 0 {
            return Err(shape_ctx(format!("empty image extent {h}x{w}")));
        }
        let &[d, hp, wp] = embeddings.shape() else {
            return Err(shape_ctx(format!(
                "patch_embeddings must be [D, Hp, Wp], got {:?}",
                embeddings.shape()
            )));
        };
        if d == 0 || hp * wp == 0 {
            return Err(shape_ctx(format!(
                "degenerate patch grid [{d}, {hp}, {wp}]"
            )));
        }
        let grid_ok = |extent: usize, cells: usize| {
            cells == extent / patch_size || cells == extent.div_ceil(patch_size)
        };
        if !grid_ok(h, hp) || !grid_ok(w, wp) {
            return Err(shape_ctx(format!(
                "patch grid {hp}x{wp} does not tile a {h}x{w} image at patch size {patch_size}"
            )));
        }
        if global.shape() != [d] {
            return Err(shape_ctx(format!(
                "global_feature must be [{d}], got {:?}",
                global.shape()
            )));
        }
        if labels.shape() != [h, w] {
            return Err(shape_ctx(format!(
                "labels are {:?} but logits are {h}x{w}",
                labels.shape()
            )));
        }

        let labels = labels.into_i32()?;
        if let Some(bad) = labels
            .iter()
            .find(|&&l| l != void_label && !(0..c as i32).contains(&l))
        {
            return Err(ctx(format!(
                "label value {bad} outside [0, {c}) and not void ({void_label})"
            )));
        }

        Ok(SceneBundle {
            scene_id: scene_id.to_string(),
            ensemble_size: k,
            class_count: c,
            height: h,
            width: w,
            logits: logits.into_f32()?,
            embed_dim: d,
            patch_rows: hp,
            patch_cols: wp,
            patch_embeddings: embeddings.into_f32()?,
            global_feature: global.into_f32()?,
            labels,
            void_label,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    /// Logits of one ensemble member, `[C, H, W]`.
    pub fn member_logits(&self, k: usize) -> &[f32] {
        let n = self.class_count * self.pixel_count();
        &self.logits[k * n..(k + 1) * n]
    }

    /// Writes the four tensor files named by `files` under `root`.
    pub fn write(&self, root: &Path, files: &SceneFiles) -> Result<()> {
        let tensors = [
            (
                &files.logits,
                Tensor::from_f32(
                    vec![
                        self.ensemble_size,
                        self.class_count,
                        self.height,
                        self.width,
                    ],
                    self.logits.clone(),
                )?,
            ),
            (
                &files.embeddings,
                Tensor::from_f32(
                    vec![self.embed_dim, self.patch_rows, self.patch_cols],
                    self.patch_embeddings.clone(),
                )?,
            ),
            (
                &files.global_feature,
                Tensor::from_f32(vec![self.embed_dim], self.global_feature.clone())?,
            ),
            (
                &files.labels,
                Tensor::from_i32(vec![self.height, self.width], self.labels.clone())?,
            ),
        ];
        for (rel, tensor) in tensors {
            let path = root.join(rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            write_tensor(&path, &tensor)?;
        }
        Ok(())
    }
}

/// Loads and validates one scene listed in the manifest.
pub fn load_bundle(manifest: &Manifest, scene_id: &str) -> Result<SceneBundle> {
    let files = manifest
        .scene(scene_id)
        .ok_or_else(|| Error::UnknownScene(scene_id.to_string()))?;
    let root = manifest.root();
    SceneBundle::from_tensors(
        scene_id,
        read_tensor(root.join(&files.logits))?,
        read_tensor(root.join(&files.embeddings))?,
        read_tensor(root.join(&files.global_feature))?,
        read_tensor(root.join(&files.labels))?,
        manifest.class_count,
        manifest.void_label,
        manifest.patch_size,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensors(k: usize, labels: Vec<i32>) -> (Tensor, Tensor, Tensor, Tensor) {
        let (c, h, w) = (3, 4, 4);
        (
            Tensor::from_f32(vec![k, c, h, w], vec![0.0; k * c * h * w]).unwrap(),
            Tensor::from_f32(vec![8, 2, 2], vec![1.0; 32]).unwrap(),
            Tensor::from_f32(vec![8], vec![1.0; 8]).unwrap(),
            Tensor::from_i32(vec![h, w], labels).unwrap(),
        )
    }

    #[test]
    fn accepts_valid_bundle() {
        let mut labels = vec![0; 16];
        labels[3] = 255;
        labels[5] = 2;
        let (l, e, g, y) = tensors(2, labels);
        let b = SceneBundle::from_tensors("s", l, e, g, y, 3, 255, 2).unwrap();
        assert_eq!(b.ensemble_size, 2);
        assert_eq!(b.patch_rows, 2);
    }

    #[test]
    fn rejects_label_equal_to_class_count() {
        let mut labels = vec![0; 16];
        labels[7] = 3;
        let (l, e, g, y) = tensors(2, labels);
        let err = SceneBundle::from_tensors("s", l, e, g, y, 3, 255, 2).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn rejects_single_member_ensemble() {
        let (l, e, g, y) = tensors(1, vec![0; 16]);
        let err = SceneBundle::from_tensors("s", l, e, g, y, 3, 255, 2).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn rejects_label_shape_mismatch() {
        let (l, e, g, _) = tensors(2, vec![0; 16]);
        let y = Tensor::from_i32(vec![4, 3], vec![0; 12]).unwrap();
        let err = SceneBundle::from_tensors("s", l, e, g, y, 3, 255, 2).unwrap_err();
        assert!(matches!(err, Error::Shape(_)), "{err}");
    }

    #[test]
    fn rejects_global_width_mismatch() {
        let (l, e, _, y) = tensors(2, vec![0; 16]);
        let g = Tensor::from_f32(vec![7], vec![1.0; 7]).unwrap();
        assert!(SceneBundle::from_tensors("s", l, e, g, y, 3, 255, 2).is_err());
    }

    #[test]
    fn manifest_structure_errors_are_collected() {
        let mut m = Manifest::new(".", 1, 0, 0, vec![]);
        m.scenes.push(SceneFiles::standard("a", Split::Bank));
        m.scenes.push(SceneFiles::standard("a", Split::Eval));
        let Error::Validation(msg) = m.check_structure().unwrap_err() else {
            panic!("wrong error kind")
        };
        assert!(msg.contains("class_count"));
        assert!(msg.contains("patch_size"));
        assert!(msg.contains("void_label"));
        assert!(msg.contains("duplicate"));
    }

    #[test]
    fn unknown_scene() {
        let m = Manifest::new(".", 3, 255, 2, vec![]);
        assert!(matches!(
            load_bundle(&m, "nope"),
            Err(Error::UnknownScene(_))
        ));
    }
}
