//! Tensor files and dataset manifests.
//!
//! Tensors are stored as NPY v1.0 (little-endian, C order); a dataset is a
//! JSON manifest listing, per scene, the relative paths of its logits,
//! patch embeddings, global feature and label tensors.

mod manifest;
mod npy;
mod tensor;

pub use manifest::{
    load_bundle, Manifest, SceneBundle, SceneFiles, Split, DEFAULT_VOID_LABEL, MANIFEST_VERSION,
};
pub use npy::{decode, encode, read_tensor, write_tensor, MAGIC};
pub use tensor::{DType, Tensor, TensorData};
