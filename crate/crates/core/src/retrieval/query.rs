use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::bank::MemoryBank;
use super::roi::{cosine, unit_dot, RegionFeature};

pub const DEFAULT_TOP_IMAGES: usize = 50;
pub const DEFAULT_TOP_REGIONS: usize = 5;

/// One retrieved bank entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMatch {
    /// Index into `MemoryBank::entries`.
    pub entry: usize,
    pub scene_id: String,
    pub region_id: String,
    pub region_similarity: f32,
    pub global_similarity: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalParams {
    pub top_images: usize,
    pub top_regions: usize,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        RetrievalParams {
            top_images: DEFAULT_TOP_IMAGES,
            top_regions: DEFAULT_TOP_REGIONS,
        }
    }
}

fn by_similarity_then_ids(a: &RetrievalMatch, b: &RetrievalMatch) -> Ordering {
    b.region_similarity
        .total_cmp(&a.region_similarity)
        .then_with(|| a.scene_id.cmp(&b.scene_id))
        .then_with(|| a.region_id.cmp(&b.region_id))
}

/// Two-stage search: rank bank scenes by global cosine similarity and keep
/// the best `top_images`, then rank the entries of those scenes by region
/// cosine similarity and return the best `top_regions`.
pub fn query_hierarchical(
    bank: &MemoryBank,
    query_global: &[f32],
    query_region: &RegionFeature,
    params: &RetrievalParams,
) -> Vec<RetrievalMatch> {
    let mut ranked: Vec<(f32, &str)> = bank
        .scenes
        .iter()
        .map(|s| (cosine(query_global, &s.global), s.scene_id.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    ranked.truncate(params.top_images);

    let mut matches: Vec<RetrievalMatch> = ranked
        .iter()
        .flat_map(|&(global_similarity, scene_id)| {
            bank.entries_of(scene_id).map(move |(i, e)| RetrievalMatch {
                entry: i,
                scene_id: e.scene_id.clone(),
                region_id: e.region_id.clone(),
                region_similarity: unit_dot(&query_region.vector, &e.feature),
                global_similarity,
            })
        })
        .collect();
    matches.sort_by(by_similarity_then_ids);
    matches.truncate(params.top_regions);
    matches
}
