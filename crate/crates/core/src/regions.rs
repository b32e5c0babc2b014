//! Region proposals from an uncertainty map: per-image percentile
//! threshold, 8-connected components, minimum-area filter, tight boxes.

use serde::{Deserialize, Serialize};

use crate::uncertainty::UncertaintyMap;

pub const DEFAULT_PERCENTILE: f32 = 75.0;
pub const DEFAULT_MIN_AREA: usize = 100;

/// Inclusive pixel box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn width(&self) -> usize {
        self.x1 + 1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 + 1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..=self.x1).contains(&x) && (self.y0..=self.y1).contains(&y)
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.x0 <= self.x1 && self.y0 <= self.y1 && self.x1 < width && self.y1 < height
    }

    /// Copies the box out of a row-major `[H, W]` plane.
    pub fn crop<T: Copy>(&self, plane: &[T], width: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(self.area());
        for y in self.y0..=self.y1 {
            out.extend_from_slice(&plane[y * width + self.x0..=y * width + self.x1]);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionParams {
    /// Percentile in [0, 100]; pixels at or above it are uncertain.
    pub percentile: f32,
    pub min_area: usize,
}

impl Default for RegionParams {
    fn default() -> Self {
        RegionParams {
            percentile: DEFAULT_PERCENTILE,
            min_area: DEFAULT_MIN_AREA,
        }
    }
}

/// A connected component of high-uncertainty pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionProposal {
    pub region_id: String,
    pub scene_id: String,
    pub bbox: BBox,
    /// Flat `y * width + x` indices of the component, ascending.
    pub pixels: Vec<usize>,
    pub image_height: usize,
    pub image_width: usize,
    pub area: usize,
    /// Mean uncertainty over the component pixels.
    pub score: f32,
}

impl RegionProposal {
    pub fn mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.image_height * self.image_width];
        for &p in &self.pixels {
            mask[p] = true;
        }
        mask
    }

    /// Mean of `plane` over the component pixels.
    pub fn masked_mean(&self, plane: &[f32]) -> f32 {
        let sum: f64 = self.pixels.iter().map(|&p| plane[p] as f64).sum();
        (sum / self.pixels.len().max(1) as f64) as f32
    }
}

/// Linear-interpolation percentile of an ascending slice:
/// rank `(n - 1) * q / 100`, interpolated between its floor and ceil.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty population");
    let q = q.clamp(0.0, 100.0);
    let rank = (sorted.len() - 1) as f64 * q / 100.0;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Threshold at the `q`-th percentile of the map and the inclusive mask of
/// pixels at or above it.
pub fn percentile_threshold(map: &UncertaintyMap, q: f32) -> (f32, Vec<bool>) {
    let mut sorted: Vec<f64> = map.values.iter().map(|&v| v as f64).collect();
    sorted.sort_by(f64::total_cmp);
    let threshold = percentile_sorted(&sorted, q as f64) as f32;
    let mask = map.values.iter().map(|&v| v >= threshold).collect();
    (threshold, mask)
}

/// Component labels for a binary mask: `0` is background, components are
/// numbered from `1` in raster order of their first pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Components {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub count: usize,
}

impl Components {
    /// Pixel indices of each component, ascending, indexed by `label - 1`.
    pub fn pixel_sets(&self) -> Vec<Vec<usize>> {
        let mut sets = vec![Vec::new(); self.count];
        for (p, &l) in self.labels.iter().enumerate() {
            if l > 0 {
                sets[l as usize - 1].push(p);
            }
        }
        sets
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let grand = parent[parent[x as usize] as usize];
        parent[x as usize] = grand;
        x = grand;
    }
    x
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi as usize] = lo;
    }
}

/// Two-pass 8-connected labelling with a union-find over provisional labels.
pub fn connected_components(mask: &[bool], height: usize, width: usize) -> Components {
    assert_eq!(
        mask.len(),
        height * width,
        "mask does not match {height}x{width}"
    );
    let mut labels = vec![0u32; mask.len()];
    // parent[0] is the background sentinel.
    let mut parent: Vec<u32> = vec![0];

    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            if !mask[p] {
                continue;
            }
            // Already-visited neighbours: W, NW, N, NE.
            let mut neighbours = [0u32; 4];
            let mut n = 0;
            if x > 0 && labels[p - 1] != 0 {
                neighbours[n] = labels[p - 1];
                n += 1;
            }
            if y > 0 {
                let up = p - width;
                if x > 0 && labels[up - 1] != 0 {
                    neighbours[n] = labels[up - 1];
                    n += 1;
                }
                if labels[up] != 0 {
                    neighbours[n] = labels[up];
                    n += 1;
                }
                if x + 1 < width && labels[up + 1] != 0 {
                    neighbours[n] = labels[up + 1];
                    n += 1;
                }
            }
            if n == 0 {
                let l = parent.len() as u32;
                parent.push(l);
                labels[p] = l;
            } else {
                let l = *neighbours[..n].iter().min().unwrap();
                labels[p] = l;
                for &other in &neighbours[..n] {
                    union(&mut parent, l, other);
                }
            }
        }
    }

    // Resolve roots and renumber in raster order of first appearance.
    let mut renumber = vec![0u32; parent.len()];
    let mut count = 0u32;
    for l in labels.iter_mut() {
        if *l == 0 {
            continue;
        }
        let root = find(&mut parent, *l) as usize;
        if renumber[root] == 0 {
            count += 1;
            renumber[root] = count;
        }
        *l = renumber[root];
    }

    Components {
        height,
        width,
        labels,
        count: count as usize,
    }
}

/// Uncertain regions of one image, sorted by descending score with ties
/// broken by the raster position of each component's first pixel.
pub fn extract_regions(
    map: &UncertaintyMap,
    scene_id: &str,
    params: &RegionParams,
) -> Vec<RegionProposal> {
    if map.values.is_empty() {
        return Vec::new();
    }
    let (_, mask) = percentile_threshold(map, params.percentile);
    let components = connected_components(&mask, map.height, map.width);

    let mut regions: Vec<RegionProposal> = components
        .pixel_sets()
        .into_iter()
        .filter(|pixels| pixels.len() >= params.min_area.max(1))
        .map(|pixels| {
            let mut bbox = BBox {
                x0: usize::MAX,
                y0: usize::MAX,
                x1: 0,
                y1: 0,
            };
            for &p in &pixels {
                let (y, x) = (p / map.width, p % map.width);
                bbox.x0 = bbox.x0.min(x);
                bbox.y0 = bbox.y0.min(y);
                bbox.x1 = bbox.x1.max(x);
                bbox.y1 = bbox.y1.max(y);
            }
            let sum: f64 = pixels.iter().map(|&p| map.values[p] as f64).sum();
            RegionProposal {
                region_id: String::new(),
                scene_id: scene_id.to_string(),
                bbox,
                area: pixels.len(),
                score: (sum / pixels.len() as f64) as f32,
                pixels,
                image_height: map.height,
                image_width: map.width,
            }
        })
        .collect();

    regions.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.pixels[0].cmp(&b.pixels[0]))
    });
    for (i, r) in regions.iter_mut().enumerate() {
        r.region_id = region_id(scene_id, i);
    }
    regions
}

pub fn region_id(scene_id: &str, ordinal: usize) -> String {
    format!("{scene_id}#{ordinal:04}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::uncertainty::UncertaintyKind;

    fn map(height: usize, width: usize, values: Vec<f32>) -> UncertaintyMap {
        UncertaintyMap {
            kind: UncertaintyKind::MutualInformation,
            height,
            width,
            values,
        }
    }

    #[test]
    fn percentile_interpolates() {
        let (t, mask) = percentile_threshold(&map(2, 2, vec![1.0, 2.0, 3.0, 4.0]), 75.0);
        assert_eq!(t, 3.25);
        assert_eq!(mask, vec![false, false, false, true]);
    }

    #[test]
    fn percentile_constant_map() {
        for q in [0.0, 37.5, 75.0, 100.0] {
            let (t, mask) = percentile_threshold(&map(2, 3, vec![0.42; 6]), q);
            assert_eq!(t, 0.42);
            assert!(mask.iter().all(|&m| m));
        }
    }

    #[test]
    fn percentile_zero_is_min() {
        let (t, mask) = percentile_threshold(&map(1, 4, vec![3.0, -1.0, 7.0, 2.0]), 0.0);
        assert_eq!(t, -1.0);
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn two_components_on_3x3() {
        let mut mask = vec![false; 9];
        for (y, x) in [(0, 0), (0, 1), (2, 1), (2, 2)] {
            mask[y * 3 + x] = true;
        }
        let cc = connected_components(&mask, 3, 3);
        assert_eq!(cc.count, 2);
        assert_eq!(cc.pixel_sets(), vec![vec![0, 1], vec![7, 8]]);
    }

    #[test]
    fn empty_mask() {
        let cc = connected_components(&[false; 12], 3, 4);
        assert_eq!(cc.count, 0);
        assert!(cc.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn diagonal_neighbours_join() {
        let cc = connected_components(&[true, false, false, true], 2, 2);
        assert_eq!(cc.count, 1);
        // anti-diagonal via the NE neighbour
        let cc = connected_components(&[false, true, true, false], 2, 2);
        assert_eq!(cc.count, 1);
    }

    #[test]
    fn u_shape_merges_late() {
        // Two arms that only meet on the bottom row.
        #[rustfmt::skip]
        let mask = [
            true, false, true,
            true, false, true,
            true, true,  true,
        ];
        let cc = connected_components(&mask, 3, 3);
        assert_eq!(cc.count, 1);
    }

    // Squares must cover at least a quarter of the image so the 75th
    // percentile falls between background and square values.
    fn square_map(h: usize, w: usize, squares: &[(usize, usize, usize, f32)]) -> UncertaintyMap {
        let mut values = vec![0.01f32; h * w];
        for &(x0, y0, side, v) in squares {
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    values[y * w + x] = v;
                }
            }
        }
        map(h, w, values)
    }

    #[test]
    fn single_square_region() {
        let m = square_map(24, 24, &[(5, 7, 12, 0.9)]);
        let regions = extract_regions(&m, "s", &RegionParams::default());
        assert_eq!(regions.len(), 1);
        let r = &regions[0];
        assert_eq!(
            r.bbox,
            BBox {
                x0: 5,
                y0: 7,
                x1: 16,
                y1: 18
            }
        );
        assert_eq!(r.area, 144);
        assert!((r.score - 0.9).abs() < 1e-7);
        assert_eq!(r.region_id, "s#0000");

        let none = extract_regions(
            &m,
            "s",
            &RegionParams {
                percentile: 75.0,
                min_area: 145,
            },
        );
        assert!(none.is_empty());
    }

    #[test]
    fn regions_sorted_by_score() {
        let m = square_map(24, 48, &[(2, 2, 12, 0.5), (30, 10, 12, 0.8)]);
        let regions = extract_regions(&m, "s", &RegionParams::default());
        assert_eq!(regions.len(), 2);
        assert!(regions[0].score > regions[1].score);
        assert_eq!(regions[0].bbox.x0, 30);
        assert_eq!(regions[1].bbox.x0, 2);
    }

    #[test]
    fn bbox_crop() {
        let plane: Vec<i32> = (0..20).collect();
        let b = BBox {
            x0: 1,
            y0: 2,
            x1: 2,
            y1: 3,
        };
        assert_eq!(b.crop(&plane, 5), vec![11, 12, 16, 17]);
    }
}
