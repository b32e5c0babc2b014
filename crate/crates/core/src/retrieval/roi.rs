use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regions::BBox;

/// Unit-norm region descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionFeature {
    pub region_id: String,
    pub vector: Vec<f32>,
}

/// A `[D, Hp, Wp]` patch-embedding grid borrowed from a scene.
#[derive(Debug, Clone, Copy)]
pub struct PatchGrid<'a> {
    pub values: &'a [f32],
    pub dim: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid<'_> {
    /// Bilinear sample of every channel at continuous patch coordinates,
    /// where patch `(r, c)` sits at `(y, x) = (r, c)`. Coordinates are
    /// clamped to the grid.
    fn sample_into(&self, y: f64, x: f64, acc: &mut [f64]) {
        let (y, x) = (
            y.clamp(0.0, (self.rows - 1) as f64),
            x.clamp(0.0, (self.cols - 1) as f64),
        );
        let (r0, c0) = (y.floor() as usize, x.floor() as usize);
        let (r1, c1) = ((r0 + 1).min(self.rows - 1), (c0 + 1).min(self.cols - 1));
        let (fy, fx) = (y - r0 as f64, x - c0 as f64);
        let plane = self.rows * self.cols;
        let at = |d: usize, r: usize, c: usize| self.values[d * plane + r * self.cols + c] as f64;
        for (d, slot) in acc.iter_mut().enumerate() {
            let top = at(d, r0, c0) * (1.0 - fx) + at(d, r0, c1) * fx;
            let bottom = at(d, r1, c0) * (1.0 - fx) + at(d, r1, c1) * fx;
            *slot += top * (1.0 - fy) + bottom * fy;
        }
    }
}

/// RoI Align of a pixel box onto the patch grid with a single output bin and
/// a 2x2 sampling lattice at 1/4 and 3/4 of the bin, followed by L2
/// normalisation.
pub fn roi_align(
    grid: PatchGrid<'_>,
    bbox: &BBox,
    patch_size: usize,
    region_id: &str,
) -> Result<RegionFeature> {
    if bbox.x1 < bbox.x0 || bbox.y1 < bbox.y0 {
        return Err(Error::Feature(format!("degenerate box {bbox:?}")));
    }
    if grid.dim == 0 || grid.rows == 0 || grid.cols == 0 || patch_size == 0 {
        return Err(Error::Feature("empty patch grid".into()));
    }
    if grid.values.len() != grid.dim * grid.rows * grid.cols {
        return Err(Error::Shape(format!(
            "patch grid [{}, {}, {}] given {} values",
            grid.dim,
            grid.rows,
            grid.cols,
            grid.values.len()
        )));
    }

    let ps = patch_size as f64;
    let (gx0, gx1) = (bbox.x0 as f64 / ps, (bbox.x1 + 1) as f64 / ps);
    let (gy0, gy1) = (bbox.y0 as f64 / ps, (bbox.y1 + 1) as f64 / ps);
    let mut acc = vec![0f64; grid.dim];
    for fy in [0.25, 0.75] {
        for fx in [0.25, 0.75] {
            grid.sample_into(gy0 + (gy1 - gy0) * fy, gx0 + (gx1 - gx0) * fx, &mut acc);
        }
    }

    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= 0.0 || !norm.is_finite() {
        return Err(Error::Feature(format!(
            "region `{region_id}` pools to a zero-norm feature"
        )));
    }
    Ok(RegionFeature {
        region_id: region_id.to_string(),
        vector: acc.iter().map(|v| (v / norm) as f32).collect(),
    })
}

/// L2-normalised copy, or `None` for a zero vector.
pub fn normalized(v: &[f32]) -> Option<Vec<f32>> {
    let norm = v
        .iter()
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    (norm > 0.0 && norm.is_finite()).then(|| v.iter().map(|&x| (x as f64 / norm) as f32).collect())
}

/// Cosine similarity; zero vectors have similarity 0 with everything.
pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0) as f32
}

/// Dot product of unit vectors, clamped to [-1, 1].
pub fn unit_dot(a: &[f32], b: &[f32]) -> f32 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    dot.clamp(-1.0, 1.0) as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bbox(x0: usize, y0: usize, x1: usize, y1: usize) -> BBox {
        BBox { x0, y0, x1, y1 }
    }

    #[test]
    fn constant_field() {
        let v = [3.0f32, -4.0];
        let (rows, cols) = (3, 5);
        let mut values = Vec::new();
        for &c in &v {
            values.extend(std::iter::repeat_n(c, rows * cols));
        }
        let grid = PatchGrid {
            values: &values,
            dim: 2,
            rows,
            cols,
        };
        for b in [bbox(0, 0, 39, 23), bbox(3, 5, 9, 6), bbox(17, 2, 17, 2)] {
            let f = roi_align(grid, &b, 8, "r").unwrap();
            assert!((f.vector[0] - 0.6).abs() < 1e-6);
            assert!((f.vector[1] + 0.8).abs() < 1e-6);
        }
    }

    #[test]
    fn linear_field_reproduces_bin_centre() {
        // channel 0 = column index, channel 1 = 1 so the ratio recovers it.
        let (rows, cols) = (4, 10);
        let mut values = Vec::new();
        for _ in 0..rows {
            values.extend((0..cols).map(|c| c as f32));
        }
        values.extend(std::iter::repeat_n(1.0, rows * cols));
        let grid = PatchGrid {
            values: &values,
            dim: 2,
            rows,
            cols,
        };
        // pixels 16..=47 at patch size 8 -> grid x in [2, 6); samples at 3 and 5.
        let f = roi_align(grid, &bbox(16, 0, 47, 15), 8, "r").unwrap();
        let centre = f.vector[0] / f.vector[1];
        assert!((centre - 4.0).abs() < 1e-5, "{centre}");
    }

    #[test]
    fn box_inside_last_patch_takes_that_patch() {
        let (rows, cols) = (2, 2);
        // channel-major: ch0 = [1,2,3,4], ch1 = [4,3,2,1]
        let values = [1.0, 2.0, 3.0, 4.0, 4.0, 3.0, 2.0, 1.0];
        let grid = PatchGrid {
            values: &values,
            dim: 2,
            rows,
            cols,
        };
        let f = roi_align(grid, &bbox(10, 11, 13, 14), 8, "r").unwrap();
        let expect = normalized(&[4.0, 1.0]).unwrap();
        assert!((f.vector[0] - expect[0]).abs() < 1e-6);
        assert!((f.vector[1] - expect[1]).abs() < 1e-6);
    }

    #[test]
    fn single_patch_grid() {
        let values = [0.5f32, 0.5, 0.0];
        let grid = PatchGrid {
            values: &values,
            dim: 3,
            rows: 1,
            cols: 1,
        };
        let f = roi_align(grid, &bbox(1, 1, 5, 6), 14, "r").unwrap();
        assert!((f.vector[0] - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-6);
    }

    #[test]
    fn errors() {
        let values = [0.0f32; 4];
        let grid = PatchGrid {
            values: &values,
            dim: 1,
            rows: 2,
            cols: 2,
        };
        assert!(matches!(
            roi_align(grid, &bbox(0, 0, 3, 3), 2, "r"),
            Err(Error::Feature(_))
        ));
        let values = [1.0f32; 4];
        let grid = PatchGrid {
            values: &values,
            ..grid
        };
        assert!(matches!(
            roi_align(grid, &bbox(3, 0, 2, 3), 2, "r"),
            Err(Error::Feature(_))
        ));
    }

    #[test]
    fn cosine_basics() {
        let a = [1.0, 2.0, -0.5];
        let b = [-3.0, 0.1, 4.0];
        assert!((cosine(&a, &a) - 1.0).abs() < 1e-6);
        assert_eq!(cosine(&a, &b), cosine(&b, &a));
        assert_eq!(cosine(&a, &[0.0; 3]), 0.0);
    }
}
