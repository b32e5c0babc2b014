use crate::error::{Error, Result};

/// Mean IoU over the classes present in `gt` (void excluded). Only non-void
/// ground-truth pixels count toward either intersection or union. An
/// all-void crop scores 1.
pub fn region_iou(pred: &[i32], gt: &[i32], class_count: usize, void_label: i32) -> Result<f32> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "prediction crop has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut inter = vec![0u64; class_count];
    let mut gt_count = vec![0u64; class_count];
    let mut pred_count = vec![0u64; class_count];
    for (&p, &g) in pred.iter().zip(gt) {
        if g == void_label || g < 0 || g as usize >= class_count {
            continue;
        }
        gt_count[g as usize] += 1;
        if p >= 0 && (p as usize) < class_count {
            pred_count[p as usize] += 1;
            if p == g {
                inter[g as usize] += 1;
            }
        }
    }
    let mut sum = 0.0f64;
    let mut present = 0usize;
    for c in 0..class_count {
        if gt_count[c] == 0 {
            continue;
        }
        let union = gt_count[c] + pred_count[c] - inter[c];
        sum += inter[c] as f64 / union as f64;
        present += 1;
    }
    Ok(if present == 0 {
        1.0
    } else {
        (sum / present as f64) as f32
    })
}
