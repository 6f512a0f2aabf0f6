//! Eight-connected component labelling and break counting.

use crate::error::Result;
use crate::map::Map2;

/// Labels the 8-connected components of `mask` (row-major, `true` =
/// foreground). Returns per-pixel labels (0 = background, 1.. = component in
/// scan order of first pixel) and the component count.
pub fn label_components(mask: &[bool], h: usize, w: usize) -> (Vec<u32>, usize) {
    assert_eq!(mask.len(), h * w);
    let mut labels = vec![0u32; h * w];
    let mut count = 0;
    let mut queue = std::collections::VecDeque::new();
    for start in 0..h * w {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count as u32;
        queue.push_back(start);
        while let Some(at) = queue.pop_front() {
            let (i, j) = (at / w, at % w);
            for ni in i.saturating_sub(1)..=(i + 1).min(h - 1) {
                for nj in j.saturating_sub(1)..=(j + 1).min(w - 1) {
                    let n = ni * w + nj;
                    if mask[n] && labels[n] == 0 {
                        labels[n] = count as u32;
                        queue.push_back(n);
                    }
                }
            }
        }
    }
    (labels, count)
}

/// Binary dilation by the 3x3 square.
pub fn dilate(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for i in 0..h {
        for j in 0..w {
            if mask[i * w + j] {
                for ni in i.saturating_sub(1)..=(i + 1).min(h - 1) {
                    for nj in j.saturating_sub(1)..=(j + 1).min(w - 1) {
                        out[ni * w + nj] = true;
                    }
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Breaks {
    pub gt_components: usize,
    /// Components of the thresholded prediction inside the one-pixel
    /// dilation of the ground truth.
    pub pred_components: usize,
    pub breaks: usize,
}

/// Extra fragments the prediction splits the ground truth into. Missed
/// structures lower the prediction count and are not counted as breaks.
pub fn broken_components(pred: &Map2, y: &Map2, threshold: f64) -> Result<Breaks> {
    pred.check_same("broken_components", y)?;
    let (h, w) = y.dims();
    let gt: Vec<bool> = y.data().iter().map(|&v| v >= 0.5).collect();
    let near = dilate(&gt, h, w);
    let p: Vec<bool> = pred.data().iter().zip(&near).map(|(&v, &n)| n && v >= threshold).collect();
    let (_, gt_components) = label_components(&gt, h, w);
    let (_, pred_components) = label_components(&p, h, w);
    Ok(Breaks { gt_components, pred_components, breaks: pred_components.saturating_sub(gt_components) })
}
