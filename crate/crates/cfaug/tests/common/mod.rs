//! Brute-force reference implementations shared by integration tests.

use cfaug::img::Region;

/// O(pixels^2) exhaustive rectangle search. Returns (max area, smallest
/// (top,left) among max-area rectangles), or None if no background.
pub fn brute_force_rect(region: &Region) -> Option<(usize, (usize, usize))> {
    let (h, w) = (region.height, region.width);
    let mut best_area = 0usize;
    let mut best_pos = (usize::MAX, usize::MAX);
    for top in 0..h {
        for left in 0..w {
            // widest all-background width per extra row, shrinking as we grow
            let mut max_w = w - left;
            for bottom in top..h {
                let mut row_w = 0;
                while row_w < max_w && region.get(bottom, left + row_w) == 0 {
                    row_w += 1;
                }
                max_w = row_w;
                if max_w == 0 {
                    break;
                }
                let area = (bottom - top + 1) * max_w;
                if area > best_area || (area == best_area && (top, left) < best_pos) {
                    best_area = area;
                    best_pos = (top, left);
                }
            }
        }
    }
    (best_area > 0).then_some((best_area, best_pos))
}

/// Average precision by explicit threshold sweep over distinct scores.
pub fn aupr_threshold_sweep(scores: &[f64], positive: &[bool]) -> f64 {
    let total_pos = positive.iter().filter(|p| **p).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let selected: Vec<usize> = (0..scores.len()).filter(|i| scores[*i] >= t).collect();
        let tp = selected.iter().filter(|i| positive[**i]).count() as f64;
        let precision = tp / selected.len() as f64;
        let recall = tp / total_pos;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// AUC as the fraction of concordant positive/negative pairs, ties at 1/2.
pub fn auc_pairwise(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, (&si, &li)) in scores.iter().zip(labels).enumerate() {
        for (&sj, &lj) in scores.iter().zip(labels).skip(i + 1) {
            if li == lj {
                continue;
            }
            let (pos, neg) = if li { (si, sj) } else { (sj, si) };
            den += 1.0;
            if pos > neg {
                num += 1.0;
            } else if pos == neg {
                num += 0.5;
            }
        }
    }
    num / den
}
