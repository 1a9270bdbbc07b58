//! Brute-force references: every distinct score is used as a threshold, the
//! detections above it are matched from scratch, and the precision envelope of
//! the resulting points is integrated directly.
//!
//! They agree with the ranked computation when scores are distinct.

use std::collections::HashMap;

use crate::data::GroundTruthSet;
use crate::error::Result;
use crate::postprocess::HoiInstance;

use super::spatial::gt_bins;
use super::{claim, class_pools, ClassPool, EvalSetting, HoiClassTable, SpatialBinSpec};

fn thresholds(pool: &ClassPool) -> Vec<f64> {
    let mut t: Vec<f64> = pool.detections.iter().map(|d| d.score).collect();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t
}

/// Matches the detections scoring at least `t`; returns each one's claimed GT.
fn match_above(pool: &ClassPool, t: f64) -> Vec<(usize, Option<usize>)> {
    let mut claimed: HashMap<usize, Vec<bool>> = HashMap::new();
    pool.detections
        .iter()
        .filter(|d| d.score >= t)
        .map(|d| {
            let m = pool.gts.get(&d.image).and_then(|g| {
                let c = claimed
                    .entry(d.image)
                    .or_insert_with(|| vec![false; g.len()]);
                claim(&d.boxes, g, c)
            });
            (d.image, m)
        })
        .collect()
}

/// `Σ (r_i − r_{i−1}) · max_{j ≥ i} p_j`.
fn integrate(points: &[(f64, f64)]) -> f64 {
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (i, &(r, _)) in points.iter().enumerate() {
        let best = points[i..].iter().map(|&(_, p)| p).fold(0.0, f64::max);
        ap += (r - prev) * best;
        prev = r;
    }
    ap
}

/// AP of one class pool by threshold sweep.
pub fn sweep_class_ap(pool: &ClassPool) -> f64 {
    if pool.num_gt == 0 {
        return 0.0;
    }
    let points: Vec<(f64, f64)> = thresholds(pool)
        .into_iter()
        .map(|t| {
            let m = match_above(pool, t);
            let tp = m.iter().filter(|(_, c)| c.is_some()).count();
            (tp as f64 / pool.num_gt as f64, tp as f64 / m.len() as f64)
        })
        .collect();
    integrate(&points)
}

/// Per-bin mean AP by threshold sweep, for every bin regardless of the floor
/// (`None` where the bin has no ground truth).
pub fn sweep_spatial_bin_ap(
    preds: &[Vec<HoiInstance>],
    gts: &[GroundTruthSet],
    table: &HoiClassTable,
    spec: &SpatialBinSpec,
) -> Result<Vec<Option<f64>>> {
    let pools = class_pools(preds, gts, EvalSetting::Default, table)?;
    let (_, bins) = gt_bins(&pools, spec);
    Ok((0..spec.bins)
        .map(|b| {
            let mut aps = Vec::new();
            for (c, pool) in pools.iter().enumerate() {
                let n: usize = bins[c].values().flatten().filter(|&&x| x == b).count();
                if n == 0 {
                    continue;
                }
                let mut points = Vec::new();
                for t in thresholds(pool) {
                    let m = match_above(pool, t);
                    let tp = m
                        .iter()
                        .filter(|(img, j)| j.is_some_and(|j| bins[c][img][j] == b))
                        .count();
                    let fp = m.iter().filter(|(_, j)| j.is_none()).count();
                    if tp + fp > 0 {
                        points.push((tp as f64 / n as f64, tp as f64 / (tp + fp) as f64));
                    }
                }
                aps.push(integrate(&points));
            }
            (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
        })
        .collect())
}
