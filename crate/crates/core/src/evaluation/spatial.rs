use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::boxes::BoundingBox;
use crate::data::GroundTruthSet;
use crate::error::{Error, Result};
use crate::postprocess::HoiInstance;

use super::{average_precision, class_pools, match_pool, ClassPool, EvalSetting, HoiClassTable};

/// Per-instance spatial statistic used for binning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialMode {
    /// Larger of the two normalized box areas.
    Area,
    /// Distance between the two box centers.
    Distance,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialBinSpec {
    pub mode: SpatialMode,
    pub bins: usize,
    /// Bins need more than this many ground truths to be reported.
    pub floor: usize,
}

impl SpatialBinSpec {
    pub fn new(mode: SpatialMode) -> Self {
        Self {
            mode,
            bins: 10,
            floor: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialBin {
    pub index: usize,
    pub lo: f64,
    pub hi: f64,
    pub num_gt: usize,
    pub reported: bool,
    /// Mean AP over classes with ground truth in the bin; `None` when not reported.
    pub ap: Option<f64>,
}

pub fn spatial_metric(human: &BoundingBox, object: &BoundingBox, mode: SpatialMode) -> f64 {
    match mode {
        SpatialMode::Area => human.area().max(object.area()),
        SpatialMode::Distance => human.center_distance(object),
    }
}

/// Equal-width bin of `value` over `[0, max]`; the maximum falls in the last bin.
pub(crate) fn bin_index(value: f64, max: f64, bins: usize) -> usize {
    if max <= 0.0 {
        return 0;
    }
    ((value / max * bins as f64).floor() as usize).min(bins - 1)
}

/// Observed metric maximum and, per class pool, the bin of every ground truth.
pub(crate) fn gt_bins(
    pools: &[ClassPool],
    spec: &SpatialBinSpec,
) -> (f64, Vec<HashMap<usize, Vec<usize>>>) {
    let metric = |p: &(BoundingBox, BoundingBox)| spatial_metric(&p.0, &p.1, spec.mode);
    let max = pools
        .iter()
        .flat_map(|pool| pool.gts.values().flatten())
        .map(metric)
        .fold(0.0, f64::max);
    let bins = pools
        .iter()
        .map(|pool| {
            pool.gts
                .iter()
                .map(|(&img, list)| {
                    (
                        img,
                        list.iter()
                            .map(|p| bin_index(metric(p), max, spec.bins))
                            .collect(),
                    )
                })
                .collect()
        })
        .collect();
    (max, bins)
}

/// Per-bin AP table under the Default setting.
///
/// Matching is done once over the whole set. Within a bin, a class's ranked list
/// holds the true positives whose ground truth lies in the bin plus every false
/// positive of that class.
pub fn spatial_bins(
    preds: &[Vec<HoiInstance>],
    gts: &[GroundTruthSet],
    table: &HoiClassTable,
    spec: &SpatialBinSpec,
) -> Result<Vec<SpatialBin>> {
    if spec.bins == 0 {
        return Err(Error::InvalidArgument(
            "spatial report needs at least one bin".into(),
        ));
    }
    let pools = class_pools(preds, gts, EvalSetting::Default, table)?;
    let (max, bins) = gt_bins(&pools, spec);
    let matches: Vec<Vec<Option<usize>>> = pools.iter().map(match_pool).collect();
    let width = max / spec.bins as f64;
    Ok((0..spec.bins)
        .map(|b| {
            let mut aps = Vec::new();
            let mut num_gt = 0;
            for (c, pool) in pools.iter().enumerate() {
                let n: usize = bins[c].values().flatten().filter(|&&x| x == b).count();
                num_gt += n;
                if n == 0 {
                    continue;
                }
                let flags: Vec<bool> = pool
                    .detections
                    .iter()
                    .zip(&matches[c])
                    .filter_map(|(d, m)| match m {
                        Some(j) => (bins[c][&d.image][*j] == b).then_some(true),
                        None => Some(false),
                    })
                    .collect();
                aps.push(average_precision(&flags, n));
            }
            let reported = num_gt > spec.floor;
            SpatialBin {
                index: b,
                lo: width * b as f64,
                hi: width * (b + 1) as f64,
                num_gt,
                reported,
                ap: (reported && !aps.is_empty())
                    .then(|| aps.iter().sum::<f64>() / aps.len() as f64),
            }
        })
        .collect())
}
