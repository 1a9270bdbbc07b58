//! HOI detection mAP: per-class matching and average precision, Default and
//! Known-Object settings, Full/Rare/Non-Rare splits, and spatial-scale bins.

mod oracle;
mod spatial;

pub use oracle::{sweep_class_ap, sweep_spatial_bin_ap};
pub use spatial::{spatial_bins, spatial_metric, SpatialBin, SpatialBinSpec, SpatialMode};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BoundingBox};
use crate::data::GroundTruthSet;
use crate::error::{Error, Result};
use crate::postprocess::HoiInstance;

/// Classes with fewer training instances than this are rare.
pub const RARE_THRESHOLD: usize = 10;
/// Both boxes must overlap their ground truth by more than this.
pub const MATCH_IOU: f64 = 0.5;

/// Mapping between (object class, action class) pairs and HOI class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct HoiClassTable {
    pub object_classes: usize,
    pub action_classes: usize,
    pairs: Vec<(usize, usize)>,
    index: HashMap<(usize, usize), usize>,
    train_counts: Vec<usize>,
}

impl HoiClassTable {
    pub fn new(
        object_classes: usize,
        action_classes: usize,
        pairs: Vec<(usize, usize)>,
        train_counts: Vec<usize>,
    ) -> Result<Self> {
        if train_counts.len() != pairs.len() {
            return Err(Error::ClassTable(format!(
                "{} classes but {} training counts",
                pairs.len(),
                train_counts.len()
            )));
        }
        let mut index = HashMap::with_capacity(pairs.len());
        for (c, &(o, a)) in pairs.iter().enumerate() {
            if o >= object_classes || a >= action_classes {
                return Err(Error::ClassTable(format!(
                    "class {c} = (object {o}, action {a}) outside {object_classes} objects x {action_classes} actions"
                )));
            }
            if index.insert((o, a), c).is_some() {
                return Err(Error::ClassTable(format!(
                    "duplicate class (object {o}, action {a})"
                )));
            }
        }
        Ok(Self {
            object_classes,
            action_classes,
            pairs,
            index,
            train_counts,
        })
    }

    /// Every (object, action) combination, object-major, with the given counts.
    pub fn all_pairs(
        object_classes: usize,
        action_classes: usize,
        train_counts: Vec<usize>,
    ) -> Result<Self> {
        let pairs = (0..object_classes)
            .flat_map(|o| (0..action_classes).map(move |a| (o, a)))
            .collect();
        Self::new(object_classes, action_classes, pairs, train_counts)
    }

    /// Replaces the training counts with those observed in `train`.
    pub fn with_counts_from(mut self, train: &[GroundTruthSet]) -> Result<Self> {
        let mut counts = vec![0; self.pairs.len()];
        for img in train {
            for inst in &img.instances {
                for &a in &inst.actions {
                    let c = self.class_of(inst.object_class, a).ok_or_else(|| {
                        Error::ClassTable(format!(
                            "image {}: (object {}, action {a}) is not a declared class",
                            img.image_id, inst.object_class
                        ))
                    })?;
                    counts[c] += 1;
                }
            }
        }
        self.train_counts = counts;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn train_counts(&self) -> &[usize] {
        &self.train_counts
    }

    pub fn class_of(&self, object: usize, action: usize) -> Option<usize> {
        self.index.get(&(object, action)).copied()
    }

    pub fn is_rare(&self, class: usize) -> bool {
        self.train_counts[class] < RARE_THRESHOLD
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSetting {
    Default,
    KnownObject,
}

/// A human/object box pair.
pub type BoxPair = (BoundingBox, BoundingBox);

/// TP/FP flags for one image's predictions (already in descending score order).
///
/// A prediction is a true positive when both of its boxes overlap an unclaimed
/// ground truth by more than 0.5; it claims the eligible ground truth with the
/// highest `min(human IoU, object IoU)` (lowest index on ties).
pub fn match_detections(preds: &[BoxPair], gts: &[BoxPair]) -> Vec<bool> {
    let mut claimed = vec![false; gts.len()];
    preds
        .iter()
        .map(|p| claim(p, gts, &mut claimed).is_some())
        .collect()
}

/// Claims a ground truth for `p` if one is eligible; returns its index.
pub(crate) fn claim(p: &BoxPair, gts: &[BoxPair], claimed: &mut [bool]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, g) in gts.iter().enumerate() {
        if claimed[j] {
            continue;
        }
        let (ih, io) = (iou(&p.0, &g.0), iou(&p.1, &g.1));
        if ih > MATCH_IOU && io > MATCH_IOU {
            let m = ih.min(io);
            if best.map_or(true, |(_, b)| m > b) {
                best = Some((j, m));
            }
        }
    }
    let (j, _) = best?;
    claimed[j] = true;
    Some(j)
}

/// All-points interpolated AP of a ranked TP/FP list; 0 when there is no ground truth.
pub fn average_precision(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    envelope_area(&recall, &precision)
}

/// Area under the precision envelope of `(recall, precision)` points listed in
/// order of non-decreasing recall.
pub(crate) fn envelope_area(recall: &[f64], precision: &[f64]) -> f64 {
    let mut env = precision.to_vec();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&env) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// A detection of one class ranked across the dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankedDetection {
    pub image: usize,
    pub score: f64,
    pub anchor: usize,
    pub boxes: BoxPair,
}

/// Detections and ground truths of one HOI class, restricted to the images it is
/// evaluated on.
#[derive(Clone, Debug, Default)]
pub struct ClassPool {
    /// Descending score, then image, then anchor.
    pub detections: Vec<RankedDetection>,
    /// Ground-truth box pairs per image index.
    pub gts: HashMap<usize, Vec<BoxPair>>,
    pub num_gt: usize,
}

/// Groups predictions and ground truths by HOI class.
///
/// Predictions of undeclared (object, action) pairs are ignored; undeclared
/// ground-truth pairs are an error.
pub fn class_pools(
    preds: &[Vec<HoiInstance>],
    gts: &[GroundTruthSet],
    setting: EvalSetting,
    table: &HoiClassTable,
) -> Result<Vec<ClassPool>> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} prediction lists for {} images",
            preds.len(),
            gts.len()
        )));
    }
    let mut pools = vec![ClassPool::default(); table.len()];
    let mut objects_in_image: Vec<Vec<bool>> = Vec::with_capacity(gts.len());
    for (i, img) in gts.iter().enumerate() {
        let mut present = vec![false; table.object_classes];
        for inst in &img.instances {
            if inst.object_class >= table.object_classes {
                return Err(Error::ClassTable(format!(
                    "image {}: object class {} outside the table",
                    img.image_id, inst.object_class
                )));
            }
            present[inst.object_class] = true;
            for &a in &inst.actions {
                let c = table.class_of(inst.object_class, a).ok_or_else(|| {
                    Error::ClassTable(format!(
                        "image {}: (object {}, action {a}) is not a declared class",
                        img.image_id, inst.object_class
                    ))
                })?;
                pools[c]
                    .gts
                    .entry(i)
                    .or_default()
                    .push((inst.human, inst.object));
                pools[c].num_gt += 1;
            }
        }
        objects_in_image.push(present);
    }
    for (i, list) in preds.iter().enumerate() {
        for p in list {
            let Some(c) = table.class_of(p.object_class, p.action) else {
                continue;
            };
            if setting == EvalSetting::KnownObject && !objects_in_image[i][p.object_class] {
                continue;
            }
            pools[c].detections.push(RankedDetection {
                image: i,
                score: p.score,
                anchor: p.anchor,
                boxes: (p.human, p.object),
            });
        }
    }
    for pool in &mut pools {
        pool.detections.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.image.cmp(&b.image))
                .then(a.anchor.cmp(&b.anchor))
        });
    }
    Ok(pools)
}

/// For each ranked detection, the index of the ground truth it claims in its image.
pub fn match_pool(pool: &ClassPool) -> Vec<Option<usize>> {
    let mut claimed: HashMap<usize, Vec<bool>> = pool
        .gts
        .iter()
        .map(|(&i, g)| (i, vec![false; g.len()]))
        .collect();
    pool.detections
        .iter()
        .map(|d| {
            let gts = pool.gts.get(&d.image)?;
            claim(&d.boxes, gts, claimed.get_mut(&d.image).expect("same keys"))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: EvalSetting,
    /// AP per HOI class; `None` for classes without ground truth.
    pub class_ap: Vec<Option<f64>>,
    pub num_gt: Vec<usize>,
    /// Mean over classes with ground truth (0 if there are none).
    pub full: f64,
    pub rare: Option<f64>,
    pub non_rare: Option<f64>,
}

pub fn evaluate(
    preds: &[Vec<HoiInstance>],
    gts: &[GroundTruthSet],
    setting: EvalSetting,
    table: &HoiClassTable,
) -> Result<EvalReport> {
    let pools = class_pools(preds, gts, setting, table)?;
    let class_ap: Vec<Option<f64>> = pools
        .iter()
        .map(|pool| {
            (pool.num_gt > 0).then(|| {
                let flags: Vec<bool> = match_pool(pool).iter().map(Option::is_some).collect();
                average_precision(&flags, pool.num_gt)
            })
        })
        .collect();
    let mean = |keep: &dyn Fn(usize) -> bool| {
        let v: Vec<f64> = class_ap
            .iter()
            .enumerate()
            .filter(|&(c, _)| keep(c))
            .filter_map(|(_, ap)| *ap)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Ok(EvalReport {
        setting,
        full: mean(&|_| true).unwrap_or(0.0),
        rare: mean(&|c| table.is_rare(c)),
        non_rare: mean(&|c| !table.is_rare(c)),
        num_gt: pools.iter().map(|p| p.num_gt).collect(),
        class_ap,
    })
}

#[cfg(test)]
mod tests;
