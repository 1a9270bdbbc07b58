use crate::boxes::{giou, giou_graph, BoundingBox};
use crate::config::LossConfig;
use crate::data::{GroundTruthSet, HoiAnnotation};
use crate::error::{Error, Result};
use crate::head::HeadOutput;
use crate::numerics::{focal_terms, Array, Graph, Var};

use super::matching::{hungarian_match, MatchResult};

/// Sigmoid focal loss of one logit.
pub fn focal_loss(logit: f64, target: bool, alpha: f64, gamma: f64) -> f64 {
    focal_terms(logit, if target { 1.0 } else { 0.0 }, alpha, gamma).0
}

/// Matching cost of labelling `logit` positive: positive minus negative focal term.
pub fn focal_class_cost(logit: f64, alpha: f64, gamma: f64) -> f64 {
    focal_loss(logit, true, alpha, gamma) - focal_loss(logit, false, alpha, gamma)
}

/// One query's values as seen by the matcher.
#[derive(Clone, Copy, Debug)]
pub struct QueryView<'a> {
    pub human: BoundingBox,
    pub object: BoundingBox,
    pub object_logits: &'a [f64],
    pub action_logits: &'a [f64],
}

pub fn match_cost(pred: &QueryView, gt: &HoiAnnotation, cfg: &LossConfig) -> f64 {
    let (a, gm) = (cfg.focal_alpha, cfg.focal_gamma);
    let cls = focal_class_cost(pred.object_logits[gt.object_class], a, gm);
    let act = if gt.actions.is_empty() {
        0.0
    } else {
        gt.actions
            .iter()
            .map(|&k| focal_class_cost(pred.action_logits[k], a, gm))
            .sum::<f64>()
            / gt.actions.len() as f64
    };
    let l1 = pred.human.l1(&gt.human) + pred.object.l1(&gt.object);
    let g = giou(&pred.human, &gt.human) + giou(&pred.object, &gt.object);
    cfg.class_weight * cls + cfg.action_weight * act + cfg.l1_weight * l1 - cfg.giou_weight * g
}

/// Plain values of one decoder layer's head output.
struct LayerValues {
    human: Vec<BoundingBox>,
    object: Vec<BoundingBox>,
    object_logits: Array,
    action_logits: Array,
}

impl LayerValues {
    fn read(g: &Graph, out: &HeadOutput) -> Self {
        let boxes = |v: Var| {
            g.value(v)
                .data()
                .chunks(4)
                .map(BoundingBox::from_slice)
                .collect()
        };
        Self {
            human: boxes(out.human_boxes),
            object: boxes(out.object_boxes),
            object_logits: g.value(out.raw.object_logits).clone(),
            action_logits: g.value(out.raw.action_logits).clone(),
        }
    }

    fn view(&self, q: usize) -> QueryView<'_> {
        QueryView {
            human: self.human[q],
            object: self.object[q],
            object_logits: self.object_logits.row(q),
            action_logits: self.action_logits.row(q),
        }
    }
}

/// `N_q × N_q` cost matrix; columns past the real annotations are the zero-cost padding.
fn cost_matrix(
    values: &LayerValues,
    gt: &GroundTruthSet,
    cfg: &LossConfig,
) -> Result<Vec<Vec<f64>>> {
    let n = values.human.len();
    if gt.instances.len() > n {
        return Err(Error::InvalidArgument(format!(
            "image {} has {} annotations but the model has only {n} queries",
            gt.image_id,
            gt.instances.len()
        )));
    }
    Ok((0..n)
        .map(|q| {
            let view = values.view(q);
            let mut row: Vec<f64> = gt
                .instances
                .iter()
                .map(|a| match_cost(&view, a, cfg))
                .collect();
            row.resize(n, 0.0);
            row
        })
        .collect())
}

/// Matches one layer's predictions against the padded ground truth.
pub fn match_layer(
    g: &Graph,
    out: &HeadOutput,
    gt: &GroundTruthSet,
    cfg: &LossConfig,
) -> Result<MatchResult> {
    hungarian_match(&cost_matrix(&LayerValues::read(g, out), gt, cfg)?)
}

/// Unweighted loss terms of one decoder layer.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub object: f64,
    pub action: f64,
    pub l1_human: f64,
    pub l1_object: f64,
    pub giou_human: f64,
    pub giou_object: f64,
    /// Weighted sum of the terms above.
    pub total: f64,
}

impl LossTerms {
    pub const COLUMNS: [&'static str; 7] = [
        "object",
        "action",
        "l1_human",
        "l1_object",
        "giou_human",
        "giou_object",
        "total",
    ];

    pub fn values(&self) -> [f64; 7] {
        [
            self.object,
            self.action,
            self.l1_human,
            self.l1_object,
            self.giou_human,
            self.giou_object,
            self.total,
        ]
    }

    pub fn add(&mut self, other: &LossTerms) {
        self.object += other.object;
        self.action += other.action;
        self.l1_human += other.l1_human;
        self.l1_object += other.l1_object;
        self.giou_human += other.giou_human;
        self.giou_object += other.giou_object;
        self.total += other.total;
    }
}

/// Per-layer terms (last entry: final layer) and their weighted total.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub layers: Vec<LossTerms>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn last(&self) -> LossTerms {
        self.layers.last().copied().unwrap_or_default()
    }
}

/// Set-prediction loss over the given decoder layers, each matched independently.
///
/// Every term is summed over its entries and divided by `normalizer` (the number
/// of ground-truth pairs in the batch, at least 1).
pub fn compute_loss(
    g: &mut Graph,
    layers: &[HeadOutput],
    gt: &GroundTruthSet,
    cfg: &LossConfig,
    normalizer: f64,
) -> Result<(Var, LossBreakdown)> {
    let mut total: Option<Var> = None;
    let mut breakdown = LossBreakdown::default();
    for out in layers {
        let m = match_layer(g, out, gt, cfg)?;
        let (var, terms) = layer_loss(g, out, gt, &m, cfg, normalizer);
        total = Some(match total {
            Some(t) => g.add(t, var),
            None => var,
        });
        breakdown.total += terms.total;
        breakdown.layers.push(terms);
    }
    let total =
        total.ok_or_else(|| Error::InvalidArgument("no decoder layers to supervise".into()))?;
    Ok((total, breakdown))
}

fn layer_loss(
    g: &mut Graph,
    out: &HeadOutput,
    gt: &GroundTruthSet,
    m: &MatchResult,
    cfg: &LossConfig,
    normalizer: f64,
) -> (Var, LossTerms) {
    let (nq, ko1) = g.value(out.raw.object_logits).dims2();
    let (_, ka) = g.value(out.raw.action_logits).dims2();
    let no_pair = ko1 - 1;
    let pairs = m.real_pairs(gt.instances.len());
    let inv = 1.0 / normalizer;

    let mut obj_t = Array::zeros(&[nq, ko1]);
    let mut act_t = Array::zeros(&[nq, ka]);
    for q in 0..nq {
        obj_t.data_mut()[q * ko1 + no_pair] = 1.0;
    }
    for &(q, j) in &pairs {
        let a = &gt.instances[j];
        obj_t.data_mut()[q * ko1 + no_pair] = 0.0;
        obj_t.data_mut()[q * ko1 + a.object_class] = 1.0;
        for &k in &a.actions {
            act_t.data_mut()[q * ka + k] = 1.0;
        }
    }
    let (alpha, gamma) = (cfg.focal_alpha, cfg.focal_gamma);
    let fo = g.focal_loss(out.raw.object_logits, &obj_t, alpha, gamma);
    let fo = g.sum(fo);
    let object = g.scale(fo, inv);
    let fa = g.focal_loss(out.raw.action_logits, &act_t, alpha, gamma);
    let fa = g.sum(fa);
    let action = g.scale(fa, inv);

    let (l1_h, l1_o, giou_h, giou_o) = if pairs.is_empty() {
        let z = g.constant(Array::scalar(0.0));
        (z, z, z, z)
    } else {
        let rows: Vec<usize> = pairs.iter().map(|&(q, _)| q).collect();
        let target = |sel: fn(&HoiAnnotation) -> BoundingBox| {
            let data = pairs
                .iter()
                .flat_map(|&(_, j)| sel(&gt.instances[j]).to_array())
                .collect();
            Array::new(&[pairs.len(), 4], data).expect("non-empty")
        };
        let mut box_terms = |boxes: Var, t: Array| {
            let p = g.gather_rows(boxes, &rows);
            let t = g.constant(t);
            let d = g.sub(p, t);
            let d = g.abs(d);
            let l1 = g.sum(d);
            let l1 = g.scale(l1, inv);
            let gi = giou_graph(g, p, t);
            let gi = g.sum(gi);
            // Σ (1 - GIoU) = n - Σ GIoU
            let gl = g.neg(gi);
            let gl = g.add_scalar(gl, rows.len() as f64);
            (l1, g.scale(gl, inv))
        };
        let (l1_h, giou_h) = box_terms(out.human_boxes, target(|a| a.human));
        let (l1_o, giou_o) = box_terms(out.object_boxes, target(|a| a.object));
        (l1_h, l1_o, giou_h, giou_o)
    };

    let weighted = [
        (object, cfg.class_weight),
        (action, cfg.action_weight),
        (l1_h, cfg.l1_weight),
        (l1_o, cfg.l1_weight),
        (giou_h, cfg.giou_weight),
        (giou_o, cfg.giou_weight),
    ];
    let mut total = g.scale(weighted[0].0, weighted[0].1);
    for &(v, w) in &weighted[1..] {
        let s = g.scale(v, w);
        total = g.add(total, s);
    }
    let terms = LossTerms {
        object: g.scalar_value(object),
        action: g.scalar_value(action),
        l1_human: g.scalar_value(l1_h),
        l1_object: g.scalar_value(l1_o),
        giou_human: g.scalar_value(giou_h),
        giou_object: g.scalar_value(giou_o),
        total: g.scalar_value(total),
    };
    (total, terms)
}
