//! From per-query predictions to a ranked list of HOI instances: expansion into
//! (query, action) pairs, top-K query selection and per-action HOI NMS.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BoundingBox};
use crate::config::{IouVariant, NmsConfig, TopKScore};
use crate::model::Prediction;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoiInstance {
    pub human: BoundingBox,
    pub object: BoundingBox,
    pub object_class: usize,
    /// `c_o`.
    pub object_score: f64,
    pub action: usize,
    /// `c_a`.
    pub action_score: f64,
    /// `c_HOI = c_o · c_a`.
    pub score: f64,
    /// Query (anchor) that produced the instance.
    pub anchor: usize,
}

impl HoiInstance {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        human: BoundingBox,
        object: BoundingBox,
        object_class: usize,
        object_score: f64,
        action: usize,
        action_score: f64,
        anchor: usize,
    ) -> Self {
        Self {
            human,
            object,
            object_class,
            object_score,
            action,
            action_score,
            score: object_score * action_score,
            anchor,
        }
    }
}

/// Descending score, then anchor, then action.
pub fn canonical_order(a: &HoiInstance, b: &HoiInstance) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.anchor.cmp(&b.anchor))
        .then(a.action.cmp(&b.action))
}

/// One instance per (query, action class).
pub fn expand_instances(pred: &Prediction) -> Vec<HoiInstance> {
    let mut out =
        Vec::with_capacity(pred.num_queries() * pred.action_probs.first().map_or(0, Vec::len));
    for q in 0..pred.num_queries() {
        let probs = &pred.object_probs[q];
        let real = &probs[..probs.len() - 1];
        let (cls, &c_o) =
            real.iter().enumerate().fold(
                (0, &real[0]),
                |best, (i, p)| if *p > *best.1 { (i, p) } else { best },
            );
        for (a, &c_a) in pred.action_probs[q].iter().enumerate() {
            out.push(HoiInstance::new(
                pred.human_boxes[q],
                pred.object_boxes[q],
                cls,
                c_o,
                a,
                c_a,
                q,
            ));
        }
    }
    out
}

/// Keeps every instance of the `top_k` queries ranked highest by the configured score.
pub fn topk_filter(instances: &[HoiInstance], cfg: &NmsConfig) -> Vec<HoiInstance> {
    let mut per_query: Vec<(usize, f64)> = Vec::new();
    for inst in instances {
        let s = match cfg.score {
            TopKScore::Object => inst.object_score,
            TopKScore::Action => inst.action_score,
            TopKScore::Product => inst.score,
        };
        match per_query.iter_mut().find(|(q, _)| *q == inst.anchor) {
            Some(entry) => entry.1 = entry.1.max(s),
            None => per_query.push((inst.anchor, s)),
        }
    }
    per_query.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    per_query.truncate(cfg.top_k);
    let mut kept: Vec<HoiInstance> = instances
        .iter()
        .filter(|i| per_query.iter().any(|(q, _)| *q == i.anchor))
        .copied()
        .collect();
    kept.sort_by(canonical_order);
    kept
}

/// Overlap of two instances: human IoU, object IoU, or their product.
pub fn pair_iou(a: &HoiInstance, b: &HoiInstance, variant: IouVariant) -> f64 {
    match variant {
        IouVariant::Human => iou(&a.human, &b.human),
        IouVariant::Object => iou(&a.object, &b.object),
        IouVariant::Combined => iou(&a.human, &b.human) * iou(&a.object, &b.object),
    }
}

/// Greedy NMS run independently for each action class.
pub fn hoi_nms(instances: &[HoiInstance], cfg: &NmsConfig) -> Vec<HoiInstance> {
    let mut sorted = instances.to_vec();
    sorted.sort_by(canonical_order);
    let num_actions = sorted.iter().map(|i| i.action + 1).max().unwrap_or(0);
    let mut kept_per_action: Vec<Vec<HoiInstance>> = vec![Vec::new(); num_actions];
    let mut out = Vec::new();
    for inst in sorted {
        let kept = &mut kept_per_action[inst.action];
        if kept
            .iter()
            .all(|k| pair_iou(k, &inst, cfg.iou) <= cfg.delta)
        {
            kept.push(inst);
            out.push(inst);
        }
    }
    out
}

/// Full filter chain: expansion, top-K and NMS.
pub fn postprocess(pred: &Prediction, cfg: &NmsConfig) -> Vec<HoiInstance> {
    hoi_nms(&topk_filter(&expand_instances(pred), cfg), cfg)
}

/// Quadratic reference for [`hoi_nms`]: the full pairwise overlap matrix is
/// computed first, then suppression flags are propagated in score order.
pub fn hoi_nms_reference(instances: &[HoiInstance], cfg: &NmsConfig) -> Vec<HoiInstance> {
    let mut sorted = instances.to_vec();
    sorted.sort_by(canonical_order);
    let n = sorted.len();
    let overlap: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| pair_iou(&sorted[i], &sorted[j], cfg.iou))
                .collect()
        })
        .collect();
    let mut suppressed = vec![false; n];
    for i in 0..n {
        if suppressed[i] {
            continue;
        }
        for j in i + 1..n {
            if sorted[j].action == sorted[i].action && overlap[i][j] > cfg.delta {
                suppressed[j] = true;
            }
        }
    }
    sorted
        .into_iter()
        .zip(suppressed)
        .filter(|(_, s)| !s)
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn corners(c: [f64; 4]) -> BoundingBox {
        BoundingBox::from_corners(c)
    }

    fn inst(
        h: BoundingBox,
        o: BoundingBox,
        action: usize,
        score: f64,
        anchor: usize,
    ) -> HoiInstance {
        HoiInstance::new(h, o, 0, 1.0, action, score, anchor)
    }

    fn random_instances(rng: &mut ChaCha8Rng, n: usize, actions: usize) -> Vec<HoiInstance> {
        let bx = |rng: &mut ChaCha8Rng| {
            BoundingBox::new(
                rng.gen_range(0.3..0.7),
                rng.gen_range(0.3..0.7),
                rng.gen_range(0.05..0.5),
                rng.gen_range(0.05..0.5),
            )
        };
        (0..n)
            .map(|q| {
                let (h, o) = (bx(rng), bx(rng));
                HoiInstance::new(h, o, 0, rng.gen(), rng.gen_range(0..actions), rng.gen(), q)
            })
            .collect()
    }

    fn prediction(object: Vec<Vec<f64>>, action: Vec<Vec<f64>>) -> Prediction {
        let n = object.len();
        let b = BoundingBox::new(0.5, 0.5, 0.2, 0.2);
        Prediction {
            human_boxes: vec![b; n],
            object_boxes: vec![b; n],
            object_probs: object,
            action_probs: action,
            anchors: vec![[0.5, 0.5]; n],
        }
    }

    #[test]
    fn expansion_is_cartesian() {
        let p = prediction(vec![vec![0.2, 0.9]; 20], vec![vec![0.1, 0.5, 0.0]; 20]);
        let inst = expand_instances(&p);
        assert_eq!(inst.len(), 60);
        // φ slot dominates but the single real class still emits instances
        assert!(inst
            .iter()
            .all(|i| i.object_class == 0 && i.object_score == 0.2));
        assert!(inst
            .iter()
            .filter(|i| i.action == 2)
            .all(|i| i.score == 0.0));
        assert!(inst
            .iter()
            .all(|i| i.score == i.object_score * i.action_score));
    }

    #[test]
    fn object_class_is_best_real_slot() {
        let p = prediction(vec![vec![0.3, 0.7, 0.99]], vec![vec![0.5]]);
        let i = expand_instances(&p)[0];
        assert_eq!((i.object_class, i.object_score), (1, 0.7));
    }

    #[test]
    fn topk_keeps_best_queries() {
        let p = prediction(
            vec![vec![0.9, 0.0], vec![0.5, 0.0], vec![0.1, 0.0]],
            vec![vec![1.0, 0.5]; 3],
        );
        let all = expand_instances(&p);
        let cfg = NmsConfig {
            top_k: 2,
            ..NmsConfig::default()
        };
        let kept = topk_filter(&all, &cfg);
        assert_eq!(kept.len(), 4);
        assert!(kept.iter().all(|i| i.anchor < 2));
        let cfg = NmsConfig {
            top_k: 3,
            ..NmsConfig::default()
        };
        let mut sorted = all.clone();
        sorted.sort_by(canonical_order);
        assert_eq!(topk_filter(&all, &cfg), sorted);
    }

    #[test]
    fn pair_iou_examples() {
        let a = inst(
            corners([0.0, 0.0, 2.0, 2.0]),
            corners([0.0, 0.0, 1.0, 1.0]),
            0,
            1.0,
            0,
        );
        let b = inst(
            corners([1.0, 0.0, 3.0, 2.0]),
            corners([0.0, 0.0, 1.0, 1.0]),
            0,
            1.0,
            1,
        );
        let c = inst(
            corners([5.0, 5.0, 6.0, 6.0]),
            corners([0.0, 0.0, 1.0, 1.0]),
            0,
            1.0,
            2,
        );
        assert_eq!(pair_iou(&a, &a, IouVariant::Combined), 1.0);
        assert_eq!(pair_iou(&a, &b, IouVariant::Combined), 1.0 / 3.0);
        assert_eq!(pair_iou(&a, &b, IouVariant::Human), 1.0 / 3.0);
        assert_eq!(pair_iou(&a, &b, IouVariant::Object), 1.0);
        assert_eq!(pair_iou(&a, &c, IouVariant::Combined), 0.0);
    }

    #[test]
    fn duplicates_suppressed_only_within_action() {
        let b = BoundingBox::new(0.5, 0.5, 0.2, 0.2);
        let cfg = NmsConfig::default();
        assert_eq!(
            hoi_nms(&[inst(b, b, 0, 0.9, 0), inst(b, b, 0, 0.8, 1)], &cfg).len(),
            1
        );
        assert_eq!(
            hoi_nms(&[inst(b, b, 0, 0.9, 0), inst(b, b, 1, 0.8, 1)], &cfg).len(),
            2
        );
    }

    #[test]
    fn nms_matches_quadratic_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let n = rng.gen_range(0..=200);
            let inst = random_instances(&mut rng, n, 5);
            for variant in [IouVariant::Human, IouVariant::Object, IouVariant::Combined] {
                for delta in [0.4, 0.5, 0.6, 0.7] {
                    let cfg = NmsConfig {
                        delta,
                        iou: variant,
                        ..NmsConfig::default()
                    };
                    assert_eq!(hoi_nms(&inst, &cfg), hoi_nms_reference(&inst, &cfg));
                }
            }
        }
    }

    #[test]
    fn nms_is_input_order_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut inst = random_instances(&mut rng, 80, 3);
        let cfg = NmsConfig::default();
        let a = hoi_nms(&inst, &cfg);
        inst.shuffle(&mut rng);
        assert_eq!(a, hoi_nms(&inst, &cfg));
    }

    proptest! {
        #[test]
        fn kept_set_is_separated_and_keeps_each_top_instance(seed in 0u64..1000, delta in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inst = random_instances(&mut rng, 60, 2);
            let cfg = NmsConfig { delta, ..NmsConfig::default() };
            let kept = hoi_nms(&inst, &cfg);
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    prop_assert!(a.action != b.action || pair_iou(a, b, cfg.iou) <= delta);
                }
            }
            for action in 0..2 {
                if let Some(top) = inst.iter().filter(|i| i.action == action).min_by(|a, b| canonical_order(a, b)) {
                    prop_assert!(kept.contains(top));
                }
            }
            let all = hoi_nms(&inst, &NmsConfig { delta: 1.0, ..cfg });
            prop_assert_eq!(all.len(), inst.len());
        }

        #[test]
        fn suppressed_instances_have_a_kept_witness(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inst = random_instances(&mut rng, 60, 3);
            let cfg = NmsConfig::default();
            let kept = hoi_nms(&inst, &cfg);
            for i in &inst {
                if !kept.contains(i) {
                    prop_assert!(kept.iter().any(|k| k.action == i.action
                        && canonical_order(k, i) == Ordering::Less
                        && pair_iou(k, i, cfg.iou) > cfg.delta));
                }
            }
        }

        #[test]
        fn pair_iou_symmetric_in_unit_range(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = random_instances(&mut rng, 2, 1);
            for variant in [IouVariant::Human, IouVariant::Object, IouVariant::Combined] {
                let ab = pair_iou(&v[0], &v[1], variant);
                prop_assert_eq!(ab, pair_iou(&v[1], &v[0], variant));
                prop_assert!((0.0..=1.0).contains(&ab));
                prop_assert_eq!(pair_iou(&v[0], &v[0], variant), 1.0);
            }
        }
    }
}
