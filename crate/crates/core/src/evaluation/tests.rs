use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spatial::bin_index;
use super::*;
use crate::data::HoiAnnotation;

fn bx(cx: f64, cy: f64, w: f64, h: f64) -> BoundingBox {
    BoundingBox::new(cx, cy, w, h)
}

fn image(id: &str, instances: Vec<HoiAnnotation>) -> GroundTruthSet {
    GroundTruthSet {
        image_id: id.into(),
        file: None,
        width: 1,
        height: 1,
        instances,
    }
}

fn ann(h: BoundingBox, o: BoundingBox, class: usize, actions: Vec<usize>) -> HoiAnnotation {
    HoiAnnotation::normalized(h, o, class, actions)
}

fn inst(
    h: BoundingBox,
    o: BoundingBox,
    class: usize,
    action: usize,
    score: f64,
    anchor: usize,
) -> HoiInstance {
    HoiInstance::new(h, o, class, score, action, 1.0, anchor)
}

fn table(ko: usize, ka: usize) -> HoiClassTable {
    HoiClassTable::all_pairs(ko, ka, vec![100; ko * ka]).unwrap()
}

#[test]
fn greedy_matching_by_rank() {
    let g = (bx(0.3, 0.3, 0.2, 0.2), bx(0.7, 0.7, 0.2, 0.2));
    let near = (bx(0.31, 0.3, 0.2, 0.2), bx(0.7, 0.71, 0.2, 0.2));
    let off = (bx(0.3, 0.3, 0.2, 0.2), bx(0.2, 0.2, 0.2, 0.2));
    assert_eq!(
        match_detections(&[near, near, off], &[g]),
        vec![true, false, false]
    );
    assert_eq!(match_detections(&[off, near], &[g]), vec![false, true]);
    assert!(match_detections(&[near], &[]).iter().all(|&f| !f));
}

#[test]
fn claims_the_best_overlapping_ground_truth() {
    let a = (bx(0.3, 0.3, 0.2, 0.2), bx(0.5, 0.5, 0.2, 0.2));
    let b = (bx(0.32, 0.3, 0.2, 0.2), bx(0.5, 0.5, 0.2, 0.2));
    let mut claimed = vec![false, false];
    assert_eq!(claim(&b, &[a, b], &mut claimed), Some(1));
    assert_eq!(claim(&b, &[a, b], &mut claimed), Some(0));
    assert_eq!(claim(&b, &[a, b], &mut claimed), None);
}

#[test]
fn average_precision_hand_examples() {
    assert_eq!(average_precision(&[true, true], 2), 1.0);
    assert_eq!(average_precision(&[], 3), 0.0);
    assert_eq!(average_precision(&[true], 0), 0.0);
    // TP, FP, TP over 2 GT: 0.5·1 + 0.5·(2/3)
    assert!((average_precision(&[true, false, true], 2) - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
    // FP first: envelope at every recall is 1/2
    assert!((average_precision(&[false, true], 1) - 0.5).abs() < 1e-15);
    // missed ground truth caps recall
    assert!((average_precision(&[true], 4) - 0.25).abs() < 1e-15);
}

#[test]
fn perfect_predictions_score_one_and_none_score_zero() {
    let t = table(2, 2);
    let gts = vec![
        image(
            "a",
            vec![ann(
                bx(0.3, 0.3, 0.2, 0.3),
                bx(0.6, 0.6, 0.2, 0.2),
                0,
                vec![0, 1],
            )],
        ),
        image(
            "b",
            vec![ann(
                bx(0.5, 0.4, 0.3, 0.3),
                bx(0.2, 0.7, 0.1, 0.2),
                1,
                vec![1],
            )],
        ),
    ];
    let mut preds = Vec::new();
    for (i, g) in gts.iter().enumerate() {
        let mut list = Vec::new();
        for a in &g.instances {
            for &act in &a.actions {
                list.push(inst(
                    a.human,
                    a.object,
                    a.object_class,
                    act,
                    0.9 - 0.1 * i as f64,
                    act,
                ));
            }
        }
        preds.push(list);
    }
    let r = evaluate(&preds, &gts, EvalSetting::Default, &t).unwrap();
    assert_eq!(r.full, 1.0);
    assert_eq!(r.class_ap, vec![Some(1.0), Some(1.0), None, Some(1.0)]);
    assert_eq!(r.num_gt, vec![1, 1, 0, 1]);
    assert_eq!(r.rare, None);
    assert_eq!(r.non_rare, Some(1.0));

    let empty = vec![Vec::new(); 2];
    let r = evaluate(&empty, &gts, EvalSetting::Default, &t).unwrap();
    assert_eq!(r.full, 0.0);
}

#[test]
fn rare_split_uses_training_counts() {
    let t = HoiClassTable::all_pairs(1, 2, vec![9, 10]).unwrap();
    assert!(t.is_rare(0) && !t.is_rare(1));
    let g = ann(
        bx(0.3, 0.3, 0.2, 0.3),
        bx(0.6, 0.6, 0.2, 0.2),
        0,
        vec![0, 1],
    );
    let gts = vec![image("a", vec![g.clone()])];
    let preds = vec![vec![inst(g.human, g.object, 0, 1, 0.8, 0)]];
    let r = evaluate(&preds, &gts, EvalSetting::Default, &t).unwrap();
    assert_eq!(r.rare, Some(0.0));
    assert_eq!(r.non_rare, Some(1.0));
    assert_eq!(r.full, 0.5);
}

#[test]
fn known_object_drops_predictions_for_absent_objects() {
    let t = table(2, 1);
    let g = ann(bx(0.3, 0.3, 0.2, 0.3), bx(0.6, 0.6, 0.2, 0.2), 0, vec![0]);
    let gts = vec![
        image("a", vec![g.clone()]),
        image("b", vec![ann(g.human, g.object, 1, vec![0])]),
    ];
    // a confident class-0 prediction on image b, where object 0 is absent
    let preds = vec![
        vec![inst(g.human, g.object, 0, 0, 0.5, 0)],
        vec![
            inst(g.human, g.object, 0, 0, 0.9, 0),
            inst(g.human, g.object, 1, 0, 0.9, 1),
        ],
    ];
    let d = evaluate(&preds, &gts, EvalSetting::Default, &t).unwrap();
    let k = evaluate(&preds, &gts, EvalSetting::KnownObject, &t).unwrap();
    assert_eq!(d.class_ap[0], Some(0.5));
    assert_eq!(k.class_ap[0], Some(1.0));
    assert_eq!(k.class_ap[1], Some(1.0));
    let pools = class_pools(&preds, &gts, EvalSetting::KnownObject, &t).unwrap();
    assert_eq!(pools[0].detections.len(), 1);
}

#[test]
fn mismatched_inputs_are_errors() {
    let t = table(1, 1);
    let gts = vec![image("a", vec![])];
    assert!(evaluate(&[], &gts, EvalSetting::Default, &t).is_err());
    let t = HoiClassTable::new(2, 2, vec![(0, 0)], vec![0]).unwrap();
    let g = ann(bx(0.3, 0.3, 0.2, 0.3), bx(0.6, 0.6, 0.2, 0.2), 1, vec![1]);
    let gts = vec![image("a", vec![g])];
    assert!(matches!(
        evaluate(&[vec![]], &gts, EvalSetting::Default, &t),
        Err(Error::ClassTable(_))
    ));
}

#[test]
fn class_table_validation() {
    assert!(HoiClassTable::new(2, 2, vec![(0, 0), (0, 0)], vec![0, 0]).is_err());
    assert!(HoiClassTable::new(2, 2, vec![(2, 0)], vec![0]).is_err());
    assert!(HoiClassTable::new(2, 2, vec![(0, 1)], vec![]).is_err());
    let t = HoiClassTable::new(2, 3, vec![(1, 2), (0, 0)], vec![0, 0]).unwrap();
    assert_eq!(t.class_of(1, 2), Some(0));
    assert_eq!(t.class_of(0, 0), Some(1));
    assert_eq!(t.class_of(0, 2), None);
    let g = ann(bx(0.3, 0.3, 0.2, 0.3), bx(0.6, 0.6, 0.2, 0.2), 1, vec![2]);
    let t = t
        .with_counts_from(&[image("a", vec![g.clone(), g])])
        .unwrap();
    assert_eq!(t.train_counts(), &[2, 0]);
}

/// Random images where predictions are jittered copies of ground truth plus
/// clutter, with distinct scores.
fn random_set(seed: u64, ko: usize, ka: usize) -> (Vec<Vec<HoiInstance>>, Vec<GroundTruthSet>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rb = |rng: &mut ChaCha8Rng| {
        bx(
            rng.gen_range(0.2..0.8),
            rng.gen_range(0.2..0.8),
            rng.gen_range(0.05..0.4),
            rng.gen_range(0.05..0.4),
        )
    };
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for i in 0..5 {
        let mut instances = Vec::new();
        let mut list = Vec::new();
        for _ in 0..rng.gen_range(1..4) {
            let (h, o) = (rb(&mut rng), rb(&mut rng));
            let class = rng.gen_range(0..ko);
            let action = rng.gen_range(0..ka);
            instances.push(ann(h, o, class, vec![action]));
            for _ in 0..rng.gen_range(0..3) {
                let j = rng.gen_range(-0.03..0.03);
                let jit = |b: BoundingBox| bx(b.cx + j, b.cy - j, b.w, b.h);
                list.push((jit(h), jit(o), class, action));
            }
        }
        for _ in 0..rng.gen_range(0..4) {
            list.push((
                rb(&mut rng),
                rb(&mut rng),
                rng.gen_range(0..ko),
                rng.gen_range(0..ka),
            ));
        }
        gts.push(image(&format!("img{i}"), instances));
        let list = list
            .into_iter()
            .enumerate()
            .map(|(q, (h, o, c, a))| {
                let s: f64 = rng.gen_range(0.0..1.0);
                inst(h, o, c, a, s, q)
            })
            .collect();
        preds.push(list);
    }
    (preds, gts)
}

#[test]
fn ranked_ap_matches_threshold_sweep() {
    let t = table(2, 3);
    for seed in 0..100 {
        let (preds, gts) = random_set(seed, 2, 3);
        let pools = class_pools(&preds, &gts, EvalSetting::Default, &t).unwrap();
        let r = evaluate(&preds, &gts, EvalSetting::Default, &t).unwrap();
        for (c, pool) in pools.iter().enumerate() {
            if let Some(ap) = r.class_ap[c] {
                let want = sweep_class_ap(pool);
                assert!(
                    (ap - want).abs() < 1e-12,
                    "seed {seed} class {c}: {ap} vs {want}"
                );
            }
        }
    }
}

#[test]
fn spatial_bins_match_threshold_sweep() {
    let t = table(2, 2);
    for seed in 0..60 {
        let (preds, gts) = random_set(1000 + seed, 2, 2);
        for mode in [SpatialMode::Area, SpatialMode::Distance] {
            let spec = SpatialBinSpec {
                mode,
                bins: 4,
                floor: 0,
            };
            let bins = spatial_bins(&preds, &gts, &t, &spec).unwrap();
            let want = sweep_spatial_bin_ap(&preds, &gts, &t, &spec).unwrap();
            for (b, w) in bins.iter().zip(&want) {
                assert_eq!(b.ap.is_some(), w.is_some());
                if let (Some(x), Some(y)) = (b.ap, w) {
                    assert!(
                        (x - y).abs() < 1e-12,
                        "seed {seed} bin {}: {x} vs {y}",
                        b.index
                    );
                }
            }
            let total: usize = bins.iter().map(|b| b.num_gt).sum();
            assert_eq!(total, gts.iter().map(|g| g.instances.len()).sum::<usize>());
        }
    }
}

#[test]
fn spatial_metric_examples() {
    let h = bx(0.25, 0.5, 0.5, 0.5);
    let o = bx(0.75, 0.5, 0.2, 0.2);
    assert_eq!(spatial_metric(&h, &o, SpatialMode::Area), 0.25);
    assert_eq!(spatial_metric(&h, &o, SpatialMode::Distance), 0.5);
    assert_eq!(spatial_metric(&h, &h, SpatialMode::Distance), 0.0);
    assert_eq!(bin_index(0.0, 0.0, 10), 0);
    assert_eq!(bin_index(1.0, 1.0, 10), 9);
    assert_eq!(bin_index(0.1, 1.0, 10), 1);
    assert_eq!(bin_index(0.0999, 1.0, 10), 0);
}

#[test]
fn identical_metrics_fall_into_the_first_bin() {
    let t = table(1, 1);
    let h = bx(0.5, 0.5, 0.2, 0.2);
    let gts: Vec<_> = (0..3)
        .map(|i| image(&i.to_string(), vec![ann(h, h, 0, vec![0])]))
        .collect();
    let preds: Vec<_> = (0..3)
        .map(|i| vec![inst(h, h, 0, 0, 0.5 + 0.1 * i as f64, 0)])
        .collect();
    let spec = SpatialBinSpec {
        mode: SpatialMode::Distance,
        bins: 10,
        floor: 0,
    };
    let bins = spatial_bins(&preds, &gts, &t, &spec).unwrap();
    assert_eq!(bins[0].num_gt, 3);
    assert_eq!(bins[0].ap, Some(1.0));
    assert!(bins[1..]
        .iter()
        .all(|b| b.num_gt == 0 && b.ap.is_none() && !b.reported));
}

#[test]
fn bins_below_the_floor_are_not_reported() {
    let t = table(1, 1);
    let h = bx(0.5, 0.5, 0.2, 0.2);
    let gts = vec![image("a", vec![ann(h, h, 0, vec![0])])];
    let preds = vec![vec![inst(h, h, 0, 0, 0.5, 0)]];
    let bins = spatial_bins(&preds, &gts, &t, &SpatialBinSpec::new(SpatialMode::Area)).unwrap();
    assert_eq!(bins.len(), 10);
    assert!(bins.iter().all(|b| !b.reported && b.ap.is_none()));
    let spec = SpatialBinSpec {
        floor: 1,
        ..SpatialBinSpec::new(SpatialMode::Area)
    };
    assert!(spatial_bins(&preds, &gts, &t, &spec)
        .unwrap()
        .iter()
        .all(|b| !b.reported));
    let spec = SpatialBinSpec { floor: 0, ..spec };
    assert!(spatial_bins(&preds, &gts, &t, &spec).unwrap()[9].reported);
    let spec = SpatialBinSpec { bins: 0, ..spec };
    assert!(spatial_bins(&preds, &gts, &t, &spec).is_err());
}

#[test]
fn false_positives_count_in_every_bin() {
    let t = table(1, 1);
    let small = (bx(0.2, 0.2, 0.1, 0.1), bx(0.25, 0.2, 0.1, 0.1));
    let large = (bx(0.5, 0.5, 0.8, 0.8), bx(0.5, 0.5, 0.6, 0.6));
    let gts = vec![image(
        "a",
        vec![
            ann(small.0, small.1, 0, vec![0]),
            ann(large.0, large.1, 0, vec![0]),
        ],
    )];
    let clutter = bx(0.9, 0.1, 0.05, 0.05);
    let preds = vec![vec![
        inst(clutter, clutter, 0, 0, 0.9, 0),
        inst(small.0, small.1, 0, 0, 0.8, 1),
        inst(large.0, large.1, 0, 0, 0.7, 2),
    ]];
    let spec = SpatialBinSpec {
        mode: SpatialMode::Area,
        bins: 2,
        floor: 0,
    };
    let bins = spatial_bins(&preds, &gts, &t, &spec).unwrap();
    // each bin ranks [FP, TP]: AP 0.5
    assert_eq!(bins[0].ap, Some(0.5));
    assert_eq!(bins[1].ap, Some(0.5));
}

proptest! {
    #[test]
    fn monotone_score_rescaling_keeps_map(seed in 0u64..500, scale in 0.01f64..10.0, power in 0.3f64..3.0) {
        let t = table(2, 2);
        let (preds, gts) = random_set(seed, 2, 2);
        let base = evaluate(&preds, &gts, EvalSetting::Default, &t).unwrap();
        let moved: Vec<Vec<HoiInstance>> = preds
            .iter()
            .map(|l| l.iter().map(|p| HoiInstance { score: scale * p.score.powf(power), ..*p }).collect())
            .collect();
        let r = evaluate(&moved, &gts, EvalSetting::Default, &t).unwrap();
        prop_assert_eq!(base.class_ap, r.class_ap);
    }

    #[test]
    fn map_lies_in_unit_interval(seed in 0u64..500) {
        let t = table(2, 2);
        let (preds, gts) = random_set(seed, 2, 2);
        for setting in [EvalSetting::Default, EvalSetting::KnownObject] {
            let r = evaluate(&preds, &gts, setting, &t).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.full));
            for ap in r.class_ap.iter().flatten() {
                prop_assert!((0.0..=1.0).contains(ap));
            }
        }
    }
}
