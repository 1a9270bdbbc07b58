//! Normalized center-size boxes, IoU and generalized IoU.

use serde::{Deserialize, Serialize};

use crate::numerics::{Graph, Var};

/// Box with center `(cx, cy)` and size `(w, h)`, normalized to the image size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners([x1, y1, x2, y2]: [f64; 4]) -> Self {
        Self {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// `[x1, y1, x2, y2]`.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn center_distance(&self, other: &BoundingBox) -> f64 {
        ((self.cx - other.cx).powi(2) + (self.cy - other.cy).powi(2)).sqrt()
    }

    /// Sum of absolute coordinate differences in center-size form.
    pub fn l1(&self, other: &BoundingBox) -> f64 {
        (self.cx - other.cx).abs()
            + (self.cy - other.cy).abs()
            + (self.w - other.w).abs()
            + (self.h - other.h).abs()
    }
}

fn area_corners(b: &[f64; 4]) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

/// IoU of corner-form boxes. A zero-area box has IoU 0 with everything.
pub fn iou_corners(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (aa, ab) = (area_corners(&a), area_corners(&b));
    if aa <= 0.0 || ab <= 0.0 {
        return 0.0;
    }
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    (inter / (aa + ab - inter)).clamp(0.0, 1.0)
}

/// Generalized IoU of corner-form boxes, in `(-1, 1]`.
pub fn giou_corners(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (aa, ab) = (area_corners(&a), area_corners(&b));
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = aa + ab - inter;
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    if hull <= 0.0 || union <= 0.0 {
        return 0.0;
    }
    inter / union - (hull - union) / hull
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    iou_corners(a.corners(), b.corners())
}

pub fn giou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    giou_corners(a.corners(), b.corners())
}

/// Corner form, IoU and GIoU of a box pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxGeometry {
    pub corners_a: [f64; 4],
    pub corners_b: [f64; 4],
    pub iou: f64,
    pub giou: f64,
}

pub fn box_geometry(a: &BoundingBox, b: &BoundingBox) -> BoxGeometry {
    BoxGeometry {
        corners_a: a.corners(),
        corners_b: b.corners(),
        iou: iou(a, b),
        giou: giou(a, b),
    }
}

/// Row-wise GIoU between two `[n, 4]` center-size box tensors; returns `[n, 1]`.
pub fn giou_graph(g: &mut Graph, a: Var, b: Var) -> Var {
    let corners = |g: &mut Graph, v: Var| {
        let c = g.slice_cols(v, 0, 2);
        let s = g.slice_cols(v, 2, 2);
        let half = g.scale(s, 0.5);
        (g.sub(c, half), g.add(c, half), s)
    };
    let (a_lo, a_hi, a_size) = corners(g, a);
    let (b_lo, b_hi, b_size) = corners(g, b);
    let area = |g: &mut Graph, size: Var| {
        let w = g.slice_cols(size, 0, 1);
        let h = g.slice_cols(size, 1, 1);
        g.mul(w, h)
    };
    let area_a = area(g, a_size);
    let area_b = area(g, b_size);

    let inter_hi = g.min(a_hi, b_hi);
    let inter_lo = g.max(a_lo, b_lo);
    let inter_wh = g.sub(inter_hi, inter_lo);
    let inter_wh = g.relu(inter_wh);
    let inter = area(g, inter_wh);
    let sum = g.add(area_a, area_b);
    let union = g.sub(sum, inter);
    let iou = g.div(inter, union);

    let hull_hi = g.max(a_hi, b_hi);
    let hull_lo = g.min(a_lo, b_lo);
    let hull_wh = g.sub(hull_hi, hull_lo);
    let hull = area(g, hull_wh);
    let gap = g.sub(hull, union);
    let penalty = g.div(gap, hull);
    g.sub(iou, penalty)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_check, Array, ParamStore};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_boxes() {
        let b = BoundingBox::new(0.4, 0.5, 0.2, 0.3);
        let geo = box_geometry(&b, &b);
        assert!((geo.iou - 1.0).abs() < 1e-15);
        assert!((geo.giou - 1.0).abs() < 1e-15);
        for (c, want) in geo.corners_a.iter().zip([0.3, 0.35, 0.5, 0.65]) {
            assert!((c - want).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_geometry_one_third() {
        // intersection 1×2, union 4 + 4 - 2
        assert_eq!(
            iou_corners([0.0, 0.0, 2.0, 2.0], [1.0, 0.0, 3.0, 2.0]),
            2.0 / 6.0
        );
    }

    #[test]
    fn disjoint_boxes() {
        let a = BoundingBox::from_corners([0.0, 0.0, 0.2, 0.2]);
        let b = BoundingBox::from_corners([0.5, 0.5, 0.7, 0.7]);
        assert_eq!(iou(&a, &b), 0.0);
        assert!(giou(&a, &b) < 0.0);
    }

    #[test]
    fn zero_area_has_zero_iou_even_with_itself() {
        let z = BoundingBox::new(0.5, 0.5, 0.0, 0.2);
        assert_eq!(iou(&z, &z), 0.0);
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0f64..1.0, 0.0f64..1.0, 0.01f64..0.8, 0.01f64..0.8)
            .prop_map(|(cx, cy, w, h)| BoundingBox::new(cx, cy, w, h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_giou_bounded(a in arb_box(), b in arb_box()) {
            let (i1, i2) = (iou(&a, &b), iou(&b, &a));
            prop_assert_eq!(i1, i2);
            prop_assert!((0.0..=1.0).contains(&i1));
            let gi = giou(&a, &b);
            prop_assert!(gi <= i1 + 1e-12);
            prop_assert!(gi > -1.0 && gi <= 1.0);
        }
    }

    #[test]
    fn giou_graph_matches_scalar_and_fd() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut rand_boxes = |n: usize| {
                let mut v = Vec::new();
                for _ in 0..n {
                    v.extend([
                        rng.gen_range(0.2..0.8),
                        rng.gen_range(0.2..0.8),
                        rng.gen_range(0.05..0.5),
                        rng.gen_range(0.05..0.5),
                    ]);
                }
                Array::new(&[n, 4], v).unwrap()
            };
            let (va, vb) = (rand_boxes(4), rand_boxes(4));
            let mut store = ParamStore::new();
            let a = store.add_value("a", va.clone());
            let b = store.add_value("b", vb.clone());
            {
                let mut g = Graph::new(&store);
                let (pa, pb) = (g.param(a), g.param(b));
                let out = giou_graph(&mut g, pa, pb);
                for i in 0..4 {
                    let want = giou(
                        &BoundingBox::from_slice(va.row(i)),
                        &BoundingBox::from_slice(vb.row(i)),
                    );
                    assert!((g.value(out).data()[i] - want).abs() < 1e-12);
                }
            }
            let report = finite_difference_check(&mut store, &[a, b], 1e-6, |g| {
                let (pa, pb) = (g.param(a), g.param(b));
                let out = giou_graph(g, pa, pb);
                Ok(g.sum(out))
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
        }
    }
}
