//! Interaction head: per-query human box, object box, object class and action classes.

use rand_chacha::ChaCha8Rng;

use crate::boxes::BoundingBox;
use crate::config::{BoxComposition, HeadConfig};
use crate::nn::{Linear, Mlp};
use crate::numerics::{inverse_sigmoid, sigmoid, Array, Graph, ParamStore, Var};

/// Clamp used when taking the inverse sigmoid of an anchor.
const ANCHOR_EPS: f64 = 1e-6;

/// Raw head outputs for `N` queries.
#[derive(Clone, Copy, Debug)]
pub struct RawPrediction {
    /// `[N, 4]`: `(d_x, d_y, w_raw, h_raw)`.
    pub human_delta: Var,
    pub object_delta: Var,
    /// `[N, K_o + 1]`; the last slot is the no-pair class.
    pub object_logits: Var,
    /// `[N, K_a]`.
    pub action_logits: Var,
}

/// Raw outputs plus the composed `(c_x, c_y, w, h)` boxes, `[N, 4]` each.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub raw: RawPrediction,
    pub human_boxes: Var,
    pub object_boxes: Var,
}

#[derive(Clone, Debug)]
pub struct InteractionHead {
    pub config: HeadConfig,
    pub human_box: Mlp,
    pub object_box: Mlp,
    pub object_class: Linear,
    pub action_class: Linear,
}

impl InteractionHead {
    pub fn new(
        config: &HeadConfig,
        model_dim: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = model_dim;
        let human_box = Mlp::new(store, "head.human_box", &[d, d, d, 4], true, rng);
        let object_box = Mlp::new(store, "head.object_box", &[d, d, d, 4], true, rng);
        let object_class = Linear::fan_in(
            store,
            "head.object_class",
            d,
            config.object_classes + 1,
            rng,
        );
        let action_class =
            Linear::fan_in(store, "head.action_class", d, config.action_classes, rng);
        let prior = -inverse_sigmoid(1.0 - config.prior_prob);
        for lin in [&object_class, &action_class] {
            store
                .set_value(lin.bias, Array::full(&[lin.out_dim], prior))
                .expect("bias shape");
        }
        Self {
            config: config.clone(),
            human_box,
            object_box,
            object_class,
            action_class,
        }
    }

    pub fn predict_heads(&self, g: &mut Graph, embeddings: Var) -> RawPrediction {
        RawPrediction {
            human_delta: self.human_box.forward(g, embeddings),
            object_delta: self.object_box.forward(g, embeddings),
            object_logits: self.object_class.forward(g, embeddings),
            action_logits: self.action_class.forward(g, embeddings),
        }
    }

    /// Heads plus box composition against `anchors` (`[N, 2]`).
    pub fn forward(&self, g: &mut Graph, embeddings: Var, anchors: Var) -> HeadOutput {
        let raw = self.predict_heads(g, embeddings);
        HeadOutput {
            human_boxes: compose_boxes(g, raw.human_delta, anchors, self.config.composition),
            object_boxes: compose_boxes(g, raw.object_delta, anchors, self.config.composition),
            raw,
        }
    }

    /// Sets the last layer of every head to zero.
    pub fn zero_final_layers(&self, store: &mut ParamStore) {
        self.human_box.last().zero(store);
        self.object_box.last().zero(store);
        self.object_class.zero(store);
        self.action_class.zero(store);
    }
}

/// Composes `[N, 4]` deltas with `[N, 2]` anchors into center-size boxes.
pub fn compose_boxes(g: &mut Graph, delta: Var, anchors: Var, mode: BoxComposition) -> Var {
    let d = g.slice_cols(delta, 0, 2);
    let raw_size = g.slice_cols(delta, 2, 2);
    let center = match mode {
        BoxComposition::InverseSigmoid => {
            let base = g.logit(anchors, ANCHOR_EPS);
            let z = g.add(base, d);
            g.sigmoid(z)
        }
        BoxComposition::Additive => {
            let c = g.add(anchors, d);
            let shape = g.shape(c).to_vec();
            let zero = g.constant(Array::zeros(&shape));
            let one = g.constant(Array::full(&shape, 1.0));
            let c = g.max(c, zero);
            g.min(c, one)
        }
    };
    let size = g.sigmoid(raw_size);
    g.concat_cols(&[center, size])
}

/// Scalar form of [`compose_boxes`] for one query.
pub fn compose_box(delta: [f64; 4], anchor: [f64; 2], mode: BoxComposition) -> BoundingBox {
    let center = |p: f64, d: f64| match mode {
        BoxComposition::InverseSigmoid => {
            let p = p.clamp(ANCHOR_EPS, 1.0 - ANCHOR_EPS);
            sigmoid(inverse_sigmoid(p) + d)
        }
        BoxComposition::Additive => (p + d).clamp(0.0, 1.0),
    };
    BoundingBox::new(
        center(anchor[0], delta[0]),
        center(anchor[1], delta[1]),
        sigmoid(delta[2]),
        sigmoid(delta[3]),
    )
}
