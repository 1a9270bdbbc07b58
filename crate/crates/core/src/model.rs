//! The complete detector: backbone, deformable transformer and interaction head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::Backbone;
use crate::boxes::BoundingBox;
use crate::config::Config;
use crate::error::Result;
use crate::head::{HeadOutput, InteractionHead};
use crate::numerics::{sigmoid, Array, Graph, ParamStore, Var};
use crate::transformer::{DeformAttnConfig, DeformableTransformer};

#[derive(Clone, Debug)]
pub struct Model {
    pub config: Config,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub transformer: DeformableTransformer,
    pub head: InteractionHead,
}

/// Head outputs of every decoder layer (the last one is the prediction) and the anchors.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub layers: Vec<HeadOutput>,
    /// `[N_q, 2]`.
    pub anchors: Var,
}

impl ModelOutput {
    pub fn last(&self) -> &HeadOutput {
        self.layers.last().expect("at least one decoder layer")
    }
}

/// Plain-value predictions of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub human_boxes: Vec<BoundingBox>,
    pub object_boxes: Vec<BoundingBox>,
    /// Sigmoid probabilities, `K_o + 1` per query (last slot: no pair).
    pub object_probs: Vec<Vec<f64>>,
    /// Sigmoid probabilities, `K_a` per query.
    pub action_probs: Vec<Vec<f64>>,
    pub anchors: Vec<[f64; 2]>,
}

impl Prediction {
    pub fn from_output(g: &Graph, out: &HeadOutput, anchors: Var) -> Self {
        let boxes = |v: Var| {
            g.value(v)
                .data()
                .chunks(4)
                .map(BoundingBox::from_slice)
                .collect()
        };
        let probs = |v: Var| {
            let a = g.value(v);
            let (_, k) = a.dims2();
            a.data()
                .chunks(k)
                .map(|r| r.iter().map(|&x| sigmoid(x)).collect())
                .collect()
        };
        Self {
            human_boxes: boxes(out.human_boxes),
            object_boxes: boxes(out.object_boxes),
            object_probs: probs(out.raw.object_logits),
            action_probs: probs(out.raw.action_logits),
            anchors: g
                .value(anchors)
                .data()
                .chunks(2)
                .map(|p| [p[0], p[1]])
                .collect(),
        }
    }

    pub fn num_queries(&self) -> usize {
        self.human_boxes.len()
    }
}

impl Model {
    /// Builds a freshly initialized model; all randomness comes from `seed`.
    pub fn new(config: &Config, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&config.backbone, &mut store, &mut rng);
        let t = &config.transformer;
        let attn = DeformAttnConfig {
            heads: t.heads,
            points: t.points,
            levels: backbone.num_levels(),
            model_dim: config.backbone.model_dim,
        };
        let transformer =
            DeformableTransformer::new(attn, t.layers, t.ffn_dim, t.queries, &mut store, &mut rng);
        let head = InteractionHead::new(
            &config.head,
            config.backbone.model_dim,
            &mut store,
            &mut rng,
        );
        Ok(Self {
            config: config.clone(),
            store,
            backbone,
            transformer,
            head,
        })
    }

    /// Runs the network on a `3 × H × W` image with values in `[0, 1]`.
    ///
    /// With `all_layers`, the shared head is applied to every decoder layer.
    pub fn forward(&self, g: &mut Graph, image: &Array, all_layers: bool) -> Result<ModelOutput> {
        let pyramid = self.backbone.extract_pyramid(g, image)?;
        let seq = self.backbone.project_and_flatten(g, &pyramid);
        let pos = self.backbone.positional_encoding(g, &seq);
        let memory = self.transformer.encode(g, &seq, pos)?;
        let anchors = self.transformer.queries.generate_anchors(g);
        let emb = self
            .transformer
            .decode(g, anchors, memory, &seq.levels, &seq.padding)?;
        let chosen: &[Var] = if all_layers {
            &emb.layers
        } else {
            std::slice::from_ref(emb.layers.last().expect("decoder layers"))
        };
        let layers = chosen
            .iter()
            .map(|&e| self.head.forward(g, e, anchors))
            .collect();
        Ok(ModelOutput { layers, anchors })
    }

    /// Inference: last-layer predictions as plain values.
    pub fn predict(&self, image: &Array) -> Result<Prediction> {
        let mut g = Graph::new(&self.store);
        let out = self.forward(&mut g, image, false)?;
        Ok(Prediction::from_output(&g, out.last(), out.anchors))
    }

    /// The learned anchor set `[N_q]` of `(p_x, p_y)`.
    pub fn anchors(&self) -> Vec<[f64; 2]> {
        let mut g = Graph::new(&self.store);
        let a = self.transformer.queries.generate_anchors(&mut g);
        g.value(a).data().chunks(2).map(|p| [p[0], p[1]]).collect()
    }
}
