//! Deformable transformer: encoder over the flattened pyramid, decoder over
//! learned HOI queries with query-derived anchors as reference points.

mod deform_attn;

pub use deform_attn::{DeformAttnConfig, MsDeformAttn};

use rand_chacha::ChaCha8Rng;

use crate::backbone::FlattenedSequence;
use crate::error::Result;
use crate::nn::{LayerNorm, Linear};
use crate::numerics::{Array, Graph, InitSpec, LevelTable, ParamId, ParamStore, Var};

/// Two-layer feed-forward block with ReLU.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl FeedForward {
    fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            lin1: Linear::fan_in(store, &format!("{name}.lin1"), dim, hidden, rng),
            lin2: Linear::fan_in(store, &format!("{name}.lin2"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.lin1.forward(g, x);
        let h = g.relu(h);
        self.lin2.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MsDeformAttn,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    /// `x + pos` queries attend from each token's own position; both sublayers are
    /// residual and post-normalized.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        pos: Var,
        refs: Var,
        seq: &FlattenedSequence,
    ) -> Result<Var> {
        let q = g.add(x, pos);
        let attn = self
            .attn
            .forward(g, q, refs, x, &seq.levels, &seq.padding)?;
        let x = g.add(x, attn);
        let x = self.norm1.forward(g, x);
        let ff = self.ffn.forward(g, x);
        let x = g.add(x, ff);
        Ok(self.norm2.forward(g, x))
    }
}

/// Standard scaled dot-product multi-head attention.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
}

impl MultiHeadAttention {
    fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            heads,
            q_proj: Linear::fan_in(store, &format!("{name}.q_proj"), dim, dim, rng),
            k_proj: Linear::fan_in(store, &format!("{name}.k_proj"), dim, dim, rng),
            v_proj: Linear::fan_in(store, &format!("{name}.v_proj"), dim, dim, rng),
            out_proj: Linear::fan_in(store, &format!("{name}.out_proj"), dim, dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, query: Var, key: Var, value: Var) -> Var {
        let dim = g.shape(query)[1];
        let dh = dim / self.heads;
        let q = self.q_proj.forward(g, query);
        let k = self.k_proj.forward(g, key);
        let v = self.v_proj.forward(g, value);
        let scale = 1.0 / (dh as f64).sqrt();
        let heads: Vec<Var> = (0..self.heads)
            .map(|h| {
                let qh = g.slice_cols(q, h * dh, dh);
                let kh = g.slice_cols(k, h * dh, dh);
                let vh = g.slice_cols(v, h * dh, dh);
                let scores = g.matmul_nt(qh, kh);
                let scores = g.scale(scores, scale);
                let p = g.softmax(scores, 1);
                g.matmul(p, vh)
            })
            .collect();
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)
        };
        self.out_proj.forward(g, cat)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MsDeformAttn,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn forward(
        &self,
        g: &mut Graph,
        tgt: Var,
        query_pos: Var,
        anchors: Var,
        memory_values: Var,
        levels: &LevelTable,
    ) -> Result<Var> {
        let qk = g.add(tgt, query_pos);
        let sa = self.self_attn.forward(g, qk, qk, tgt);
        let x = g.add(tgt, sa);
        let x = self.norm1.forward(g, x);
        let ca = self
            .cross_attn
            .forward_with_values(g, x, anchors, memory_values, levels)?;
        let x = g.add(x, ca);
        let x = self.norm2.forward(g, x);
        let ff = self.ffn.forward(g, x);
        let x = g.add(x, ff);
        Ok(self.norm3.forward(g, x))
    }
}

/// Learned joint query embeddings and the anchor projection.
#[derive(Clone, Debug)]
pub struct QueryBank {
    /// `[N_q, 2 C_d]`: columns `0..C_d` are the HOI queries, `C_d..2C_d` the positional queries.
    pub embeddings: ParamId,
    pub anchor_proj: Linear,
    pub num_queries: usize,
    pub model_dim: usize,
}

impl QueryBank {
    pub fn new(
        store: &mut ParamStore,
        num_queries: usize,
        model_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            embeddings: store.add(
                "decoder.query_embed",
                &[num_queries, 2 * model_dim],
                InitSpec::TruncatedNormal { std: 1.0 },
                rng,
            ),
            anchor_proj: Linear::new(
                store,
                "decoder.anchor_proj",
                model_dim,
                2,
                InitSpec::FanIn { fan_in: model_dim },
                rng,
            ),
            num_queries,
            model_dim,
        }
    }

    /// `(Q_HOI, Q_Pos)`.
    pub fn split(&self, g: &mut Graph) -> (Var, Var) {
        let e = g.param(self.embeddings);
        let hoi = g.slice_cols(e, 0, self.model_dim);
        let pos = g.slice_cols(e, self.model_dim, self.model_dim);
        (hoi, pos)
    }

    /// Anchors `σ(Q_Pos · W + b)`, `[N_q, 2]`; they depend only on parameters.
    pub fn generate_anchors(&self, g: &mut Graph) -> Var {
        let (_, pos) = self.split(g);
        let z = self.anchor_proj.forward(g, pos);
        g.sigmoid(z)
    }
}

/// Decoder outputs of every layer.
#[derive(Clone, Debug)]
pub struct HoiEmbeddings {
    pub layers: Vec<Var>,
}

impl HoiEmbeddings {
    /// Embeddings consumed by the interaction head.
    pub fn last(&self) -> Var {
        *self.layers.last().expect("at least one decoder layer")
    }
}

#[derive(Clone, Debug)]
pub struct DeformableTransformer {
    pub attn_config: DeformAttnConfig,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub queries: QueryBank,
}

impl DeformableTransformer {
    pub fn new(
        attn_config: DeformAttnConfig,
        layers: usize,
        ffn_dim: usize,
        num_queries: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = attn_config.model_dim;
        let encoder = (0..layers)
            .map(|i| {
                let n = format!("encoder.{i}");
                EncoderLayer {
                    attn: MsDeformAttn::new(attn_config, store, &format!("{n}.attn"), rng),
                    norm1: LayerNorm::new(store, &format!("{n}.norm1"), d, rng),
                    ffn: FeedForward::new(store, &format!("{n}.ffn"), d, ffn_dim, rng),
                    norm2: LayerNorm::new(store, &format!("{n}.norm2"), d, rng),
                }
            })
            .collect();
        let decoder = (0..layers)
            .map(|i| {
                let n = format!("decoder.{i}");
                DecoderLayer {
                    self_attn: MultiHeadAttention::new(
                        store,
                        &format!("{n}.self_attn"),
                        d,
                        attn_config.heads,
                        rng,
                    ),
                    norm1: LayerNorm::new(store, &format!("{n}.norm1"), d, rng),
                    cross_attn: MsDeformAttn::new(
                        attn_config,
                        store,
                        &format!("{n}.cross_attn"),
                        rng,
                    ),
                    norm2: LayerNorm::new(store, &format!("{n}.norm2"), d, rng),
                    ffn: FeedForward::new(store, &format!("{n}.ffn"), d, ffn_dim, rng),
                    norm3: LayerNorm::new(store, &format!("{n}.norm3"), d, rng),
                }
            })
            .collect();
        Self {
            attn_config,
            encoder,
            decoder,
            queries: QueryBank::new(store, num_queries, d, rng),
        }
    }

    /// Encodes the token sequence into the memory `S`, `[N_S, C_d]`.
    pub fn encode(&self, g: &mut Graph, seq: &FlattenedSequence, pos: Var) -> Result<Var> {
        let refs = g.constant(seq.positions_array());
        let mut x = seq.tokens;
        for layer in &self.encoder {
            x = layer.forward(g, x, pos, refs, seq)?;
        }
        Ok(x)
    }

    /// Decodes the HOI queries against `memory`, keeping every layer's output.
    pub fn decode(
        &self,
        g: &mut Graph,
        anchors: Var,
        memory: Var,
        levels: &LevelTable,
        padding: &[bool],
    ) -> Result<HoiEmbeddings> {
        let (hoi, pos) = self.queries.split(g);
        self.decode_queries(g, hoi, pos, anchors, memory, levels, padding)
    }

    /// Decoder on explicit query tensors (used by `decode` and the equivariance tests).
    #[allow(clippy::too_many_arguments)]
    pub fn decode_queries(
        &self,
        g: &mut Graph,
        hoi: Var,
        pos: Var,
        anchors: Var,
        memory: Var,
        levels: &LevelTable,
        padding: &[bool],
    ) -> Result<HoiEmbeddings> {
        let mut tgt = hoi;
        let mut layers = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let values = layer.cross_attn.project_values(g, memory, padding);
            tgt = layer.forward(g, tgt, pos, anchors, values, levels)?;
            layers.push(tgt);
        }
        Ok(HoiEmbeddings { layers })
    }
}

/// Constant `[n, 2]` array of reference points.
pub fn reference_array(points: &[[f64; 2]]) -> Array {
    Array::new(
        &[points.len(), 2],
        points.iter().flatten().copied().collect(),
    )
    .expect("non-empty")
}

#[cfg(test)]
mod tests;
