use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::Linear;
use crate::numerics::{Array, Graph, LevelTable, ParamStore, Var};

/// Shape of one multi-scale deformable attention module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeformAttnConfig {
    pub heads: usize,
    pub points: usize,
    pub levels: usize,
    pub model_dim: usize,
}

impl DeformAttnConfig {
    fn samples(&self) -> usize {
        self.heads * self.levels * self.points
    }
}

/// Multi-scale deformable attention.
///
/// Per query and head, `levels * points` sampling offsets and attention logits are
/// linear in the query. Logits are softmax-normalized within each head, values are
/// projected before sampling, and the concatenated heads go through an output
/// projection. Offsets are in pixels of the level they sample.
#[derive(Clone, Debug)]
pub struct MsDeformAttn {
    pub config: DeformAttnConfig,
    pub sampling_offsets: Linear,
    pub attention_weights: Linear,
    pub value_proj: Linear,
    pub output_proj: Linear,
}

impl MsDeformAttn {
    pub fn new(
        config: DeformAttnConfig,
        store: &mut ParamStore,
        name: &str,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = config.model_dim;
        let sampling_offsets = Linear::zeroed(
            store,
            &format!("{name}.sampling_offsets"),
            d,
            config.samples() * 2,
            rng,
        );
        store
            .set_value(sampling_offsets.bias, ring_offsets(&config))
            .expect("ring bias shape");
        Self {
            config,
            sampling_offsets,
            attention_weights: Linear::zeroed(
                store,
                &format!("{name}.attention_weights"),
                d,
                config.samples(),
                rng,
            ),
            value_proj: Linear::fan_in(store, &format!("{name}.value_proj"), d, d, rng),
            output_proj: Linear::fan_in(store, &format!("{name}.output_proj"), d, d, rng),
        }
    }

    /// Projects the memory to per-head values, zeroing rows flagged in `padding`.
    pub fn project_values(&self, g: &mut Graph, memory: Var, padding: &[bool]) -> Var {
        let v = self.value_proj.forward(g, memory);
        if !padding.iter().any(|&p| p) {
            return v;
        }
        let d = self.config.model_dim;
        let mask: Vec<f64> = padding
            .iter()
            .flat_map(|&p| std::iter::repeat(if p { 0.0 } else { 1.0 }).take(d))
            .collect();
        let mask = g.constant(Array::new(&[padding.len(), d], mask).expect("non-empty memory"));
        g.mul(v, mask)
    }

    /// Attention weights `[queries, heads * levels * points]`, normalized per head.
    pub fn weights(&self, g: &mut Graph, query: Var) -> Var {
        let nq = g.shape(query)[0];
        let c = &self.config;
        let logits = self.attention_weights.forward(g, query);
        let grouped = g.reshape(logits, &[nq * c.heads, c.levels * c.points]);
        let w = g.softmax(grouped, 1);
        g.reshape(w, &[nq, c.samples()])
    }

    /// `query`: `[n, C_d]`, `refs`: `[n, 2]` in `[0, 1]²`, `memory`: `[N_S, C_d]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        query: Var,
        refs: Var,
        memory: Var,
        levels: &LevelTable,
        padding: &[bool],
    ) -> Result<Var> {
        let value = self.project_values(g, memory, padding);
        self.forward_with_values(g, query, refs, value, levels)
    }

    pub fn forward_with_values(
        &self,
        g: &mut Graph,
        query: Var,
        refs: Var,
        value: Var,
        levels: &LevelTable,
    ) -> Result<Var> {
        let offsets = self.sampling_offsets.forward(g, query);
        let weights = self.weights(g, query);
        let sampled = g.deform_sample(
            value,
            refs,
            offsets,
            weights,
            levels,
            self.config.heads,
            self.config.points,
        )?;
        Ok(self.output_proj.forward(g, sampled))
    }
}

/// Initial offset bias: head `m` points along angle `2πm / heads`, point `k` at radius `k + 1`.
fn ring_offsets(c: &DeformAttnConfig) -> Array {
    let mut out = Vec::with_capacity(c.samples() * 2);
    for m in 0..c.heads {
        let theta = std::f64::consts::TAU * m as f64 / c.heads as f64;
        let (s, co) = theta.sin_cos();
        let scale = co.abs().max(s.abs());
        let (dx, dy) = (co / scale, s / scale);
        for _ in 0..c.levels {
            for k in 0..c.points {
                let r = (k + 1) as f64;
                out.push(dx * r);
                out.push(dy * r);
            }
        }
    }
    Array::from_vec(out)
}
