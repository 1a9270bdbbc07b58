use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::LayerNorm;

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Array {
    let n = shape.iter().product();
    Array::new(
        shape,
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .unwrap()
}

fn small(layers: usize, queries: usize) -> (ParamStore, DeformableTransformer) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let cfg = DeformAttnConfig {
        heads: 2,
        points: 2,
        levels: 2,
        model_dim: 8,
    };
    let t = DeformableTransformer::new(cfg, layers, 16, queries, &mut store, &mut rng);
    (store, t)
}

fn sequence(g: &mut Graph, rng: &mut ChaCha8Rng) -> FlattenedSequence {
    let shapes = [(4, 4), (2, 2)];
    let levels = LevelTable::new(&shapes);
    let mut positions = Vec::new();
    let mut level_index = Vec::new();
    for (l, &(h, w)) in shapes.iter().enumerate() {
        for i in 0..h {
            for j in 0..w {
                positions.push([(j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64]);
                level_index.push(l);
            }
        }
    }
    let n = positions.len();
    FlattenedSequence {
        tokens: g.constant(rand_array(rng, &[n, 8], 1.0)),
        level_index,
        positions,
        padding: vec![false; n],
        levels,
        model_dim: 8,
    }
}

fn ffn_sublayer(g: &mut Graph, ffn: &FeedForward, norm: &LayerNorm, x: Var) -> Var {
    let f = ffn.forward(g, x);
    let s = g.add(x, f);
    norm.forward(g, s)
}

#[test]
fn encoder_preserves_shape() {
    let (store, t) = small(2, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new(&store);
    let seq = sequence(&mut g, &mut rng);
    let pos = g.constant(rand_array(&mut rng, &[20, 8], 1.0));
    let mem = t.encode(&mut g, &seq, pos).unwrap();
    assert_eq!(g.shape(mem), g.shape(seq.tokens));
}

#[test]
fn encoder_with_zeroed_attention_is_the_ffn_block() {
    let (mut store, t) = small(1, 5);
    t.encoder[0].attn.output_proj.zero(&mut store);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new(&store);
    let seq = sequence(&mut g, &mut rng);
    let pos = g.constant(rand_array(&mut rng, &[20, 8], 1.0));
    let mem = t.encode(&mut g, &seq, pos).unwrap();
    let layer = &t.encoder[0];
    let x = layer.norm1.forward(&mut g, seq.tokens);
    let want = ffn_sublayer(&mut g, &layer.ffn, &layer.norm2, x);
    assert_eq!(g.value(mem), g.value(want));
}

#[test]
fn decoder_with_zeroed_attention_is_the_ffn_block() {
    let (mut store, t) = small(1, 6);
    t.decoder[0].self_attn.out_proj.zero(&mut store);
    t.decoder[0].cross_attn.output_proj.zero(&mut store);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::new(&store);
    let seq = sequence(&mut g, &mut rng);
    let anchors = t.queries.generate_anchors(&mut g);
    let out = t
        .decode(&mut g, anchors, seq.tokens, &seq.levels, &seq.padding)
        .unwrap();
    let layer = &t.decoder[0];
    let (hoi, _) = t.queries.split(&mut g);
    let x = layer.norm1.forward(&mut g, hoi);
    let x = layer.norm2.forward(&mut g, x);
    let want = ffn_sublayer(&mut g, &layer.ffn, &layer.norm3, x);
    assert_eq!(g.value(out.last()), g.value(want));
}

#[test]
fn decoder_keeps_every_layer() {
    let (store, t) = small(3, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new(&store);
    let seq = sequence(&mut g, &mut rng);
    let anchors = t.queries.generate_anchors(&mut g);
    let out = t
        .decode(&mut g, anchors, seq.tokens, &seq.levels, &seq.padding)
        .unwrap();
    assert_eq!(out.layers.len(), 3);
    for l in &out.layers {
        assert_eq!(g.shape(*l), &[7, 8]);
    }
}

#[test]
fn decoder_is_query_permutation_equivariant() {
    let (store, t) = small(2, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let perm = [3, 0, 5, 1, 4, 2];
    let mut g = Graph::new(&store);
    let seq = sequence(&mut g, &mut rng);
    let (hoi, pos) = t.queries.split(&mut g);
    let anchors = t.queries.generate_anchors(&mut g);
    let base = t
        .decode_queries(
            &mut g,
            hoi,
            pos,
            anchors,
            seq.tokens,
            &seq.levels,
            &seq.padding,
        )
        .unwrap();
    let (ph, pp, pa) = (
        g.gather_rows(hoi, &perm),
        g.gather_rows(pos, &perm),
        g.gather_rows(anchors, &perm),
    );
    let permuted = t
        .decode_queries(&mut g, ph, pp, pa, seq.tokens, &seq.levels, &seq.padding)
        .unwrap();
    for (b, p) in base.layers.iter().zip(&permuted.layers) {
        let want = g.gather_rows(*b, &perm);
        let diff = g
            .value(want)
            .data()
            .iter()
            .zip(g.value(*p).data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "max diff {diff}");
    }
}

#[test]
fn anchors_from_zero_projection_sit_at_center() {
    let (mut store, t) = small(1, 4);
    t.queries.anchor_proj.zero(&mut store);
    let mut g = Graph::new(&store);
    let a = t.queries.generate_anchors(&mut g);
    assert!(g.value(a).data().iter().all(|&v| v == 0.5));
}

#[test]
fn anchors_lie_in_open_unit_square() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let q = QueryBank::new(&mut store, 30, 8, &mut rng);
        let mut g = Graph::new(&store);
        let a = q.generate_anchors(&mut g);
        assert_eq!(g.shape(a), &[30, 2]);
        assert!(g.value(a).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn full_size_decoder_stack_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let cfg = DeformAttnConfig {
        heads: 8,
        points: 4,
        levels: 3,
        model_dim: 256,
    };
    let t = DeformableTransformer::new(cfg, 6, 1024, 300, &mut store, &mut rng);
    let levels = LevelTable::new(&[(4, 4), (2, 2), (1, 1)]);
    let mut g = Graph::new(&store);
    let memory = g.constant(rand_array(&mut rng, &[21, 256], 1.0));
    let anchors = t.queries.generate_anchors(&mut g);
    let out = t
        .decode(&mut g, anchors, memory, &levels, &[false; 21])
        .unwrap();
    assert_eq!(out.layers.len(), 6);
    for l in &out.layers {
        assert_eq!(g.shape(*l), &[300, 256]);
    }
}
