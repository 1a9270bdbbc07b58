use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::Model;
use crate::numerics::{finite_difference_check_sampled, Array, FdReport, ParamId};

use super::loss::compute_loss;
use super::train::TrainSample;

/// Central-difference check of the full training loss (every decoder layer) of
/// `model` on one sample, at up to `per_param` random entries of each parameter.
///
/// Every parameter entry is first moved by a uniform draw from `±jitter`, and
/// sampling-offset biases additionally by up to half a pixel. At initialization
/// the encoder samples exactly on pixel centers, where bilinear interpolation
/// has a kink and central differences disagree with either one-sided
/// derivative; the perturbation moves the check to a generic point.
pub fn model_gradient_check(
    model: &Model,
    sample: &TrainSample,
    eps: f64,
    per_param: usize,
    jitter: f64,
    seed: u64,
) -> Result<FdReport> {
    let mut store = model.store.clone();
    let ids: Vec<ParamId> = store.ids().collect();
    if jitter > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for &id in &ids {
            let sub_pixel = store.get(id).name.ends_with("sampling_offsets.bias");
            let v = store.value(id);
            let moved: Vec<f64> = v
                .data()
                .iter()
                .map(|x| {
                    let shift = if sub_pixel {
                        rng.gen_range(-0.5..0.5)
                    } else {
                        0.0
                    };
                    x + shift + rng.gen_range(-jitter..jitter)
                })
                .collect();
            let moved = Array::new(v.shape(), moved)?;
            store.set_value(id, moved)?;
        }
    }
    let normalizer = sample.gt.instances.len().max(1) as f64;
    finite_difference_check_sampled(&mut store, &ids, eps, Some(per_param), seed, |g| {
        let out = model.forward(g, &sample.image, true)?;
        let (loss, _) = compute_loss(g, &out.layers, &sample.gt, &model.config.loss, normalizer)?;
        Ok(loss)
    })
}
