use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::GroundTruthSet;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Array, Graph};

use super::loss::{compute_loss, LossTerms};
use super::optim::{clip_grad_norm, learning_rates, AdamW};

/// One training image and its annotations.
#[derive(Clone, Debug)]
pub struct TrainSample {
    /// `3 × H × W`, values in `[0, 1]`.
    pub image: Array,
    pub gt: GroundTruthSet,
}

/// Loss terms of one optimizer step, summed over images and decoder layers.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub terms: LossTerms,
}

/// Trains `model` in place. `on_step` sees every record and the updated model,
/// and may stop training early by returning `Ok(false)`.
pub fn train_loop(
    model: &mut Model,
    data: &[TrainSample],
    seed: u64,
    mut on_step: impl FnMut(&StepRecord, &Model) -> Result<bool>,
) -> Result<Vec<StepRecord>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let cfg = model.config.train.clone();
    let batch = cfg.batch_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_0ade);
    let mut opt = AdamW::new(&model.store, cfg.weight_decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut records = Vec::new();
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (lr, lr_backbone) = learning_rates(&cfg, epoch);
        for chunk in order.chunks(batch) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let samples: Vec<&TrainSample> = chunk.iter().map(|&i| &data[i]).collect();
            let terms = accumulate_batch(model, &samples, step)?;
            let grad_norm = clip_grad_norm(&mut model.store, cfg.clip_max_norm);
            if !grad_norm.is_finite() {
                return Err(Error::Diverged {
                    step,
                    message: format!("gradient norm {grad_norm}"),
                });
            }
            opt.step(&mut model.store, lr, lr_backbone);
            model.store.zero_grads();
            let record = StepRecord {
                step,
                epoch,
                lr,
                grad_norm,
                terms,
            };
            step += 1;
            let go_on = on_step(&record, model)?;
            records.push(record);
            if !go_on {
                break 'epochs;
            }
        }
    }
    Ok(records)
}

/// Forward and backward over one batch; gradients accumulate in the store.
fn accumulate_batch(model: &mut Model, samples: &[&TrainSample], step: usize) -> Result<LossTerms> {
    let normalizer = samples
        .iter()
        .map(|s| s.gt.instances.len())
        .sum::<usize>()
        .max(1) as f64;
    let all_layers = model.config.loss.aux_loss;
    let mut terms = LossTerms::default();
    for s in samples {
        let mut g = Graph::new(&model.store);
        let out = model.forward(&mut g, &s.image, all_layers)?;
        let (loss, breakdown) =
            compute_loss(&mut g, &out.layers, &s.gt, &model.config.loss, normalizer).map_err(
                |e| match e {
                    Error::NonFinite(message) => Error::Diverged {
                        step,
                        message: format!("image {}: {message}", s.gt.image_id),
                    },
                    e => e,
                },
            )?;
        if !breakdown.total.is_finite() {
            return Err(Error::Diverged {
                step,
                message: format!(
                    "non-finite loss on image {}: {:?}",
                    s.gt.image_id,
                    breakdown.last()
                ),
            });
        }
        for l in &breakdown.layers {
            terms.add(l);
        }
        let grads = g.backward(loss)?;
        drop(g);
        grads.accumulate_into(&mut model.store);
    }
    Ok(terms)
}

/// Writes the loss log as CSV with one row per step.
pub fn write_loss_csv(path: impl AsRef<Path>, records: &[StepRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "step,epoch,lr,grad_norm")?;
    for c in LossTerms::COLUMNS {
        write!(f, ",{c}")?;
    }
    writeln!(f)?;
    for r in records {
        write!(f, "{},{},{},{}", r.step, r.epoch, r.lr, r.grad_norm)?;
        for v in r.terms.values() {
            write!(f, ",{v}")?;
        }
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}
