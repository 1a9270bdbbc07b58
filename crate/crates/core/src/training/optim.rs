use crate::config::TrainConfig;
use crate::numerics::{Array, ParamStore};

/// Parameters whose name starts with this prefix use the backbone learning rate.
pub const BACKBONE_PREFIX: &str = "backbone.";

/// Adam with decoupled weight decay and two learning-rate groups.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: i32,
    first: Vec<Array>,
    second: Vec<Array>,
    is_backbone: Vec<bool>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Array::zeros(p.value.shape()))
                .collect()
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            steps: 0,
            first: zeros(),
            second: zeros(),
            is_backbone: store
                .iter()
                .map(|(_, p)| p.name.starts_with(BACKBONE_PREFIX))
                .collect(),
        }
    }

    pub fn steps(&self) -> usize {
        self.steps as usize
    }

    /// Applies one update from the accumulated gradients; parameters without a
    /// gradient only decay.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, lr_backbone: f64) {
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps);
        let bc2 = 1.0 - self.beta2.powi(self.steps);
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let lr = if self.is_backbone[i] { lr_backbone } else { lr };
            if lr == 0.0 {
                continue;
            }
            let decay = 1.0 - lr * self.weight_decay;
            let value = p.value.data_mut();
            match &p.grad {
                Some(grad) => {
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    for (((x, &g), m), v) in value.iter_mut().zip(grad.data()).zip(m).zip(v) {
                        *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                        *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                        let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                        *x = *x * decay - lr * update;
                    }
                }
                None => value.iter_mut().for_each(|x| *x *= decay),
            }
        }
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm(store: &ParamStore) -> f64 {
    store
        .iter()
        .filter_map(|(_, p)| p.grad.as_ref())
        .flat_map(|g| g.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm` (`<= 0` disables).
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grad_norm(store);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        for p in store.params_mut() {
            if let Some(g) = &mut p.grad {
                g.data_mut().iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}

/// `(lr, lr_backbone)` for a 0-based epoch under the step-decay schedule.
pub fn learning_rates(cfg: &TrainConfig, epoch: usize) -> (f64, f64) {
    let f = if epoch >= cfg.lr_drop_epoch {
        cfg.lr_drop_factor
    } else {
        1.0
    };
    (cfg.lr * f, cfg.lr_backbone * f)
}
