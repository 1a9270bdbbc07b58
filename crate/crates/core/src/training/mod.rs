//! Set matching, the detection loss, and the optimization loop.

mod gradcheck;
mod loss;
mod matching;
mod optim;
mod train;

pub use gradcheck::model_gradient_check;
pub use loss::{
    compute_loss, focal_class_cost, focal_loss, match_cost, match_layer, LossBreakdown, LossTerms,
    QueryView,
};
pub use matching::{hungarian_match, MatchResult};
pub use optim::{clip_grad_norm, grad_norm, learning_rates, AdamW, BACKBONE_PREFIX};
pub use train::{train_loop, write_loss_csv, StepRecord, TrainSample};
