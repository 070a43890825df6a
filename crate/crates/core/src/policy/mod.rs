//! Sharing-policy search, the joint learn-and-share loop and the toy trainer.

mod autodiff;
mod search;
mod share;
mod train;

pub use autodiff::BackwardFault;
pub use search::{check_theta, find_policy, PolicyFile};
pub use share::{
    adjacent_js, attention_corpus, derive_policy, learn_to_share, measure_js, Derived,
    IterationLog, PolicyConfig, ShareCheckpoint, ShareOutcome,
};
pub use train::{
    batch_loss, gradcheck, loss_and_grads, lr_at, toy_train, Adam, Checkpoint, GradOptions,
    GradcheckConfig, GradcheckReport, TrainConfig,
};
