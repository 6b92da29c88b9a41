//! Finetuning, adversarial training, influence tuning and embedding tuning.

mod adam;
mod influence;
mod sample;
mod train;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use influence::{
    cosine_influence_terms, dot_influence_gradient, embedding_loss, embedding_loss_gradient, influence_loss,
    influence_loss_gradient, influence_loss_gradient_with_signs, CosineTerms, InfluenceGradient, TERM_SIGNS,
};
pub use sample::{sample_influence_tuple, InfluenceTuple, TupleSampler};
pub use train::{
    cid_probes, train, AlternationSchedule, MetricsTrace, Phase, RoundSummary, RunConfig, TraceRow, TrainOutput,
    TrainingMethod, CONVERGENCE_ACCURACY,
};
