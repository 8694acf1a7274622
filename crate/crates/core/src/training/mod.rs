//! Contrastive training of the hypernetwork on precomputed embeddings.

mod gradcheck;
mod loss;
mod mining;
mod noise;
mod optim;
mod trainer;

pub use gradcheck::{check_gradients, relative_error, tiny_problem, GradCheckReport, TensorCheck, FD_STEP, FD_TOLERANCE, REL_ERR_FLOOR};
pub use loss::{
    batch_similarity, similarity_row, symmetric_contrastive_loss, symmetric_contrastive_loss_tape, LossNorm,
    TrainingBatch,
};
pub use mining::{mine_semi_positives, MiningIndex, Neighbor, MINING_NEIGHBORS, SEMI_POSITIVES};
pub use noise::{add_query_noise, NoiseMode, NoiseSource};
pub use optim::{AdamWConfig, CosineSchedule, OptimizerState, StepOutcome};
pub use trainer::{
    batch_loss, batch_loss_and_grad, train, EpochHook, EpochRecord, StepRecord, TrainConfig, TrainData, TrainLog,
    Trainer,
};

#[cfg(test)]
mod tests;
