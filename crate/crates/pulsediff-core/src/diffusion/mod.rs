//! Conditional denoising diffusion: noise schedules, the trainable
//! epsilon-predictor, training and the iterative reverse sampler.

mod denoiser;
mod sample;
mod schedule;
mod train;

pub use denoiser::{
    denoiser_backward, denoiser_forward, denoiser_forward_with_cache, Conditioning,
    DenoiserConfig, DenoiserParams, ForwardCache, ParamLayout, PriorMode, TensorInfo,
};
pub use sample::{impute, ImputationResult, ImputeOptions, ImputeStatus};
pub use schedule::{forward_sample, make_schedule, reverse_step, NoiseSchedule, ScheduleKind};
pub use train::{
    masked_eps_loss, train, training_loss, LossMode, LrDecayPoint, TraceRow, TrainConfig,
    TrainItem, TrainOutput,
};
