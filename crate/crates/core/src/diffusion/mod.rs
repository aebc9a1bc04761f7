//! Noise schedule, samplers and the base training loop.

pub mod sampler;
pub mod schedule;
pub mod train;

pub use sampler::{
    ancestral_step, ancestral_update, chain_streams, ddim_step, ddim_update, dt_visualize,
    final_points, guided_eval, hybrid_chains, hybrid_sample, hybrid_with, sample, sample_chains,
    sample_endpoints, sample_with, skip_first_chains, skip_first_sample, skip_first_with,
    AncestralVariance, Guidance, NetPredictor, NoisePredictor, SamplerConfig, StepInfo, StepRecord,
    Trajectory,
};
pub use schedule::{forward_noise, make_schedule, NoiseSchedule, ScheduleKind, StepGrid};
pub use train::{train_base, TrainConfig, TrainLog};
