pub mod checkpoint;
pub mod conditioning;
pub mod ddim;
pub mod schedule;
pub mod train;
pub mod unet;

pub use checkpoint::{Checkpoint, ConditioningMap};
pub use conditioning::{combine_with_timestep, Conditioning, ConditioningSpec, EmbeddingTables};
pub use ddim::{ddim_sample, ddim_sample_batch, ddim_step, ddim_timesteps, initial_noise, DdimConfig};
pub use schedule::{forward_diffuse, NoiseSchedule, ScheduleConfig};
pub use train::{denoising_loss, Batch, NoisePredictor, TrainConfig, Trainer, TrainingSet};
pub use unet::{DenoiserModel, UnetConfig};
