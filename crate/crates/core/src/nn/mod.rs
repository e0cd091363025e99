//! Dense tanh networks with hand-written reverse-mode gradients, Adam, and the
//! three regressions used by the generators.

mod adam;
mod mlp;
mod train;

pub use adam::{Adam, AdamConfig};
pub use mlp::{Layer, MlpParams, MlpSpec, OutputActivation};
pub use train::{
    mean_squared_error, train_nsf, train_time_predictor, train_velocity_matching,
    train_velocity_matching_with, LrDecay, TimeSampling, TrainConfig, Trained,
};
