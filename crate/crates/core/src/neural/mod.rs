//! Minimal neural-network core in double precision: a reverse-mode tape,
//! dense and gated recurrent layers, Gaussian policy heads, Adam, and a
//! text checkpoint container.

pub mod adam;
pub mod checkpoint;
pub mod layers;
pub mod params;
pub mod tape;

pub use adam::{adam_step, clip_grad_norm, AdamState};
pub use checkpoint::Checkpoint;
pub use layers::{
    gaussian_entropy, gaussian_entropy_scalar, gaussian_log_prob, gaussian_log_prob_scalar, ActorNet, ActorOutput,
    ActorSpec, CriticNet, CriticSpec, Dense, GruCell,
};
pub use params::ParameterSet;
pub use tape::{Gradients, Tape, Tensor, Var};
