//! Variational autoencoder over demand vectors, latent-ball sets built on it,
//! and the decoder Jacobian products used by latent-space ascent.

mod latent;
pub mod mlp;
mod model;
mod train;

pub use latent::{calibrate_latent, sample_latent_ball, sample_latent_ball_with, LatentBall};
pub use mlp::{Activation, Layer, Mlp};
pub use model::{kl_divergence, DecodeCache, Standardizer, VaeModel, MODEL_VERSION};
pub use train::{train_vae, EpochRecord, TrainingRecord, VaeConfig};
