//! Two-way garment transfer: one latent-diffusion network that dresses a
//! person in a flat garment (try-on) or recovers the flat garment from a
//! worn photo (try-off), switching tasks by swapping the halves of a
//! side-by-side canvas.

pub mod assembly;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod datagen;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod imageio;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod rng;
pub mod sam;
pub mod srm;
pub mod training;

pub use assembly::{CanvasMode, Stage, Task};
pub use config::{FullConfig, Variant};
pub use datagen::Category;
pub use error::{Error, Result};
pub use model::Model;
pub use params::ParamStore;
