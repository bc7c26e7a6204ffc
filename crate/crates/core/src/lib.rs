//! Rendering mixture models, shallow and deep.
//!
//! The library covers the full pipeline: generative sampling from shallow
//! (`rmm`) and deep (`drmm`) rendering models, exact max-sum inference that
//! reduces to conv / rectify / max-pool passes, hard-EM and gradient (EG)
//! training with reconstruction and KL regularizers, discriminative
//! relaxation, evolutionary taxonomy trees with bagged forests, activity
//! maximization, and deterministic dataset / checkpoint IO.
//!
//! Everything is `f64`, single threaded, and seeded: identical inputs give
//! bit-identical outputs.

pub mod actmax;
pub mod data;
pub mod drmm;
pub mod edrmm;
pub mod error;
pub mod learning;
pub mod model;
pub mod relax;
pub mod rmm;
pub mod seed;
pub mod tensor;

pub use error::{DrmmError, Result};
pub use tensor::Tensor;
