//! One-shot spectrum matching with a convolutional Siamese network.
//!
//! A twin 1-D CNN maps a gridded spectrum to a feature vector; a learned
//! weighted L1 metric followed by a logistic turns two feature vectors into
//! a similarity in (0, 1). Trained on balanced bootstrap pairs, the model
//! classifies spectra of classes it never saw by nearest-reference search
//! over an editable reference database.

mod bytes;
pub mod app;
pub mod error;
pub mod eval;
pub mod matcher;
pub mod model_file;
pub mod nn;
pub mod preprocess;
pub mod sampler;
pub mod seed;
pub mod siamese;
pub mod spectra;
pub mod trainer;

pub use error::{Error, Result};
