//! Personality-aligned multimodal sentiment regression with multi-level
//! fusion, implemented on a small reverse-mode autodiff tape.
//!
//! Pipeline: text tokens run through the shallow layers of a transformer
//! stack and through a frozen personality stack; visual and audio frames go
//! through recurrent encoders. Alignment losses tie the sentiment and
//! personality embeddings together, a contrastive loss ties text to the
//! other modalities, the deep layers of the text stack pre-fuse all three
//! modalities, and cross-modal attention plus serial/parallel fusion feed a
//! small regression head.

pub mod alignment;
pub mod data;
pub mod encoders;
pub mod error;
pub mod experiments;
pub mod fusion;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Matrix;
