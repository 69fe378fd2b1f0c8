pub mod autodiff;
pub mod certify;
pub mod config;
pub mod datagen;
pub mod document;
pub mod encoders;
pub mod evaluation;
pub mod error;
pub mod objectives;
pub mod parallel;
pub mod queue;
pub mod rng;
pub mod trainer;

pub use document::{DocumentImage, DocumentPair, EmbeddingRecord, Modality};
pub use error::{Error, ErrorKind, Result};
