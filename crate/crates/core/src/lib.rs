pub mod audio;
pub mod cmha;
pub mod datagen;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod feature;
pub mod frontends;
pub mod gridnet;
pub mod models;
pub mod nn;
pub mod sepformer;
pub mod training;

pub use audio::{read_wav, write_wav, AudioSignal, WavEncoding};
pub use error::{Error, Result};
pub use feature::{FeatureLayout, FeatureMap};
