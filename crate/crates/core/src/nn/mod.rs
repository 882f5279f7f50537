//! Neural building blocks on top of candle tensors.

pub mod attention;
pub mod gradcheck;
pub mod layers;
pub mod lstm;
pub mod ops;
pub mod params;

pub use params::{Builder, Init, ParamKind, ParamStore};
