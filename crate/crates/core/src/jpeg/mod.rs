//! Baseline JPEG codec: IJG-quality encoder and accurate-IDCT decoder.

mod dct;
mod decoder;
mod encoder;
pub mod tables;

pub use decoder::{decode, decode_ycbcr};
pub use encoder::{encode, ChromaSubsampling};
pub use tables::quant_tables;
