pub mod bitstream;
pub mod codec;
pub mod config;
pub mod conv;
pub mod disc;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod fused;
pub mod gradcheck;
pub mod losses;
pub mod manifest;
pub mod mixture;
pub mod model;
pub mod nn;
pub mod params;
pub mod rvq;
pub mod synth;
pub mod tensor_ops;
pub mod train;

pub use dsp::Waveform;
pub use error::{Error, Result};
pub use mixture::SourceId;
pub use model::SdCodec;
