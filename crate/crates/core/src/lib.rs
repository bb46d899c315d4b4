//! Calibrated sound level meter chain, virtual MEMS microphone, inverse
//! compensation, swept-sine measurement and a virtual conformance battery.

pub mod buffer;
pub mod compensation;
pub mod conformance;
pub mod convolve;
pub mod error;
pub mod meter;
pub mod mic;
pub mod response;
pub mod sweep;

pub use buffer::SampleBuffer;
pub use error::{Error, Result};
