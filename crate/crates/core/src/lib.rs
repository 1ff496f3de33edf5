//! Bit-accurate model of a precision-scalable MX training accelerator.
//!
//! The crate covers the MX element and scale formats, block quantization in
//! vector and square geometries, the 2-bit-multiplier MAC datapath, an 8x8
//! processing-element array, a cycle model of the GeMM core, storage and
//! cost models, and a small training harness that exercises the
//! quantization schemes end to end.

pub mod cost;
pub mod error;
pub mod formats;
pub mod fp32;
pub mod gemm;
pub mod layout;
pub mod mac;
pub mod matrix;
pub mod pe_array;
pub mod quant;
pub mod train;
pub mod workload;

pub use error::{MxError, Result};
pub use formats::{ElementCode, ElementFormat, SharedScale};
pub use matrix::Matrix;
pub use quant::{BlockGeometry, Orientation, QuantizedMatrix};
