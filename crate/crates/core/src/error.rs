use thiserror::Error;

use crate::formats::ElementFormat;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MxError {
    #[error("code 0x{bits:02x} out of range for {format}")]
    CodeOutOfRange { format: ElementFormat, bits: u16 },

    #[error("non-finite value {0} cannot be quantized")]
    NonFinite(f64),

    #[error("block needs scale exponent {0}, outside the E8M0 range [-127, 127]")]
    ScaleOutOfRange(i32),

    #[error("expected {expected} values for one block, got {got}")]
    BlockLength { expected: usize, got: usize },

    #[error("operation requires square 8x8 blocks")]
    NotSquare,

    #[error("geometry/orientation mismatch: {0}")]
    Geometry(String),

    #[error("format {format} cannot run in MAC mode {mode}")]
    ModeMismatch { mode: String, format: ElementFormat },

    #[error("FP4 product exponent offset {0} outside 0..=4")]
    Fp4ExponentRange(i32),

    #[error("non-finite element code 0x{0:02x} reached the datapath")]
    NonFiniteOperand(u8),

    #[error("matrix shape mismatch: {0}")]
    Shape(String),

    #[error("malformed serialized data: {0}")]
    Decode(String),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, MxError>;

impl MxError {
    /// Whether the error breaks an internal contract (as opposed to
    /// rejecting malformed user input).
    pub fn is_contract_violation(&self) -> bool {
        matches!(
            self,
            MxError::ScaleOutOfRange(_)
                | MxError::BlockLength { .. }
                | MxError::NotSquare
                | MxError::Geometry(_)
                | MxError::ModeMismatch { .. }
                | MxError::Fp4ExponentRange(_)
                | MxError::NonFiniteOperand(_)
                | MxError::Diverged { .. }
        )
    }
}
