//! Shared-exponent block quantization.
//!
//! Three block geometries are modeled: standard MX vector blocks of 32
//! elements, BDR-style 16-element vectors with a 1-bit micro-exponent per
//! element pair, and 8x8 square blocks whose 64 elements share one scale.
//! Square blocks are closed under transposition, so a quantized weight matrix
//! serves both the forward and the backward pass.

use serde::{Deserialize, Serialize};

use crate::error::{MxError, Result};
use crate::formats::{
    decode_element, encode_element, floor_log2, pow2, ElementCode, ElementFormat, SharedScale,
};
use crate::matrix::Matrix;

pub const SQUARE_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockGeometry {
    Vector32,
    #[serde(rename = "Vector16_BDR")]
    Vector16Bdr,
    Square8x8,
}

impl BlockGeometry {
    pub const fn elements_per_scale(self) -> usize {
        match self {
            BlockGeometry::Vector32 => 32,
            BlockGeometry::Vector16Bdr => 16,
            BlockGeometry::Square8x8 => 64,
        }
    }

    pub const fn is_vector(self) -> bool {
        !matches!(self, BlockGeometry::Square8x8)
    }

    pub const fn has_micro_exponents(self) -> bool {
        matches!(self, BlockGeometry::Vector16Bdr)
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "vector32" | "vector" | "v32" => Ok(BlockGeometry::Vector32),
            "vector16bdr" | "bdr" | "v16" => Ok(BlockGeometry::Vector16Bdr),
            "square8x8" | "square" | "sq" => Ok(BlockGeometry::Square8x8),
            _ => Err(MxError::Invalid(format!("unknown block geometry '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Orientation {
    /// Vector blocks run along a row (consecutive columns).
    RowBlocks,
    /// Vector blocks run along a column (consecutive rows).
    ColBlocks,
    Square,
}

impl Orientation {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "rowblocks" | "row" | "rows" => Ok(Orientation::RowBlocks),
            "colblocks" | "col" | "cols" | "column" => Ok(Orientation::ColBlocks),
            "square" => Ok(Orientation::Square),
            _ => Err(MxError::Invalid(format!("unknown orientation '{s}'"))),
        }
    }
}

/// One shared-scale group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MxBlock {
    pub geometry: BlockGeometry,
    pub format: ElementFormat,
    pub scale: SharedScale,
    /// Raw element bits; square blocks are row-major 8x8.
    pub codes: Vec<u8>,
    /// One bit per element pair, BDR only.
    pub micro_exps: Option<Vec<u8>>,
}

impl MxBlock {
    pub fn zero(format: ElementFormat, geometry: BlockGeometry) -> Self {
        let n = geometry.elements_per_scale();
        Self {
            geometry,
            format,
            scale: SharedScale::ONE,
            codes: vec![0; n],
            micro_exps: geometry.has_micro_exponents().then(|| vec![0; n / 2]),
        }
    }

    pub fn code(&self, i: usize) -> ElementCode {
        ElementCode { format: self.format, bits: self.codes[i] }
    }

    /// Scale exponent applying to element `i`, micro-exponent included.
    pub fn element_scale_exp(&self, i: usize) -> i32 {
        let micro = self.micro_exps.as_ref().map_or(0, |m| i32::from(m[i / 2]));
        self.scale.exponent() + micro
    }

    /// Transpose an 8x8 square block in place of its codes. The scale is
    /// untouched and no element is re-encoded.
    pub fn transposed(&self) -> Result<MxBlock> {
        if self.geometry != BlockGeometry::Square8x8 {
            return Err(MxError::NotSquare);
        }
        let mut codes = vec![0u8; 64];
        for r in 0..SQUARE_DIM {
            for c in 0..SQUARE_DIM {
                codes[c * SQUARE_DIM + r] = self.codes[r * SQUARE_DIM + c];
            }
        }
        Ok(MxBlock { codes, ..self.clone() })
    }

    /// Express a square block as two standard 32-element MX blocks (rows 0-3
    /// and rows 4-7) carrying the same scale byte.
    pub fn split_into_mx_vectors(&self) -> Result<[MxBlock; 2]> {
        if self.geometry != BlockGeometry::Square8x8 {
            return Err(MxError::NotSquare);
        }
        let half = |range: std::ops::Range<usize>| MxBlock {
            geometry: BlockGeometry::Vector32,
            format: self.format,
            scale: self.scale,
            codes: self.codes[range].to_vec(),
            micro_exps: None,
        };
        Ok([half(0..32), half(32..64)])
    }
}

/// Scale exponent chosen for a block whose largest magnitude is `max_abs`.
///
/// The block maximum's power of two is divided by the largest power of two
/// of the element format; all-zero blocks get `2^0`.
pub fn block_scale_exponent(max_abs: f64, format: ElementFormat) -> i32 {
    if max_abs == 0.0 {
        0
    } else {
        floor_log2(max_abs) - format.emax()
    }
}

fn scale_from_exponent(e: i32) -> Result<SharedScale> {
    if e > 127 {
        return Err(MxError::ScaleOutOfRange(e));
    }
    // Blocks below 2^-127 clamp to the smallest scale and lose precision.
    SharedScale::from_exponent(e.max(-127))
}

fn encode_scaled(v: f64, scale_exp: i32, format: ElementFormat) -> u8 {
    encode_element(v * pow2(-scale_exp), format).bits
}

fn decode_scaled(bits: u8, scale_exp: i32, format: ElementFormat) -> f64 {
    decode_element(ElementCode { format, bits }).to_f64() * pow2(scale_exp)
}

pub fn quantize_block(values: &[f64], format: ElementFormat, geometry: BlockGeometry) -> Result<MxBlock> {
    let n = geometry.elements_per_scale();
    if values.len() != n {
        return Err(MxError::BlockLength { expected: n, got: values.len() });
    }
    if let Some(&bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(MxError::NonFinite(bad));
    }
    let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_abs == 0.0 {
        return Ok(MxBlock::zero(format, geometry));
    }
    let mut exp = block_scale_exponent(max_abs, format);
    if geometry.has_micro_exponents() {
        // The shared scale sits one binade below the rule so a micro-exponent
        // of 1 restores it for pairs holding the block maximum.
        exp -= 1;
    }
    let scale = scale_from_exponent(exp)?;
    let e = scale.exponent();
    if !geometry.has_micro_exponents() {
        let codes = values.iter().map(|&v| encode_scaled(v, e, format)).collect();
        return Ok(MxBlock { geometry, format, scale, codes, micro_exps: None });
    }

    let mut codes = Vec::with_capacity(n);
    let mut micro = Vec::with_capacity(n / 2);
    for pair in values.chunks_exact(2) {
        let cost = |pe: i32| -> (f64, [u8; 2]) {
            let bits = [encode_scaled(pair[0], pe, format), encode_scaled(pair[1], pe, format)];
            let err = pair
                .iter()
                .zip(bits)
                .map(|(&v, b)| (decode_scaled(b, pe, format) - v).powi(2))
                .sum();
            (err, bits)
        };
        let (err0, bits0) = cost(e);
        let (err1, bits1) = cost(e + 1);
        if err1 < err0 {
            micro.push(1);
            codes.extend_from_slice(&bits1);
        } else {
            micro.push(0);
            codes.extend_from_slice(&bits0);
        }
    }
    Ok(MxBlock { geometry, format, scale, codes, micro_exps: Some(micro) })
}

pub fn dequantize_block(block: &MxBlock) -> Vec<f64> {
    (0..block.codes.len())
        .map(|i| decode_scaled(block.codes[i], block.element_scale_exp(i), block.format))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PaddingPolicy {
    /// Ragged edges are filled with +0 and decode to exactly zero.
    Zero,
}

/// A matrix partitioned into shared-scale blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizedMatrix {
    pub rows: usize,
    pub cols: usize,
    pub format: ElementFormat,
    pub geometry: BlockGeometry,
    pub orientation: Orientation,
    pub padding: PaddingPolicy,
    /// Block grid dimensions.
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Blocks in row-major grid order.
    pub blocks: Vec<MxBlock>,
}

fn check_orientation(geometry: BlockGeometry, orientation: Orientation) -> Result<()> {
    match (geometry.is_vector(), orientation) {
        (false, Orientation::Square) | (true, Orientation::RowBlocks | Orientation::ColBlocks) => Ok(()),
        _ => Err(MxError::Geometry(format!("{geometry:?} blocks cannot be laid out as {orientation:?}"))),
    }
}

/// Block-grid dimensions for a `rows x cols` matrix.
pub fn grid_dims(rows: usize, cols: usize, geometry: BlockGeometry, orientation: Orientation) -> (usize, usize) {
    let len = geometry.elements_per_scale();
    match orientation {
        Orientation::RowBlocks => (rows, cols.div_ceil(len)),
        Orientation::ColBlocks => (rows.div_ceil(len), cols),
        Orientation::Square => (rows.div_ceil(SQUARE_DIM), cols.div_ceil(SQUARE_DIM)),
    }
}

impl QuantizedMatrix {
    /// Block index and in-block element index of matrix entry `(r, c)`.
    /// Also valid for padded coordinates inside the grid.
    #[inline]
    pub fn locate(&self, r: usize, c: usize) -> (usize, usize) {
        let len = self.geometry.elements_per_scale();
        match self.orientation {
            Orientation::RowBlocks => (r * self.grid_cols + c / len, c % len),
            Orientation::ColBlocks => ((r / len) * self.grid_cols + c, r % len),
            Orientation::Square => (
                (r / SQUARE_DIM) * self.grid_cols + c / SQUARE_DIM,
                (r % SQUARE_DIM) * SQUARE_DIM + c % SQUARE_DIM,
            ),
        }
    }

    pub fn block(&self, br: usize, bc: usize) -> &MxBlock {
        &self.blocks[br * self.grid_cols + bc]
    }

    pub fn code_at(&self, r: usize, c: usize) -> ElementCode {
        let (b, i) = self.locate(r, c);
        self.blocks[b].code(i)
    }

    pub fn scale_exp_at(&self, r: usize, c: usize) -> i32 {
        let (b, i) = self.locate(r, c);
        self.blocks[b].element_scale_exp(i)
    }

    pub fn value_at(&self, r: usize, c: usize) -> f64 {
        let (b, i) = self.locate(r, c);
        let blk = &self.blocks[b];
        decode_scaled(blk.codes[i], blk.element_scale_exp(i), blk.format)
    }

    /// Row-major dequantized values, padding excluded.
    pub fn dequantize(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.push(self.value_at(r, c));
            }
        }
        out
    }

    pub fn dequantize_f32(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |r, c| self.value_at(r, c) as f32)
    }

    /// Storage size in bits, padding included (element payloads, scale bytes
    /// and micro-exponent bits).
    pub fn storage_bits(&self) -> u64 {
        let per_block = self.geometry.elements_per_scale() as u64;
        let micro = if self.geometry.has_micro_exponents() { per_block / 2 } else { 0 };
        self.blocks.len() as u64 * (per_block * u64::from(self.format.total_bits()) + 8 + micro)
    }
}

pub fn quantize_matrix(
    m: &Matrix,
    format: ElementFormat,
    geometry: BlockGeometry,
    orientation: Orientation,
) -> Result<QuantizedMatrix> {
    check_orientation(geometry, orientation)?;
    let (grid_rows, grid_cols) = grid_dims(m.rows, m.cols, geometry, orientation);
    let n = geometry.elements_per_scale();
    let mut qm = QuantizedMatrix {
        rows: m.rows,
        cols: m.cols,
        format,
        geometry,
        orientation,
        padding: PaddingPolicy::Zero,
        grid_rows,
        grid_cols,
        blocks: Vec::with_capacity(grid_rows * grid_cols),
    };
    let mut buf = vec![0.0f64; n];
    for br in 0..grid_rows {
        for bc in 0..grid_cols {
            for (i, slot) in buf.iter_mut().enumerate() {
                let (r, c) = match orientation {
                    Orientation::RowBlocks => (br, bc * n + i),
                    Orientation::ColBlocks => (br * n + i, bc),
                    Orientation::Square => (br * SQUARE_DIM + i / SQUARE_DIM, bc * SQUARE_DIM + i % SQUARE_DIM),
                };
                *slot = if r < m.rows && c < m.cols { f64::from(m.get(r, c)) } else { 0.0 };
            }
            qm.blocks.push(quantize_block(&buf, format, geometry)?);
        }
    }
    Ok(qm)
}

/// Transpose a square-block matrix without re-encoding any element.
pub fn transpose_quantized(qm: &QuantizedMatrix) -> Result<QuantizedMatrix> {
    if qm.geometry != BlockGeometry::Square8x8 {
        return Err(MxError::NotSquare);
    }
    let mut blocks = Vec::with_capacity(qm.blocks.len());
    for bc in 0..qm.grid_cols {
        for br in 0..qm.grid_rows {
            blocks.push(qm.block(br, bc).transposed()?);
        }
    }
    Ok(QuantizedMatrix {
        rows: qm.cols,
        cols: qm.rows,
        grid_rows: qm.grid_cols,
        grid_cols: qm.grid_rows,
        blocks,
        ..qm.clone()
    })
}
