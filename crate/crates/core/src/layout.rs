//! Binary layout of a [`QuantizedMatrix`].
//!
//! ```text
//! header (16 bytes, little-endian)
//!   0..4   magic b"MXQM"
//!   4      element format   (0 INT8, 1 E5M2, 2 E4M3, 3 E3M2, 4 E2M3, 5 E2M1)
//!   5      block geometry   (0 Vector32, 1 Vector16_BDR, 2 Square8x8)
//!   6      orientation      (0 RowBlocks, 1 ColBlocks, 2 Square)
//!   7      reserved, 0
//!   8..12  rows  u32
//!   12..16 cols  u32
//! blocks, row-major over the block grid
//!   scale byte (E8M0)
//!   micro-exponent bits, BDR only (one bit per pair, LSB first)
//!   element codes packed LSB first: 8-bit one per byte, FP6 four per three
//!   bytes, FP4 two per byte
//! ```

use crate::error::{MxError, Result};
use crate::formats::{ElementFormat, SharedScale};
use crate::quant::{grid_dims, BlockGeometry, MxBlock, Orientation, PaddingPolicy, QuantizedMatrix};

pub const QUANT_MAGIC: [u8; 4] = *b"MXQM";
pub const HEADER_BYTES: usize = 16;

fn format_tag(f: ElementFormat) -> u8 {
    ElementFormat::ALL.iter().position(|&x| x == f).unwrap() as u8
}

fn geometry_tag(g: BlockGeometry) -> u8 {
    match g {
        BlockGeometry::Vector32 => 0,
        BlockGeometry::Vector16Bdr => 1,
        BlockGeometry::Square8x8 => 2,
    }
}

fn orientation_tag(o: Orientation) -> u8 {
    match o {
        Orientation::RowBlocks => 0,
        Orientation::ColBlocks => 1,
        Orientation::Square => 2,
    }
}

/// Bytes needed for `n` packed codes of `format`.
pub fn packed_code_bytes(format: ElementFormat, n: usize) -> usize {
    (n * format.total_bits() as usize).div_ceil(8)
}

pub fn block_bytes(format: ElementFormat, geometry: BlockGeometry) -> usize {
    let n = geometry.elements_per_scale();
    let micro = if geometry.has_micro_exponents() { (n / 2).div_ceil(8) } else { 0 };
    1 + micro + packed_code_bytes(format, n)
}

/// Pack codes into an LSB-first bit stream of `width`-bit fields.
pub fn pack_codes(codes: &[u8], width: u32, out: &mut Vec<u8>) {
    let start = out.len();
    out.resize(start + (codes.len() * width as usize).div_ceil(8), 0);
    for (i, &c) in codes.iter().enumerate() {
        let bit = i * width as usize;
        let word = u16::from(c) << (bit % 8);
        out[start + bit / 8] |= word as u8;
        if bit % 8 + width as usize > 8 {
            out[start + bit / 8 + 1] |= (word >> 8) as u8;
        }
    }
}

pub fn unpack_codes(bytes: &[u8], width: u32, n: usize) -> Vec<u8> {
    let mask = (1u16 << width) - 1;
    (0..n)
        .map(|i| {
            let bit = i * width as usize;
            let lo = u16::from(bytes[bit / 8]);
            let hi = bytes.get(bit / 8 + 1).copied().map_or(0, u16::from);
            ((((hi << 8) | lo) >> (bit % 8)) & mask) as u8
        })
        .collect()
}

pub fn to_bytes(qm: &QuantizedMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_BYTES + qm.blocks.len() * block_bytes(qm.format, qm.geometry));
    out.extend_from_slice(&QUANT_MAGIC);
    out.push(format_tag(qm.format));
    out.push(geometry_tag(qm.geometry));
    out.push(orientation_tag(qm.orientation));
    out.push(0);
    out.extend_from_slice(&(qm.rows as u32).to_le_bytes());
    out.extend_from_slice(&(qm.cols as u32).to_le_bytes());
    for b in &qm.blocks {
        out.push(b.scale.exp_code);
        if let Some(micro) = &b.micro_exps {
            pack_codes(micro, 1, &mut out);
        }
        pack_codes(&b.codes, qm.format.total_bits(), &mut out);
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<QuantizedMatrix> {
    if bytes.len() < HEADER_BYTES || bytes[..4] != QUANT_MAGIC {
        return Err(MxError::Decode("missing MXQM header".into()));
    }
    let format = *ElementFormat::ALL
        .get(bytes[4] as usize)
        .ok_or_else(|| MxError::Decode(format!("unknown format tag {}", bytes[4])))?;
    let geometry = match bytes[5] {
        0 => BlockGeometry::Vector32,
        1 => BlockGeometry::Vector16Bdr,
        2 => BlockGeometry::Square8x8,
        t => return Err(MxError::Decode(format!("unknown geometry tag {t}"))),
    };
    let orientation = match bytes[6] {
        0 => Orientation::RowBlocks,
        1 => Orientation::ColBlocks,
        2 => Orientation::Square,
        t => return Err(MxError::Decode(format!("unknown orientation tag {t}"))),
    };
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let (grid_rows, grid_cols) = grid_dims(rows, cols, geometry, orientation);
    let per_block = block_bytes(format, geometry);
    let body = &bytes[HEADER_BYTES..];
    if body.len() != grid_rows * grid_cols * per_block {
        return Err(MxError::Decode(format!(
            "expected {} block bytes, found {}",
            grid_rows * grid_cols * per_block,
            body.len()
        )));
    }
    let n = geometry.elements_per_scale();
    let mut blocks = Vec::with_capacity(grid_rows * grid_cols);
    for chunk in body.chunks_exact(per_block) {
        let scale = SharedScale::from_code(chunk[0])?;
        let mut rest = &chunk[1..];
        let micro_exps = if geometry.has_micro_exponents() {
            let len = (n / 2).div_ceil(8);
            let m = unpack_codes(&rest[..len], 1, n / 2);
            rest = &rest[len..];
            Some(m)
        } else {
            None
        };
        let codes = unpack_codes(rest, format.total_bits(), n);
        blocks.push(MxBlock { geometry, format, scale, codes, micro_exps });
    }
    Ok(QuantizedMatrix {
        rows,
        cols,
        format,
        geometry,
        orientation,
        padding: PaddingPolicy::Zero,
        grid_rows,
        grid_cols,
        blocks,
    })
}
