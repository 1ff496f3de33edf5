//! One PE array: 64 MAC units holding the 8x8 output grid of a square-block
//! product.
//!
//! Operands stream in ascending `k`. Per cycle, INT8 feeds one `k`, FP8/FP6
//! four consecutive `k` and FP4 all eight, so a block product takes 8, 2 or 1
//! cycles.

use crate::error::{MxError, Result};
use crate::mac::{mac_step_fast, MacMode, MacModeKind, MacState, MacVariant};
use crate::quant::{BlockGeometry, MxBlock, SQUARE_DIM};

pub const PE_OUTPUTS: usize = SQUARE_DIM * SQUARE_DIM;

pub const fn cycles_for_mode(mode: MacModeKind) -> u32 {
    (SQUARE_DIM / mode.lanes()) as u32
}

#[derive(Debug, Clone, Copy)]
pub struct BlockMultJob<'a> {
    pub a_block: &'a MxBlock,
    pub b_block: &'a MxBlock,
    /// Keep accumulating into the current grid; `false` clears it first.
    pub accumulate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeArray {
    pub mode: MacMode,
    pub variant: MacVariant,
    pub macs: [MacState; PE_OUTPUTS],
    pub cycles: u64,
}

impl PeArray {
    pub fn new(mode: MacMode, variant: MacVariant) -> Self {
        Self { mode, variant, macs: [MacState::default(); PE_OUTPUTS], cycles: 0 }
    }

    pub fn reset(&mut self) {
        self.macs = [MacState::default(); PE_OUTPUTS];
    }

    /// Row-major 8x8 grid of accumulator values.
    pub fn outputs(&self) -> [f32; PE_OUTPUTS] {
        self.macs.map(|m| m.accumulator)
    }

    pub fn saturated(&self) -> bool {
        self.macs.iter().any(|m| m.saturated)
    }

    fn check(&self, block: &MxBlock) -> Result<()> {
        if block.geometry != BlockGeometry::Square8x8 {
            return Err(MxError::Geometry(format!("PE array needs square blocks, got {:?}", block.geometry)));
        }
        if block.format != self.mode.format {
            return Err(MxError::ModeMismatch { mode: self.mode.kind.name().into(), format: block.format });
        }
        Ok(())
    }

    /// Multiply two square blocks into the output grid, returning the cycles
    /// spent.
    pub fn block_multiply(&mut self, job: BlockMultJob<'_>) -> Result<u32> {
        self.check(job.a_block)?;
        self.check(job.b_block)?;
        if !job.accumulate {
            self.reset();
        }
        let lanes = self.mode.lanes();
        let scale = job.a_block.scale.exponent() + job.b_block.scale.exponent();
        let a = &job.a_block.codes;
        let b = &job.b_block.codes;
        let mut bcol = [0u8; SQUARE_DIM];
        for j in 0..SQUARE_DIM {
            for (k, slot) in bcol.iter_mut().enumerate() {
                *slot = b[k * SQUARE_DIM + j];
            }
            for i in 0..SQUARE_DIM {
                let arow = &a[i * SQUARE_DIM..(i + 1) * SQUARE_DIM];
                let mac = &mut self.macs[i * SQUARE_DIM + j];
                for k0 in (0..SQUARE_DIM).step_by(lanes) {
                    *mac = mac_step_fast(
                        *mac,
                        &arow[k0..k0 + lanes],
                        &bcol[k0..k0 + lanes],
                        scale,
                        self.mode,
                        self.variant,
                    )?;
                }
            }
        }
        let cycles = cycles_for_mode(self.mode.kind);
        self.cycles += u64::from(cycles);
        Ok(cycles)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::ElementFormat;
    use crate::quant::quantize_block;

    fn square(f: ElementFormat, v: impl Fn(usize, usize) -> f64) -> MxBlock {
        let vals: Vec<f64> = (0..64).map(|x| v(x / 8, x % 8)).collect();
        quantize_block(&vals, f, BlockGeometry::Square8x8).unwrap()
    }

    #[test]
    fn cycle_table() {
        assert_eq!(cycles_for_mode(MacModeKind::Int8), 8);
        assert_eq!(cycles_for_mode(MacModeKind::Fp8Fp6), 2);
        assert_eq!(cycles_for_mode(MacModeKind::Fp4), 1);
    }

    #[test]
    fn identity_times_identity() {
        let f = ElementFormat::Int8;
        let id = square(f, |r, c| if r == c { 1.0 } else { 0.0 });
        let mut pe = PeArray::new(MacMode::for_format(f), MacVariant::default());
        let cycles = pe.block_multiply(BlockMultJob { a_block: &id, b_block: &id, accumulate: false }).unwrap();
        assert_eq!(cycles, 8);
        let out = pe.outputs();
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(out[i * 8 + j], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn zero_block_keeps_cycle_count() {
        let f = ElementFormat::Fp4E2m1;
        let z = MxBlock::zero(f, BlockGeometry::Square8x8);
        let x = square(f, |r, c| (r as f64) - (c as f64));
        let mut pe = PeArray::new(MacMode::for_format(f), MacVariant::default());
        assert_eq!(pe.block_multiply(BlockMultJob { a_block: &z, b_block: &x, accumulate: false }).unwrap(), 1);
        assert!(pe.outputs().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn small_integers_agree_across_modes() {
        let a = |r: usize, c: usize| ((r * 3 + c) % 5) as f64 - 2.0;
        let b = |r: usize, c: usize| ((r + 2 * c) % 3) as f64 - 1.0;
        let mut grids = Vec::new();
        for f in [ElementFormat::Int8, ElementFormat::Fp8E4m3, ElementFormat::Fp6E2m3, ElementFormat::Fp4E2m1] {
            let (qa, qb) = (square(f, a), square(f, b));
            let mut pe = PeArray::new(MacMode::for_format(f), MacVariant::default());
            pe.block_multiply(BlockMultJob { a_block: &qa, b_block: &qb, accumulate: false }).unwrap();
            grids.push(pe.outputs());
        }
        assert!(grids.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn rejects_mismatched_blocks() {
        let mut pe = PeArray::new(MacMode::for_format(ElementFormat::Int8), MacVariant::default());
        let fp = MxBlock::zero(ElementFormat::Fp8E4m3, BlockGeometry::Square8x8);
        let vec = MxBlock::zero(ElementFormat::Int8, BlockGeometry::Vector32);
        assert!(pe.block_multiply(BlockMultJob { a_block: &fp, b_block: &fp, accumulate: false }).is_err());
        assert!(pe.block_multiply(BlockMultJob { a_block: &vec, b_block: &vec, accumulate: false }).is_err());
    }
}
