//! GeMM core: a 4x16 grid of PE arrays running an output-stationary
//! schedule.
//!
//! The output tile grid (8x8 tiles) is covered by waves. A wave maps a
//! rectangle of tiles onto the array grid: every array row shares one A
//! block per block-step and every array column shares one B block, so a full
//! wave fetches 4 + 16 = 20 blocks per step. A job whose tile grid is tall
//! and narrow is mapped transposed (C^T = B^T A^T), which square blocks allow
//! at no cost. After each wave the 64x64 FP32 outputs are written back over
//! the memory interface.

use serde::{Deserialize, Serialize};

use crate::error::{MxError, Result};
use crate::formats::ElementFormat;
use crate::mac::{mac_step_fast, MacMode, MacModeKind, MacState, MacVariant};
use crate::matrix::Matrix;
use crate::pe_array::{cycles_for_mode, BlockMultJob, PeArray, PE_OUTPUTS};
use crate::quant::{BlockGeometry, Orientation, QuantizedMatrix, SQUARE_DIM};
use crate::workload::WorkloadSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoreConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub freq_mhz: f64,
    pub max_bw_bits_per_cycle: u64,
    pub mode: MacMode,
    pub variant: MacVariant,
    /// Hide each wave's writeback behind the next wave's compute.
    pub overlap_writeback: bool,
}

impl CoreConfig {
    pub fn reference(format: ElementFormat) -> Self {
        Self {
            grid_rows: 4,
            grid_cols: 16,
            freq_mhz: 500.0,
            max_bw_bits_per_cycle: 5280,
            mode: MacMode::for_format(format),
            variant: MacVariant::default(),
            overlap_writeback: false,
        }
    }

    pub fn arrays(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    /// Interface bandwidth in GB/s.
    pub fn bandwidth_gbs(&self) -> f64 {
        self.max_bw_bits_per_cycle as f64 * self.freq_mhz * 1e6 / 8.0 / 1e9
    }

    /// Wire size of one square block: 64 elements plus the scale byte.
    pub fn block_bits(&self) -> u64 {
        (PE_OUTPUTS as u64) * u64::from(self.mode.format.total_bits()) + 8
    }

    /// Input traffic of a fully occupied wave.
    pub fn input_bits_per_cycle(&self) -> f64 {
        ((self.grid_rows + self.grid_cols) as u64 * self.block_bits()) as f64
            / f64::from(cycles_for_mode(self.mode.kind))
    }

    /// Cycles to write one wave's outputs back.
    pub fn writeback_cycles(&self) -> u64 {
        let bits = (self.arrays() * PE_OUTPUTS * 32) as u64;
        bits.div_ceil(self.max_bw_bits_per_cycle)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    Forward,
    Backward,
    WeightGrad,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Forward, Stage::Backward, Stage::WeightGrad];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GemmJob {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub stage: Stage,
}

/// One wave: a rectangle of output tiles `[r0, r0+rows) x [c0, c0+cols)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Wave {
    pub r0: usize,
    pub rows: usize,
    pub c0: usize,
    pub cols: usize,
}

/// Wave decomposition of a `tile_rows x tile_cols` output grid. Returns the
/// waves and whether the grid was mapped transposed.
pub fn plan_waves(cfg: &CoreConfig, tile_rows: usize, tile_cols: usize) -> (Vec<Wave>, bool) {
    let count = |r: usize, c: usize| r.div_ceil(cfg.grid_rows) * c.div_ceil(cfg.grid_cols);
    let transposed = count(tile_cols, tile_rows) < count(tile_rows, tile_cols);
    let (gr, gc) = if transposed { (cfg.grid_cols, cfg.grid_rows) } else { (cfg.grid_rows, cfg.grid_cols) };
    let mut waves = Vec::new();
    for r0 in (0..tile_rows).step_by(gr) {
        for c0 in (0..tile_cols).step_by(gc) {
            waves.push(Wave { r0, rows: gr.min(tile_rows - r0), c0, cols: gc.min(tile_cols - c0) });
        }
    }
    (waves, transposed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobReport {
    pub stage: Stage,
    pub layer: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub waves: usize,
    pub transposed_mapping: bool,
    pub compute_cycles: u64,
    pub stall_cycles: u64,
    pub total_cycles: u64,
    pub utilization: f64,
    pub bw_used_bits_per_cycle: f64,
    #[serde(skip)]
    busy_array_cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: Stage,
    pub compute_cycles: u64,
    pub stall_cycles: u64,
    pub total_cycles: u64,
    pub utilization: f64,
    pub bw_used_bits_per_cycle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub mode: MacModeKind,
    pub format: ElementFormat,
    pub freq_mhz: f64,
    pub compute_cycles: u64,
    pub stall_cycles: u64,
    pub total_cycles: u64,
    pub utilization: f64,
    pub bw_used_bits_per_cycle: f64,
    pub latency_us: f64,
    pub stages: Vec<StageSummary>,
    pub jobs: Vec<JobReport>,
}

/// Cycle accounting of one GeMM; depends only on the dimensions and mode.
pub fn schedule_gemm(cfg: &CoreConfig, job: GemmJob) -> JobReport {
    let cpm = u64::from(cycles_for_mode(cfg.mode.kind));
    let (tr, tc, kb) = (job.m.div_ceil(SQUARE_DIM), job.n.div_ceil(SQUARE_DIM), job.k.div_ceil(SQUARE_DIM));
    let (waves, transposed) = if kb == 0 { (Vec::new(), false) } else { plan_waves(cfg, tr, tc) };
    let wave_compute = kb as u64 * cpm;
    let wb = cfg.writeback_cycles();
    let mut busy = 0;
    let mut stall = 0;
    let mut peak_bw = 0.0f64;
    for (i, w) in waves.iter().enumerate() {
        busy += (w.rows * w.cols) as u64 * wave_compute;
        let hidden = if cfg.overlap_writeback && i + 1 < waves.len() { wave_compute } else { 0 };
        stall += wb.saturating_sub(hidden);
        peak_bw = peak_bw.max(((w.rows + w.cols) as u64 * cfg.block_bits()) as f64 / cpm as f64);
    }
    let compute = waves.len() as u64 * wave_compute;
    let total = compute + stall;
    JobReport {
        stage: job.stage,
        layer: 0,
        m: job.m,
        k: job.k,
        n: job.n,
        waves: waves.len(),
        transposed_mapping: transposed,
        compute_cycles: compute,
        stall_cycles: stall,
        total_cycles: total,
        utilization: if total == 0 { 0.0 } else { busy as f64 / (cfg.arrays() as u64 * total) as f64 },
        bw_used_bits_per_cycle: peak_bw,
        busy_array_cycles: busy,
    }
}

/// GeMM jobs of one training iteration; the first layer's input error is
/// not computed.
pub fn training_jobs(workload: &WorkloadSpec) -> Vec<(usize, GemmJob)> {
    let b = workload.batch;
    let mut jobs = Vec::new();
    for (l, &(i, o)) in workload.layer_dims.iter().enumerate() {
        jobs.push((l, GemmJob { m: b, k: i, n: o, stage: Stage::Forward }));
    }
    for (l, &(i, o)) in workload.layer_dims.iter().enumerate().rev() {
        if l > 0 {
            jobs.push((l, GemmJob { m: b, k: o, n: i, stage: Stage::Backward }));
        }
    }
    for (l, &(i, o)) in workload.layer_dims.iter().enumerate() {
        jobs.push((l, GemmJob { m: i, k: b, n: o, stage: Stage::WeightGrad }));
    }
    jobs
}

pub fn simulate_training_iteration(cfg: &CoreConfig, workload: &WorkloadSpec) -> SimReport {
    let jobs: Vec<JobReport> = training_jobs(workload)
        .into_iter()
        .map(|(layer, job)| JobReport { layer, ..schedule_gemm(cfg, job) })
        .collect();
    let arrays = cfg.arrays() as u64;
    let summarize = |sel: &[&JobReport]| {
        let compute: u64 = sel.iter().map(|j| j.compute_cycles).sum();
        let stall: u64 = sel.iter().map(|j| j.stall_cycles).sum();
        let busy: u64 = sel.iter().map(|j| j.busy_array_cycles).sum();
        let bw = sel.iter().map(|j| j.bw_used_bits_per_cycle).fold(0.0, f64::max);
        let total = compute + stall;
        let util = if total == 0 { 0.0 } else { busy as f64 / (arrays * total) as f64 };
        (compute, stall, total, util, bw)
    };
    let stages = Stage::ALL
        .iter()
        .map(|&stage| {
            let sel: Vec<&JobReport> = jobs.iter().filter(|j| j.stage == stage).collect();
            let (compute_cycles, stall_cycles, total_cycles, utilization, bw_used_bits_per_cycle) = summarize(&sel);
            StageSummary { stage, compute_cycles, stall_cycles, total_cycles, utilization, bw_used_bits_per_cycle }
        })
        .collect();
    let all: Vec<&JobReport> = jobs.iter().collect();
    let (compute_cycles, stall_cycles, total_cycles, utilization, bw_used_bits_per_cycle) = summarize(&all);
    SimReport {
        mode: cfg.mode.kind,
        format: cfg.mode.format,
        freq_mhz: cfg.freq_mhz,
        compute_cycles,
        stall_cycles,
        total_cycles,
        utilization,
        bw_used_bits_per_cycle,
        latency_us: total_cycles as f64 / cfg.freq_mhz,
        stages,
        jobs,
    }
}

impl SimReport {
    pub fn stage(&self, stage: Stage) -> &StageSummary {
        self.stages.iter().find(|s| s.stage == stage).expect("every stage is summarized")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "stage,layer,m,k,n,waves,transposed_mapping,compute_cycles,stall_cycles,total_cycles,utilization,bw_used_bits_per_cycle\n",
        );
        for j in &self.jobs {
            s.push_str(&format!(
                "{:?},{},{},{},{},{},{},{},{},{},{:.6},{:.1}\n",
                j.stage,
                j.layer,
                j.m,
                j.k,
                j.n,
                j.waves,
                j.transposed_mapping,
                j.compute_cycles,
                j.stall_cycles,
                j.total_cycles,
                j.utilization,
                j.bw_used_bits_per_cycle
            ));
        }
        s.push_str(&format!(
            "Total,,,,,,,{},{},{},{:.6},{:.1}\n",
            self.compute_cycles, self.stall_cycles, self.total_cycles, self.utilization, self.bw_used_bits_per_cycle
        ));
        s
    }
}

fn check_operand(cfg: &CoreConfig, q: &QuantizedMatrix) -> Result<()> {
    if q.format != cfg.mode.format {
        return Err(MxError::ModeMismatch { mode: cfg.mode.kind.name().into(), format: q.format });
    }
    Ok(())
}

/// Numeric GeMM through the PE arrays (square blocks) or through MAC units
/// streaming 32-element vector blocks along K.
pub fn functional_gemm(cfg: &CoreConfig, a: &QuantizedMatrix, b: &QuantizedMatrix) -> Result<Matrix> {
    check_operand(cfg, a)?;
    check_operand(cfg, b)?;
    if a.cols != b.rows {
        return Err(MxError::Shape(format!("{}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols)));
    }
    match (a.geometry, b.geometry) {
        (BlockGeometry::Square8x8, BlockGeometry::Square8x8) => square_gemm(cfg, a, b),
        (BlockGeometry::Vector32, BlockGeometry::Vector32)
            if a.orientation == Orientation::RowBlocks && b.orientation == Orientation::ColBlocks =>
        {
            vector_gemm(cfg, a, b)
        }
        _ => Err(MxError::Geometry(format!(
            "GeMM needs square x square or row-blocked x column-blocked Vector32 operands, got {:?}/{:?} x {:?}/{:?}",
            a.geometry, a.orientation, b.geometry, b.orientation
        ))),
    }
}

fn square_gemm(cfg: &CoreConfig, a: &QuantizedMatrix, b: &QuantizedMatrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(a.rows, b.cols);
    let (waves, _) = plan_waves(cfg, a.grid_rows, b.grid_cols);
    let mut pe = PeArray::new(cfg.mode, cfg.variant);
    for w in waves {
        for tr in w.r0..w.r0 + w.rows {
            for tc in w.c0..w.c0 + w.cols {
                // The wave's mapping only decides which array owns the tile.
                let (br, bc) = (tr, tc);
                pe.reset();
                for k in 0..a.grid_cols {
                    pe.block_multiply(BlockMultJob { a_block: a.block(br, k), b_block: b.block(k, bc), accumulate: true })?;
                }
                let grid = pe.outputs();
                for i in 0..SQUARE_DIM {
                    let r = br * SQUARE_DIM + i;
                    if r >= out.rows {
                        break;
                    }
                    for j in 0..SQUARE_DIM {
                        let c = bc * SQUARE_DIM + j;
                        if c < out.cols {
                            out.set(r, c, grid[i * SQUARE_DIM + j]);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn vector_gemm(cfg: &CoreConfig, a: &QuantizedMatrix, b: &QuantizedMatrix) -> Result<Matrix> {
    let lanes = cfg.mode.lanes();
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut mac = MacState::default();
            for kb in 0..a.grid_cols {
                let (x, y) = (a.block(i, kb), b.block(kb, j));
                let scale = x.scale.exponent() + y.scale.exponent();
                for k0 in (0..x.codes.len()).step_by(lanes) {
                    mac = mac_step_fast(
                        mac,
                        &x.codes[k0..k0 + lanes],
                        &y.codes[k0..k0 + lanes],
                        scale,
                        cfg.mode,
                        cfg.variant,
                    )?;
                }
            }
            out.set(i, j, mac.accumulator);
        }
    }
    Ok(out)
}
