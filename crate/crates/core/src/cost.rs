//! Training memory footprint of a fully-connected workload, and the
//! side-by-side comparison table against the Dacapo processor.
//!
//! Components are computed exactly in bits, shown in KB (1024 bytes) rounded
//! half-up to 0.1, and the displayed total is the sum of displayed components.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::formats::ElementFormat;
use crate::gemm::{simulate_training_iteration, CoreConfig};
use crate::mac::MacModeKind;
use crate::quant::SQUARE_DIM;
use crate::workload::WorkloadSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PolicyName {
    Fp32Baseline,
    DacapoVector,
    OursSquare,
}

/// Exact bits per element as a fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitsPerElement {
    pub numer: u64,
    pub denom: u64,
}

impl BitsPerElement {
    pub const fn whole(bits: u64) -> Self {
        Self { numer: bits, denom: 1 }
    }

    pub fn value(self) -> f64 {
        self.numer as f64 / self.denom as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoragePolicy {
    pub name: PolicyName,
    pub label: String,
    pub bits_per_element: BitsPerElement,
    pub stores_transposed_weights: bool,
    pub stores_inference_act_copy: bool,
    pub reuses_act_for_row_errors: bool,
}

pub const DACAPO_MX9_BITS: u64 = 9;
pub const DACAPO_MX6_BITS: u64 = 6;
pub const DACAPO_MX4_BITS: u64 = 4;

impl StoragePolicy {
    pub fn fp32() -> Self {
        Self {
            name: PolicyName::Fp32Baseline,
            label: "FP32".into(),
            bits_per_element: BitsPerElement::whole(32),
            stores_transposed_weights: false,
            stores_inference_act_copy: false,
            reuses_act_for_row_errors: false,
        }
    }

    /// 16-element blocks with a scale byte and one micro-exponent bit per
    /// pair; `bits` is the average element footprint (9 for MX9).
    pub fn dacapo(label: &str, bits: u64) -> Self {
        Self {
            name: PolicyName::DacapoVector,
            label: label.into(),
            bits_per_element: BitsPerElement::whole(bits),
            stores_transposed_weights: true,
            stores_inference_act_copy: true,
            reuses_act_for_row_errors: true,
        }
    }

    pub fn mx9() -> Self {
        Self::dacapo("Dacapo MX9", DACAPO_MX9_BITS)
    }

    /// Square 8x8 blocks: element bits plus one scale byte per 64 elements.
    pub fn ours(format: ElementFormat) -> Self {
        let n = (SQUARE_DIM * SQUARE_DIM) as u64;
        Self {
            name: PolicyName::OursSquare,
            label: format!("Ours MX{}", format.name().trim_start_matches("FP8_").trim_start_matches("FP6_")),
            bits_per_element: BitsPerElement { numer: u64::from(format.total_bits()) * n + 8, denom: n },
            stores_transposed_weights: false,
            stores_inference_act_copy: false,
            reuses_act_for_row_errors: false,
        }
    }
}

/// One table row. `*_kb` fields are exact; `display` holds the rounded
/// components in tenths of a KB.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FootprintRow {
    pub policy: String,
    pub batch: usize,
    pub w_kb: f64,
    pub a_kb: f64,
    pub wt_kb: f64,
    pub at_kb: f64,
    pub erow_kb: f64,
    pub ecol_kb: f64,
    /// Set when row errors are not stored separately.
    pub erow_note: Option<String>,
    pub exact_total_kb: f64,
    pub display: DisplayRow,
    pub ratio_vs_fp32: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisplayRow {
    pub w: u64,
    pub a: u64,
    pub wt: u64,
    pub at: u64,
    pub erow: u64,
    pub ecol: u64,
    pub total: u64,
}

fn tenths(v: u64) -> String {
    format!("{}.{}", v / 10, v % 10)
}

impl DisplayRow {
    pub fn total_kb(&self) -> f64 {
        self.total as f64 / 10.0
    }
}

/// `elements * bpe` bits in KB, exact and rounded half-up to tenths.
fn kb(elements: u64, bpe: BitsPerElement) -> (f64, u64) {
    let bits_num = elements as u128 * u128::from(bpe.numer);
    let den = u128::from(bpe.denom) * 8 * 1024;
    let exact = bits_num as f64 / den as f64;
    let t = (bits_num * 20 + den) / (2 * den);
    (exact, t as u64)
}

fn raw_footprint(policy: &StoragePolicy, w: &WorkloadSpec) -> (FootprintRow, u64) {
    let bpe = policy.bits_per_element;
    let batch = w.batch as u64;
    let params = w.parameter_count() as u64;
    let input_sum: u64 = w.layer_dims.iter().map(|&(i, _)| i as u64).sum();
    let max_input = w.layer_dims.iter().map(|&(i, _)| i as u64).max().unwrap_or(0);
    let max_error = w.layer_dims.iter().map(|&(_, o)| o as u64).max().unwrap_or(0);
    let zero = (0.0, 0);
    let weights = kb(params, bpe);
    let wt = if policy.stores_transposed_weights { weights } else { zero };
    let at = kb(input_sum * batch, bpe);
    let a = if policy.stores_inference_act_copy { kb(max_input * batch, bpe) } else { zero };
    let err = kb(max_error * batch, bpe);
    let (erow, note) = if policy.reuses_act_for_row_errors { (zero, Some("reuse A".to_string())) } else { (err, None) };
    let ecol = if policy.name == PolicyName::DacapoVector { err } else { zero };
    let display = DisplayRow {
        w: weights.1,
        a: a.1,
        wt: wt.1,
        at: at.1,
        erow: erow.1,
        ecol: ecol.1,
        total: weights.1 + a.1 + wt.1 + at.1 + erow.1 + ecol.1,
    };
    let row = FootprintRow {
        policy: policy.label.clone(),
        batch: w.batch,
        w_kb: weights.0,
        a_kb: a.0,
        wt_kb: wt.0,
        at_kb: at.0,
        erow_kb: erow.0,
        ecol_kb: ecol.0,
        erow_note: note,
        exact_total_kb: weights.0 + a.0 + wt.0 + at.0 + erow.0 + ecol.0,
        display,
        ratio_vs_fp32: 1.0,
    };
    (row, display.total)
}

pub fn footprint(policy: &StoragePolicy, workload: &WorkloadSpec) -> FootprintRow {
    let (_, base) = raw_footprint(&StoragePolicy::fp32(), workload);
    let (mut row, total) = raw_footprint(policy, workload);
    row.ratio_vs_fp32 = base as f64 / total as f64;
    row
}

/// The three reference rows: FP32, Dacapo MX9 and square-block MXINT8.
pub fn footprint_table(workload: &WorkloadSpec) -> Vec<FootprintRow> {
    [StoragePolicy::fp32(), StoragePolicy::mx9(), StoragePolicy::ours(ElementFormat::Int8)]
        .iter()
        .map(|p| footprint(p, workload))
        .collect()
}

fn erow_cell(r: &FootprintRow) -> String {
    r.erow_note.clone().unwrap_or_else(|| tenths(r.display.erow))
}

const FOOTPRINT_HEADER: [&str; 10] =
    ["Batch", "Policy", "W", "A", "W^T", "A^T", "E (row)", "E (col)", "Total [KB]", "Ratio"];

fn footprint_cells(r: &FootprintRow) -> Vec<String> {
    let d = &r.display;
    vec![
        r.batch.to_string(),
        r.policy.clone(),
        tenths(d.w),
        tenths(d.a),
        tenths(d.wt),
        tenths(d.at),
        erow_cell(r),
        tenths(d.ecol),
        tenths(d.total),
        format!("{:.2}", r.ratio_vs_fp32),
    ]
}

pub fn footprint_csv(rows: &[FootprintRow]) -> String {
    let mut s = FOOTPRINT_HEADER.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&footprint_cells(r).join(","));
        s.push('\n');
    }
    s
}

pub fn footprint_markdown(rows: &[FootprintRow]) -> String {
    markdown(&FOOTPRINT_HEADER, rows.iter().map(footprint_cells))
}

fn markdown(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> String {
    let mut s = format!("| {} |\n", header.join(" | "));
    s.push_str(&format!("|{}\n", "---|".repeat(header.len())));
    for r in rows {
        let _ = writeln!(s, "| {} |", r.join(" | "));
    }
    s
}

/// Published Dacapo figures, and published figures of ours that this model
/// does not compute (area, energy).
pub mod published {
    pub const FREQ_MHZ: f64 = 500.0;
    pub const DACAPO_AREA_MM2: f64 = 8.66;
    pub const OURS_AREA_MM2: f64 = 6.44;
    pub const DACAPO_BW_GBS: f64 = 640.0;
    pub const DACAPO_MEM_KB: f64 = 370.13;
    pub const OURS_MEM_KB: f64 = 179.78;
    pub const MACS: u32 = 4096;
    pub const BATCH: usize = 32;
    /// (tier, ours E/op, Dacapo E/op, Dacapo latency in us)
    pub const TIERS: [(&str, &str, &str, f64); 3] = [
        ("MXINT8 vs. MX9", "3.20", "3.08", 40.4),
        ("MXFP8/FP6 vs. MX6", "1.87 - 1.88", "1.80", 24.56),
        ("MXFP4 vs. MX4", "0.43", "0.48", 20.6),
    ];
    pub const OURS_LATENCY_US: [f64; 3] = [10.86, 4.82, 3.81];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Computed,
    Published,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub specification: String,
    pub ours: String,
    pub dacapo: String,
    pub ours_source: Source,
    pub dacapo_source: Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierLatency {
    pub tier: String,
    pub format: ElementFormat,
    pub ours_us: f64,
    pub ours_published_us: f64,
    pub dacapo_published_us: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub batch: usize,
    pub rows: Vec<ComparisonRow>,
    pub latency: Vec<TierLatency>,
    pub memory_ratio: f64,
    pub bandwidth_ratio: f64,
    pub area_ratio: f64,
}

fn tier_of(format: ElementFormat) -> usize {
    match MacModeKind::for_format(format) {
        MacModeKind::Int8 => 0,
        MacModeKind::Fp8Fp6 => 1,
        MacModeKind::Fp4 => 2,
    }
}

/// Side-by-side table for the given element formats (one latency row per
/// precision tier, first format of a tier wins).
pub fn comparison_report(workload: &WorkloadSpec, formats: &[ElementFormat]) -> ComparisonReport {
    let cfg = CoreConfig::reference(ElementFormat::Int8);
    let ours_mem = footprint(&StoragePolicy::ours(ElementFormat::Int8), workload);
    let dacapo_mem = footprint(&StoragePolicy::mx9(), workload);
    let row = |spec: &str, ours: String, os: Source, dacapo: String, ds: Source| ComparisonRow {
        specification: spec.into(),
        ours,
        dacapo,
        ours_source: os,
        dacapo_source: ds,
    };
    use Source::{Computed, Published};
    let mut rows = vec![
        row("Freq. [MHz]", format!("{}", cfg.freq_mhz), Computed, format!("{}", published::FREQ_MHZ), Published),
        row("Area [mm^2]", format!("{:.2}", published::OURS_AREA_MM2), Published, format!("{:.2}", published::DACAPO_AREA_MM2), Published),
        row("Max. BW [GB/s]", format!("{}", cfg.bandwidth_gbs()), Computed, format!("{}", published::DACAPO_BW_GBS), Published),
        row(
            "Mem. [KB]",
            format!("{:.2}", ours_mem.exact_total_kb),
            Computed,
            format!("{:.2}", dacapo_mem.exact_total_kb),
            Computed,
        ),
        row("Amount of MACs", format!("{}", cfg.arrays() * 64), Computed, format!("{}", published::MACS), Published),
    ];
    let mut seen = [false; 3];
    let mut latency = Vec::new();
    let mut wanted: Vec<ElementFormat> = formats.to_vec();
    wanted.sort_by_key(|&f| tier_of(f));
    for f in wanted {
        let t = tier_of(f);
        if std::mem::replace(&mut seen[t], true) {
            continue;
        }
        let (tier, ours_e, dacapo_e, dacapo_us) = published::TIERS[t];
        rows.push(row(&format!("E/op [pJ] {tier}"), ours_e.into(), Published, dacapo_e.into(), Published));
        let sim = simulate_training_iteration(&CoreConfig::reference(f), workload);
        latency.push(TierLatency {
            tier: tier.into(),
            format: f,
            ours_us: sim.latency_us,
            ours_published_us: published::OURS_LATENCY_US[t],
            dacapo_published_us: dacapo_us,
            speedup: dacapo_us / sim.latency_us,
        });
    }
    rows.push(row("Batch Size", workload.batch.to_string(), Computed, published::BATCH.to_string(), Published));
    for l in &latency {
        rows.push(row(
            &format!("Train Latency/Batch [us] {}", l.tier),
            format!("{:.3}", l.ours_us),
            Computed,
            format!("{}", l.dacapo_published_us),
            Published,
        ));
    }
    ComparisonReport {
        batch: workload.batch,
        rows,
        latency,
        memory_ratio: dacapo_mem.exact_total_kb / ours_mem.exact_total_kb,
        bandwidth_ratio: published::DACAPO_BW_GBS / cfg.bandwidth_gbs(),
        area_ratio: published::DACAPO_AREA_MM2 / published::OURS_AREA_MM2,
    }
}

fn source_tag(s: Source) -> &'static str {
    match s {
        Source::Computed => "computed",
        Source::Published => "published, not computed",
    }
}

const COMPARISON_HEADER: [&str; 5] = ["Specification", "Ours", "Ours source", "Dacapo", "Dacapo source"];

fn comparison_cells(r: &ComparisonRow) -> Vec<String> {
    vec![
        r.specification.clone(),
        r.ours.clone(),
        source_tag(r.ours_source).into(),
        r.dacapo.clone(),
        source_tag(r.dacapo_source).into(),
    ]
}

impl ComparisonReport {
    pub fn to_markdown(&self) -> String {
        let mut s = markdown(&COMPARISON_HEADER, self.rows.iter().map(comparison_cells));
        let _ = writeln!(
            s,
            "\nMemory ratio {:.2}x, bandwidth ratio {:.2}x, area ratio {:.2}x",
            self.memory_ratio, self.bandwidth_ratio, self.area_ratio
        );
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = COMPARISON_HEADER.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&comparison_cells(r).iter().map(|c| format!("\"{c}\"")).collect::<Vec<_>>().join(","));
            s.push('\n');
        }
        s
    }
}
