//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Runs without the libtest harness.

#[path = "../../core/tests/oracle/mod.rs"]
mod oracle;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use num_rational::BigRational;
use num_traits::{Signed, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mxsim::cost::footprint_table;
use mxsim::cost::published::OURS_LATENCY_US;
use mxsim::formats::{decode_element, encode_element, Decoded, ElementCode, ElementFormat};
use mxsim::gemm::{simulate_training_iteration, CoreConfig};
use mxsim::mac::{
    cycle_product_sum, fp_multiply, int8_multiply, l1_add_fp4, mac_step_untraced, MacMode, MacState,
    MacVariant,
};
use mxsim::matrix::Matrix;
use mxsim::quant::{quantize_matrix, transpose_quantized, BlockGeometry, Orientation};
use mxsim::train::{train, Precision, TrainConfig};
use mxsim::workload::WorkloadSpec;

use oracle::{decode, f32_ulp, from_f64, pow2, round_f32, Specials};

type Outcome = Result<String, String>;

const FORMATS: [ElementFormat; 6] = ElementFormat::ALL;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn exact(v: f64) -> BigRational {
    from_f64(v)
}

// ---------------------------------------------------------------- 1

fn codec_exhaustive() -> Outcome {
    let mut codes = 0usize;
    for f in FORMATS {
        let (_, _, _, specials) = oracle::params(f).unwrap_or((0, 0, 0, Specials::None));
        let mant_mask = (1u8 << f.mant_bits()) - 1;
        for bits in 0..f.code_count() {
            let bits = bits as u8;
            let code = ElementCode::new(f, bits).map_err(|e| e.to_string())?;
            let got = decode_element(code);
            match (got, decode(f, bits)) {
                (Decoded::Finite(v), Some(want)) => {
                    if exact(v) != want {
                        return Err(format!("{f}: code {bits:#04x} decodes to {v}"));
                    }
                    let back = encode_element(v, f).bits;
                    if back != bits {
                        return Err(format!("{f}: {v} re-encodes to {back:#04x}, not {bits:#04x}"));
                    }
                }
                (Decoded::Infinite { negative }, None)
                    if matches!(specials, Specials::Ieee) && bits & mant_mask == 0 =>
                {
                    if negative != code.is_negative() {
                        return Err(format!("{f}: infinity {bits:#04x} has the wrong sign"));
                    }
                }
                (Decoded::Nan, None) if !(matches!(specials, Specials::Ieee) && bits & mant_mask == 0) => {}
                (g, w) => return Err(format!("{f}: code {bits:#04x} decodes to {g:?}, oracle {w:?}")),
            }
            codes += 1;
        }
    }
    Ok(format!("{codes} codes over 6 formats decoded and re-encoded"))
}

// ---------------------------------------------------------------- 2

/// Published footprint rows: W, A, W^T, A^T, E(row), E(col), total; `None`
/// marks a cell that reuses another buffer.
type Row = [Option<f64>; 7];

const TABLE: [(usize, [Row; 3], [f64; 3]); 3] = [
    (
        16,
        [
            [Some(576.0), Some(0.0), Some(0.0), Some(50.0), Some(16.0), Some(0.0), Some(642.0)],
            [Some(162.0), Some(4.5), Some(162.0), Some(14.1), None, Some(4.5), Some(347.1)],
            [Some(146.3), Some(0.0), Some(0.0), Some(12.7), Some(4.1), Some(0.0), Some(163.1)],
        ],
        [1.00, 1.85, 3.94],
    ),
    (
        32,
        [
            [Some(576.0), Some(0.0), Some(0.0), Some(100.0), Some(32.0), Some(0.0), Some(708.0)],
            [Some(162.0), Some(9.0), Some(162.0), Some(28.1), None, Some(9.0), Some(370.1)],
            [Some(146.3), Some(0.0), Some(0.0), Some(25.4), Some(8.1), Some(0.0), Some(179.8)],
        ],
        [1.00, 1.91, 3.94],
    ),
    (
        64,
        [
            [Some(576.0), Some(0.0), Some(0.0), Some(200.0), Some(64.0), Some(0.0), Some(840.0)],
            [Some(162.0), Some(18.0), Some(162.0), Some(56.3), None, Some(18.0), Some(416.3)],
            [Some(146.3), Some(0.0), Some(0.0), Some(50.8), Some(16.3), Some(0.0), Some(213.4)],
        ],
        [1.00, 2.02, 3.94],
    ),
];

const KB_TOL: f64 = 0.05;
const RATIO_TOL: f64 = 0.01;

fn footprint_rows() -> Outcome {
    let mut worst = 0.0f64;
    let mut worst_ratio = 0.0f64;
    for (batch, rows, ratios) in TABLE {
        let got = footprint_table(&WorkloadSpec::pusher(batch));
        if got.len() != 3 {
            return Err(format!("batch {batch}: {} rows", got.len()));
        }
        for ((want, g), ratio) in rows.iter().zip(&got).zip(ratios) {
            let d = &g.display;
            let cells = [d.w, d.a, d.wt, d.at, d.erow, d.ecol, d.total].map(|t| t as f64 / 10.0);
            for (i, (w, c)) in want.iter().zip(cells).enumerate() {
                match w {
                    Some(w) => {
                        let err = (w - c).abs();
                        worst = worst.max(err);
                        if err > KB_TOL {
                            return Err(format!("batch {batch} {}: column {i} is {c}, expected {w}", g.policy));
                        }
                    }
                    None if g.erow_note.is_none() => {
                        return Err(format!("batch {batch} {}: row errors should reuse A", g.policy))
                    }
                    None => {}
                }
            }
            let err = (g.ratio_vs_fp32 - ratio).abs();
            worst_ratio = worst_ratio.max(err);
            if err > RATIO_TOL {
                return Err(format!("batch {batch} {}: ratio {:.3}, expected {ratio}", g.policy, g.ratio_vs_fp32));
            }
        }
    }
    Ok(format!("9 rows, worst cell error {worst:.3} KB, worst ratio error {worst_ratio:.4}"))
}

// ---------------------------------------------------------------- 3

const LATENCY_TOL: f64 = 0.25;

fn latency() -> Outcome {
    let w = WorkloadSpec::pusher(32);
    let tiers = [
        (ElementFormat::Int8, OURS_LATENCY_US[0]),
        (ElementFormat::Fp8E4m3, OURS_LATENCY_US[1]),
        (ElementFormat::Fp6E2m3, OURS_LATENCY_US[1]),
        (ElementFormat::Fp4E2m1, OURS_LATENCY_US[2]),
    ];
    let mut got = Vec::new();
    let mut detail = Vec::new();
    for (f, target) in tiers {
        let r = simulate_training_iteration(&CoreConfig::reference(f), &w);
        let rel = r.latency_us / target - 1.0;
        detail.push(format!("{f} {:.3} us ({:+.1}%)", r.latency_us, rel * 100.0));
        if rel.abs() > LATENCY_TOL {
            return Err(format!("{f}: {:.3} us vs {target} us", r.latency_us));
        }
        got.push(r.latency_us);
    }
    if !(got[0] > got[1] && got[1] > got[3] && got[2] > got[3]) {
        return Err(format!("latency not strictly ordered: {got:?}"));
    }
    Ok(detail.join(", "))
}

// ---------------------------------------------------------------- 4

fn bandwidth() -> Outcome {
    let bw = |f| CoreConfig::reference(f).input_bits_per_cycle();
    let int8 = bw(ElementFormat::Int8);
    let fp4 = bw(ElementFormat::Fp4E2m1);
    let fp8 = [bw(ElementFormat::Fp8E5m2), bw(ElementFormat::Fp8E4m3)];
    let fp6 = [bw(ElementFormat::Fp6E3m2), bw(ElementFormat::Fp6E2m3)];
    let max = CoreConfig::reference(ElementFormat::Int8).max_bw_bits_per_cycle as f64;
    if fp4 != 5280.0 || max != 5280.0 {
        return Err(format!("FP4 traffic {fp4}, limit {max}"));
    }
    if int8 != 1300.0 {
        return Err(format!("INT8 traffic {int8}"));
    }
    if fp8.iter().any(|&b| !(5200.0..=5280.0).contains(&b)) {
        return Err(format!("FP8 traffic {fp8:?}"));
    }
    if fp6.iter().any(|&b| b > 5280.0) {
        return Err(format!("FP6 traffic {fp6:?}"));
    }
    Ok(format!("INT8 {int8}, FP8 {}, FP6 {} (6-bit packing), FP4 {fp4} bits/cycle", fp8[0], fp6[0]))
}

// ---------------------------------------------------------------- 5

fn finite_code_list(f: ElementFormat) -> Vec<u8> {
    oracle::finite_codes(f).into_iter().map(|(c, _)| c).collect()
}

fn l2_exact(v: i64, lsb: i32) -> BigRational {
    BigRational::from_integer(v.into()) * pow2(lsb)
}

fn products_exact(f: ElementFormat, a: &[u8], b: &[u8]) -> BigRational {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| decode(f, x).unwrap() * decode(f, y).unwrap())
        .fold(BigRational::zero(), |s, p| s + p)
}

fn mac_int8() -> Outcome {
    let mode = MacMode::for_format(ElementFormat::Int8);
    for a in i8::MIN..=i8::MAX {
        for b in i8::MIN..=i8::MAX {
            let want = i32::from(a) * i32::from(b);
            if int8_multiply(a, b) != want {
                return Err(format!("int8 multiply {a}*{b}"));
            }
            for v in MacVariant::ALL {
                let l2 = cycle_product_sum(&[a as u8], &[b as u8], mode, v).map_err(|e| e.to_string())?;
                if l2_exact(l2.value, l2.lsb_exp) != BigRational::from_integer(want.into()) * pow2(-12) {
                    return Err(format!("{v:?}: L2 output for {a}*{b} is {}*2^{}", l2.value, l2.lsb_exp));
                }
                let s = mac_step_untraced(MacState::default(), &[a as u8], &[b as u8], 0, mode, v)
                    .map_err(|e| e.to_string())?;
                if s.accumulator != want as f32 / 4096.0 {
                    return Err(format!("{v:?}: {a}*{b} accumulates to {}", s.accumulator));
                }
            }
        }
    }
    let mut r = rng(51);
    for seq in 0..10_000 {
        let mut state = [MacState::default(); 3];
        let mut acc = BigRational::zero();
        for _ in 0..8 {
            let (a, b): (i8, i8) = (r.random(), r.random());
            let s: i32 = r.random_range(-8..=8);
            acc = from_f64(f64::from(round_f32(
                &(acc + BigRational::from_integer((i32::from(a) * i32::from(b)).into()) * pow2(s - 12)),
            )));
            for (st, v) in state.iter_mut().zip(MacVariant::ALL) {
                *st = mac_step_untraced(*st, &[a as u8], &[b as u8], s, mode, v).map_err(|e| e.to_string())?;
                if from_f64(f64::from(st.accumulator)) != acc {
                    return Err(format!("{v:?}: sequence {seq} diverges from the integer oracle"));
                }
            }
        }
    }
    Ok("65536 pairs x 3 variants, 10^4 eight-step sequences bit-exact".into())
}

fn mac_fp4() -> Outcome {
    let f = ElementFormat::Fp4E2m1;
    let mode = MacMode::for_format(f);
    let codes: Vec<u8> = (0..16).collect();
    let pairs: Vec<(u8, u8)> = codes.iter().flat_map(|&a| codes.iter().map(move |&b| (a, b))).collect();
    let exact_pair = |(a, b): (u8, u8)| decode(f, a).unwrap() * decode(f, b).unwrap();

    // every ordered pair of pairs through one L1 adder (units of 2^-2)
    for &p in &pairs {
        for &q in &pairs {
            let prods = [p, q].map(|(a, b)| {
                fp_multiply(ElementCode::new(f, a).unwrap(), ElementCode::new(f, b).unwrap()).unwrap()
            });
            let sum = l1_add_fp4(&prods).map_err(|e| e.to_string())?;
            if l2_exact(sum, -2) != exact_pair(p) + exact_pair(q) {
                return Err(format!("L1 sum of {p:?} and {q:?} is {sum}/4"));
            }
        }
    }
    // every pair in every lane of a full cycle, other lanes cycling
    let mut cycles = 0usize;
    for lane in 0..8 {
        for (pi, &p) in pairs.iter().enumerate() {
            for q in 0..16 {
                let mut a = [0u8; 8];
                let mut b = [0u8; 8];
                for j in 0..8 {
                    let (x, y) = if j == lane { p } else { pairs[(pi * 7 + q * 31 + j * 37) % 256] };
                    a[j] = x;
                    b[j] = y;
                }
                let want = products_exact(f, &a, &b);
                for v in MacVariant::ALL {
                    let l2 = cycle_product_sum(&a, &b, mode, v).map_err(|e| e.to_string())?;
                    if l2_exact(l2.value, l2.lsb_exp) != want {
                        return Err(format!("{v:?}: cycle {a:?} x {b:?} gives {}*2^{}", l2.value, l2.lsb_exp));
                    }
                }
                cycles += 1;
            }
        }
    }
    Ok(format!("65536 L1 pair sets, {cycles} eight-lane cycles x 3 variants exact"))
}

/// One FP8/FP6 cycle: a codes, b codes, shared scale exponent.
type FpStep = ([u8; 4], [u8; 4], i32);

struct FpCorpus {
    format: ElementFormat,
    /// Sequences of 8 steps.
    seqs: Vec<Vec<FpStep>>,
}

fn fp_corpus(format: ElementFormat, seed: u64) -> FpCorpus {
    let codes = finite_code_list(format);
    let mut r = rng(seed);
    let mut pick = || {
        let mut x = [0u8; 4];
        for c in &mut x {
            *c = codes[r.random_range(0..codes.len())];
        }
        x
    };
    let mut seqs = Vec::with_capacity(12_500);
    for _ in 0..12_500 {
        seqs.push((0..8).map(|_| (pick(), pick(), 0)).collect::<Vec<_>>());
    }
    let mut r = rng(seed ^ 0x5ca1e);
    for seq in &mut seqs {
        for step in seq.iter_mut() {
            step.2 = r.random_range(-8..=8);
        }
    }
    FpCorpus { format, seqs }
}

const FP_FORMATS: [ElementFormat; 4] =
    [ElementFormat::Fp8E5m2, ElementFormat::Fp8E4m3, ElementFormat::Fp6E3m2, ElementFormat::Fp6E2m3];

/// Steps whose result is more than one FP32 ulp from the exact value, and
/// the worst error in ulps.
fn ulp_failures(c: &FpCorpus, variant: MacVariant) -> Result<(usize, f64), String> {
    let mode = MacMode::for_format(c.format);
    let mut fails = 0;
    let mut worst = 0.0f64;
    for seq in &c.seqs {
        let mut st = MacState::default();
        for (a, b, s) in seq {
            let exact = from_f64(f64::from(st.accumulator)) + products_exact(c.format, a, b) * pow2(*s);
            st = mac_step_untraced(st, a, b, *s, mode, variant).map_err(|e| e.to_string())?;
            let ulp = f32_ulp(round_f32(&exact));
            let err = (from_f64(f64::from(st.accumulator)) - &exact).abs();
            if err > ulp {
                fails += 1;
                worst = worst.max(oracle::to_f64(&(err / ulp)));
            }
        }
    }
    Ok((fails, worst))
}

fn mac_fp_ulp(corpora: &[FpCorpus]) -> Outcome {
    let mut detail = Vec::new();
    let mut failed = false;
    for c in corpora {
        let (fails, worst) = ulp_failures(c, MacVariant::default())?;
        failed |= fails > 0;
        detail.push(if fails == 0 {
            format!("{} 0/100000", c.format)
        } else {
            format!("{} {fails}/100000 (worst {worst:.3e} ulp)", c.format)
        });
    }
    let detail = format!("steps beyond 1 ulp: {}", detail.join(", "));
    if failed {
        Err(detail)
    } else {
        Ok(detail)
    }
}

fn bypass_identical(corpora: &[FpCorpus]) -> Outcome {
    let (on, off) = (MacVariant::MANTISSA_EXT_BYPASS, MacVariant::MANTISSA_EXT);
    let mut steps = 0usize;
    let mut run = |f: ElementFormat, seqs: &mut dyn Iterator<Item = Vec<(Vec<u8>, Vec<u8>, i32)>>| -> Result<(), String> {
        let mode = MacMode::for_format(f);
        for seq in seqs {
            let (mut x, mut y) = (MacState::default(), MacState::default());
            for (a, b, s) in &seq {
                x = mac_step_untraced(x, a, b, *s, mode, on).map_err(|e| e.to_string())?;
                y = mac_step_untraced(y, a, b, *s, mode, off).map_err(|e| e.to_string())?;
                if x.accumulator.to_bits() != y.accumulator.to_bits() {
                    return Err(format!("{f}: bypass changes {a:?} x {b:?}"));
                }
                steps += 1;
            }
        }
        Ok(())
    };
    for c in corpora {
        run(c.format, &mut c.seqs.iter().map(|s| s.iter().map(|(a, b, e)| (a.to_vec(), b.to_vec(), *e)).collect()))?;
    }
    let mut r = rng(51);
    let int8: Vec<Vec<_>> = (0..10_000)
        .map(|_| (0..8).map(|_| (vec![r.random::<u8>()], vec![r.random::<u8>()], r.random_range(-8..=8))).collect())
        .collect();
    run(ElementFormat::Int8, &mut int8.into_iter())?;
    let mut r = rng(52);
    let fp4: Vec<Vec<_>> = (0..12_500)
        .map(|_| {
            (0..8)
                .map(|_| {
                    let mut g = || (0..8).map(|_| r.random_range(0..16u8)).collect::<Vec<_>>();
                    let (a, b) = (g(), g());
                    (a, b, r.random_range(-8..=8))
                })
                .collect()
        })
        .collect();
    run(ElementFormat::Fp4E2m1, &mut fp4.into_iter())?;
    Ok(format!("{steps} steps bit-identical with bypass on and off"))
}

fn mac_correctness() -> Outcome {
    let corpora: Vec<FpCorpus> = FP_FORMATS.iter().enumerate().map(|(i, &f)| fp_corpus(f, 500 + i as u64)).collect();
    let parts: [(&str, Outcome); 4] = [
        ("a", mac_int8()),
        ("b", mac_fp4()),
        ("c", mac_fp_ulp(&corpora)),
        ("d", bypass_identical(&corpora)),
    ];
    let ok = parts.iter().all(|(_, o)| o.is_ok());
    let text = parts
        .iter()
        .map(|(k, o)| match o {
            Ok(s) => format!("({k}) pass: {s}"),
            Err(s) => format!("({k}) FAIL: {s}"),
        })
        .collect::<Vec<_>>()
        .join("; ");
    if ok {
        Ok(text)
    } else {
        Err(text)
    }
}

// ---------------------------------------------------------------- 6

fn random_matrix(r: &mut ChaCha8Rng) -> Matrix {
    let rows = r.random_range(1..=40);
    let cols = r.random_range(1..=40);
    let mag = (2.0f32).powi(r.random_range(-12..=12));
    let sparse = r.random_bool(0.2);
    Matrix::from_fn(rows, cols, |_, _| {
        if sparse && r.random_bool(0.5) {
            0.0
        } else {
            let x: f32 = r.sample(standard_normal());
            x * mag
        }
    })
}

/// Box-Muller.
fn standard_normal() -> impl rand::distr::Distribution<f32> {
    rand::distr::Distribution::map(rand::distr::StandardUniform, |(u, v): (f32, f32)| {
        let u = 1.0 - u;
        (-2.0 * u.ln()).sqrt() * (std::f32::consts::TAU * v).cos()
    })
}

fn transpose_property() -> Outcome {
    let mut r = rng(61);
    for f in FORMATS {
        for i in 0..1000 {
            let m = random_matrix(&mut r);
            let q = quantize_matrix(&m, f, BlockGeometry::Square8x8, Orientation::Square).map_err(|e| e.to_string())?;
            let via_q = transpose_quantized(&q).map_err(|e| e.to_string())?;
            let via_m = quantize_matrix(&m.transpose(), f, BlockGeometry::Square8x8, Orientation::Square)
                .map_err(|e| e.to_string())?;
            if via_q != via_m {
                return Err(format!("{f}: matrix {i} ({}x{}) differs after transposition", m.rows, m.cols));
            }
        }
    }
    let text = include_str!("../../core/tests/data/vector_transpose_counterexample.csv");
    let m = Matrix::from_csv(text).map_err(|e| e.to_string())?;
    let mt = m.transpose();
    let mut found = 0;
    for g in [BlockGeometry::Vector32, BlockGeometry::Vector16Bdr] {
        for f in FORMATS {
            let q = quantize_matrix(&m, f, g, Orientation::RowBlocks).map_err(|e| e.to_string())?;
            if transpose_quantized(&q).is_ok() {
                return Err(format!("{g:?} blocks accepted for code-level transposition"));
            }
            let qt = quantize_matrix(&mt, f, g, Orientation::RowBlocks).map_err(|e| e.to_string())?;
            let differs = (0..m.rows).any(|r| (0..m.cols).any(|c| q.value_at(r, c) != qt.value_at(c, r)));
            if !differs {
                return Err(format!("{g:?} {f}: stored case is not a counterexample"));
            }
            found += 1;
        }
    }
    Ok(format!("6000 square-block matrices bit-exact; stored vector case breaks {found}/12 geometry-format pairs"))
}

// ---------------------------------------------------------------- 7

/// Recorded for seed 7, 10 epochs, lr 0.2, 512 training samples.
const FP32_FINAL_LOSS_MAX: f64 = 0.25;
const MX_REL_TOL: f64 = 0.10;

fn training() -> Outcome {
    let run = |p, g| train(&TrainConfig::pusher(p, g)).map_err(|e| e.to_string());
    let fp32 = run(Precision::Fp32, BlockGeometry::Square8x8)?;
    let base = fp32.final_loss();
    let mut detail = vec![format!("FP32 {:.5} (from {:.5})", base, fp32.initial_loss)];
    if base >= FP32_FINAL_LOSS_MAX {
        return Err(format!("FP32 final loss {base:.5} above {FP32_FINAL_LOSS_MAX}"));
    }
    for f in [ElementFormat::Int8, ElementFormat::Fp8E4m3] {
        let r = run(Precision::Mx(f), BlockGeometry::Square8x8)?;
        let rel = r.final_loss() / base - 1.0;
        detail.push(format!("{f} {:.5} ({:+.2}%)", r.final_loss(), rel * 100.0));
        if rel.abs() > MX_REL_TOL {
            return Err(format!("{f} final loss {:.5} is {:+.1}% from FP32", r.final_loss(), rel * 100.0));
        }
        let c = &r.counters;
        if c.backward_weight_requantizations != 0 || c.transpose_consistent_iterations != c.iterations {
            return Err(format!("{f} square run requantized backward weights: {c:?}"));
        }
    }
    let mut cfg = TrainConfig::pusher(Precision::Mx(ElementFormat::Int8), BlockGeometry::Vector32);
    cfg.epochs = 1;
    cfg.train_samples = 64;
    let v = train(&cfg).map_err(|e| e.to_string())?;
    let layers = cfg.workload.layer_dims.len() as u64;
    let c = &v.counters;
    if c.iterations == 0 || c.backward_weight_requantizations < layers * c.iterations {
        return Err(format!("vector run: {} backward requantizations over {} iterations", c.backward_weight_requantizations, c.iterations));
    }
    detail.push(format!(
        "square runs 0 backward requantizations, vector run {} over {} iterations x {layers} layers",
        c.backward_weight_requantizations, c.iterations
    ));
    Ok(detail.join(", "))
}

// ---------------------------------------------------------------- 8

fn cli_determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_mxsim");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let mut r = rng(81);
    let m = Matrix::from_fn(24, 40, |_, _| r.random_range(-3.0f32..3.0));
    std::fs::write(d.join("m.csv"), m.to_csv()).map_err(|e| e.to_string())?;
    std::fs::write(d.join("m.bin"), m.to_bytes()).map_err(|e| e.to_string())?;
    std::fs::write(
        d.join("script.json"),
        r#"{"format": "FP8_E5M2", "steps": [
            {"a_values": [1.5, -0.25, 3.0, 0.0], "b_values": [2.0, 2.0, -0.5, 7.0], "scale_exp": 2},
            {"a": [1, 2, 3, 4], "b": [130, 5, 6, 7], "scale_exp": -3}
        ]}"#,
    )
    .map_err(|e| e.to_string())?;
    let workload = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../workloads/pusher.json");
    let p = |x: &str| d.join(x).display().to_string();
    let wl = workload.display().to_string();
    let commands: Vec<Vec<String>> = [
        vec!["formats"],
        vec!["formats", "--emit", "md"],
        vec!["quantize", &p("m.csv"), "--format", "fp8_e4m3", "--save", &p("q.mxqm")],
        vec!["quantize", &p("m.bin"), "--format", "int8", "--geometry", "vector32", "--orientation", "col-blocks", "--emit", "csv"],
        vec!["mac-trace", &p("script.json")],
        vec!["mac-trace", &p("script.json"), "--variant", "norm", "--emit", "csv"],
        vec!["simulate", "--workload", &wl, "--mode", "int8"],
        vec!["simulate", "--mode", "fp8fp6", "--emit", "csv"],
        vec!["simulate", "--format", "fp4_e2m1", "--emit", "md"],
        vec!["footprint", "--batch", "16", "--emit", "md"],
        vec!["footprint", "--workload", &wl, "--emit", "csv"],
        vec!["compare"],
        vec!["compare", "--emit", "md"],
        vec!["train", "--format", "fp32", "--epochs", "2", "--emit", "csv"],
        vec!["train", "--format", "e4m3", "--epochs", "1", "--samples", "64"],
    ]
    .iter()
    .map(|c| c.iter().map(|s| s.to_string()).collect())
    .collect();
    for args in &commands {
        let mut outputs = Vec::new();
        for _ in 0..2 {
            let o = Command::new(bin).args(args).output().map_err(|e| e.to_string())?;
            if !o.status.success() {
                return Err(format!("mxsim {} failed: {}", args.join(" "), String::from_utf8_lossy(&o.stderr)));
            }
            let saved = std::fs::read(d.join("q.mxqm")).unwrap_or_default();
            outputs.push((o.stdout, saved));
        }
        if outputs[0] != outputs[1] {
            return Err(format!("mxsim {} is not deterministic", args.join(" ")));
        }
        if outputs[0].0.is_empty() {
            return Err(format!("mxsim {} printed nothing", args.join(" ")));
        }
    }
    Ok(format!("{} invocations byte-identical across two runs", commands.len()))
}

// ----------------------------------------------------------------

fn main() {
    type Criterion = (&'static str, Option<Duration>, fn() -> Outcome);
    let criteria: [Criterion; 8] = [
        ("codec exhaustiveness", Some(Duration::from_secs(1)), codec_exhaustive),
        ("footprint table", Some(Duration::from_secs(1)), footprint_rows),
        ("training latency", Some(Duration::from_secs(10)), latency),
        ("bandwidth identity", None, bandwidth),
        ("MAC correctness", None, mac_correctness),
        ("square-block transpose", None, transpose_property),
        ("training properties", None, training),
        ("CLI determinism", None, cli_determinism),
    ];
    let mut failed = 0;
    for (i, (name, budget, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let mut outcome = f();
        let dt = t.elapsed();
        if let (Some(b), Ok(s)) = (budget, &outcome) {
            if dt > *b {
                outcome = Err(format!("{s}; took {dt:.2?}, budget {b:?}"));
            }
        }
        let (tag, text) = match &outcome {
            Ok(s) => ("PASS", s),
            Err(s) => ("FAIL", s),
        };
        failed += usize::from(outcome.is_err());
        println!("criterion {}: {tag} [{name}, {dt:.2?}] {text}", i + 1);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
