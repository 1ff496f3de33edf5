//! Functional model of the precision-scalable MX MAC unit.
//!
//! Sixteen 2-bit multipliers are wired per mode:
//!
//! * `Int8`: all sixteen form one 8x8-bit magnitude product. Four L1 adders
//!   each combine the four partials of one nibble pair, L2 merges the four
//!   L1 results with shifts 0/4/4/8 and the sign is reapplied.
//! * `Fp8Fp6`: four independent products, each using four multipliers and one
//!   L1 adder for its 4-bit x 4-bit significand product. L2 aligns the four
//!   products on their exponents inside a fixed-width mantissa adder.
//! * `Fp4`: eight E2M1 products, one multiplier each. Two L1 adders sum four
//!   products apiece by shifting each significand by its exponent offset
//!   (0..=4), so L2 only adds two integers.
//!
//! The L2 result, scaled by the sum of the input blocks' shared exponents,
//! is added into the FP32 accumulator with one round-to-nearest-even.
//!
//! Bits that alignment pushes out of the L2 window are truncated.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{MxError, Result};
use crate::formats::{encode_element, unpack, ElementCode, ElementFormat, Unpacked};
use crate::fp32::add_to_f32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MacModeKind {
    Int8,
    Fp8Fp6,
    Fp4,
}

impl MacModeKind {
    pub fn for_format(format: ElementFormat) -> Self {
        match format {
            ElementFormat::Int8 => MacModeKind::Int8,
            ElementFormat::Fp4E2m1 => MacModeKind::Fp4,
            _ => MacModeKind::Fp8Fp6,
        }
    }

    /// Element pairs consumed per step.
    pub const fn lanes(self) -> usize {
        match self {
            MacModeKind::Int8 => 1,
            MacModeKind::Fp8Fp6 => 4,
            MacModeKind::Fp4 => 8,
        }
    }

    /// 2-bit multipliers doing useful work per step.
    pub const fn active_multipliers(self) -> usize {
        match self {
            MacModeKind::Int8 | MacModeKind::Fp8Fp6 => 16,
            MacModeKind::Fp4 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MacModeKind::Int8 => "int8",
            MacModeKind::Fp8Fp6 => "fp8fp6",
            MacModeKind::Fp4 => "fp4",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_', '/'], "").as_str() {
            "int8" => Ok(MacModeKind::Int8),
            "fp8fp6" | "fp8" | "fp6" => Ok(MacModeKind::Fp8Fp6),
            "fp4" => Ok(MacModeKind::Fp4),
            _ => Err(MxError::Invalid(format!("unknown MAC mode '{s}'"))),
        }
    }
}

pub const MULTIPLIERS: usize = 16;

/// Operating mode plus the element format it runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MacMode {
    pub kind: MacModeKind,
    pub format: ElementFormat,
}

impl MacMode {
    pub fn new(kind: MacModeKind, format: ElementFormat) -> Result<Self> {
        if MacModeKind::for_format(format) != kind {
            return Err(MxError::ModeMismatch { mode: kind.name().into(), format });
        }
        Ok(Self { kind, format })
    }

    pub fn for_format(format: ElementFormat) -> Self {
        Self { kind: MacModeKind::for_format(format), format }
    }

    pub fn lanes(self) -> usize {
        self.kind.lanes()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum L2SubnormalPolicy {
    /// 26-bit mantissa adder: 24 bits plus 2 extension bits absorb
    /// non-normalized products without a normalization stage.
    MantissaAdderExtension,
    /// Normalize every L2 input, then add in a 24-bit mantissa adder.
    NormalizeInputs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MacVariant {
    pub l2_subnormal_policy: L2SubnormalPolicy,
    /// Route INT8 and FP4 around the L2 alignment logic. Timing only.
    pub bypass_enabled: bool,
}

impl MacVariant {
    pub const MANTISSA_EXT: MacVariant =
        MacVariant { l2_subnormal_policy: L2SubnormalPolicy::MantissaAdderExtension, bypass_enabled: false };
    pub const NORMALIZE_INPUTS: MacVariant =
        MacVariant { l2_subnormal_policy: L2SubnormalPolicy::NormalizeInputs, bypass_enabled: false };
    pub const MANTISSA_EXT_BYPASS: MacVariant =
        MacVariant { l2_subnormal_policy: L2SubnormalPolicy::MantissaAdderExtension, bypass_enabled: true };

    pub const ALL: [MacVariant; 3] = [Self::MANTISSA_EXT, Self::NORMALIZE_INPUTS, Self::MANTISSA_EXT_BYPASS];

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_', '+', ' '], "").as_str() {
            "ext" | "mantext" | "mantissaext" => Ok(Self::MANTISSA_EXT),
            "norm" | "normalize" | "norminputs" => Ok(Self::NORMALIZE_INPUTS),
            "extbypass" | "bypass" | "mantextbypass" => Ok(Self::MANTISSA_EXT_BYPASS),
            _ => Err(MxError::Invalid(format!("unknown MAC variant '{s}'"))),
        }
    }
}

impl Default for MacVariant {
    fn default() -> Self {
        Self::MANTISSA_EXT_BYPASS
    }
}

/// Fraction bits kept below the two integer bits in the extended adder.
pub const EXT_FRACTION_BITS: i32 = 24;
pub const EXT_WINDOW_BITS: u32 = 26;
pub const NORM_WINDOW_BITS: u32 = 24;

pub fn mul2bit(a: u8, b: u8) -> u8 {
    debug_assert!(a < 4 && b < 4, "mul2bit operands are 2-bit");
    a * b
}

#[inline]
fn digit(x: u32, i: u32) -> u8 {
    ((x >> (2 * i)) & 3) as u8
}

/// One 2-bit multiplier output and its weight inside its L1 adder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartialProduct {
    pub multiplier: u8,
    pub a_digit: u8,
    pub b_digit: u8,
    pub value: u8,
    pub shift: u32,
}

/// Sum-together L1 add of four 4-bit partials with their shifts.
pub fn l1_add_partials(partials: &[PartialProduct]) -> u32 {
    partials.iter().map(|p| u32::from(p.value) << p.shift).sum()
}

/// Unnormalized product of two FP elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FpProduct {
    pub negative: bool,
    pub significand: u32,
    /// Sum of the effective biased exponent fields (a zero field counts as 1).
    pub exp_field_sum: i32,
}

impl FpProduct {
    /// Unbiased exponent of the product's leading integer position.
    pub fn exponent(self, format: ElementFormat) -> i32 {
        self.exp_field_sum - 2 * format.bias()
    }

    /// Exponent of the significand's last bit.
    pub fn lsb_exp(self, format: ElementFormat) -> i32 {
        self.exponent(format) - 2 * format.mant_bits() as i32
    }

    pub fn value(self, format: ElementFormat) -> f64 {
        let v = f64::from(self.significand) * 2f64.powi(self.lsb_exp(format));
        if self.negative {
            -v
        } else {
            v
        }
    }

    /// Exponent offset of an FP4 product above the smallest one (0..=4).
    pub fn fp4_offset(self) -> i32 {
        self.exp_field_sum - 2
    }
}

fn finite_parts(code: ElementCode) -> Result<Unpacked> {
    unpack(code).ok_or(MxError::NonFiniteOperand(code.bits))
}

/// Observer of the datapath's internal signals. The no-op implementation
/// compiles away.
trait Probe {
    fn partial(&mut self, _p: PartialProduct) {}
    fn l1(&mut self, _inputs: &[i64], _output: i64) {}
    fn l2_input(&mut self, _t: L2Term) {}
    fn shift(&mut self, _s: u32) {}
}

struct Silent;
impl Probe for Silent {}

fn fp_multiply_probed<P: Probe>(a: ElementCode, b: ElementCode, base: u8, probe: &mut P) -> Result<FpProduct> {
    let fa = finite_parts(a)?;
    let fb = finite_parts(b)?;
    let format = a.format;
    let field = |u: Unpacked| u.exponent + format.bias();
    let significand = if format == ElementFormat::Fp4E2m1 {
        let p = PartialProduct {
            multiplier: base,
            a_digit: fa.significand as u8,
            b_digit: fb.significand as u8,
            value: mul2bit(fa.significand as u8, fb.significand as u8),
            shift: 0,
        };
        probe.partial(p);
        u32::from(p.value)
    } else {
        let mut sum = 0;
        let mut inputs = [0i64; 4];
        for j in 0..2 {
            for i in 0..2 {
                let (da, db) = (digit(fa.significand, i), digit(fb.significand, j));
                let p = PartialProduct {
                    multiplier: base + (2 * j + i) as u8,
                    a_digit: da,
                    b_digit: db,
                    value: mul2bit(da, db),
                    shift: 2 * (i + j),
                };
                probe.partial(p);
                inputs[(2 * j + i) as usize] = i64::from(p.value) << p.shift;
                sum += u32::from(p.value) << p.shift;
            }
        }
        probe.l1(&inputs, sum.into());
        sum
    };
    Ok(FpProduct {
        negative: fa.negative != fb.negative,
        significand,
        exp_field_sum: field(fa) + field(fb),
    })
}

/// Multiply two FP element codes through the 2-bit multipliers. The result is
/// not normalized.
pub fn fp_multiply(a: ElementCode, b: ElementCode) -> Result<FpProduct> {
    if a.format != b.format || !a.format.is_float() {
        return Err(MxError::ModeMismatch { mode: "fp".into(), format: b.format });
    }
    fp_multiply_probed(a, b, 0, &mut Silent)
}

fn int8_magnitude_probed<P: Probe>(ma: u32, mb: u32, probe: &mut P) -> [u32; 4] {
    let mut l1 = [0u32; 4];
    for hb in 0..2u32 {
        for ha in 0..2u32 {
            let adder = (2 * hb + ha) as usize;
            let mut inputs = [0i64; 4];
            for j in 0..2u32 {
                for i in 0..2u32 {
                    let (da, db) = (digit(ma, 2 * ha + i), digit(mb, 2 * hb + j));
                    let p = PartialProduct {
                        multiplier: (adder * 4) as u8 + (2 * j + i) as u8,
                        a_digit: da,
                        b_digit: db,
                        value: mul2bit(da, db),
                        shift: 2 * (i + j),
                    };
                    probe.partial(p);
                    inputs[(2 * j + i) as usize] = i64::from(p.value) << p.shift;
                    l1[adder] += u32::from(p.value) << p.shift;
                }
            }
            probe.l1(&inputs, l1[adder].into());
        }
    }
    l1
}

/// INT8 x INT8 through sign-magnitude conversion and the sixteen 2-bit
/// multipliers.
pub fn int8_multiply(a: i8, b: i8) -> i32 {
    let l1 = int8_magnitude_probed(u32::from(a.unsigned_abs()), u32::from(b.unsigned_abs()), &mut Silent);
    let mag = l1[0] + (l1[1] << 4) + (l1[2] << 4) + (l1[3] << 8);
    if (a < 0) != (b < 0) {
        -(mag as i32)
    } else {
        mag as i32
    }
}

/// Sum four FP4 products by shifting each significand by its exponent offset.
pub fn l1_add_fp4(products: &[FpProduct]) -> Result<i64> {
    let mut sum = 0i64;
    for p in products {
        let off = p.fp4_offset();
        if !(0..=4).contains(&off) {
            return Err(MxError::Fp4ExponentRange(off));
        }
        let v = i64::from(p.significand) << off;
        sum += if p.negative { -v } else { v };
    }
    Ok(sum)
}

/// One L2 operand: `(-1)^negative * magnitude * 2^lsb_exp`. `top_exp` is the
/// exponent the mantissa adder anchors its two integer bits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct L2Term {
    pub negative: bool,
    pub magnitude: u64,
    pub lsb_exp: i32,
    pub top_exp: i32,
}

impl L2Term {
    pub fn from_fp_product(p: FpProduct, format: ElementFormat) -> Self {
        L2Term {
            negative: p.negative,
            magnitude: p.significand.into(),
            lsb_exp: p.lsb_exp(format),
            top_exp: p.exponent(format),
        }
    }

    fn integer(value: i64, lsb_exp: i32, top_offset: i32) -> Self {
        L2Term {
            negative: value < 0,
            magnitude: value.unsigned_abs(),
            lsb_exp,
            top_exp: lsb_exp + top_offset,
        }
    }
}

/// L2 adder output: `value * 2^lsb_exp`, not normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct L2Output {
    pub value: i64,
    pub lsb_exp: i32,
    pub bypassed: bool,
}

#[inline]
fn signed(negative: bool, v: u64) -> i64 {
    if negative {
        -(v as i64)
    } else {
        v as i64
    }
}

fn align_extended<P: Probe>(terms: &[L2Term], probe: &mut P) -> (i64, i32) {
    let Some(emax) = terms.iter().filter(|t| t.magnitude != 0).map(|t| t.top_exp).max() else {
        terms.iter().for_each(|_| probe.shift(0));
        return (0, 0);
    };
    let mut sum = 0i64;
    for t in terms {
        let placed = t.lsb_exp - (t.top_exp - EXT_FRACTION_BITS);
        debug_assert!(placed >= 0, "term has more fraction bits than the window");
        let window = t.magnitude << placed;
        debug_assert!(window < 1 << EXT_WINDOW_BITS, "term overflows the 26-bit window");
        let shift = (emax - t.top_exp).max(0) as u32;
        probe.shift(shift);
        let aligned = if shift >= 64 { 0 } else { window >> shift };
        sum += signed(t.negative, aligned);
    }
    (sum, emax - EXT_FRACTION_BITS)
}

fn align_normalized<P: Probe>(terms: &[L2Term], probe: &mut P) -> (i64, i32) {
    let width = NORM_WINDOW_BITS as i32;
    let lead = |t: &L2Term| t.lsb_exp + 63 - t.magnitude.leading_zeros() as i32;
    let Some(emax) = terms.iter().filter(|t| t.magnitude != 0).map(lead).max() else {
        terms.iter().for_each(|_| probe.shift(0));
        return (0, 0);
    };
    let mut sum = 0i64;
    for t in terms {
        if t.magnitude == 0 {
            probe.shift(0);
            continue;
        }
        let nbits = 64 - t.magnitude.leading_zeros() as i32;
        let normalized = if nbits <= width {
            t.magnitude << (width - nbits)
        } else {
            t.magnitude >> (nbits - width)
        };
        let shift = (emax - lead(t)) as u32;
        probe.shift(shift);
        let aligned = if shift >= 64 { 0 } else { normalized >> shift };
        sum += signed(t.negative, aligned);
    }
    (sum, emax - (width - 1))
}

fn l2_add_probed<P: Probe>(variant: MacVariant, mode: MacModeKind, terms: &[L2Term], probe: &mut P) -> L2Output {
    terms.iter().for_each(|t| probe.l2_input(*t));
    if variant.bypass_enabled && mode != MacModeKind::Fp8Fp6 {
        let base = terms.iter().map(|t| t.lsb_exp).min().unwrap_or(0);
        let value = terms
            .iter()
            .map(|t| signed(t.negative, t.magnitude << (t.lsb_exp - base)))
            .sum();
        return L2Output { value, lsb_exp: base, bypassed: true };
    }
    let (value, lsb_exp) = match variant.l2_subnormal_policy {
        L2SubnormalPolicy::MantissaAdderExtension => align_extended(terms, probe),
        L2SubnormalPolicy::NormalizeInputs => align_normalized(terms, probe),
    };
    L2Output { value, lsb_exp, bypassed: false }
}

/// The L2 adder. FP8/FP6 operands are aligned inside the mantissa window of
/// the selected policy; INT8 and FP4 operands take the plain integer path
/// when the bypass is enabled.
pub fn l2_add(variant: MacVariant, mode: MacModeKind, terms: &[L2Term]) -> L2Output {
    l2_add_probed(variant, mode, terms, &mut Silent)
}

/// Accumulation register plus its saturation diagnostic.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MacState {
    pub accumulator: f32,
    /// Set once an accumulation overflowed and was clamped to `±f32::MAX`.
    pub saturated: bool,
}

/// Inputs of one MAC cycle: `lanes` code pairs plus the summed unbiased
/// shared exponents of the two input blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacOperands {
    pub a: Vec<u8>,
    pub b: Vec<u8>,
    pub shared_scale_product_exp: i32,
}

/// Per-cycle internal signals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacTrace {
    pub cycle: u64,
    pub mode: MacModeKind,
    pub format: ElementFormat,
    pub variant: MacVariant,
    pub a: Vec<u8>,
    pub b: Vec<u8>,
    pub partial_products: Vec<PartialProduct>,
    pub l1: Vec<L1Record>,
    pub l2_inputs: Vec<L2Term>,
    pub alignment_shifts: Vec<u32>,
    pub l2_output: L2Output,
    pub bypass_taken: bool,
    pub shared_scale_product_exp: i32,
    pub accumulator_in: f32,
    pub accumulator_out: f32,
    pub saturated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct L1Record {
    pub inputs: Vec<i64>,
    pub output: i64,
}

#[derive(Default)]
struct Recorder {
    partials: Vec<PartialProduct>,
    l1: Vec<L1Record>,
    l2_inputs: Vec<L2Term>,
    shifts: Vec<u32>,
}

impl Probe for Recorder {
    fn partial(&mut self, p: PartialProduct) {
        self.partials.push(p);
    }
    fn l1(&mut self, inputs: &[i64], output: i64) {
        self.l1.push(L1Record { inputs: inputs.to_vec(), output });
    }
    fn l2_input(&mut self, t: L2Term) {
        self.l2_inputs.push(t);
    }
    fn shift(&mut self, s: u32) {
        self.shifts.push(s);
    }
}

fn check_operands(a: &[u8], b: &[u8], mode: MacMode) -> Result<()> {
    let lanes = mode.lanes();
    if a.len() != lanes || b.len() != lanes {
        return Err(MxError::Invalid(format!(
            "{} mode takes {lanes} operand pairs, got {}x{}",
            mode.kind.name(),
            a.len(),
            b.len()
        )));
    }
    let limit = mode.format.code_count();
    if let Some(&bad) = a.iter().chain(b).find(|&&c| u16::from(c) >= limit) {
        return Err(MxError::CodeOutOfRange { format: mode.format, bits: bad.into() });
    }
    Ok(())
}

/// Product-sum of one cycle before shared scaling.
fn product_sum<P: Probe>(a: &[u8], b: &[u8], mode: MacMode, variant: MacVariant, probe: &mut P) -> Result<L2Output> {
    let format = mode.format;
    let code = |bits: u8| ElementCode { format, bits };
    match mode.kind {
        MacModeKind::Int8 => {
            let (x, y) = (a[0] as i8, b[0] as i8);
            let l1 = int8_magnitude_probed(u32::from(x.unsigned_abs()), u32::from(y.unsigned_abs()), probe);
            let frac = 2 * format.fraction_bits() as i32;
            let terms = [
                L2Term::integer(l1[0].into(), -frac, 6),
                L2Term::integer(l1[1].into(), 4 - frac, 6),
                L2Term::integer(l1[2].into(), 4 - frac, 6),
                L2Term::integer(l1[3].into(), 8 - frac, 6),
            ];
            let mut out = l2_add_probed(variant, mode.kind, &terms, probe);
            if (x < 0) != (y < 0) {
                out.value = -out.value;
            }
            Ok(out)
        }
        MacModeKind::Fp8Fp6 => {
            let mut terms = [L2Term { negative: false, magnitude: 0, lsb_exp: 0, top_exp: 0 }; 4];
            for (lane, t) in terms.iter_mut().enumerate() {
                let p = fp_multiply_probed(code(a[lane]), code(b[lane]), (4 * lane) as u8, probe)?;
                *t = L2Term::from_fp_product(p, format);
            }
            Ok(l2_add_probed(variant, mode.kind, &terms, probe))
        }
        MacModeKind::Fp4 => {
            let lsb = 2 * (1 - format.bias()) - 2 * format.mant_bits() as i32;
            let mut l1 = [0i64; 2];
            for (half, out) in l1.iter_mut().enumerate() {
                let mut products = [FpProduct { negative: false, significand: 0, exp_field_sum: 2 }; 4];
                for (k, p) in products.iter_mut().enumerate() {
                    let lane = 4 * half + k;
                    *p = fp_multiply_probed(code(a[lane]), code(b[lane]), (2 * lane) as u8, probe)?;
                }
                *out = l1_add_fp4(&products)?;
                let inputs: Vec<i64> = products
                    .iter()
                    .map(|p| {
                        let v = i64::from(p.significand) << p.fp4_offset();
                        if p.negative { -v } else { v }
                    })
                    .collect();
                probe.l1(&inputs, *out);
            }
            let terms = [L2Term::integer(l1[0], lsb, 8), L2Term::integer(l1[1], lsb, 8)];
            Ok(l2_add_probed(variant, mode.kind, &terms, probe))
        }
    }
}

fn accumulate(state: MacState, l2: L2Output, scale_exp: i32) -> MacState {
    let r = add_to_f32(state.accumulator, l2.value, l2.lsb_exp + scale_exp);
    MacState { accumulator: r.value, saturated: state.saturated || r.overflow }
}

fn unpack_table() -> &'static [[Option<Unpacked>; 256]; 6] {
    static TABLE: OnceLock<[[Option<Unpacked>; 256]; 6]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [[None; 256]; 6];
        for (fi, f) in ElementFormat::ALL.iter().enumerate() {
            for c in f.codes() {
                t[fi][c.bits as usize] = unpack(c);
            }
        }
        t
    })
}

/// Product-sum computed from whole-significand products instead of the
/// 2-bit partials. Numerically identical to the datapath.
fn product_sum_fast(a: &[u8], b: &[u8], mode: MacMode, variant: MacVariant) -> Result<L2Output> {
    let format = mode.format;
    let table = &unpack_table()[format as usize];
    let get = |bits: u8| table[bits as usize].ok_or(MxError::NonFiniteOperand(bits));
    match mode.kind {
        MacModeKind::Int8 => {
            let value = i64::from(a[0] as i8) * i64::from(b[0] as i8);
            Ok(L2Output { value, lsb_exp: -2 * format.fraction_bits() as i32, bypassed: variant.bypass_enabled })
        }
        MacModeKind::Fp4 => {
            let mut value = 0i64;
            for (&x, &y) in a.iter().zip(b) {
                let (ua, ub) = (get(x)?, get(y)?);
                let off = ua.exponent + ub.exponent + 2 * format.bias() - 2;
                if !(0..=4).contains(&off) {
                    return Err(MxError::Fp4ExponentRange(off));
                }
                let v = i64::from(ua.significand * ub.significand) << off;
                value += if ua.negative != ub.negative { -v } else { v };
            }
            let lsb_exp = 2 * (1 - format.bias()) - 2 * format.mant_bits() as i32;
            Ok(L2Output { value, lsb_exp, bypassed: variant.bypass_enabled })
        }
        MacModeKind::Fp8Fp6 => {
            let m2 = 2 * format.mant_bits() as i32;
            let mut terms = [L2Term { negative: false, magnitude: 0, lsb_exp: 0, top_exp: 0 }; 4];
            for (t, (&x, &y)) in terms.iter_mut().zip(a.iter().zip(b)) {
                let (ua, ub) = (get(x)?, get(y)?);
                let top = ua.exponent + ub.exponent;
                *t = L2Term {
                    negative: ua.negative != ub.negative,
                    magnitude: u64::from(ua.significand * ub.significand),
                    lsb_exp: top - m2,
                    top_exp: top,
                };
            }
            Ok(l2_add_probed(variant, mode.kind, &terms, &mut Silent))
        }
    }
}

/// One MAC cycle on the fast path used by the PE array. Bit-identical to
/// [`mac_step`]; operands are not range-checked.
#[inline]
pub fn mac_step_fast(
    state: MacState,
    a: &[u8],
    b: &[u8],
    scale_exp: i32,
    mode: MacMode,
    variant: MacVariant,
) -> Result<MacState> {
    debug_assert!(check_operands(a, b, mode).is_ok());
    let l2 = product_sum_fast(a, b, mode, variant)?;
    Ok(accumulate(state, l2, scale_exp))
}

/// One MAC cycle without trace capture. Bit-identical to [`mac_step`].
pub fn mac_step_untraced(
    state: MacState,
    a: &[u8],
    b: &[u8],
    scale_exp: i32,
    mode: MacMode,
    variant: MacVariant,
) -> Result<MacState> {
    check_operands(a, b, mode)?;
    let l2 = product_sum(a, b, mode, variant, &mut Silent)?;
    Ok(accumulate(state, l2, scale_exp))
}

/// One MAC cycle with its full internal trace.
pub fn mac_step(
    state: MacState,
    operands: &MacOperands,
    mode: MacMode,
    variant: MacVariant,
    cycle: u64,
) -> Result<(MacState, MacTrace)> {
    check_operands(&operands.a, &operands.b, mode)?;
    let mut rec = Recorder::default();
    let l2 = product_sum(&operands.a, &operands.b, mode, variant, &mut rec)?;
    let next = accumulate(state, l2, operands.shared_scale_product_exp);
    let trace = MacTrace {
        cycle,
        mode: mode.kind,
        format: mode.format,
        variant,
        a: operands.a.clone(),
        b: operands.b.clone(),
        partial_products: rec.partials,
        l1: rec.l1,
        l2_inputs: rec.l2_inputs,
        alignment_shifts: rec.shifts,
        l2_output: l2,
        bypass_taken: l2.bypassed,
        shared_scale_product_exp: operands.shared_scale_product_exp,
        accumulator_in: state.accumulator,
        accumulator_out: next.accumulator,
        saturated: next.saturated,
    };
    Ok((next, trace))
}

/// Product-sum of one cycle (before shared scaling) as an exact
/// `value * 2^lsb_exp`; exposed for oracle checks.
pub fn cycle_product_sum(a: &[u8], b: &[u8], mode: MacMode, variant: MacVariant) -> Result<L2Output> {
    check_operands(a, b, mode)?;
    product_sum(a, b, mode, variant, &mut Silent)
}

/// Run a sequence of cycles from a zeroed accumulator, returning the final
/// state and one trace record per cycle.
pub fn run_traced(
    steps: &[MacOperands],
    mode: MacMode,
    variant: MacVariant,
) -> Result<(MacState, Vec<MacTrace>)> {
    let mut state = MacState::default();
    let mut traces = Vec::with_capacity(steps.len());
    for (i, ops) in steps.iter().enumerate() {
        let (next, t) = mac_step(state, ops, mode, variant, i as u64)?;
        state = next;
        traces.push(t);
    }
    Ok((state, traces))
}

/// JSON-lines rendering of a trace, one record per cycle.
pub fn traces_to_jsonl(traces: &[MacTrace]) -> String {
    let mut s = String::new();
    for t in traces {
        s.push_str(&serde_json::to_string(t).expect("trace serializes"));
        s.push('\n');
    }
    s
}

/// One scripted cycle. Operands are given as codes or as values to encode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptStep {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_values: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_values: Option<Vec<f64>>,
    #[serde(default)]
    pub scale_exp: i32,
}

/// A sequence of MAC cycles from a zeroed accumulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacScript {
    pub format: ElementFormat,
    #[serde(default)]
    pub variant: MacVariant,
    pub steps: Vec<ScriptStep>,
}

impl MacScript {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| MxError::Decode(format!("MAC script: {e}")))
    }

    pub fn operands(&self) -> Result<Vec<MacOperands>> {
        let f = self.format;
        let pick = |codes: &Option<Vec<u8>>, values: &Option<Vec<f64>>, side: &str, i: usize| -> Result<Vec<u8>> {
            match (codes, values) {
                (Some(c), None) => Ok(c.clone()),
                (None, Some(v)) => v
                    .iter()
                    .map(|&x| {
                        if x.is_finite() {
                            Ok(encode_element(x, f).bits)
                        } else {
                            Err(MxError::NonFinite(x))
                        }
                    })
                    .collect(),
                _ => Err(MxError::Invalid(format!("step {i}: give exactly one of '{side}' or '{side}_values'"))),
            }
        };
        self.steps
            .iter()
            .enumerate()
            .map(|(i, s)| {
                Ok(MacOperands {
                    a: pick(&s.a, &s.a_values, "a", i)?,
                    b: pick(&s.b, &s.b_values, "b", i)?,
                    shared_scale_product_exp: s.scale_exp,
                })
            })
            .collect()
    }

    pub fn run(&self) -> Result<(MacState, Vec<MacTrace>)> {
        run_traced(&self.operands()?, MacMode::for_format(self.format), self.variant)
    }
}
