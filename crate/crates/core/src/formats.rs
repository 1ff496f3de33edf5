//! Element encodings of the six MX formats and the E8M0 shared scale.
//!
//! Floating-point elements follow the OCP minifloat conventions: an exponent
//! field of zero denotes a subnormal (no implicit bit, effective exponent
//! `1 - bias`). E5M2 keeps IEEE-like Inf/NaN in its all-ones exponent field,
//! E4M3 only reserves `S.1111.111` for NaN, and the FP6/FP4 formats use every
//! code as a finite value. INT8 elements are two's-complement fixed point with
//! six fraction bits, so `0x40` is `1.0`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MxError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ElementFormat {
    #[serde(rename = "INT8")]
    Int8,
    #[serde(rename = "FP8_E5M2")]
    Fp8E5m2,
    #[serde(rename = "FP8_E4M3")]
    Fp8E4m3,
    #[serde(rename = "FP6_E3M2")]
    Fp6E3m2,
    #[serde(rename = "FP6_E2M3")]
    Fp6E2m3,
    #[serde(rename = "FP4_E2M1")]
    Fp4E2m1,
}

/// Fraction bits of the INT8 fixed-point element.
pub const INT8_FRACTION_BITS: u32 = 6;

impl ElementFormat {
    pub const ALL: [ElementFormat; 6] = [
        ElementFormat::Int8,
        ElementFormat::Fp8E5m2,
        ElementFormat::Fp8E4m3,
        ElementFormat::Fp6E3m2,
        ElementFormat::Fp6E2m3,
        ElementFormat::Fp4E2m1,
    ];

    pub const fn name(self) -> &'static str {
        match self {
            ElementFormat::Int8 => "INT8",
            ElementFormat::Fp8E5m2 => "FP8_E5M2",
            ElementFormat::Fp8E4m3 => "FP8_E4M3",
            ElementFormat::Fp6E3m2 => "FP6_E3M2",
            ElementFormat::Fp6E2m3 => "FP6_E2M3",
            ElementFormat::Fp4E2m1 => "FP4_E2M1",
        }
    }

    pub const fn total_bits(self) -> u32 {
        match self {
            ElementFormat::Int8 | ElementFormat::Fp8E5m2 | ElementFormat::Fp8E4m3 => 8,
            ElementFormat::Fp6E3m2 | ElementFormat::Fp6E2m3 => 6,
            ElementFormat::Fp4E2m1 => 4,
        }
    }

    pub const fn exp_bits(self) -> u32 {
        match self {
            ElementFormat::Int8 => 0,
            ElementFormat::Fp8E5m2 => 5,
            ElementFormat::Fp8E4m3 => 4,
            ElementFormat::Fp6E3m2 => 3,
            ElementFormat::Fp6E2m3 | ElementFormat::Fp4E2m1 => 2,
        }
    }

    /// Mantissa field width. For INT8 this is the 7-bit payload after the sign.
    pub const fn mant_bits(self) -> u32 {
        match self {
            ElementFormat::Int8 => 7,
            ElementFormat::Fp8E5m2 | ElementFormat::Fp6E3m2 => 2,
            ElementFormat::Fp8E4m3 | ElementFormat::Fp6E2m3 => 3,
            ElementFormat::Fp4E2m1 => 1,
        }
    }

    /// Number of bits below the binary point of the unpacked significand.
    pub const fn fraction_bits(self) -> u32 {
        match self {
            ElementFormat::Int8 => INT8_FRACTION_BITS,
            f => f.mant_bits(),
        }
    }

    pub const fn bias(self) -> i32 {
        match self {
            ElementFormat::Int8 => 0,
            ElementFormat::Fp8E5m2 => 15,
            ElementFormat::Fp8E4m3 => 7,
            ElementFormat::Fp6E3m2 => 3,
            ElementFormat::Fp6E2m3 | ElementFormat::Fp4E2m1 => 1,
        }
    }

    /// Exponent of the largest power of two the element format represents.
    /// Stored, and checked against enumeration by [`validate_descriptors`].
    pub const fn emax(self) -> i32 {
        match self {
            ElementFormat::Int8 => 0,
            ElementFormat::Fp8E5m2 => 15,
            ElementFormat::Fp8E4m3 => 8,
            ElementFormat::Fp6E3m2 => 4,
            ElementFormat::Fp6E2m3 | ElementFormat::Fp4E2m1 => 2,
        }
    }

    pub const fn has_inf(self) -> bool {
        matches!(self, ElementFormat::Fp8E5m2)
    }

    pub const fn has_nan(self) -> bool {
        matches!(self, ElementFormat::Fp8E5m2 | ElementFormat::Fp8E4m3)
    }

    pub const fn is_float(self) -> bool {
        !matches!(self, ElementFormat::Int8)
    }

    pub const fn code_count(self) -> u16 {
        1 << self.total_bits()
    }

    pub const fn sign_mask(self) -> u8 {
        1 << (self.total_bits() - 1)
    }

    /// Largest finite magnitude.
    pub fn max_finite(self) -> f64 {
        match self {
            ElementFormat::Int8 => 127.0 / 64.0,
            ElementFormat::Fp8E4m3 => 448.0,
            f => {
                // All-ones exponent field is finite except for E5M2.
                let top_field = (1i32 << f.exp_bits()) - 1 - i32::from(f.has_inf());
                let m = f.mant_bits();
                let sig = ((1u32 << (m + 1)) - 1) as f64;
                sig * pow2(top_field - f.bias() - m as i32)
            }
        }
    }

    /// Smallest positive (subnormal) magnitude.
    pub fn min_positive(self) -> f64 {
        match self {
            ElementFormat::Int8 => pow2(-(INT8_FRACTION_BITS as i32)),
            f => pow2(1 - f.bias() - f.mant_bits() as i32),
        }
    }

    pub fn descriptor(self) -> FormatDescriptor {
        FormatDescriptor {
            name: self,
            total_bits: self.total_bits(),
            exp_bits: self.exp_bits(),
            mant_bits: self.mant_bits(),
            bias: self.bias(),
            emax: self.emax(),
            has_inf: self.has_inf(),
            has_nan: self.has_nan(),
            max_finite: self.max_finite(),
            min_positive: self.min_positive(),
        }
    }

    pub fn codes(self) -> impl Iterator<Item = ElementCode> {
        (0..self.code_count()).map(move |b| ElementCode { format: self, bits: b as u8 })
    }
}

impl fmt::Display for ElementFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ElementFormat {
    type Err = MxError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace(['-', '_'], "");
        let f = match key.as_str() {
            "int8" | "mxint8" => ElementFormat::Int8,
            "e5m2" | "fp8e5m2" | "mxfp8e5m2" => ElementFormat::Fp8E5m2,
            "e4m3" | "fp8e4m3" | "mxfp8e4m3" | "fp8" | "mxfp8" => ElementFormat::Fp8E4m3,
            "e3m2" | "fp6e3m2" | "mxfp6e3m2" => ElementFormat::Fp6E3m2,
            "e2m3" | "fp6e2m3" | "mxfp6e2m3" | "fp6" | "mxfp6" => ElementFormat::Fp6E2m3,
            "e2m1" | "fp4e2m1" | "mxfp4e2m1" | "fp4" | "mxfp4" => ElementFormat::Fp4E2m1,
            _ => return Err(MxError::Invalid(format!("unknown element format '{s}'"))),
        };
        Ok(f)
    }
}

/// JSON-dumpable summary of one element format.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FormatDescriptor {
    pub name: ElementFormat,
    pub total_bits: u32,
    pub exp_bits: u32,
    pub mant_bits: u32,
    pub bias: i32,
    pub emax: i32,
    pub has_inf: bool,
    pub has_nan: bool,
    pub max_finite: f64,
    pub min_positive: f64,
}

/// Raw encoding of one element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ElementCode {
    pub format: ElementFormat,
    pub bits: u8,
}

impl ElementCode {
    pub fn new(format: ElementFormat, bits: u8) -> Result<Self> {
        if u16::from(bits) >= format.code_count() {
            return Err(MxError::CodeOutOfRange { format, bits: bits.into() });
        }
        Ok(Self { format, bits })
    }

    pub fn zero(format: ElementFormat) -> Self {
        Self { format, bits: 0 }
    }

    pub fn is_negative(self) -> bool {
        self.bits & self.format.sign_mask() != 0
    }
}

/// Decoded element value. Finite values are exact in `f64`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoded {
    Finite(f64),
    Infinite { negative: bool },
    Nan,
}

impl Decoded {
    pub fn finite(self) -> Option<f64> {
        match self {
            Decoded::Finite(v) => Some(v),
            _ => None,
        }
    }

    /// Finite value, or the IEEE counterpart of the special encoding.
    pub fn to_f64(self) -> f64 {
        match self {
            Decoded::Finite(v) => v,
            Decoded::Infinite { negative: true } => f64::NEG_INFINITY,
            Decoded::Infinite { negative: false } => f64::INFINITY,
            Decoded::Nan => f64::NAN,
        }
    }
}

/// Sign/significand/exponent view of a finite element:
/// `value = (-1)^negative * significand * 2^(exponent - fraction_bits)`.
///
/// `exponent` is the unbiased effective exponent; subnormals use `1 - bias`
/// without an implicit bit. INT8 unpacks to its magnitude with exponent 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Unpacked {
    pub negative: bool,
    pub significand: u32,
    pub exponent: i32,
}

impl Unpacked {
    pub fn value(self, format: ElementFormat) -> f64 {
        let mag = f64::from(self.significand)
            * pow2(self.exponent - format.fraction_bits() as i32);
        if self.negative {
            -mag
        } else {
            mag
        }
    }
}

/// `2^e` for exponents well inside the `f64` range.
pub fn pow2(e: i32) -> f64 {
    f64::from_bits(((e + 1023) as u64) << 52)
}

/// `floor(log2(x))` for a finite positive `x`, exact for subnormals too.
pub fn floor_log2(x: f64) -> i32 {
    debug_assert!(x > 0.0 && x.is_finite());
    let bits = x.to_bits();
    let field = ((bits >> 52) & 0x7ff) as i32;
    if field == 0 {
        let mant = bits & ((1u64 << 52) - 1);
        -1074 + (63 - mant.leading_zeros() as i32)
    } else {
        field - 1023
    }
}

/// Split a code into sign, exponent field and mantissa field.
fn fields(code: ElementCode) -> (bool, u32, u32) {
    let f = code.format;
    let bits = u32::from(code.bits);
    let m = f.mant_bits();
    let negative = code.is_negative();
    let exp = (bits >> m) & ((1 << f.exp_bits()) - 1);
    let mant = bits & ((1 << m) - 1);
    (negative, exp, mant)
}

fn is_special(format: ElementFormat, exp: u32, mant: u32) -> Option<Decoded> {
    let all_ones = (1u32 << format.exp_bits()) - 1;
    match format {
        ElementFormat::Fp8E5m2 if exp == all_ones => {
            Some(if mant == 0 { Decoded::Infinite { negative: false } } else { Decoded::Nan })
        }
        ElementFormat::Fp8E4m3 if exp == all_ones && mant == 0b111 => Some(Decoded::Nan),
        _ => None,
    }
}

/// Unpack a finite code; `None` for Inf/NaN encodings.
pub fn unpack(code: ElementCode) -> Option<Unpacked> {
    let f = code.format;
    if f == ElementFormat::Int8 {
        let v = code.bits as i8;
        return Some(Unpacked {
            negative: v < 0,
            significand: u32::from(v.unsigned_abs()),
            exponent: 0,
        });
    }
    let (negative, exp, mant) = fields(code);
    if is_special(f, exp, mant).is_some() {
        return None;
    }
    let (significand, exponent) = if exp == 0 {
        (mant, 1 - f.bias())
    } else {
        (mant | (1 << f.mant_bits()), exp as i32 - f.bias())
    };
    Some(Unpacked { negative, significand, exponent })
}

pub fn decode_element(code: ElementCode) -> Decoded {
    match unpack(code) {
        Some(u) => Decoded::Finite(u.value(code.format)),
        None => {
            let (negative, exp, mant) = fields(code);
            match is_special(code.format, exp, mant) {
                Some(Decoded::Infinite { .. }) => Decoded::Infinite { negative },
                Some(special) => special,
                None => unreachable!("unpack only fails on special encodings"),
            }
        }
    }
}

/// Round-to-nearest-even encode with saturation to the largest finite
/// magnitude. The sign of zero is kept.
pub fn encode_element(value: f64, format: ElementFormat) -> ElementCode {
    debug_assert!(value.is_finite(), "encode_element needs a finite value");
    if format == ElementFormat::Int8 {
        let n = (value * 64.0).round_ties_even().clamp(-128.0, 127.0) as i8;
        return ElementCode { format, bits: n as u8 };
    }
    let negative = value.is_sign_negative();
    let sign = if negative { format.sign_mask() } else { 0 };
    let a = value.abs();
    if a == 0.0 {
        return ElementCode { format, bits: sign };
    }
    let m = format.mant_bits() as i32;
    let min_normal_exp = 1 - format.bias();
    let quantum_exp = floor_log2(a).max(min_normal_exp) - m;
    let rounded = (a * pow2(-quantum_exp)).round_ties_even() * pow2(quantum_exp);
    let rounded = rounded.min(format.max_finite());
    ElementCode { format, bits: sign | magnitude_bits(rounded, format) }
}

/// Bits of an exactly representable, non-negative magnitude.
fn magnitude_bits(a: f64, format: ElementFormat) -> u8 {
    if a == 0.0 {
        return 0;
    }
    let m = format.mant_bits() as i32;
    let min_normal_exp = 1 - format.bias();
    let e = floor_log2(a);
    let bits = if e < min_normal_exp {
        (a * pow2(m - min_normal_exp)) as u32
    } else {
        let mant = (a * pow2(m - e)) as u32 - (1 << m);
        (((e + format.bias()) as u32) << m) | mant
    };
    bits as u8
}

/// E8M0 shared scale: `2^(exp_code - 127)`. Code 255 is reserved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SharedScale {
    pub exp_code: u8,
}

impl SharedScale {
    pub const BIAS: i32 = 127;
    pub const ONE: SharedScale = SharedScale { exp_code: 127 };

    pub fn from_code(exp_code: u8) -> Result<Self> {
        if exp_code == u8::MAX {
            return Err(MxError::ScaleOutOfRange(exp_code as i32 - Self::BIAS));
        }
        Ok(Self { exp_code })
    }

    pub fn from_exponent(e: i32) -> Result<Self> {
        if !(-127..=127).contains(&e) {
            return Err(MxError::ScaleOutOfRange(e));
        }
        Ok(Self { exp_code: (e + Self::BIAS) as u8 })
    }

    /// Unbiased exponent.
    pub fn exponent(self) -> i32 {
        i32::from(self.exp_code) - Self::BIAS
    }

    pub fn value(self) -> f64 {
        pow2(self.exponent())
    }
}

pub fn scale_value(s: SharedScale) -> f64 {
    s.value()
}

/// Check every stored `emax` and `max_finite` against an enumeration of the
/// format's codes. INT8's extra negative code (-2.0) does not count.
pub fn validate_descriptors() -> Result<()> {
    for f in ElementFormat::ALL {
        let max = f
            .codes()
            .filter_map(|c| decode_element(c).finite())
            .fold(0.0f64, f64::max);
        if max != f.max_finite() || floor_log2(max) != f.emax() {
            return Err(MxError::Invalid(format!(
                "{f}: enumerated max {max} disagrees with stored emax {}",
                f.emax()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
#[allow(clippy::unusual_byte_groupings)]
mod tests {
    use super::*;

    fn code(f: ElementFormat, bits: u8) -> ElementCode {
        ElementCode::new(f, bits).unwrap()
    }

    #[test]
    fn worked_decode_examples() {
        assert_eq!(decode_element(code(ElementFormat::Fp4E2m1, 0b0111)), Decoded::Finite(6.0));
        assert_eq!(decode_element(code(ElementFormat::Fp8E4m3, 0b0_1111_110)), Decoded::Finite(448.0));
        assert_eq!(decode_element(code(ElementFormat::Int8, 64)), Decoded::Finite(1.0));
        for f in ElementFormat::ALL {
            let v = decode_element(ElementCode::zero(f)).finite().unwrap();
            assert_eq!(v, 0.0);
            assert!(v.is_sign_positive());
        }
    }

    #[test]
    fn worked_encode_examples() {
        assert_eq!(encode_element(1.0, ElementFormat::Fp4E2m1).bits, 0b0010);
        assert_eq!(encode_element(2.0, ElementFormat::Fp4E2m1).bits, 0b0100);
        assert_eq!(decode_element(encode_element(1e6, ElementFormat::Fp8E5m2)), Decoded::Finite(57344.0));
        assert_eq!(decode_element(encode_element(-1e6, ElementFormat::Fp8E5m2)), Decoded::Finite(-57344.0));
        for f in ElementFormat::ALL {
            assert_eq!(encode_element(0.0, f).bits, 0);
        }
    }

    #[test]
    fn special_values() {
        let e5 = ElementFormat::Fp8E5m2;
        assert_eq!(decode_element(code(e5, 0b0_11111_00)), Decoded::Infinite { negative: false });
        assert_eq!(decode_element(code(e5, 0b1_11111_00)), Decoded::Infinite { negative: true });
        assert_eq!(decode_element(code(e5, 0b0_11111_01)), Decoded::Nan);
        let e4 = ElementFormat::Fp8E4m3;
        assert_eq!(decode_element(code(e4, 0x7f)), Decoded::Nan);
        assert_eq!(decode_element(code(e4, 0xff)), Decoded::Nan);
        assert_eq!(decode_element(code(e4, 0x78)), Decoded::Finite(256.0));
        let nan_count = ElementFormat::Fp6E3m2
            .codes()
            .chain(ElementFormat::Fp4E2m1.codes())
            .filter(|c| decode_element(*c).finite().is_none())
            .count();
        assert_eq!(nan_count, 0);
    }

    #[test]
    fn int8_extremes() {
        assert_eq!(decode_element(code(ElementFormat::Int8, 0x80)), Decoded::Finite(-2.0));
        assert_eq!(encode_element(5.0, ElementFormat::Int8).bits, 0x7f);
        assert_eq!(encode_element(-5.0, ElementFormat::Int8).bits, 0x80);
        // 0.5/64 is a tie between 0 and 1/64
        assert_eq!(encode_element(0.5 / 64.0, ElementFormat::Int8).bits, 0);
        assert_eq!(encode_element(1.5 / 64.0, ElementFormat::Int8).bits, 2);
    }

    #[test]
    fn e2m1_rounding_ties() {
        let f = ElementFormat::Fp4E2m1;
        let r = |v: f64| decode_element(encode_element(v, f)).to_f64();
        assert_eq!(r(1.25), 1.0);
        assert_eq!(r(1.75), 2.0);
        assert_eq!(r(2.5), 2.0);
        assert_eq!(r(5.0), 4.0);
        assert_eq!(r(0.25), 0.0);
        assert_eq!(r(0.26), 0.5);
        assert_eq!(r(100.0), 6.0);
    }

    #[test]
    fn scale_examples() {
        assert_eq!(SharedScale { exp_code: 127 }.value(), 1.0);
        assert_eq!(SharedScale { exp_code: 131 }.value(), 16.0);
        assert_eq!(SharedScale { exp_code: 0 }.value(), 2f64.powi(-127));
        assert!(SharedScale::from_code(255).is_err());
        assert!(SharedScale::from_exponent(128).is_err());
        assert_eq!(SharedScale::from_exponent(-127).unwrap().exp_code, 0);
    }

    #[test]
    fn stored_descriptors_match_enumeration() {
        validate_descriptors().unwrap();
        assert_eq!(ElementFormat::Fp8E5m2.max_finite(), 57344.0);
        assert_eq!(ElementFormat::Fp6E3m2.max_finite(), 28.0);
        assert_eq!(ElementFormat::Fp6E2m3.max_finite(), 7.5);
    }

    #[test]
    fn parse_names() {
        assert_eq!("mxfp4".parse::<ElementFormat>().unwrap(), ElementFormat::Fp4E2m1);
        assert_eq!("FP8_E5M2".parse::<ElementFormat>().unwrap(), ElementFormat::Fp8E5m2);
        assert_eq!("int8".parse::<ElementFormat>().unwrap(), ElementFormat::Int8);
        assert!("fp16".parse::<ElementFormat>().is_err());
    }

    #[test]
    fn floor_log2_subnormal() {
        assert_eq!(floor_log2(f64::from_bits(1)), -1074);
        assert_eq!(floor_log2(100.0), 6);
        assert_eq!(floor_log2(1.0), 0);
        assert_eq!(floor_log2(0.75), -1);
    }

    #[test]
    fn descriptor_json() {
        let json = serde_json::to_value(ElementFormat::Fp8E4m3.descriptor()).unwrap();
        assert_eq!(json["name"], "FP8_E4M3");
        assert_eq!(json["emax"], 8);
        assert_eq!(json["max_finite"], 448.0);
    }
}
