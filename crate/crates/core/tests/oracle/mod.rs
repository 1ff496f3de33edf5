//! Reference arithmetic for the integration tests, written from the format
//! definitions alone and sharing no code with the crate under test.
#![allow(dead_code)]

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

use mxsim::ElementFormat;

/// (exponent bits, mantissa bits, bias, special-value rule)
#[derive(Clone, Copy)]
pub enum Specials {
    None,
    Ieee,
    OnlyAllOnesNan,
}

pub fn params(f: ElementFormat) -> Option<(u32, u32, i32, Specials)> {
    Some(match f {
        ElementFormat::Int8 => return None,
        ElementFormat::Fp8E5m2 => (5, 2, 15, Specials::Ieee),
        ElementFormat::Fp8E4m3 => (4, 3, 7, Specials::OnlyAllOnesNan),
        ElementFormat::Fp6E3m2 => (3, 2, 3, Specials::None),
        ElementFormat::Fp6E2m3 => (2, 3, 1, Specials::None),
        ElementFormat::Fp4E2m1 => (2, 1, 1, Specials::None),
    })
}

pub fn width(f: ElementFormat) -> u32 {
    match params(f) {
        None => 8,
        Some((e, m, _, _)) => 1 + e + m,
    }
}

pub fn pow2(e: i32) -> BigRational {
    let one = BigInt::one();
    if e >= 0 {
        BigRational::from_integer(one << e as usize)
    } else {
        BigRational::new(one, BigInt::one() << (-e) as usize)
    }
}

/// Exact value of a code, `None` for Inf and NaN encodings.
pub fn decode(f: ElementFormat, bits: u8) -> Option<BigRational> {
    let Some((eb, mb, bias, specials)) = params(f) else {
        return Some(BigRational::from_integer(BigInt::from(bits as i8)) * pow2(-6));
    };
    let sign = (bits >> (eb + mb)) & 1 == 1;
    let e = u32::from(bits >> mb) & ((1 << eb) - 1);
    let m = u32::from(bits) & ((1 << mb) - 1);
    let all_ones = (1 << eb) - 1;
    match specials {
        Specials::Ieee if e == all_ones => return None,
        Specials::OnlyAllOnesNan if e == all_ones && m == (1 << mb) - 1 => return None,
        _ => {}
    }
    // value = 0.m * 2^(1-bias) for subnormals, 1.m * 2^(e-bias) otherwise
    let (sig, exp) = if e == 0 { (m, 1 - bias) } else { (m + (1 << mb), e as i32 - bias) };
    let v = BigRational::from_integer(sig.into()) * pow2(exp - mb as i32);
    Some(if sign { -v } else { v })
}

pub fn from_f64(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite")
}

pub fn to_f64(x: &BigRational) -> f64 {
    // numerator / denominator via big integers, exact enough for reporting
    let n = x.numer().to_f64().unwrap();
    let d = x.denom().to_f64().unwrap();
    n / d
}

/// Round an exact rational to the nearest FP32 (ties to even), saturating.
pub fn round_f32(x: &BigRational) -> f32 {
    if x.is_zero() {
        return 0.0;
    }
    let neg = x.is_negative();
    let a = x.abs();
    // find e with 2^e <= a < 2^(e+1)
    let mut e = (a.numer().bits() as i64 - a.denom().bits() as i64) as i32;
    while a < pow2(e) {
        e -= 1;
    }
    while a >= pow2(e + 1) {
        e += 1;
    }
    let q = e.max(-126) - 23;
    let scaled = &a * pow2(-q);
    let floor = scaled.floor();
    let rem = &scaled - &floor;
    let half = BigRational::new(1.into(), 2.into());
    let mut n = floor.to_integer();
    if rem > half || (rem == half && (&n % 2u32) == BigInt::one()) {
        n += 1;
    }
    let v = n.to_f64().unwrap() * 2f64.powi(q);
    let v = if v > f64::from(f32::MAX) { f32::MAX } else { v as f32 };
    if neg {
        -v
    } else {
        v
    }
}

pub fn f32_ulp(x: f32) -> BigRational {
    let a = x.abs();
    let next = if a == f32::MAX { a } else { f32::from_bits(a.to_bits() + 1) };
    let prev = if a == f32::MAX { f32::from_bits(a.to_bits() - 1) } else { a };
    from_f64(f64::from(next)) - from_f64(f64::from(prev))
}

/// Finite codes of `f` with their exact values.
pub fn finite_codes(f: ElementFormat) -> Vec<(u8, BigRational)> {
    (0..1u16 << width(f))
        .filter_map(|c| decode(f, c as u8).map(|v| (c as u8, v)))
        .collect()
}

/// Nearest code in `table` (as built by [`finite_codes`]) by exhaustive
/// search, ties to the code with an even last bit, magnitudes beyond the
/// range clamped to the largest finite one. Float formats keep the sign of
/// `x` even when the result is zero.
pub fn encode_nearest(f: ElementFormat, table: &[(u8, BigRational)], x: &BigRational, negative: bool) -> u8 {
    let sign_bit = 1u8 << (width(f) - 1);
    let signed = params(f).is_some();
    let mut best: Option<(u8, BigRational)> = None;
    for (c, v) in table {
        if signed && ((c & sign_bit != 0) != negative) {
            continue;
        }
        let d = (v - x).abs();
        let better = match &best {
            None => true,
            Some((bc, bd)) => d < *bd || (d == *bd && c & 1 == 0 && bc & 1 == 1),
        };
        if better {
            best = Some((*c, d));
        }
    }
    best.expect("format has finite codes").0
}
