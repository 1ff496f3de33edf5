//! Exact FP32 rounding of fixed-point intermediates.
//!
//! The MAC's accumulation adder receives an unnormalized L2 result
//! `sum * 2^lsb_exp` and the FP32 accumulator, and produces their sum rounded
//! once to nearest-even.

/// Largest finite FP32 exponent (unbiased).
const F32_EMAX: i32 = 127;
/// Exponent of the FP32 subnormal quantum, 2^-149.
const F32_QUANTUM: i32 = -149;

/// Signed magnitude `mag * 2^exp`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Fixed {
    negative: bool,
    mag: u128,
    exp: i32,
}

/// Rounding outcome; `overflow` is set when the value was clamped to
/// `±f32::MAX`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rounded {
    pub value: f32,
    pub overflow: bool,
}

fn f32_parts(x: f32) -> Fixed {
    let bits = x.to_bits();
    let negative = bits >> 31 != 0;
    let field = ((bits >> 23) & 0xff) as i32;
    let frac = u128::from(bits & 0x7f_ffff);
    if field == 0 {
        Fixed { negative, mag: frac, exp: F32_QUANTUM }
    } else {
        Fixed { negative, mag: frac | (1 << 23), exp: field - 150 }
    }
}

/// Round `(-1)^negative * (mag * 2^exp + sticky·ε)` to FP32, nearest-even,
/// saturating at `f32::MAX`. `sticky` marks a nonzero tail strictly below the
/// last bit of `mag`.
fn round_fixed(negative: bool, mag: u128, exp: i32, sticky: bool) -> Rounded {
    let signed = |v: f32| if negative { -v } else { v };
    if mag == 0 {
        return Rounded { value: signed(0.0), overflow: false };
    }
    debug_assert!(mag < 1 << 126);
    let nbits = 128 - mag.leading_zeros() as i32;
    let lead = exp + nbits - 1;
    // Exponent of the retained LSB.
    let lsb = (lead - 23).max(F32_QUANTUM);
    if lead < lsb - 1 {
        // Below half the smallest subnormal.
        return Rounded { value: signed(0.0), overflow: false };
    }
    let shift = lsb - exp;
    let mut q = if shift <= 0 {
        mag << (-shift) as u32
    } else {
        let q = mag >> shift;
        let rem = mag & ((1u128 << shift) - 1);
        let half = 1u128 << (shift - 1);
        let up = rem > half || (rem == half && (sticky || q & 1 == 1));
        q + u128::from(up)
    };
    if q == 0 {
        return Rounded { value: signed(0.0), overflow: false };
    }
    // Renormalize a carry out of the significand.
    let mut e = lsb;
    if q >= 1 << 24 {
        q >>= 1;
        e += 1;
    }
    let top = e + 23;
    if q >= 1 << 23 && top > F32_EMAX {
        return Rounded { value: signed(f32::MAX), overflow: true };
    }
    let value = if q < 1 << 23 {
        // Subnormal: e == F32_QUANTUM.
        f32::from_bits(q as u32)
    } else {
        let field = (e + 150) as u32;
        f32::from_bits((field << 23) | (q as u32 & 0x7f_ffff))
    };
    Rounded { value: signed(value), overflow: false }
}

/// Round a signed fixed-point value to FP32.
pub fn round_to_f32(value: i128, exp: i32) -> Rounded {
    round_fixed(value < 0, value.unsigned_abs(), exp, false)
}

/// `acc + value * 2^exp` with a single round-to-nearest-even. `|value|` must
/// stay below 2^48.
#[inline]
pub fn add_to_f32(acc: f32, value: i64, exp: i32) -> Rounded {
    debug_assert!(acc.is_finite());
    debug_assert!(value.unsigned_abs() < 1 << 48);
    // When the f64 sum is exact, one f64 -> f32 cast is the single rounding.
    if (-1000..=900).contains(&exp) {
        let a = f64::from(acc);
        let b = value as f64 * f64::from_bits(((exp + 1023) as u64) << 52);
        let s = a + b;
        let bb = s - a;
        if (a - (s - bb)) + (b - bb) == 0.0 {
            let v = s as f32;
            return if v.is_finite() {
                Rounded { value: v, overflow: false }
            } else {
                Rounded { value: if v < 0.0 { -f32::MAX } else { f32::MAX }, overflow: true }
            };
        }
    }
    add_exact(acc, value, exp)
}

fn add_exact(acc: f32, value: i64, exp: i32) -> Rounded {
    let a = f32_parts(acc);
    let b = Fixed { negative: value < 0, mag: u128::from(value.unsigned_abs()), exp };
    if b.mag == 0 {
        // x + 0 keeps x, and -0 + 0 = +0 under nearest-even.
        let v = if acc == 0.0 { 0.0 } else { acc };
        return Rounded { value: v, overflow: false };
    }
    if a.mag == 0 {
        return round_fixed(b.negative, b.mag, b.exp, false);
    }
    let top = |x: &Fixed| x.exp + 127 - x.mag.leading_zeros() as i32;
    let (hi, lo) = if top(&a) >= top(&b) { (a, b) } else { (b, a) };
    if top(&hi) - top(&lo) > 64 {
        // The smaller operand only decides rounding: stand it in as a unit
        // 40 bits below the larger operand's LSB.
        let mag = hi.mag << 40;
        let exp = hi.exp - 40;
        let mag = if hi.negative == lo.negative { mag + 1 } else { mag - 1 };
        return round_fixed(hi.negative, mag, exp, true);
    }
    let base = hi.exp.min(lo.exp);
    let hm = hi.mag << (hi.exp - base) as u32;
    let lm = lo.mag << (lo.exp - base) as u32;
    let (negative, mag) = if hi.negative == lo.negative {
        (hi.negative, hm + lm)
    } else if hm >= lm {
        (hi.negative, hm - lm)
    } else {
        (lo.negative, lm - hm)
    };
    if mag == 0 {
        return Rounded { value: 0.0, overflow: false };
    }
    round_fixed(negative, mag, base, false)
}

/// Distance between `|x|` and the next larger FP32 magnitude.
pub fn ulp_f32(x: f32) -> f64 {
    let a = x.abs();
    if a == f32::MAX {
        return f64::from(a) - f64::from(f32::from_bits(a.to_bits() - 1));
    }
    f64::from(f32::from_bits(a.to_bits() + 1)) - f64::from(a)
}
