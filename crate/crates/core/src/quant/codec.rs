//! Bit-level codecs: E4M3, E2M1, scale rounding and code packing.

use half::f16;

/// Round half to even.
pub fn rne(x: f64) -> f64 {
    x.round_ties_even()
}

pub const E4M3_MAX: f64 = 448.0;
pub const E2M1_MAX: f64 = 6.0;

/// E4M3 (bias 7, no infinities, `S.1111.111` is NaN).
pub fn e4m3_decode(code: u8) -> f32 {
    let sign = if code & 0x80 != 0 { -1.0 } else { 1.0 };
    let e = i32::from((code >> 3) & 0xF);
    let m = f32::from(code & 0x7);
    if e == 15 && m == 7.0 {
        return f32::NAN;
    }
    let mag = if e == 0 {
        m / 8.0 * 2f32.powi(-6)
    } else {
        (1.0 + m / 8.0) * 2f32.powi(e - 7)
    };
    sign * mag
}

/// Nearest E4M3 code, ties to even mantissa, saturating at ±448.
pub fn e4m3_encode(x: f64) -> u8 {
    if x.is_nan() {
        return 0x7F;
    }
    let sign = if x.is_sign_negative() { 0x80 } else { 0 };
    let a = x.abs();
    if a >= E4M3_MAX {
        return sign | 0x7E;
    }
    let min_normal = 2f64.powi(-6);
    let mag = if a < min_normal {
        // Subnormal step is 2^-9; q == 8 rolls into the first normal code.
        rne(a * 512.0) as u8
    } else {
        let e = exponent(a);
        let q = rne((a / 2f64.powi(e) - 1.0) * 8.0) as i32;
        let (e, q) = if q == 8 { (e + 1, 0) } else { (e, q) };
        let code = ((e + 7) << 3) | q;
        code.min(0x7E) as u8
    };
    sign | mag
}

/// Largest nonnegative E4M3 code whose value does not exceed `x` (x ≥ 0).
pub fn e4m3_floor(x: f64) -> u8 {
    let c = e4m3_encode(x.max(0.0)) & 0x7F;
    if c > 0 && f64::from(e4m3_decode(c)) > x {
        c - 1
    } else {
        c
    }
}

/// floor(log2(a)) for finite positive normal `a`.
fn exponent(a: f64) -> i32 {
    ((a.to_bits() >> 52) & 0x7FF) as i32 - 1023
}

const E2M1_VALUES: [f32; 8] = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0];

/// E2M1 (bias 1, no infinities or NaN).
pub fn e2m1_decode(code: u8) -> f32 {
    let v = E2M1_VALUES[usize::from(code & 0x7)];
    if code & 0x8 != 0 {
        -v
    } else {
        v
    }
}

/// Nearest E2M1 code, ties to even mantissa, saturating at ±6.
pub fn e2m1_encode(x: f64) -> u8 {
    let sign = if x.is_sign_negative() { 0x8 } else { 0 };
    let a = x.abs();
    let mut best = 0u8;
    for c in 1..8u8 {
        let (d_best, d_c) = (
            (a - f64::from(E2M1_VALUES[usize::from(best)])).abs(),
            (a - f64::from(E2M1_VALUES[usize::from(c)])).abs(),
        );
        if d_c < d_best || (d_c == d_best && c % 2 == 0) {
            best = c;
        }
    }
    sign | best
}

/// Largest f16 not above `x` (x > 0), clamped to the positive finite range.
pub fn floor_f16(x: f64) -> f16 {
    let mut h = f16::from_f64(x);
    if h.is_infinite() || f64::from(h) > x {
        h = f16::from_bits(h.to_bits() - 1);
    }
    if h.to_bits() == 0 {
        h = f16::from_bits(1);
    }
    h
}

/// Smallest power of two strictly above `x` (x > 0), within the f32 normal
/// range. A global scale of this form leaves the largest block scale in
/// [224, 448), which is stable under re-quantization.
pub fn pow2_above(x: f64) -> f32 {
    let e = exponent(x).clamp(-127, 126);
    2f32.powi(e + 1)
}

/// Packs `bits`-wide codes LSB-first into bytes.
pub fn pack_bits(codes: &[u8], bits: u32) -> Vec<u8> {
    let mut out = vec![0u8; (codes.len() * bits as usize).div_ceil(8)];
    let mut pos = 0usize;
    for &c in codes {
        for b in 0..bits {
            if (c >> b) & 1 == 1 {
                out[pos / 8] |= 1 << (pos % 8);
            }
            pos += 1;
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], bits: u32, n: usize) -> Vec<u8> {
    let mut out = vec![0u8; n];
    let mut pos = 0usize;
    for c in out.iter_mut() {
        for b in 0..bits {
            if (bytes[pos / 8] >> (pos % 8)) & 1 == 1 {
                *c |= 1 << b;
            }
            pos += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Nearest finite code by exhaustive scan; ties to the even code.
    fn e4m3_oracle(x: f64) -> u8 {
        let mut best: Option<(u8, f64)> = None;
        for c in 0..=255u8 {
            let v = f64::from(e4m3_decode(c));
            if !v.is_finite() || (v == 0.0 && (c & 0x80 != 0) != x.is_sign_negative()) {
                continue;
            }
            let d = (x - v).abs();
            best = match best {
                Some((bc, bd)) if bd < d || (bd == d && bc % 2 == 0) => Some((bc, bd)),
                _ => Some((c, d)),
            };
        }
        best.unwrap().0
    }

    #[test]
    fn e4m3_exhaustive_codes() {
        let mut finite = 0;
        for c in 0..=255u8 {
            let v = e4m3_decode(c);
            if v.is_nan() {
                assert_eq!(c & 0x7F, 0x7F);
                continue;
            }
            finite += 1;
            assert_eq!(e4m3_encode(f64::from(v)), c, "code {c:#x} value {v}");
        }
        assert_eq!(finite, 254);
        assert_eq!(e4m3_decode(0x7E), 448.0);
        assert_eq!(e4m3_decode(0x01), 2f32.powi(-9));
    }

    #[test]
    fn e4m3_rounding_matches_oracle() {
        // Midpoints, near-midpoints and saturation between every pair of codes.
        let mut xs = vec![500.0, -1000.0, 460.0, 1e-5, -3e-3];
        let pos: Vec<f64> = (0..=0x7Eu8).map(|c| f64::from(e4m3_decode(c))).collect();
        for w in pos.windows(2) {
            let mid = 0.5 * (w[0] + w[1]);
            xs.extend([mid, -mid, mid * (1.0 + 1e-12), mid * (1.0 - 1e-12)]);
        }
        for x in xs {
            assert_eq!(e4m3_encode(x), e4m3_oracle(x), "x = {x}");
        }
    }

    #[test]
    fn e4m3_floor_is_below() {
        for x in [0.0, 1e-9, 0.3, 1.0, 1.06, 447.0, 1000.0] {
            let c = e4m3_floor(x);
            assert!(f64::from(e4m3_decode(c)) <= x.max(0.0).min(448.0));
            if c < 0x7E {
                assert!(f64::from(e4m3_decode(c + 1)) > x);
            }
        }
    }

    #[test]
    fn e2m1_codes_and_ties() {
        let vals: Vec<f32> = (0..16u8).map(e2m1_decode).collect();
        assert_eq!(vals[7], 6.0);
        assert_eq!(vals[15], -6.0);
        for c in 0..16u8 {
            let v = e2m1_decode(c);
            if c != 8 {
                assert_eq!(e2m1_encode(f64::from(v)), c);
            }
        }
        for (x, v) in [(0.25, 0.0), (0.75, 1.0), (1.25, 1.0), (1.75, 2.0), (2.5, 2.0), (3.5, 4.0), (5.0, 4.0), (9.0, 6.0)] {
            assert_eq!(e2m1_decode(e2m1_encode(x)), v, "x = {x}");
        }
    }

    #[test]
    fn scale_rounding_is_toward_zero() {
        for x in [1e-3, 0.1234567, 3.0, 70000.0] {
            let h = f64::from(floor_f16(x));
            assert!(h <= x && h > 0.0);
            let p = f64::from(pow2_above(x));
            assert!(p > x && p <= 2.0 * x);
        }
        assert_eq!(floor_f16(1e-12).to_bits(), 1);
        assert_eq!(f64::from(floor_f16(0.5)), 0.5);
        assert_eq!(pow2_above(0.5), 1.0);
    }

    #[test]
    fn packing_round_trip() {
        for bits in [2u32, 3, 4, 6, 8] {
            let codes: Vec<u8> = (0..37u32).map(|i| ((i * 7 + 3) % (1 << bits)) as u8).collect();
            let packed = pack_bits(&codes, bits);
            assert_eq!(packed.len(), (37 * bits as usize).div_ceil(8));
            assert_eq!(unpack_bits(&packed, bits, 37), codes);
        }
    }
}
