use serde::{Deserialize, Serialize};

/// Floating-point storage formats emulated in software on `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FloatFormat {
    #[serde(rename = "bf16")]
    Bf16,
    #[serde(rename = "fp8_e4m3")]
    E4M3,
    #[serde(rename = "fp32")]
    Fp32,
}

impl FloatFormat {
    pub fn name(self) -> &'static str {
        match self {
            FloatFormat::Bf16 => "bf16",
            FloatFormat::E4M3 => "fp8_e4m3",
            FloatFormat::Fp32 => "fp32",
        }
    }

    pub fn exponent_bits(self) -> u32 {
        match self {
            FloatFormat::Bf16 | FloatFormat::Fp32 => 8,
            FloatFormat::E4M3 => 4,
        }
    }

    pub fn mantissa_bits(self) -> u32 {
        match self {
            FloatFormat::Bf16 => 7,
            FloatFormat::E4M3 => 3,
            FloatFormat::Fp32 => 23,
        }
    }

    pub fn bytes_per_element(self) -> u64 {
        match self {
            FloatFormat::Bf16 => 2,
            FloatFormat::E4M3 => 1,
            FloatFormat::Fp32 => 4,
        }
    }

    fn bias(self) -> i32 {
        (1 << (self.exponent_bits() - 1)) - 1
    }

    /// Largest finite value. E4M3 reserves only the all-ones mantissa of the
    /// top exponent for NaN, so its maximum is 1.75 * 2^8 = 448.
    pub fn max_finite(self) -> f64 {
        match self {
            FloatFormat::E4M3 => 448.0,
            _ => {
                let m = self.mantissa_bits() as i32;
                (2.0 - 2f64.powi(-m)) * 2f64.powi(self.bias())
            }
        }
    }

    /// Smallest positive normal value.
    pub fn min_normal(self) -> f64 {
        2f64.powi(1 - self.bias())
    }

    /// Rounds `x` to the nearest representable value, ties to even.
    ///
    /// Overflow saturates to `max_finite` for E4M3 and becomes infinity for
    /// BF16 and FP32. NaN propagates. Subnormals are supported.
    pub fn round(self, x: f64) -> f64 {
        if x.is_nan() {
            return f64::NAN;
        }
        if x.is_infinite() {
            return match self {
                FloatFormat::E4M3 => self.max_finite().copysign(x),
                _ => x,
            };
        }
        if x == 0.0 {
            return x;
        }
        if self == FloatFormat::Fp32 {
            return x as f32 as f64;
        }
        let a = x.abs();
        let emin = 1 - self.bias();
        let e = binary_exponent(a).max(emin);
        // Spacing of representable values in the binade of `a` (or the
        // subnormal spacing below the normal range).
        let quantum = 2f64.powi(e - self.mantissa_bits() as i32);
        let q = (a / quantum).round_ties_even() * quantum;
        let q = if q > self.max_finite() {
            match self {
                FloatFormat::E4M3 => self.max_finite(),
                _ => f64::INFINITY,
            }
        } else {
            q
        };
        q.copysign(x)
    }
}

/// `floor(log2(a))` for finite positive `a`, exact.
fn binary_exponent(a: f64) -> i32 {
    let bits = a.to_bits();
    let raw = ((bits >> 52) & 0x7ff) as i32;
    if raw == 0 {
        // f64 subnormal: far below every emulated format's range.
        -1074 + (63 - (bits & ((1u64 << 52) - 1)).leading_zeros() as i32)
    } else {
        raw - 1023
    }
}

/// Rounds `x` to `format`; see [`FloatFormat::round`].
pub fn round_to(format: FloatFormat, x: f64) -> f64 {
    format.round(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Reference BF16 rounding through f32 bit manipulation.
    fn bf16_reference(x: f64) -> f64 {
        let f = x as f32;
        if f.is_nan() {
            return f64::NAN;
        }
        let bits = f.to_bits();
        let lsb = (bits >> 16) & 1;
        let rounded = bits.wrapping_add(0x7fff + lsb) & 0xffff_0000;
        f32::from_bits(rounded) as f64
    }

    /// All finite non-negative E4M3 values, by decoding every code.
    fn e4m3_values() -> Vec<f64> {
        let mut v = Vec::new();
        for code in 0u32..128 {
            let e = (code >> 3) as i32;
            let m = (code & 7) as f64;
            if e == 15 && m == 7.0 {
                continue; // NaN
            }
            let val = if e == 0 {
                m / 8.0 * 2f64.powi(-6)
            } else {
                (1.0 + m / 8.0) * 2f64.powi(e - 7)
            };
            v.push(val);
        }
        v
    }

    fn e4m3_reference(x: f64) -> f64 {
        let vals = e4m3_values();
        let a = x.abs().min(448.0);
        let mut best = 0usize;
        for (i, v) in vals.iter().enumerate() {
            let d = (v - a).abs();
            let bd = (vals[best] - a).abs();
            // Codes are in increasing order, so an even index has an even
            // mantissa LSB.
            if d < bd || (d == bd && i % 2 == 0) {
                best = i;
            }
        }
        vals[best].copysign(x)
    }

    #[test]
    fn e4m3_basics() {
        assert_eq!(round_to(FloatFormat::E4M3, 1.0), 1.0);
        assert_eq!(round_to(FloatFormat::E4M3, 500.0), 448.0);
        assert_eq!(round_to(FloatFormat::E4M3, -1e9), -448.0);
        assert_eq!(FloatFormat::E4M3.max_finite(), 448.0);
        assert!(round_to(FloatFormat::E4M3, f64::NAN).is_nan());
    }

    #[test]
    fn bf16_identity_on_unit_binade() {
        // Seven stored mantissa bits: [1, 2) holds exactly 128 values.
        for i in 0..128 {
            let x = 1.0 + i as f64 / 128.0;
            assert_eq!(round_to(FloatFormat::Bf16, x), x);
        }
        let off_grid = 1.0 + 3.0 / 512.0;
        assert_ne!(round_to(FloatFormat::Bf16, off_grid), off_grid);
    }

    #[test]
    fn bf16_overflow_is_infinite() {
        assert_eq!(round_to(FloatFormat::Bf16, 1e39), f64::INFINITY);
        assert_eq!(
            round_to(FloatFormat::Bf16, FloatFormat::Bf16.max_finite()),
            FloatFormat::Bf16.max_finite()
        );
    }

    #[test]
    fn ties_go_to_even() {
        // 1 + 1/16 lies halfway between 1 and 1.125 in E4M3.
        assert_eq!(round_to(FloatFormat::E4M3, 1.0625), 1.0);
        assert_eq!(round_to(FloatFormat::E4M3, 1.1875), 1.25);
        assert_eq!(round_to(FloatFormat::Bf16, 1.0 + 1.0 / 256.0), 1.0);
        assert_eq!(
            round_to(FloatFormat::Bf16, 1.0 + 3.0 / 256.0),
            1.0 + 4.0 / 256.0
        );
    }

    #[test]
    fn matches_bit_references_on_random_values() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100_000 {
            let mant: f64 = rng.random_range(-1.0..1.0);
            let exp: i32 = rng.random_range(-20..20);
            // f32-exact inputs keep the f32-based reference free of double rounding.
            let x = (mant * 2f64.powi(exp)) as f32 as f64;
            assert_eq!(
                round_to(FloatFormat::Bf16, x),
                bf16_reference(x),
                "bf16 {x}"
            );
            assert_eq!(
                round_to(FloatFormat::E4M3, x),
                e4m3_reference(x),
                "e4m3 {x}"
            );
        }
    }

    #[test]
    fn encode_decode_identity_on_representable() {
        for v in e4m3_values() {
            assert_eq!(round_to(FloatFormat::E4M3, v), v);
            assert_eq!(round_to(FloatFormat::E4M3, -v), -v);
        }
    }
}
