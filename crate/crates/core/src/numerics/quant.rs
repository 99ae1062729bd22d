use serde::{Deserialize, Serialize};

use super::{FloatFormat, Matrix};

/// Which elements share one scale. Rows are tokens, columns are channels
/// (hidden dimension).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    /// One scale per row.
    PerToken,
    /// One scale per column.
    PerChannel,
    /// Runs of `group_size` consecutive columns within a row.
    Grouped {
        group_size: u64,
    },
    /// Runs of `group_size` consecutive rows within a column.
    ChannelGrouped {
        group_size: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantScheme {
    pub granularity: Granularity,
    pub format: FloatFormat,
}

impl QuantScheme {
    pub fn new(granularity: Granularity, format: FloatFormat) -> Self {
        Self {
            granularity,
            format,
        }
    }
}

/// Quantized codes (already decoded to `f64`) and one scale per block.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub codes: Matrix,
    pub scales: Vec<f64>,
    pub scheme: QuantScheme,
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

impl Granularity {
    pub fn num_blocks(self, rows: usize, cols: usize) -> usize {
        match self {
            Granularity::PerTensor => 1,
            Granularity::PerToken => rows,
            Granularity::PerChannel => cols,
            Granularity::Grouped { group_size } => {
                rows * ceil_div(cols, group_size.max(1) as usize)
            }
            Granularity::ChannelGrouped { group_size } => {
                cols * ceil_div(rows, group_size.max(1) as usize)
            }
        }
    }

    /// Block index of element `(r, c)`.
    pub fn block_of(self, rows: usize, cols: usize, r: usize, c: usize) -> usize {
        match self {
            Granularity::PerTensor => 0,
            Granularity::PerToken => r,
            Granularity::PerChannel => c,
            Granularity::Grouped { group_size } => {
                r * ceil_div(cols, group_size as usize) + c / group_size as usize
            }
            Granularity::ChannelGrouped { group_size } => {
                c * ceil_div(rows, group_size as usize) + r / group_size as usize
            }
        }
    }
}

/// Absmax scaling: each block's largest magnitude maps to the format's
/// `max_finite`. All-zero blocks get scale 1.
pub fn quantize(x: &Matrix, scheme: QuantScheme) -> Quantized {
    let g = scheme.granularity;
    let (rows, cols) = (x.rows, x.cols);
    let mut absmax = vec![0.0f64; g.num_blocks(rows, cols)];
    for r in 0..rows {
        for c in 0..cols {
            let b = g.block_of(rows, cols, r, c);
            absmax[b] = absmax[b].max(x.get(r, c).abs());
        }
    }
    let max_finite = scheme.format.max_finite();
    let scales: Vec<f64> = absmax
        .iter()
        .map(|&a| if a > 0.0 { a / max_finite } else { 1.0 })
        .collect();
    let mut codes = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let s = scales[g.block_of(rows, cols, r, c)];
            codes.set(r, c, scheme.format.round(x.get(r, c) / s));
        }
    }
    Quantized {
        codes,
        scales,
        scheme,
    }
}

pub fn dequantize(q: &Quantized) -> Matrix {
    let g = q.scheme.granularity;
    let (rows, cols) = (q.codes.rows, q.codes.cols);
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            out.set(
                r,
                c,
                q.codes.get(r, c) * q.scales[g.block_of(rows, cols, r, c)],
            );
        }
    }
    out
}

/// Mean squared error of a quantize/dequantize round trip.
pub fn quantization_mse(x: &Matrix, scheme: QuantScheme) -> f64 {
    let y = dequantize(&quantize(x, scheme));
    let n = x.data.len().max(1) as f64;
    x.data
        .iter()
        .zip(&y.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn e4m3(g: Granularity) -> QuantScheme {
        QuantScheme::new(g, FloatFormat::E4M3)
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn zero_tensor_has_unit_scales() {
        let q = quantize(&Matrix::zeros(3, 4), e4m3(Granularity::PerToken));
        assert!(q.codes.data.iter().all(|&c| c == 0.0));
        assert_eq!(q.scales, vec![1.0; 3]);
    }

    #[test]
    fn grouped_128_on_256_columns() {
        let q = quantize(
            &random(5, 256, 1),
            e4m3(Granularity::Grouped { group_size: 128 }),
        );
        assert_eq!(q.scales.len(), 10);
    }

    #[test]
    fn per_token_isolates_outlier_row() {
        let clean = random(8, 64, 2);
        let mut x = clean.clone();
        for c in 0..64 {
            let v = x.get(0, c) * 1e6;
            x.set(0, c, v);
        }
        // Relative error of rows 1.. against the exact values.
        let row_err = |m: &Matrix, s: Granularity| {
            let y = dequantize(&quantize(m, e4m3(s)));
            let (mut num, mut den) = (0.0, 0.0);
            for r in 1..8 {
                for c in 0..64 {
                    num += (m.get(r, c) - y.get(r, c)).powi(2);
                    den += m.get(r, c).powi(2);
                }
            }
            (num / den).sqrt()
        };
        let tok = row_err(&x, Granularity::PerToken);
        assert_eq!(tok, row_err(&clean, Granularity::PerToken));
        assert!(tok < 0.1, "{tok}");
        let ten = row_err(&x, Granularity::PerTensor);
        assert!(ten > 10.0 * tok, "{ten} vs {tok}");
    }

    #[test]
    fn requantizing_is_idempotent() {
        for g in [
            Granularity::PerTensor,
            Granularity::PerToken,
            Granularity::PerChannel,
            Granularity::Grouped { group_size: 16 },
            Granularity::ChannelGrouped { group_size: 4 },
        ] {
            let x = random(12, 40, 3);
            let q1 = quantize(&x, e4m3(g));
            let q2 = quantize(&dequantize(&q1), e4m3(g));
            assert_eq!(q1.codes, q2.codes, "{g:?}");
        }
    }

    #[test]
    fn block_absmax_hits_max_finite() {
        let x = random(6, 32, 4);
        let g = Granularity::Grouped { group_size: 8 };
        let q = quantize(&x, e4m3(g));
        let mut blockmax = vec![0.0f64; g.num_blocks(6, 32)];
        for r in 0..6 {
            for c in 0..32 {
                let b = g.block_of(6, 32, r, c);
                blockmax[b] = blockmax[b].max(q.codes.get(r, c).abs());
            }
        }
        assert!(blockmax.iter().all(|&m| m == 448.0));
    }
}
