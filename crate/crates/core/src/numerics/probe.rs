use serde::{Deserialize, Serialize};

use super::{quantization_mse, FloatFormat, Granularity, Matrix, QuantScheme};
use crate::{Error, Result};

/// Where the router's gating weight multiplies the expert path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateOrder {
    /// Gate applied to the SwiGLU output, i.e. to FC2's input.
    BeforeFc2In,
    /// Gate applied to FC2's output; FC2 sees the raw SwiGLU output.
    AfterFc2Out,
}

/// Range and quantization statistics of the FC2 input.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RangeReport {
    pub gate_order: GateOrder,
    /// Dynamic range across tokens of the FC2 input divided by that of the
    /// SwiGLU input. Dynamic range is the largest per-token absmax over the
    /// smallest nonzero one; 1 for all-zero data.
    pub range_ratio: f64,
    /// Relative E4M3 round-trip MSE (MSE over mean square) per token.
    pub per_token_mse: f64,
    pub per_tensor_mse: f64,
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// `a * silu(b)`, elementwise.
pub fn swiglu(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if (a.rows, a.cols) != (b.rows, b.cols) {
        return Err(Error::Dimension(format!(
            "swiglu operands {}x{} and {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(Matrix::from_fn(a.rows, a.cols, |r, c| {
        a.get(r, c) * silu(b.get(r, c))
    }))
}

fn dynamic_range(x: &Matrix) -> f64 {
    let maxes: Vec<f64> = (0..x.rows)
        .map(|r| x.row(r).iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .filter(|&m| m > 0.0)
        .collect();
    if maxes.is_empty() {
        return 1.0;
    }
    let hi = maxes.iter().cloned().fold(0.0, f64::max);
    let lo = maxes.iter().cloned().fold(f64::INFINITY, f64::min);
    hi / lo
}

fn relative_mse(x: &Matrix, g: Granularity) -> f64 {
    let ms = x.data.iter().map(|v| v * v).sum::<f64>() / x.data.len().max(1) as f64;
    let mse = quantization_mse(x, QuantScheme::new(g, FloatFormat::E4M3));
    if ms == 0.0 {
        0.0
    } else {
        mse / ms
    }
}

/// Measures how the gate placement changes the FC2 input's numeric range.
///
/// `a` and `b` are the two FC1 halves (tokens x h_ffn); `gate` holds one
/// routing weight per token.
pub fn swiglu_range_probe(
    a: &Matrix,
    b: &Matrix,
    gate: &[f64],
    order: GateOrder,
) -> Result<RangeReport> {
    if gate.len() != a.rows {
        return Err(Error::Dimension(format!(
            "{} gate weights for {} tokens",
            gate.len(),
            a.rows
        )));
    }
    let mut fc2_in = swiglu(a, b)?;
    if order == GateOrder::BeforeFc2In {
        for (r, &g) in gate.iter().enumerate() {
            for v in fc2_in.row_mut(r) {
                *v *= g;
            }
        }
    }
    let input = Matrix::from_fn(a.rows, 2 * a.cols, |r, c| {
        if c < a.cols {
            a.get(r, c)
        } else {
            b.get(r, c - a.cols)
        }
    });
    let in_range = dynamic_range(&input);
    let out_range = dynamic_range(&fc2_in);
    Ok(RangeReport {
        gate_order: order,
        range_ratio: out_range / in_range,
        per_token_mse: relative_mse(&fc2_in, Granularity::PerToken),
        per_tensor_mse: relative_mse(&fc2_in, Granularity::PerTensor),
    })
}
