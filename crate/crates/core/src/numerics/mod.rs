//! Software emulation of low-precision formats and of the reduction and
//! quantization schemes used to compress communication.
//!
//! All arithmetic happens in `f64`; a value is "in" a format once it has
//! passed through [`round_to`].

mod format;
mod probe;
mod quant;
mod reduce;

pub use format::{round_to, FloatFormat};
pub use probe::{swiglu, swiglu_range_probe, GateOrder, RangeReport};
pub use quant::{dequantize, quantization_mse, quantize, Granularity, QuantScheme, Quantized};
pub use reduce::{emulate_reduce, reduce_trial, relative_l2, ReduceKind, ReduceTrial};

/// Dense row-major matrix (rows are tokens).
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}
