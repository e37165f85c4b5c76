//! Multi-scale temporal convolution over per-sensor windows.
//!
//! A bank of learnable 1-D kernels of different widths runs over each row,
//! outputs are average-pooled across the bank, and a residual connection
//! adds the raw input back. Right replication padding keeps every kernel's
//! output the same length as its input, so the block preserves shape.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, TensorRef};

pub const DEFAULT_KERNEL_SIZES: [usize; 4] = [2, 3, 5, 7];

pub struct KernelBank {
    /// One learnable weight vector per scale, registered on the tape.
    pub kernels: Vec<TensorRef>,
    pub sizes: Vec<usize>,
    pub dilation: usize,
}

impl KernelBank {
    /// Registers one parameter vector per kernel width, initialized uniform
    /// in [-1/sqrt(w_p), 1/sqrt(w_p)].
    pub fn new(tape: &mut Tape, sizes: &[usize], dilation: usize, rng: &mut Rng) -> Result<KernelBank> {
        if sizes.is_empty() {
            return Err(Error::Config("kernel bank needs at least one width".into()));
        }
        if dilation == 0 {
            return Err(Error::Config("dilation must be at least 1".into()));
        }
        let mut kernels = Vec::with_capacity(sizes.len());
        for &w in sizes {
            if w == 0 {
                return Err(Error::Config("kernel width must be at least 1".into()));
            }
            let bound = 1.0 / (w as f64).sqrt();
            let values: Vec<f64> = (0..w).map(|_| rng.uniform_in(-bound, bound)).collect();
            kernels.push(tape.param(&[w], values)?);
        }
        Ok(KernelBank { kernels, sizes: sizes.to_vec(), dilation })
    }

    /// Convolves every row of `x` with every kernel, averages the bank's
    /// outputs, and adds the input back. Output shape equals input shape.
    pub fn forward(&self, tape: &mut Tape, x: TensorRef) -> Result<TensorRef> {
        self.forward_first(tape, x, self.kernels.len())
    }

    /// Same pooling restricted to the first `count` kernels; `count == 1`
    /// is the single-scale ablation.
    pub fn forward_first(&self, tape: &mut Tape, x: TensorRef, count: usize) -> Result<TensorRef> {
        if count == 0 || count > self.kernels.len() {
            return Err(Error::Config(format!(
                "cannot pool {count} of {} kernels",
                self.kernels.len()
            )));
        }
        let mut layer: Vec<TensorRef> = Vec::with_capacity(count);
        for &k in &self.kernels[..count] {
            layer.push(tape.conv1d_rows(x, k, self.dilation)?);
        }
        // Pairwise reduction: for power-of-two bank sizes the average of
        // identical outputs is exact, which keeps the frozen-delta identity
        // (output = 2 * input) bitwise.
        while layer.len() > 1 {
            let mut next = Vec::with_capacity(layer.len().div_ceil(2));
            for pair in layer.chunks(2) {
                next.push(if pair.len() == 2 { tape.add(pair[0], pair[1])? } else { pair[0] });
            }
            layer = next;
        }
        let pooled = tape.scale(layer[0], 1.0 / count as f64)?;
        tape.add(pooled, x)
    }
}
