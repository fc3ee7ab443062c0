//! Pre-norm single-head encoder layer and the small MLPs around it.

use crate::attention::{project_qkv, AttentionParams};
use crate::error::{LestError, Result};
use crate::linalg::{gelu, Matrix};
use crate::rng;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerNorm {
    pub fn new(width: usize) -> Self {
        Self {
            gain: vec![1.0; width],
            bias: vec![0.0; width],
        }
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.gain.len() {
            return Err(LestError::contract(format!(
                "layer norm of width {} applied to {} columns",
                self.gain.len(),
                x.cols()
            )));
        }
        let mut out = x.clone();
        let n = x.cols() as f64;
        for i in 0..x.rows() {
            let row = out.row_mut(i);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for ((v, g), b) in row.iter_mut().zip(&self.gain).zip(&self.bias) {
                *v = (*v - mean) * inv * g + b;
            }
        }
        Ok(out)
    }
}

/// Two affine maps with a GELU between them, applied row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl Mlp {
    pub fn new(seed: u64, input: usize, hidden: usize, output: usize) -> Self {
        let mut r = rng::stream(seed);
        let w1 = rng::uniform_weights(&mut r, input, hidden);
        let b1 = rng::uniform_bias(&mut r, input, hidden);
        let w2 = rng::uniform_weights(&mut r, hidden, output);
        let b2 = rng::uniform_bias(&mut r, hidden, output);
        Self { w1, b1, w2, b2 }
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: Matrix::zeros(input, hidden),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(hidden, output),
            b2: vec![0.0; output],
        }
    }

    pub fn input_width(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_width(&self) -> usize {
        self.w2.cols()
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_width() {
            return Err(LestError::contract(format!(
                "MLP expects {} inputs, got {}",
                self.input_width(),
                x.cols()
            )));
        }
        let mut h = x.matmul(&self.w1)?;
        h.add_row_vector(&self.b1)?;
        let h = h.map(gelu);
        let mut out = h.matmul(&self.w2)?;
        out.add_row_vector(&self.b2)?;
        Ok(out)
    }
}

/// One transformer encoder layer with `C` channels:
///
/// ```text
/// h = x + Attn(LN₁(x)) · W_O
/// y = h + FFN(LN₂(h))
/// ```
///
/// The attention kernel is supplied by the caller, which is how the grouped
/// and global branches share this layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLayerParams {
    pub attention: AttentionParams,
    /// Output projection `D → C` back onto the residual stream.
    pub w_o: Matrix,
    pub ffn: Mlp,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub seed: u64,
}

impl TransformerLayerParams {
    pub fn new(seed: u64, channels: usize, dim: usize, ffn_hidden: usize) -> Self {
        let mut r = rng::stream(rng::sub_seed(seed, "w_o"));
        Self {
            attention: AttentionParams::new(rng::sub_seed(seed, "qkv"), channels, dim),
            w_o: rng::uniform_weights(&mut r, dim, channels),
            ffn: Mlp::new(rng::sub_seed(seed, "ffn"), channels, ffn_hidden, channels),
            norm1: LayerNorm::new(channels),
            norm2: LayerNorm::new(channels),
            seed,
        }
    }

    /// Attention and feed-forward weights all zero; the layer is the identity.
    pub fn zeros(channels: usize, dim: usize, ffn_hidden: usize) -> Self {
        Self {
            attention: AttentionParams::zeros(channels, dim),
            w_o: Matrix::zeros(dim, channels),
            ffn: Mlp::zeros(channels, ffn_hidden, channels),
            norm1: LayerNorm::new(channels),
            norm2: LayerNorm::new(channels),
            seed: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.attention.channels()
    }

    pub fn forward_with<A>(&self, x: &Matrix, attend: A) -> Result<Matrix>
    where
        A: FnOnce(&Matrix, &Matrix, &Matrix) -> Result<Matrix>,
    {
        let h = self.norm1.apply(x)?;
        let (q, k, v) = project_qkv(&h, &self.attention)?;
        let a = attend(&q, &k, &v)?;
        let h = x.add(&a.matmul(&self.w_o)?)?;
        let f = self.ffn.apply(&self.norm2.apply(&h)?)?;
        h.add(&f)
    }
}
