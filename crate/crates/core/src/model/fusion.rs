//! Channel-attention fusion of the two branches and the MLP decoder.

use super::layers::Mlp;
use crate::error::{LestError, Result};
use crate::linalg::{softmax, Matrix};

/// Output of channel attention: reweighted features and the per-channel
/// weights that sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAttention {
    pub output: Matrix,
    pub weights: Vec<f64>,
}

/// Squeezes each channel to its max over voxels, softmaxes those maxima into
/// channel weights, and scales every column by its weight.
pub fn channel_attention(x: &Matrix) -> ChannelAttention {
    let c = x.cols();
    if x.rows() == 0 {
        return ChannelAttention {
            output: x.clone(),
            weights: vec![1.0 / c.max(1) as f64; c],
        };
    }
    let mut pooled = vec![f64::NEG_INFINITY; c];
    for row in x.row_iter() {
        for (a, v) in pooled.iter_mut().zip(row) {
            *a = a.max(*v);
        }
    }
    let weights = softmax(&pooled);
    let mut output = x.clone();
    for i in 0..output.rows() {
        for (o, w) in output.row_mut(i).iter_mut().zip(&weights) {
            *o *= w;
        }
    }
    ChannelAttention { output, weights }
}

/// Concatenates the branch outputs along channels, then applies
/// [`channel_attention`].
pub fn channel_attention_fuse(x_sfc: &Matrix, x_disco: &Matrix) -> Result<ChannelAttention> {
    if x_sfc.rows() != x_disco.rows() {
        return Err(LestError::contract(format!(
            "branch outputs have {} and {} voxels",
            x_sfc.rows(),
            x_disco.rows()
        )));
    }
    Ok(channel_attention(&x_sfc.hconcat(x_disco)?))
}

/// Decoder from fused channels to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub mlp: Mlp,
    pub seed: u64,
}

impl FusionParams {
    pub fn new(seed: u64, input: usize, hidden: usize, classes: usize) -> Self {
        Self {
            mlp: Mlp::new(seed, input, hidden, classes),
            seed,
        }
    }
}

pub fn decode(o: &Matrix, params: &FusionParams) -> Result<Matrix> {
    params.mlp.apply(o)
}
