//! Single-head attention kernels.
//!
//! Every kernel maps `(Q, K, V)` with `Q: Nq×D`, `K: Nk×D`, `V: Nk×Dv` to an
//! `Nq×Dv` output whose row `i` is a convex combination of the rows of `V`:
//!
//! ```text
//! O_i = Σ_j sim(i, j) V_j / Σ_j sim(i, j)
//! ```
//!
//! The linear kernels never materialise the `Nq×Nk` similarity matrix.
//! Instead they fold the keys and values into aggregates once, in ascending
//! key order, and then evaluate each query row against those aggregates.
//! Query rows are independent and run on the rayon pool, so outputs do not
//! depend on the worker count.
//!
//! [`similarity_attention_oracle`] is the explicit double loop used as the
//! reference for all of them.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

use rayon::prelude::*;

use crate::error::{LestError, Result};
use crate::linalg::{dot, Matrix};
use crate::rng;

/// Query, key and value projections `C → D`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub seed: u64,
}

impl AttentionParams {
    pub fn new(seed: u64, channels: usize, dim: usize) -> Self {
        let mut r = rng::stream(seed);
        Self {
            w_q: rng::uniform_weights(&mut r, channels, dim),
            w_k: rng::uniform_weights(&mut r, channels, dim),
            w_v: rng::uniform_weights(&mut r, channels, dim),
            seed,
        }
    }

    pub fn zeros(channels: usize, dim: usize) -> Self {
        Self {
            w_q: Matrix::zeros(channels, dim),
            w_k: Matrix::zeros(channels, dim),
            w_v: Matrix::zeros(channels, dim),
            seed: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.w_q.rows()
    }

    pub fn dim(&self) -> usize {
        self.w_q.cols()
    }
}

pub fn project_qkv(x: &Matrix, p: &AttentionParams) -> Result<(Matrix, Matrix, Matrix)> {
    if x.cols() != p.channels() {
        return Err(LestError::contract(format!(
            "tokens have {} channels, projections expect {}",
            x.cols(),
            p.channels()
        )));
    }
    Ok((x.matmul(&p.w_q)?, x.matmul(&p.w_k)?, x.matmul(&p.w_v)?))
}

fn check_shapes(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<()> {
    if q.cols() != k.cols() {
        return Err(LestError::contract(format!(
            "query width {} != key width {}",
            q.cols(),
            k.cols()
        )));
    }
    if k.rows() != v.rows() {
        return Err(LestError::contract(format!(
            "{} keys but {} values",
            k.rows(),
            v.rows()
        )));
    }
    if k.rows() == 0 && q.rows() > 0 {
        return Err(LestError::contract("queries attend to an empty key set"));
    }
    Ok(())
}

/// Evaluates `row_fn(i, out_row)` for every query row in parallel.
fn per_query<F>(n_q: usize, dv: usize, row_fn: F) -> Result<Matrix>
where
    F: Fn(usize, &mut [f64]) -> Result<()> + Sync,
{
    let mut out = Matrix::zeros(n_q, dv);
    // the lowest failing row is reported, whatever the scheduling
    let first_error = if dv > 0 {
        out.as_mut_slice()
            .par_chunks_mut(dv)
            .enumerate()
            .filter_map(|(i, row)| row_fn(i, row).err().map(|e| (i, e)))
            .min_by_key(|(i, _)| *i)
    } else {
        (0..n_q).find_map(|i| row_fn(i, &mut []).err().map(|e| (i, e)))
    };
    match first_error {
        Some((_, e)) => Err(e),
        None => Ok(out),
    }
}

/// With a single key every weight is exactly 1, whatever the similarity.
fn single_key(q: &Matrix, v: &Matrix) -> Option<Matrix> {
    (v.rows() == 1).then(|| Matrix::from_fn(q.rows(), v.cols(), |_, c| v.get(0, c)))
}

fn column_mean(v: &Matrix, out: &mut [f64]) {
    out.fill(0.0);
    for row in v.row_iter() {
        for (o, x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    let n = v.rows() as f64;
    out.iter_mut().for_each(|o| *o /= n);
}

/// Softmax attention weights `softmax(q_i · k_j / √D)` for one query row,
/// with keys where `key_valid[j]` is false forced to weight 0.
fn softmax_row(q_i: &[f64], k: &Matrix, key_valid: Option<&[bool]>) -> Vec<f64> {
    let scale = 1.0 / (k.cols().max(1) as f64).sqrt();
    let valid = |j: usize| key_valid.is_none_or(|m| m[j]);
    let scores: Vec<f64> = (0..k.rows())
        .map(|j| {
            if valid(j) {
                dot(q_i, k.row(j)) * scale
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = scores
        .iter()
        .map(|&s| {
            if s == f64::NEG_INFINITY {
                0.0
            } else {
                (s - max).exp()
            }
        })
        .collect();
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= sum);
    w
}

/// Full `Nq×Nk` matrix of softmax attention weights.
pub fn softmax_weights(q: &Matrix, k: &Matrix) -> Result<Matrix> {
    check_shapes(q, k, &Matrix::zeros(k.rows(), 0))?;
    let data = (0..q.rows())
        .flat_map(|i| softmax_row(q.row(i), k, None))
        .collect();
    Matrix::from_vec(q.rows(), k.rows(), data)
}

/// `softmax(Q Kᵀ / √D) V`, with max-subtraction for stability.
pub fn softmax_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    softmax_attention_masked(q, k, v, None)
}

/// Softmax attention where keys with `key_valid[j] == false` get weight 0.
/// Used for groups padded to a common length.
pub fn softmax_attention_masked(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    key_valid: Option<&[bool]>,
) -> Result<Matrix> {
    check_shapes(q, k, v)?;
    if let Some(m) = key_valid {
        if m.len() != k.rows() {
            return Err(LestError::contract(
                "key mask length differs from key count",
            ));
        }
        if !m.iter().any(|&b| b) && q.rows() > 0 {
            return Err(LestError::contract("key mask hides every key"));
        }
    }
    per_query(q.rows(), v.cols(), |i, out| {
        let w = softmax_row(q.row(i), k, key_valid);
        out.fill(0.0);
        for (j, &wj) in w.iter().enumerate() {
            if wj != 0.0 {
                for (o, x) in out.iter_mut().zip(v.row(j)) {
                    *o += wj * x;
                }
            }
        }
        Ok(())
    })
}

/// How the oracle treats query rows whose similarities are not all positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OraclePolicy {
    /// Every similarity must be `> 0`; anything else is an error.
    StrictlyPositive,
    /// Similarities must be `>= 0`; a row whose similarities are all zero
    /// falls back to uniform weights.
    NonNegativeUniformFallback,
}

/// Explicit `O(Nq·Nk)` attention with an index-aware similarity
/// `sim(i, j)`. This is the trusted reference implementation.
pub fn pairwise_attention_oracle<S>(
    n_q: usize,
    v: &Matrix,
    sim: S,
    policy: OraclePolicy,
) -> Result<Matrix>
where
    S: Fn(usize, usize) -> f64 + Sync,
{
    if v.rows() == 0 && n_q > 0 {
        return Err(LestError::contract("queries attend to an empty key set"));
    }
    per_query(n_q, v.cols(), |i, out| {
        let mut weights = Vec::with_capacity(v.rows());
        for j in 0..v.rows() {
            let s = sim(i, j);
            let ok = match policy {
                OraclePolicy::StrictlyPositive => s > 0.0,
                OraclePolicy::NonNegativeUniformFallback => s >= 0.0,
            };
            if !ok || !s.is_finite() {
                return Err(LestError::OraclePrecondition {
                    query: i,
                    key: j,
                    value: s,
                });
            }
            weights.push(s);
        }
        let total: f64 = weights.iter().sum();
        if total == 0.0 {
            column_mean(v, out);
            return Ok(());
        }
        out.fill(0.0);
        for (j, s) in weights.iter().enumerate() {
            for (o, x) in out.iter_mut().zip(v.row(j)) {
                *o += s * x;
            }
        }
        out.iter_mut().for_each(|o| *o /= total);
        Ok(())
    })
}

/// Reference attention `O_i = Σ_j sim(Q_i,K_j) V_j / Σ_j sim(Q_i,K_j)`,
/// evaluated pair by pair. Fails if any similarity is not positive.
pub fn similarity_attention_oracle<S>(q: &Matrix, k: &Matrix, v: &Matrix, sim: S) -> Result<Matrix>
where
    S: Fn(&[f64], &[f64]) -> f64 + Sync,
{
    check_shapes(q, k, v)?;
    pairwise_attention_oracle(
        q.rows(),
        v,
        |i, j| sim(q.row(i), k.row(j)),
        OraclePolicy::StrictlyPositive,
    )
}

/// `elu(x) + 1`.
#[inline]
pub fn elu_feature(x: f64) -> f64 {
    if x > 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

/// `φ(q) · φ(k)` with `φ = elu + 1`.
pub fn kernel_similarity(q: &[f64], k: &[f64]) -> f64 {
    q.iter()
        .zip(k)
        .map(|(&a, &b)| elu_feature(a) * elu_feature(b))
        .sum()
}

/// Linear attention with feature map `φ(x) = elu(x) + 1`:
/// `O_i = φ(Q_i) Σ_j φ(K_j)ᵀ V_j / φ(Q_i) · Σ_j φ(K_j)`.
pub fn kernel_linear_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    check_shapes(q, k, v)?;
    if let Some(out) = single_key(q, v) {
        return Ok(out);
    }
    let (d, dv) = (k.cols(), v.cols());
    let mut kv = Matrix::zeros(d, dv);
    let mut z = vec![0.0; d];
    for j in 0..k.rows() {
        for (p, &kp) in k.row(j).iter().enumerate() {
            let f = elu_feature(kp);
            z[p] += f;
            for (acc, x) in kv.row_mut(p).iter_mut().zip(v.row(j)) {
                *acc += f * x;
            }
        }
    }
    per_query(q.rows(), dv, |i, out| {
        let phi: Vec<f64> = q.row(i).iter().map(|&x| elu_feature(x)).collect();
        let den = dot(&phi, &z);
        if !(den > 0.0 && den.is_finite()) {
            return Err(LestError::ZeroDenominator { row: i });
        }
        out.fill(0.0);
        for (p, &f) in phi.iter().enumerate() {
            for (o, x) in out.iter_mut().zip(kv.row(p)) {
                *o += f * x;
            }
        }
        out.iter_mut().for_each(|o| *o /= den);
        Ok(())
    })
}

/// CosFormer similarity `relu(q_i) · relu(k_j) · cos(π/2 · (i − j) / M)`.
pub fn cosformer_similarity(i: usize, q_i: &[f64], j: usize, k_j: &[f64], horizon: usize) -> f64 {
    let dot_relu: f64 = q_i
        .iter()
        .zip(k_j)
        .map(|(&a, &b)| a.max(0.0) * b.max(0.0))
        .sum();
    dot_relu * (FRAC_PI_2 * (i as f64 - j as f64) / horizon as f64).cos()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CosformerOutput {
    pub output: Matrix,
    /// Query rows whose similarities were all zero and got uniform weights.
    pub fallback_rows: Vec<usize>,
}

/// CosFormer attention in its decomposed linear form.
///
/// `cos(a_i − b_j) = cos a_i cos b_j + sin a_i sin b_j` with
/// `a_i = π i / 2M`, `b_j = π j / 2M` splits the re-weighting into a cosine
/// and a sine aggregate over keys.
pub fn cosformer_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    horizon: usize,
) -> Result<CosformerOutput> {
    check_shapes(q, k, v)?;
    if horizon == 0 || horizon < q.rows() || horizon < k.rows() {
        return Err(LestError::contract(format!(
            "cosformer horizon M = {horizon} must cover {} queries and {} keys",
            q.rows(),
            k.rows()
        )));
    }
    if let Some(output) = single_key(q, v) {
        return Ok(CosformerOutput {
            output,
            fallback_rows: Vec::new(),
        });
    }
    let (d, dv) = (k.cols(), v.cols());
    let angle = |idx: usize| FRAC_PI_2 * idx as f64 / horizon as f64;
    let (mut s_cos, mut s_sin) = (Matrix::zeros(d, dv), Matrix::zeros(d, dv));
    let (mut z_cos, mut z_sin) = (vec![0.0; d], vec![0.0; d]);
    for j in 0..k.rows() {
        let (sb, cb) = angle(j).sin_cos();
        for (p, &kp) in k.row(j).iter().enumerate() {
            let kr = kp.max(0.0);
            if kr == 0.0 {
                continue;
            }
            z_cos[p] += cb * kr;
            z_sin[p] += sb * kr;
            for ((c, s), x) in s_cos
                .row_mut(p)
                .iter_mut()
                .zip(s_sin.row_mut(p).iter_mut())
                .zip(v.row(j))
            {
                *c += cb * kr * x;
                *s += sb * kr * x;
            }
        }
    }
    let fallbacks = std::sync::Mutex::new(Vec::new());
    let output = per_query(q.rows(), dv, |i, out| {
        let (sa, ca) = angle(i).sin_cos();
        let qr: Vec<f64> = q.row(i).iter().map(|x| x.max(0.0)).collect();
        let den = ca * dot(&qr, &z_cos) + sa * dot(&qr, &z_sin);
        if den <= 0.0 {
            column_mean(v, out);
            fallbacks.lock().expect("fallback list poisoned").push(i);
            return Ok(());
        }
        out.fill(0.0);
        for (p, &f) in qr.iter().enumerate() {
            if f == 0.0 {
                continue;
            }
            for ((o, c), s) in out.iter_mut().zip(s_cos.row(p)).zip(s_sin.row(p)) {
                *o += f * (ca * c + sa * s);
            }
        }
        out.iter_mut().for_each(|o| *o /= den);
        Ok(())
    })?;
    let mut fallback_rows = fallbacks.into_inner().expect("fallback list poisoned");
    fallback_rows.sort_unstable();
    Ok(CosformerOutput {
        output,
        fallback_rows,
    })
}

/// Quadratic CosFormer reference built on [`pairwise_attention_oracle`].
pub fn cosformer_oracle(q: &Matrix, k: &Matrix, v: &Matrix, horizon: usize) -> Result<Matrix> {
    check_shapes(q, k, v)?;
    pairwise_attention_oracle(
        q.rows(),
        v,
        |i, j| cosformer_similarity(i, q.row(i), j, k.row(j), horizon),
        OraclePolicy::NonNegativeUniformFallback,
    )
}

/// Distance-cosine similarity `Σ_p cos(π/4 · |tanh q_p − tanh k_p|)`.
///
/// Each term lies in `(0, 1]`, so the sum lies in `(0, n]`.
pub fn disco_similarity(q: &[f64], k: &[f64]) -> f64 {
    q.iter()
        .zip(k)
        .map(|(&a, &b)| (FRAC_PI_4 * (a.tanh() - b.tanh()).abs()).cos())
        .sum()
}

/// `(cos(π/4 · tanh x), sin(π/4 · tanh x))` elementwise.
pub fn disco_features(x: &Matrix) -> (Matrix, Matrix) {
    let mut c = Matrix::zeros(x.rows(), x.cols());
    let mut s = Matrix::zeros(x.rows(), x.cols());
    for ((xv, cv), sv) in x
        .as_slice()
        .iter()
        .zip(c.as_mut_slice())
        .zip(s.as_mut_slice())
    {
        (*sv, *cv) = (FRAC_PI_4 * xv.tanh()).sin_cos();
    }
    (c, s)
}

/// Key/value summary that every DISCO query row is evaluated against.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscoAggregate {
    /// `Σ_j K^cos_jp V_j`, one row per key dimension `p`.
    pub cos_values: Matrix,
    /// `Σ_j K^sin_jp V_j`.
    pub sin_values: Matrix,
    /// `Σ_j K^cos_jp`.
    pub cos_sums: Vec<f64>,
    /// `Σ_j K^sin_jp`.
    pub sin_sums: Vec<f64>,
}

impl DiscoAggregate {
    /// Folds keys and values in ascending key order.
    pub fn from_keys(k: &Matrix, v: &Matrix) -> Result<Self> {
        if k.rows() != v.rows() {
            return Err(LestError::contract(format!(
                "{} keys but {} values",
                k.rows(),
                v.rows()
            )));
        }
        let (d, dv) = (k.cols(), v.cols());
        let mut agg = Self {
            cos_values: Matrix::zeros(d, dv),
            sin_values: Matrix::zeros(d, dv),
            cos_sums: vec![0.0; d],
            sin_sums: vec![0.0; d],
        };
        for j in 0..k.rows() {
            let vj = v.row(j);
            for (p, &kp) in k.row(j).iter().enumerate() {
                let (ks, kc) = (FRAC_PI_4 * kp.tanh()).sin_cos();
                agg.cos_sums[p] += kc;
                agg.sin_sums[p] += ks;
                for (a, x) in agg.cos_values.row_mut(p).iter_mut().zip(vj) {
                    *a += kc * x;
                }
                for (a, x) in agg.sin_values.row_mut(p).iter_mut().zip(vj) {
                    *a += ks * x;
                }
            }
        }
        Ok(agg)
    }

    /// Evaluates every query row against the aggregate.
    pub fn attend(&self, q: &Matrix) -> Result<Matrix> {
        if q.cols() != self.cos_sums.len() {
            return Err(LestError::contract(format!(
                "query width {} != key width {}",
                q.cols(),
                self.cos_sums.len()
            )));
        }
        let dv = self.cos_values.cols();
        per_query(q.rows(), dv, |i, out| {
            out.fill(0.0);
            let mut den = 0.0;
            for (p, &qp) in q.row(i).iter().enumerate() {
                let (qs, qc) = (FRAC_PI_4 * qp.tanh()).sin_cos();
                den += qc * self.cos_sums[p] + qs * self.sin_sums[p];
                for ((o, c), s) in out
                    .iter_mut()
                    .zip(self.cos_values.row(p))
                    .zip(self.sin_values.row(p))
                {
                    *o += qc * c + qs * s;
                }
            }
            if den.is_nan() || den <= 0.0 {
                return Err(LestError::Invariant(format!(
                    "DISCO denominator {den} at row {i} is not positive"
                )));
            }
            out.iter_mut().for_each(|o| *o /= den);
            Ok(())
        })
    }
}

/// Distance-cosine linear attention, `O(N · D · Dv)`.
pub fn disco_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    check_shapes(q, k, v)?;
    if let Some(out) = single_key(q, v) {
        return Ok(out);
    }
    DiscoAggregate::from_keys(k, v)?.attend(q)
}

/// The kernels exposed on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttentionVariant {
    Softmax,
    Kernel,
    Cosformer,
    Disco,
}

impl AttentionVariant {
    pub const ALL: [Self; 4] = [Self::Softmax, Self::Kernel, Self::Cosformer, Self::Disco];

    pub fn name(self) -> &'static str {
        match self {
            Self::Softmax => "softmax",
            Self::Kernel => "kernel",
            Self::Cosformer => "cosformer",
            Self::Disco => "disco",
        }
    }

    /// The production kernel. CosFormer uses `M = max(Nq, Nk)`.
    pub fn fast(self, q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
        match self {
            Self::Softmax => softmax_attention(q, k, v),
            Self::Kernel => kernel_linear_attention(q, k, v),
            Self::Cosformer => {
                cosformer_attention(q, k, v, q.rows().max(k.rows()).max(1)).map(|o| o.output)
            }
            Self::Disco => disco_attention(q, k, v),
        }
    }

    /// The quadratic reference for the same kernel.
    pub fn oracle(self, q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
        match self {
            Self::Softmax => {
                let scale = 1.0 / (q.cols().max(1) as f64).sqrt();
                similarity_attention_oracle(q, k, v, |a, b| (dot(a, b) * scale).exp())
            }
            Self::Kernel => similarity_attention_oracle(q, k, v, kernel_similarity),
            Self::Cosformer => cosformer_oracle(q, k, v, q.rows().max(k.rows()).max(1)),
            Self::Disco => similarity_attention_oracle(q, k, v, disco_similarity),
        }
    }
}

impl std::str::FromStr for AttentionVariant {
    type Err = LestError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| LestError::contract(format!("unknown attention variant `{s}`")))
    }
}
