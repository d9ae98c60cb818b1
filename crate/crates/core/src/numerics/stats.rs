//! Row softmax, per-channel moments, histogram densities and divergences.

use super::Tensor;
use crate::error::{Error, Result};

/// Finite stand-in for a masked (minus infinity) logit.
pub const MASKED_LOGIT: f64 = -1e9;

/// Probability floor applied to every histogram bin before renormalization.
pub const HIST_EPSILON: f64 = 1e-10;

fn is_masked(v: f64) -> bool {
    v <= MASKED_LOGIT
}

/// Softmax of a single row, stabilized by subtracting the row maximum.
pub(crate) fn softmax_in_place(row: &mut [f64], index: usize) -> Result<()> {
    if row.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::Domain(format!("softmax row {index} has non-finite logits")));
    }
    if row.iter().all(|&v| is_masked(v)) {
        return Err(Error::DegenerateRow(index));
    }
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
    Ok(())
}

pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 2 {
        return Err(Error::Dimension(format!(
            "softmax_rows expects rank-2, got {:?}",
            logits.shape()
        )));
    }
    let mut out = logits.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i), i)?;
    }
    Ok(out)
}

/// Per-channel mean and population variance.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl Moments {
    pub fn std_dev(&self) -> Vec<f64> {
        self.variance.iter().map(|v| v.sqrt()).collect()
    }
}

/// Moments over the token (row) axis of an `[N x d]` feature matrix.
pub fn channel_moments(features: &Tensor) -> Result<Moments> {
    if features.rank() != 2 {
        return Err(Error::Dimension(format!(
            "channel_moments expects [tokens x channels], got {:?}",
            features.shape()
        )));
    }
    let (n, d) = (features.rows(), features.cols());
    if n == 0 {
        return Err(Error::Domain("channel_moments over zero tokens".into()));
    }
    // Welford accumulation per channel.
    let mut mean = vec![0.0; d];
    let mut m2 = vec![0.0; d];
    for i in 0..n {
        let k = (i + 1) as f64;
        for (j, &x) in features.row(i).iter().enumerate() {
            let delta = x - mean[j];
            mean[j] += delta / k;
            m2[j] += delta * (x - mean[j]);
        }
    }
    let variance = m2.into_iter().map(|s| (s / n as f64).max(0.0)).collect();
    Ok(Moments { mean, variance })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.probabilities.len()
    }
}

/// Normalized histogram of `values` over `[lo, hi]`; out-of-range values land
/// in the edge bins and every bin is floored at [`HIST_EPSILON`].
pub fn histogram_pdf(values: &[f64], bins: usize, range: (f64, f64)) -> Result<Histogram> {
    let (lo, hi) = range;
    if bins < 2 {
        return Err(Error::Domain(format!("histogram needs at least 2 bins, got {bins}")));
    }
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Domain(format!("histogram range [{lo}, {hi}] is empty")));
    }
    if values.is_empty() {
        return Err(Error::Domain("histogram of zero samples".into()));
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        if !v.is_finite() {
            return Err(Error::Domain("histogram sample is not finite".into()));
        }
        let idx = ((v - lo) / width).floor();
        let idx = if idx < 0.0 { 0 } else { (idx as usize).min(bins - 1) };
        counts[idx] += 1;
    }
    let n = values.len() as f64;
    let floored: Vec<f64> = counts
        .iter()
        .map(|&c| (c as f64 / n).max(HIST_EPSILON))
        .collect();
    let total: f64 = floored.iter().sum();
    let bin_edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    Ok(Histogram {
        bin_edges,
        probabilities: floored.into_iter().map(|p| p / total).collect(),
    })
}

/// `KL(p || q) = sum p_i ln(p_i / q_i)` over identically binned histograms.
pub fn kl_divergence(p: &Histogram, q: &Histogram) -> Result<f64> {
    if p.bin_edges != q.bin_edges {
        return Err(Error::Domain("kl_divergence: histograms use different bins".into()));
    }
    let kl: f64 = p
        .probabilities
        .iter()
        .zip(&q.probabilities)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum();
    // Rounding can leave a tiny negative residue for p == q.
    Ok(kl.max(0.0))
}

pub fn cosine_similarity_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() || a.rank() != 2 {
        return Err(Error::Dimension(format!(
            "cosine_similarity_rows: shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Vec::with_capacity(a.rows());
    for i in 0..a.rows() {
        let (x, y) = (a.row(i), b.row(i));
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nx == 0.0 || ny == 0.0 {
            return Err(Error::Domain(format!("cosine similarity of zero-norm row {i}")));
        }
        let dot: f64 = x.iter().zip(y).map(|(u, v)| u * v).sum();
        out.push((dot / (nx * ny)).clamp(-1.0, 1.0));
    }
    Tensor::vector(out)
}
