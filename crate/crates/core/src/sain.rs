//! Global style adjustment of the initial latent: mean replacement and the
//! KL-scaled variant (scaled adaptive instance normalization).

use crate::error::{Error, Result};
use crate::numerics::{channel_moments, histogram_pdf, kl_divergence, Tensor};

pub const DEFAULT_BINS: usize = 32;

/// How the KL divergence is turned into a blend weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum WeightSign {
    /// `w = exp(-KL)`, bounded in `(0, 1]`.
    #[default]
    Decreasing,
    /// `w = exp(+KL)`, the literal printed form; unbounded above.
    Printed,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleWeight {
    pub w: f64,
    pub kl: f64,
}

impl ScaleWeight {
    pub fn from_kl(kl: f64, sign: WeightSign) -> Self {
        let w = match sign {
            WeightSign::Decreasing => (-kl).exp(),
            WeightSign::Printed => kl.exp(),
        };
        Self { w, kl }
    }

    pub fn unit() -> Self {
        Self { w: 1.0, kl: 0.0 }
    }
}

fn check_features(f_c: &Tensor, f_s: &Tensor) -> Result<()> {
    if f_c.rank() != 2 || f_s.rank() != 2 {
        return Err(Error::Dimension("features must be [tokens x channels]".into()));
    }
    if f_c.cols() != f_s.cols() {
        return Err(Error::Dimension(format!(
            "channel extents differ: {} vs {}",
            f_c.cols(),
            f_s.cols()
        )));
    }
    Ok(())
}

fn shift_channels(f: &Tensor, shift: &[f64]) -> Result<Tensor> {
    f.add_row(shift)
}

/// `f_c - mu_c + mu_s` per channel.
pub fn mean_adjust(f_c: &Tensor, f_s: &Tensor) -> Result<Tensor> {
    sain(f_c, f_s, ScaleWeight::unit())
}

/// KL of the pooled style histogram against the pooled content histogram,
/// both binned over the joint value range.
pub fn scale_weight_with(f_c: &Tensor, f_s: &Tensor, bins: usize, sign: WeightSign) -> Result<ScaleWeight> {
    if f_c.is_empty() || f_s.is_empty() {
        return Err(Error::Domain("scale weight of empty features".into()));
    }
    let (mut lo, mut hi) = f_c
        .data()
        .iter()
        .chain(f_s.data())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let p = histogram_pdf(f_s.data(), bins, (lo, hi))?;
    let q = histogram_pdf(f_c.data(), bins, (lo, hi))?;
    Ok(ScaleWeight::from_kl(kl_divergence(&p, &q)?, sign))
}

pub fn scale_weight(f_c: &Tensor, f_s: &Tensor, bins: usize) -> Result<ScaleWeight> {
    scale_weight_with(f_c, f_s, bins, WeightSign::Decreasing)
}

/// `f_c - w mu_c + w mu_s` per channel.
pub fn sain(f_c: &Tensor, f_s: &Tensor, w: ScaleWeight) -> Result<Tensor> {
    check_features(f_c, f_s)?;
    let mc = channel_moments(f_c)?;
    let ms = channel_moments(f_s)?;
    let shift: Vec<f64> = mc
        .mean
        .iter()
        .zip(&ms.mean)
        .map(|(c, s)| w.w * (s - c))
        .collect();
    shift_channels(f_c, &shift)
}
