//! Style distances and perceptual losses.

use crate::error::{Error, Result};
use crate::numerics::{channel_moments, SeededRng, Tensor};

/// Uncentered channel covariance `XᵀX / (N·d)` of `[N, d]` features.
pub fn gram_matrix(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::Dimension(format!("features must be [N, d], got {:?}", x.shape())));
    }
    let norm = (x.rows() * x.cols()) as f64;
    Ok(x.transpose()?.matmul(x)?.scale(1.0 / norm))
}

/// Frobenius distance between the Gram matrices of two feature sets.
pub fn gram_style_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Domain("empty features".into()));
    }
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
        return Err(Error::Dimension(format!(
            "features need a shared channel count, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(gram_matrix(a)?.sub(&gram_matrix(b)?)?.frobenius_norm())
}

/// A frozen feature extractor producing one `[h, w, c]` map per stage.
pub trait FeatureExtractor {
    fn features(&self, img: &Tensor) -> Result<Vec<Tensor>>;
}

#[derive(Clone, Debug, PartialEq)]
struct ConvStage {
    /// `[out, in·9]`, row-major over `(in, dy, dx)`.
    weights: Tensor,
    bias: Vec<f64>,
}

/// Five stride-2 3×3 convolutions with tanh, weights drawn from a seed.
#[derive(Clone, Debug, PartialEq)]
pub struct DeterministicExtractor {
    stages: Vec<ConvStage>,
}

const STAGE_CHANNELS: [usize; 5] = [8, 16, 16, 32, 32];

impl DeterministicExtractor {
    pub fn new(seed: u64, in_channels: usize) -> Self {
        let mut rng = SeededRng::new(seed);
        let mut c_in = in_channels;
        let stages = STAGE_CHANNELS
            .iter()
            .map(|&c_out| {
                let fan_in = c_in * 9;
                let weights = rng.normal_tensor(&[c_out, fan_in], (1.0 / fan_in as f64).sqrt());
                let bias = (0..c_out).map(|_| rng.normal() * 0.1).collect();
                c_in = c_out;
                ConvStage { weights, bias }
            })
            .collect();
        Self { stages }
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }
}

/// RGB extractor with weights drawn from `seed`.
pub fn deterministic_extractor(seed: u64) -> DeterministicExtractor {
    DeterministicExtractor::new(seed, 3)
}

fn conv_stride2(x: &Tensor, stage: &ConvStage) -> Result<Tensor> {
    let &[h, w, c] = x.shape() else {
        return Err(Error::Dimension(format!("expected [H, W, C], got {:?}", x.shape())));
    };
    if stage.weights.cols() != c * 9 {
        return Err(Error::Dimension(format!(
            "stage expects {} input channels, got {c}",
            stage.weights.cols() / 9
        )));
    }
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let c_out = stage.weights.rows();
    let mut out = Vec::with_capacity(oh * ow * c_out);
    let mut patch = vec![0.0; c * 9];
    for oy in 0..oh {
        for ox in 0..ow {
            for ci in 0..c {
                for dy in 0..3 {
                    for dx in 0..3 {
                        let y = (2 * oy + dy) as isize - 1;
                        let x_ = (2 * ox + dx) as isize - 1;
                        patch[ci * 9 + dy * 3 + dx] = if y < 0 || x_ < 0 || y >= h as isize || x_ >= w as isize {
                            0.0
                        } else {
                            x.data()[(y as usize * w + x_ as usize) * c + ci]
                        };
                    }
                }
            }
            for co in 0..c_out {
                let z: f64 = stage.weights.row(co).iter().zip(&patch).map(|(a, b)| a * b).sum();
                out.push((z + stage.bias[co]).tanh());
            }
        }
    }
    Tensor::new(vec![oh, ow, c_out], out)
}

impl FeatureExtractor for DeterministicExtractor {
    fn features(&self, img: &Tensor) -> Result<Vec<Tensor>> {
        let mut maps = Vec::with_capacity(self.stages.len());
        let mut x = img.clone();
        for stage in &self.stages {
            x = conv_stride2(&x, stage)?;
            maps.push(x.clone());
        }
        Ok(maps)
    }
}

fn flat_features(map: &Tensor) -> Result<Tensor> {
    let c = *map.shape().last().expect("rank >= 1");
    map.clone().reshape(vec![map.len() / c, c])
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `(L_c, L_s)`: content distance at the deepest stage and the stage-mean of
/// channel mean and variance distances.
pub fn perceptual_losses(
    result: &Tensor,
    content: &Tensor,
    style: &Tensor,
    ext: &dyn FeatureExtractor,
) -> Result<(f64, f64)> {
    let fr = ext.features(result)?;
    let fc = ext.features(content)?;
    let fs = ext.features(style)?;
    if fr.is_empty() || fr.len() != fc.len() || fr.len() != fs.len() {
        return Err(Error::Contract(format!(
            "extractor returned {}, {} and {} stages",
            fr.len(),
            fc.len(),
            fs.len()
        )));
    }
    let deepest = fr.len() - 1;
    let l_c = fr[deepest].sub(&fc[deepest])?.frobenius_norm();
    let mut l_s = 0.0;
    for (r, s) in fr.iter().zip(&fs) {
        let mr = channel_moments(&flat_features(r)?)?;
        let ms = channel_moments(&flat_features(s)?)?;
        l_s += l2(&mr.mean, &ms.mean) + l2(&mr.variance, &ms.variance);
    }
    Ok((l_c, l_s / fr.len() as f64))
}
