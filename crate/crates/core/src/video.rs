//! Video stylization: inter-frame key/value sharing, noise-free-domain
//! guidance between consecutive frames, and temporal consistency metrics.

use crate::attention::attend;
use crate::diffusion::{checked_noise, ddim_step, predict_x0, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::pipeline::{style_references, stylize_with_references, FrameLink, InjectionConfig, Stylized};
use crate::toy::ToyDenoiser;

pub const DEFAULT_GUIDANCE_WEIGHT: f64 = 0.05;

/// Keys and values of the anchor (first) and previous frames at one block.
#[derive(Clone, Copy, Debug)]
pub struct FrameContext<'a> {
    pub k0: &'a Tensor,
    pub v0: &'a Tensor,
    pub k_prev: &'a Tensor,
    pub v_prev: &'a Tensor,
}

/// Attention of the current frame's queries over `[K0; K_prev]`, `[V0; V_prev]`.
pub fn interframe_attend(q: &Tensor, k: &Tensor, v: &Tensor, ctx: &FrameContext<'_>) -> Result<Tensor> {
    for (name, t, want) in [
        ("K0", ctx.k0, k),
        ("K_prev", ctx.k_prev, k),
        ("V0", ctx.v0, v),
        ("V_prev", ctx.v_prev, v),
    ] {
        if t.shape() != want.shape() {
            return Err(Error::Contract(format!(
                "{name} has shape {:?}, current frame has {:?}",
                t.shape(),
                want.shape()
            )));
        }
    }
    attend(q, &Tensor::vstack(&[ctx.k0, ctx.k_prev])?, &Tensor::vstack(&[ctx.v0, ctx.v_prev])?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceConfig {
    /// Step size `w_g` of the latent update.
    pub weight: f64,
    /// Reverse-step range `[start, end)`; `None` follows the injection window.
    pub steps: Option<(usize, usize)>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { weight: DEFAULT_GUIDANCE_WEIGHT, steps: None }
    }
}

impl GuidanceConfig {
    pub fn off() -> Self {
        Self { weight: 0.0, steps: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weight.is_finite() && self.weight >= 0.0) {
            return Err(Error::Config(format!("guidance weight must be finite and >= 0, got {}", self.weight)));
        }
        Ok(())
    }

    pub(crate) fn applies(&self, step: usize, cfg: &InjectionConfig) -> bool {
        let (lo, hi) = self.steps.unwrap_or(cfg.step_window);
        self.weight > 0.0 && (lo..hi).contains(&step)
    }
}

/// `½‖x̂₀(x_t, ε̂) − x̂₀_prev‖²` with `ε̂` held fixed.
pub fn guidance_energy(x_t: &Tensor, eps: &Tensor, t: usize, s: &NoiseSchedule, prev_x0: &Tensor) -> Result<f64> {
    let diff = predict_x0(x_t, eps, t, s)?.sub(prev_x0)?;
    Ok(0.5 * diff.data().iter().map(|v| v * v).sum::<f64>())
}

/// Gradient of [`guidance_energy`] with respect to `x_t`.
pub fn guidance_gradient(x_t: &Tensor, eps: &Tensor, t: usize, s: &NoiseSchedule, prev_x0: &Tensor) -> Result<Tensor> {
    let diff = predict_x0(x_t, eps, t, s)?.sub(prev_x0)?;
    Ok(diff.scale(1.0 / s.alpha(t).sqrt()))
}

/// One guidance update `x_t - w_g ∇E`. Also returns the unsquared distance
/// `‖x̂₀ − x̂₀_prev‖` before the update.
pub fn energy_update(
    x_t: &Tensor,
    eps: &Tensor,
    t: usize,
    s: &NoiseSchedule,
    prev_x0: &Tensor,
    g: &GuidanceConfig,
) -> Result<(Tensor, f64)> {
    g.validate()?;
    if prev_x0.shape() != x_t.shape() {
        return Err(Error::Dimension(format!(
            "previous prediction {:?} does not match latent {:?}",
            prev_x0.shape(),
            x_t.shape()
        )));
    }
    let grad = guidance_gradient(x_t, eps, t, s, prev_x0)?;
    let distance = grad.frobenius_norm() * s.alpha(t).sqrt();
    Ok((x_t.lincomb(1.0, &grad, -g.weight)?, distance))
}

/// Guidance update followed by a plain DDIM step from the updated latent.
pub fn energy_guidance_step<D: Denoiser + ?Sized>(
    x_t: &Tensor,
    t: usize,
    d: &D,
    s: &NoiseSchedule,
    prev_x0: &Tensor,
    g: &GuidanceConfig,
) -> Result<Tensor> {
    let eps = checked_noise(d, x_t, t)?;
    let (guided, _) = energy_update(x_t, &eps, t, s, prev_x0, g)?;
    ddim_step(&guided, t, d, s, None)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyReport {
    pub mean_diff: f64,
    /// Population variance of `diffs`.
    pub var_diff: f64,
    /// `‖F_i − F_{i−1}‖` for `i = 1..n`.
    pub diffs: Vec<f64>,
}

impl ConsistencyReport {
    pub fn empty() -> Self {
        Self { mean_diff: 0.0, var_diff: 0.0, diffs: Vec::new() }
    }

    /// Rows `i,diff_i` after an `i,diff` header, then a `mean,var` trailer row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("i,diff\n");
        for (i, d) in self.diffs.iter().enumerate() {
            out.push_str(&format!("{},{d}\n", i + 1));
        }
        out.push_str(&format!("{},{}\n", self.mean_diff, self.var_diff));
        out
    }
}

pub fn consistency_report(frames: &[Tensor]) -> Result<ConsistencyReport> {
    if frames.len() < 2 {
        return Err(Error::Domain(format!("consistency needs at least 2 frames, got {}", frames.len())));
    }
    let diffs = frames
        .windows(2)
        .map(|w| Ok(w[1].sub(&w[0])?.frobenius_norm()))
        .collect::<Result<Vec<f64>>>()?;
    let n = diffs.len() as f64;
    let mean_diff = diffs.iter().sum::<f64>() / n;
    let var_diff = diffs.iter().map(|d| (d - mean_diff).powi(2)).sum::<f64>() / n;
    Ok(ConsistencyReport { mean_diff, var_diff, diffs })
}

#[derive(Clone, Debug)]
pub struct VideoOutput {
    pub frames: Vec<Stylized>,
    pub report: ConsistencyReport,
}

impl VideoOutput {
    pub fn images(&self) -> Vec<Tensor> {
        self.frames.iter().map(|f| f.image.clone()).collect()
    }
}

/// Stylizes a clip frame by frame. The style path is computed once.
pub fn stylize_video(
    frames: &[Tensor],
    style: &Tensor,
    d: &ToyDenoiser,
    s: &NoiseSchedule,
    cfg: &InjectionConfig,
    g: &GuidanceConfig,
) -> Result<VideoOutput> {
    let first = frames.first().ok_or_else(|| Error::Config("a clip needs at least one frame".into()))?;
    g.validate()?;
    if let Some(bad) = frames.iter().find(|f| f.shape() != first.shape()) {
        return Err(Error::Config(format!(
            "frame shape {:?} differs from the first frame {:?}",
            bad.shape(),
            first.shape()
        )));
    }
    let refs = style_references(first, std::slice::from_ref(style), d, s, cfg)?;
    let mut out: Vec<Stylized> = Vec::with_capacity(frames.len());
    for (i, frame) in frames.iter().enumerate() {
        let next = if i == 0 {
            stylize_with_references(frame, &refs, d, s, cfg, None)?
        } else {
            let link = FrameLink { anchor: &out[0].record, prev: &out[i - 1].record, guidance: *g };
            stylize_with_references(frame, &refs, d, s, cfg, Some(&link))?
        };
        out.push(next);
    }
    let report = if out.len() < 2 {
        ConsistencyReport::empty()
    } else {
        consistency_report(&out.iter().map(|f| f.image.clone()).collect::<Vec<_>>())?
    };
    Ok(VideoOutput { frames: out, report })
}
