//! The dual-path stylization engine.
//!
//! Content and style images are DDIM-inverted with the same denoiser and
//! schedule. The content latent `x_T` is optionally shifted toward the style
//! latent (scaled AdaIN), then the content path is denoised while, inside
//! the injection window, the chosen attention blocks fuse the style path's
//! keys and values taken at the same step.

mod metrics;
mod report;

pub use metrics::{
    deterministic_extractor, gram_matrix, gram_style_distance, perceptual_losses, DeterministicExtractor,
    FeatureExtractor,
};
pub use report::{diagnostics_csv, parse_diagnostics_csv};

use crate::attention::{attend, fused_attention, LogitBlock, StyleMask, DEFAULT_LAMBDA};
use crate::diffusion::{ddim_invert, ddim_update, predict_x0, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity_rows, Tensor};
use crate::sain::{sain, scale_weight_with, ScaleWeight, WeightSign, DEFAULT_BINS};
use crate::toy::{AttentionOverride, BlockTaps, FeatureTaps, ToyDenoiser};
use crate::video::{energy_update, GuidanceConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SainMode {
    Off,
    /// `w = exp(+KL)`.
    Printed,
    /// `w = exp(-KL)`.
    #[default]
    Prose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InjectionConfig {
    pub lambda: f64,
    /// Reverse-step indices `[start, end)`; step `k` denoises `t = T - k`.
    pub step_window: (usize, usize),
    pub blocks: Vec<usize>,
    pub sain: SainMode,
    pub sain_bins: usize,
    pub mask: Option<StyleMask>,
    /// Record the per-token cosine similarity between style-cross and
    /// self-attention at the first injected block.
    pub cosine_diagnostics: bool,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            step_window: (5, 30),
            blocks: vec![2, 3],
            sain: SainMode::Prose,
            sain_bins: DEFAULT_BINS,
            mask: None,
            cosine_diagnostics: false,
        }
    }
}

impl InjectionConfig {
    /// Default window scaled to `steps`: everything after the first sixth.
    pub fn for_steps(steps: usize) -> Self {
        Self { step_window: (steps / 6, steps), ..Self::default() }
    }

    pub fn validate(&self, steps: usize, blocks: usize, styles: usize) -> Result<()> {
        let (start, end) = self.step_window;
        if start > end || end > steps {
            return Err(Error::Config(format!(
                "step window {start}:{end} must satisfy start <= end <= T = {steps}"
            )));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if let Some(&b) = self.blocks.iter().find(|&&b| b >= blocks) {
            return Err(Error::Config(format!("block {b} outside 0..{blocks}")));
        }
        if styles == 0 {
            return Err(Error::Config("at least one style image is required".into()));
        }
        if self.mask.is_some() && styles > 1 {
            return Err(Error::Config("a style mask applies to a single style image".into()));
        }
        if self.sain_bins < 2 {
            return Err(Error::Config("SAIN histogram needs at least 2 bins".into()));
        }
        Ok(())
    }

    pub fn in_window(&self, step: usize) -> bool {
        (self.step_window.0..self.step_window.1).contains(&step)
    }
}

/// Style distances measured on the path latents (in image units) right
/// after each reverse step, so the last entry compares the output images.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDiagnostics {
    /// Reverse-step index `k`.
    pub step: usize,
    /// Noise level denoised at this step, `T - k`.
    pub t: usize,
    pub style_vs_stylized: f64,
    pub style_vs_content: f64,
    pub cosine: Option<Vec<f64>>,
}

/// Per-step record of one denoising path, indexed by reverse step.
#[derive(Clone, Debug, Default)]
pub struct PathRecord {
    pub taps: Vec<FeatureTaps>,
    pub x0_hats: Vec<Tensor>,
    pub states: Vec<Tensor>,
}

impl PathRecord {
    pub fn block(&self, step: usize, block: usize) -> Result<&BlockTaps> {
        self.taps
            .get(step)
            .and_then(|t| t.get(block))
            .ok_or_else(|| Error::Contract(format!("no taps for step {step}, block {block}")))
    }

}

#[derive(Clone, Debug)]
pub struct Stylized {
    /// Final image in `[0, 1]` units (not clamped).
    pub image: Tensor,
    pub diagnostics: Vec<StepDiagnostics>,
    /// SAIN weight applied to the content latent, when enabled.
    pub sain_weight: Option<ScaleWeight>,
    pub content_latent: Tensor,
    pub style_latent: Tensor,
    /// `x_T` of the stylized path (after SAIN).
    pub initial_latent: Tensor,
    pub record: PathRecord,
}

pub fn image_to_latent(img: &Tensor) -> Tensor {
    img.map(|v| 2.0 * v - 1.0)
}

pub fn latent_to_image(x: &Tensor) -> Tensor {
    x.map(|v| (v + 1.0) / 2.0)
}

fn image_features(latent: &Tensor) -> Result<Tensor> {
    as_features(&latent_to_image(latent))
}

fn as_features(x: &Tensor) -> Result<Tensor> {
    let c = *x.shape().last().expect("rank >= 1");
    x.clone().reshape(vec![x.len() / c, c])
}

/// Inversion of one input followed by a plain reverse pass that records taps.
pub(crate) struct ReferencePath {
    pub x_big_t: Tensor,
    pub record: PathRecord,
}

pub(crate) fn reference_path(
    img: &Tensor,
    d: &ToyDenoiser,
    s: &NoiseSchedule,
    blocks: &[usize],
) -> Result<ReferencePath> {
    let inv = ddim_invert(&image_to_latent(img), d, s)?;
    let x_big_t = inv.last().clone();
    let record = denoise(&x_big_t, d, s, blocks, |_, _| Ok(None), None)?;
    Ok(ReferencePath { x_big_t, record })
}

/// Inter-frame keys and values plus the guidance target for one video frame.
pub(crate) struct FrameLink<'a> {
    pub anchor: &'a PathRecord,
    pub prev: &'a PathRecord,
    pub guidance: GuidanceConfig,
}

/// Reverse pass from `x_big_t`, calling `overrides(step, t)` for each step.
fn denoise<'f, F>(
    x_big_t: &Tensor,
    d: &ToyDenoiser,
    s: &NoiseSchedule,
    blocks: &[usize],
    mut overrides: F,
    link: Option<(&FrameLink<'_>, &InjectionConfig)>,
) -> Result<PathRecord>
where
    F: FnMut(usize, usize) -> Result<Option<AttentionOverride<'f>>>,
{
    let big_t = s.steps();
    let mut rec = PathRecord::default();
    let mut x = x_big_t.clone();
    for step in 0..big_t {
        let t = big_t - step;
        let ov = overrides(step, t)?;
        let mut taps = FeatureTaps::for_blocks(blocks);
        let mut eps = d.forward(&x, t, ov.as_ref(), Some(&mut taps))?;
        if let Some((link, cfg)) = link {
            if link.guidance.applies(step, cfg) {
                let prev_x0 = link.prev.x0_hats.get(step).ok_or_else(|| {
                    Error::Contract(format!("previous frame has no x0 prediction at step {step}"))
                })?;
                let (guided, _) = energy_update(&x, &eps, t, s, prev_x0, &link.guidance)?;
                x = guided;
                eps = d.forward(&x, t, ov.as_ref(), Some(&mut taps))?;
            }
        }
        if taps.t != t {
            return Err(Error::Contract(format!("path desynchronized at step {step}")));
        }
        rec.x0_hats.push(predict_x0(&x, &eps, t, s)?);
        rec.states.push(x.clone());
        x = ddim_update(&x, &eps, t, s, None)?;
        rec.taps.push(taps);
    }
    rec.states.push(x);
    Ok(rec)
}

fn fused_content_block(
    q: &Tensor,
    content: (&Tensor, &Tensor),
    styles: &[(&Tensor, &Tensor)],
    lambda: f64,
    mask: Option<&StyleMask>,
) -> Result<Tensor> {
    let mut blocks: Vec<LogitBlock<'_>> = styles
        .iter()
        .map(|&(k, v)| {
            let b = LogitBlock::new(k, v).scaled(lambda);
            match mask {
                Some(m) => b.masked(m),
                None => b,
            }
        })
        .collect();
    blocks.push(LogitBlock::new(content.0, content.1));
    Ok(fused_attention(q, &blocks)?.output)
}

/// Stylizes `content` with one or more `styles` (all `[H, W, C]` in `[0, 1]`).
pub fn stylize(
    content: &Tensor,
    styles: &[Tensor],
    d: &ToyDenoiser,
    s: &NoiseSchedule,
    cfg: &InjectionConfig,
) -> Result<Stylized> {
    let refs = style_references(content, styles, d, s, cfg)?;
    stylize_with_references(content, &refs, d, s, cfg, None)
}

pub(crate) fn style_references(
    content: &Tensor,
    styles: &[Tensor],
    d: &ToyDenoiser,
    s: &NoiseSchedule,
    cfg: &InjectionConfig,
) -> Result<Vec<ReferencePath>> {
    cfg.validate(s.steps(), d.config.blocks, styles.len())?;
    if d.config.steps != s.steps() {
        return Err(Error::Config(format!(
            "denoiser trained for {} steps, schedule has {}",
            d.config.steps,
            s.steps()
        )));
    }
    d.token_grid(content.shape())?;
    if let Some(bad) = styles.iter().find(|st| st.shape() != content.shape()) {
        return Err(Error::Config(format!(
            "style shape {:?} differs from content shape {:?}",
            bad.shape(),
            content.shape()
        )));
    }
    styles.iter().map(|st| reference_path(st, d, s, &cfg.blocks)).collect()
}

pub(crate) fn stylize_with_references(
    content: &Tensor,
    refs: &[ReferencePath],
    d: &ToyDenoiser,
    s: &NoiseSchedule,
    cfg: &InjectionConfig,
    link: Option<&FrameLink<'_>>,
) -> Result<Stylized> {
    let plain = reference_path(content, d, s, &cfg.blocks)?;
    let primary = &refs[0];

    let (initial, sain_weight) = match cfg.sain {
        SainMode::Off => (plain.x_big_t.clone(), None),
        mode => {
            let sign = if mode == SainMode::Printed { WeightSign::Printed } else { WeightSign::Decreasing };
            let fc = as_features(&plain.x_big_t)?;
            let fs = as_features(&primary.x_big_t)?;
            let w = scale_weight_with(&fc, &fs, cfg.sain_bins, sign)?;
            let adjusted = sain(&fc, &fs, w)?.reshape(plain.x_big_t.shape().to_vec())?;
            (adjusted, Some(w))
        }
    };

    let lambda = cfg.lambda;
    let mask = cfg.mask.as_ref();
    let factory = |step: usize, t: usize| -> Result<Option<AttentionOverride<'_>>> {
        if !cfg.in_window(step) || cfg.blocks.is_empty() {
            return Ok(None);
        }
        let mut ov = AttentionOverride::new();
        for &block in &cfg.blocks {
            let mut style_kv = Vec::with_capacity(refs.len());
            for r in refs {
                let taps = r.record.block(step, block)?;
                if r.record.taps[step].t != t {
                    return Err(Error::Contract(format!("style path desynchronized at step {step}")));
                }
                style_kv.push((&taps.k, &taps.v));
            }
            let frame_kv = match link {
                Some(l) => {
                    let a = l.anchor.block(step, block)?;
                    let p = l.prev.block(step, block)?;
                    Some((Tensor::vstack(&[&a.k, &p.k])?, Tensor::vstack(&[&a.v, &p.v])?))
                }
                None => None,
            };
            ov.insert(block, move |q: &Tensor, k: &Tensor, v: &Tensor| {
                let content_kv = match &frame_kv {
                    Some((fk, fv)) => (fk, fv),
                    None => (k, v),
                };
                fused_content_block(q, content_kv, &style_kv, lambda, mask)
            });
        }
        Ok(Some(ov))
    };
    let record = denoise(&initial, d, s, &cfg.blocks, factory, link.map(|l| (l, cfg)))?;

    let big_t = s.steps();
    let mut diagnostics = Vec::with_capacity(big_t);
    for step in 0..big_t {
        // state after denoising step `step`, in image units
        let style_x = image_features(&primary.record.states[step + 1])?;
        let cosine = match (cfg.cosine_diagnostics && cfg.in_window(step), cfg.blocks.first()) {
            (true, Some(&b)) => {
                let c = record.block(step, b)?;
                let st = primary.record.block(step, b)?;
                let cross = attend(&c.q, &st.k, &st.v)?;
                let own = attend(&c.q, &c.k, &c.v)?;
                cosine_similarity_rows(&cross, &own).ok().map(Tensor::into_data)
            }
            _ => None,
        };
        diagnostics.push(StepDiagnostics {
            step,
            t: big_t - step,
            style_vs_stylized: gram_style_distance(&style_x, &image_features(&record.states[step + 1])?)?,
            style_vs_content: gram_style_distance(&style_x, &image_features(&plain.record.states[step + 1])?)?,
            cosine,
        });
    }

    let final_latent = record.states.last().expect("non-empty").clone();
    Ok(Stylized {
        image: latent_to_image(&final_latent),
        diagnostics,
        sain_weight,
        content_latent: plain.x_big_t,
        style_latent: primary.x_big_t.clone(),
        initial_latent: initial,
        record,
    })
}

/// Plain invert-then-reverse reconstruction of `img` through `d`.
pub fn reconstruct(img: &Tensor, d: &ToyDenoiser, s: &NoiseSchedule) -> Result<Tensor> {
    let r = reference_path(img, d, s, &[])?;
    Ok(latent_to_image(r.record.states.last().expect("non-empty")))
}
