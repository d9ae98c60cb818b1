//! A small attention-block noise predictor.
//!
//! Images `[H, W, C]` are cut into `patch x patch` tokens, embedded to
//! `dim` channels with an additive per-step time embedding, passed through
//! `blocks` residual single-head attention blocks with residual ReLU MLPs,
//! and projected back to patches. Each block can record its Q/K/V and can
//! have its attention replaced by an arbitrary fusion.

mod textures;
mod train;
mod weights;

use std::collections::BTreeMap;

pub use textures::{make_texture_dataset, stripes, Texture, TextureKind};
pub use train::{train, TrainConfig, TrainReport};
pub use weights::{decode_weights, encode_weights, load_weights, save_weights};

use crate::attention::{fused_attention, LogitBlock};
use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::numerics::{SeededRng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ToyConfig {
    pub patch: usize,
    pub channels: usize,
    pub dim: usize,
    pub blocks: usize,
    pub mlp_hidden: usize,
    /// Number of diffusion steps `T`; the time table has `T + 1` rows.
    pub steps: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { patch: 4, channels: 3, dim: 32, blocks: 4, mlp_hidden: 64, steps: 30 }
    }
}

impl ToyConfig {
    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.channels == 0 || self.dim == 0 || self.blocks == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config(format!("toy config has a zero extent: {self:?}")));
        }
        if self.steps == 0 {
            return Err(Error::Config("toy config needs at least one step".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDenoiser {
    pub config: ToyConfig,
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub time: Tensor,
    pub blocks: Vec<Block>,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

/// Q, K, V and attention output of one block in one forward call.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockTaps {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub output: Tensor,
}

/// Recording sink for one forward call at step `t`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureTaps {
    pub t: usize,
    pub requested: Vec<usize>,
    pub blocks: BTreeMap<usize, BlockTaps>,
    /// Residual stream after the last block, `[tokens x dim]`.
    pub hidden: Option<Tensor>,
}

impl FeatureTaps {
    pub fn for_blocks(blocks: &[usize]) -> Self {
        Self { requested: blocks.to_vec(), ..Default::default() }
    }

    pub fn get(&self, block: usize) -> Option<&BlockTaps> {
        self.blocks.get(&block)
    }
}

pub type AttentionFn<'a> = dyn Fn(&Tensor, &Tensor, &Tensor) -> Result<Tensor> + 'a;

/// Per-block replacements for self-attention, called as `f(Q, K, V)`.
#[derive(Default)]
pub struct AttentionOverride<'a> {
    per_block: BTreeMap<usize, Box<AttentionFn<'a>>>,
}

impl<'a> AttentionOverride<'a> {
    pub fn new() -> Self {
        Self { per_block: BTreeMap::new() }
    }

    pub fn insert(&mut self, block: usize, f: impl Fn(&Tensor, &Tensor, &Tensor) -> Result<Tensor> + 'a) {
        self.per_block.insert(block, Box::new(f));
    }

    pub fn with(mut self, block: usize, f: impl Fn(&Tensor, &Tensor, &Tensor) -> Result<Tensor> + 'a) -> Self {
        self.insert(block, f);
        self
    }

    pub fn is_empty(&self) -> bool {
        self.per_block.is_empty()
    }

    pub fn blocks(&self) -> impl Iterator<Item = usize> + '_ {
        self.per_block.keys().copied()
    }

    fn get(&self, block: usize) -> Option<&AttentionFn<'a>> {
        self.per_block.get(&block).map(|b| b.as_ref())
    }
}

pub(crate) struct BlockTrace {
    pub h_in: Tensor,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub probs: Option<Tensor>,
    pub attn: Tensor,
    pub h_mid: Tensor,
    pub pre: Tensor,
    pub act: Tensor,
}

pub(crate) struct Trace {
    pub t: usize,
    pub patches: Tensor,
    pub blocks: Vec<BlockTrace>,
    pub h_final: Tensor,
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

impl ToyDenoiser {
    /// Gaussian initialization scaled by fan-in.
    pub fn init(config: ToyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(seed);
        let (p, d, h) = (config.patch_len(), config.dim, config.mlp_hidden);
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let w_in = rng.normal_tensor(&[p, d], fan(p));
        let time = rng.normal_tensor(&[config.steps + 1, d], 0.5);
        let blocks = (0..config.blocks)
            .map(|_| Block {
                wq: rng.normal_tensor(&[d, d], fan(d)),
                wk: rng.normal_tensor(&[d, d], fan(d)),
                wv: rng.normal_tensor(&[d, d], fan(d)),
                wo: rng.normal_tensor(&[d, d], 0.5 * fan(d)),
                w1: rng.normal_tensor(&[d, h], fan(d)),
                b1: Tensor::zeros(&[h]),
                w2: rng.normal_tensor(&[h, d], 0.5 * fan(h)),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        let w_out = rng.normal_tensor(&[d, p], fan(d));
        Ok(Self {
            config,
            w_in,
            b_in: Tensor::zeros(&[d]),
            time,
            blocks,
            w_out,
            b_out: Tensor::zeros(&[p]),
        })
    }

    /// All-zero weights (the output is then `b_out` broadcast).
    pub fn zeros(config: ToyConfig) -> Result<Self> {
        let mut d = Self::init(config, 0)?;
        for t in d.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        Ok(d)
    }

    /// Parameters in a fixed order (also the weights-file order).
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.w_in, &self.b_in, &self.time];
        for b in &self.blocks {
            out.extend([&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.b1, &b.w2, &b.b2]);
        }
        out.extend([&self.w_out, &self.b_out]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.w_in, &mut self.b_in, &mut self.time];
        for b in &mut self.blocks {
            out.extend([
                &mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo, &mut b.w1, &mut b.b1, &mut b.w2,
                &mut b.b2,
            ]);
        }
        out.extend([&mut self.w_out, &mut self.b_out]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn token_grid(&self, image_shape: &[usize]) -> Result<(usize, usize)> {
        let &[h, w, c] = image_shape else {
            return Err(Error::Config(format!("expected an [H, W, C] image, got {image_shape:?}")));
        };
        let p = self.config.patch;
        if c != self.config.channels {
            return Err(Error::Config(format!(
                "image has {c} channels, denoiser expects {}",
                self.config.channels
            )));
        }
        if h % p != 0 || w % p != 0 {
            return Err(Error::Config(format!("image {h}x{w} is not divisible by patch {p}")));
        }
        Ok((h / p, w / p))
    }

    pub fn patchify(&self, x: &Tensor) -> Result<Tensor> {
        let (gh, gw) = self.token_grid(x.shape())?;
        let (p, c) = (self.config.patch, self.config.channels);
        let width = x.shape()[1];
        let mut out = Vec::with_capacity(x.len());
        for gr in 0..gh {
            for gc in 0..gw {
                for py in 0..p {
                    for px in 0..p {
                        let base = ((gr * p + py) * width + gc * p + px) * c;
                        out.extend_from_slice(&x.data()[base..base + c]);
                    }
                }
            }
        }
        Tensor::matrix(gh * gw, self.config.patch_len(), out)
    }

    pub fn unpatchify(&self, tokens: &Tensor, image_shape: &[usize]) -> Result<Tensor> {
        let (gh, gw) = self.token_grid(image_shape)?;
        let (p, c) = (self.config.patch, self.config.channels);
        let width = image_shape[1];
        let mut out = vec![0.0; image_shape.iter().product()];
        for gr in 0..gh {
            for gc in 0..gw {
                let row = tokens.row(gr * gw + gc);
                for py in 0..p {
                    for px in 0..p {
                        let base = ((gr * p + py) * width + gc * p + px) * c;
                        let src = (py * p + px) * c;
                        out[base..base + c].copy_from_slice(&row[src..src + c]);
                    }
                }
            }
        }
        Tensor::new(image_shape.to_vec(), out)
    }

    pub(crate) fn forward_traced(
        &self,
        x_t: &Tensor,
        t: usize,
        overrides: Option<&AttentionOverride<'_>>,
        mut taps: Option<&mut FeatureTaps>,
    ) -> Result<(Tensor, Trace)> {
        if t > self.config.steps {
            return Err(Error::Domain(format!(
                "step {t} outside the time table 0..={}",
                self.config.steps
            )));
        }
        let patches = self.patchify(x_t)?;
        let mut h = patches
            .matmul(&self.w_in)?
            .add_row(self.b_in.data())?
            .add_row(self.time.row(t))?;
        let mut traces = Vec::with_capacity(self.blocks.len());
        if let Some(sink) = taps.as_deref_mut() {
            sink.t = t;
            sink.blocks.clear();
        }
        for (l, b) in self.blocks.iter().enumerate() {
            let q = h.matmul(&b.wq)?;
            let k = h.matmul(&b.wk)?;
            let v = h.matmul(&b.wv)?;
            let (attn, probs) = match overrides.and_then(|o| o.get(l)) {
                Some(f) => {
                    let out = f(&q, &k, &v)?;
                    if out.shape() != q.shape() {
                        return Err(Error::Contract(format!(
                            "override for block {l} returned {:?}, expected {:?}",
                            out.shape(),
                            q.shape()
                        )));
                    }
                    (out, None)
                }
                None => {
                    let fused = fused_attention(&q, &[LogitBlock::new(&k, &v)])?;
                    (fused.output, Some(fused.weights))
                }
            };
            if let Some(sink) = taps.as_deref_mut() {
                if sink.requested.contains(&l) {
                    sink.blocks.insert(
                        l,
                        BlockTaps { q: q.clone(), k: k.clone(), v: v.clone(), output: attn.clone() },
                    );
                }
            }
            let h_mid = h.add(&attn.matmul(&b.wo)?)?;
            let pre = h_mid.matmul(&b.w1)?.add_row(b.b1.data())?;
            let act = pre.map(relu);
            let h_next = h_mid.add(&act.matmul(&b.w2)?.add_row(b.b2.data())?)?;
            traces.push(BlockTrace { h_in: h, q, k, v, probs, attn, h_mid, pre, act });
            h = h_next;
        }
        let out = h.matmul(&self.w_out)?.add_row(self.b_out.data())?;
        if let Some(sink) = taps {
            sink.hidden = Some(h.clone());
        }
        let eps = self.unpatchify(&out, x_t.shape())?;
        Ok((eps, Trace { t, patches, blocks: traces, h_final: h }))
    }

    /// Noise prediction with optional attention overrides and tap recording.
    pub fn forward(
        &self,
        x_t: &Tensor,
        t: usize,
        overrides: Option<&AttentionOverride<'_>>,
        taps: Option<&mut FeatureTaps>,
    ) -> Result<Tensor> {
        Ok(self.forward_traced(x_t, t, overrides, taps)?.0)
    }
}

impl Denoiser for ToyDenoiser {
    fn predict_noise(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self.forward(x_t, t, None, None)
    }
}
