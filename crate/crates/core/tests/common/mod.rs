#![allow(dead_code)]

use zstyle::diffusion::{make_schedule, NoiseSchedule, ScheduleKind};
use zstyle::numerics::{SeededRng, Tensor};
use zstyle::toy::{make_texture_dataset, train, TextureKind, ToyConfig, ToyDenoiser, TrainConfig};

pub struct Instance {
    pub qc: Tensor,
    pub kc: Tensor,
    pub vc: Tensor,
    pub ks: Tensor,
    pub vs: Tensor,
}

/// `n` content tokens, `m` style tokens, head dimension `d`.
pub fn instance(rng: &mut SeededRng, n: usize, m: usize, d: usize, scale: f64) -> Instance {
    Instance {
        qc: rng.normal_tensor(&[n, d], scale),
        kc: rng.normal_tensor(&[n, d], scale),
        vc: rng.normal_tensor(&[n, d], 1.0),
        ks: rng.normal_tensor(&[m, d], scale),
        vs: rng.normal_tensor(&[m, d], 1.0),
    }
}

pub fn random_instance(rng: &mut SeededRng, max_tokens: usize, max_d: usize) -> Instance {
    let n = rng.index(1, max_tokens + 1);
    let m = rng.index(1, max_tokens + 1);
    let d = rng.index(1, max_d + 1);
    instance(rng, n, m, d, 1.0)
}

/// One block of logits for [`oracle_attention`]: keys, values, logit scale
/// and an additive per-column offset.
pub struct Block<'a> {
    pub keys: &'a Tensor,
    pub values: &'a Tensor,
    pub scale: f64,
    pub offsets: Vec<f64>,
}

impl<'a> Block<'a> {
    pub fn new(keys: &'a Tensor, values: &'a Tensor, scale: f64) -> Self {
        Self { keys, values, scale, offsets: vec![0.0; keys.rows()] }
    }
}

/// Triple-loop softmax attention over concatenated blocks.
pub fn oracle_attention(q: &Tensor, blocks: &[Block<'_>]) -> Tensor {
    let d = q.cols() as f64;
    let vdim = blocks[0].values.cols();
    let mut out = Vec::with_capacity(q.rows() * vdim);
    for i in 0..q.rows() {
        let mut logits = Vec::new();
        let mut vals: Vec<&[f64]> = Vec::new();
        for b in blocks {
            for j in 0..b.keys.rows() {
                let dot: f64 = q.row(i).iter().zip(b.keys.row(j)).map(|(a, c)| a * c).sum();
                logits.push(b.scale * dot / d.sqrt() + b.offsets[j]);
                vals.push(b.values.row(j));
            }
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = w.iter().sum();
        for c in 0..vdim {
            out.push(w.iter().zip(&vals).map(|(wi, v)| wi * v[c]).sum::<f64>() / z);
        }
    }
    Tensor::matrix(q.rows(), vdim, out).unwrap()
}

/// Max absolute difference relative to the larger magnitude of the two.
pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let scale = a.max_abs().max(b.max_abs()).max(1e-300);
    a.max_abs_diff(b).unwrap() / scale
}

pub const TRAIN_SEED: u64 = 0;

pub fn schedule() -> NoiseSchedule {
    make_schedule(30, ScheduleKind::default()).unwrap()
}

/// The default toy denoiser trained on 24 mixed 16x16 textures.
pub fn trained_toy(s: &NoiseSchedule) -> ToyDenoiser {
    let kinds = [TextureKind::Stripes, TextureKind::Dots, TextureKind::GaussianBlobs];
    let data: Vec<Tensor> = make_texture_dataset(&kinds, 24, 16, TRAIN_SEED).into_iter().map(|t| t.image).collect();
    let cfg = ToyConfig { steps: s.steps(), ..ToyConfig::default() };
    train(&data, s, cfg, &TrainConfig { seed: TRAIN_SEED, ..TrainConfig::default() }).unwrap().0
}

/// Eight stripes-content / dots-or-blobs-style pairs.
pub fn gram_corpus() -> Vec<(Tensor, Tensor)> {
    let contents = make_texture_dataset(&[TextureKind::Stripes], 8, 16, 101);
    let styles = make_texture_dataset(&[TextureKind::Dots, TextureKind::GaussianBlobs], 8, 16, 202);
    contents.into_iter().zip(styles).map(|(c, s)| (c.image, s.image)).collect()
}

/// Largest relative deviation between the analytic training gradient of a
/// small toy network and central finite differences, over `samples`
/// coordinates drawn from every parameter tensor.
pub fn toy_gradient_check(seed: u64, samples: usize) -> f64 {
    let cfg = ToyConfig { patch: 2, channels: 3, dim: 8, blocks: 2, mlp_hidden: 12, steps: 10 };
    let mut rng = SeededRng::new(seed);
    let model = ToyDenoiser::init(cfg, seed).unwrap();
    let x_t = rng.normal_tensor(&[6, 4, 3], 1.0);
    let target = rng.normal_tensor(&[6, 4, 3], 1.0);
    let t = 4;
    let (_, grads) = model.noise_loss_grad(&x_t, t, &target).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (p, grad) in grads.iter().enumerate() {
        for _ in 0..samples {
            let idx = rng.index(0, grad.len());
            let probe = |delta: f64| {
                let mut m = model.clone();
                m.tensors_mut()[p].data_mut()[idx] += delta;
                m.noise_loss(&x_t, t, &target).unwrap()
            };
            let numeric = (probe(h) - probe(-h)) / (2.0 * h);
            let analytic = grad.data()[idx];
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    worst
}

/// Four 16x16 frames of vertical stripes translating one pixel per frame.
pub fn translating_clip(period: usize) -> Vec<Tensor> {
    let (bg, fg) = ([0.2, 0.25, 0.3], [0.85, 0.8, 0.6]);
    (0..4).map(|i| zstyle::toy::stripes(16, period, true, i, bg, fg)).collect()
}

pub fn video_style() -> Tensor {
    make_texture_dataset(&[TextureKind::Dots], 1, 16, 202).remove(0).image
}

/// Largest relative deviation between the guidance-energy gradient and
/// central finite differences of the energy, with the noise estimate frozen.
pub fn energy_gradient_check(seed: u64, samples: usize) -> f64 {
    use zstyle::video::{guidance_energy, guidance_gradient};
    let s = schedule();
    let mut rng = SeededRng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let t = rng.index(1, s.steps() + 1);
        let x = rng.normal_tensor(&[4, 4, 3], 1.0);
        let eps = rng.normal_tensor(&[4, 4, 3], 1.0);
        let prev = rng.normal_tensor(&[4, 4, 3], 1.0);
        let grad = guidance_gradient(&x, &eps, t, &s, &prev).unwrap();
        let idx = rng.index(0, x.len());
        let h = 1e-5;
        let energy = |delta: f64| {
            let mut y = x.clone();
            y.data_mut()[idx] += delta;
            guidance_energy(&y, &eps, t, &s, &prev).unwrap()
        };
        let numeric = (energy(h) - energy(-h)) / (2.0 * h);
        let analytic = grad.data()[idx];
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6));
    }
    worst
}
