//! Epsilon-prediction regression with hand-written backpropagation and
//! plain SGD.

use super::{ToyConfig, ToyDenoiser, Trace};
use crate::diffusion::{forward_noise, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numerics::{SeededRng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 200, lr: 0.01, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean squared noise error per epoch, measured before each update.
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn best(&self) -> f64 {
        self.epoch_losses.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

/// Column sums of a rank-2 tensor as a rank-1 tensor.
fn col_sums(t: &Tensor) -> Tensor {
    let mut out = vec![0.0; t.cols()];
    for i in 0..t.rows() {
        for (o, v) in out.iter_mut().zip(t.row(i)) {
            *o += v;
        }
    }
    Tensor::vector(out).expect("non-empty")
}

fn t_matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.transpose()?.matmul(b)
}

impl ToyDenoiser {
    /// Mean squared error between the predicted and true noise, with the trace
    /// needed for backpropagation.
    pub(crate) fn loss_traced(&self, x_t: &Tensor, t: usize, target: &Tensor) -> Result<(f64, Trace, Tensor)> {
        let (eps, trace) = self.forward_traced(x_t, t, None, None)?;
        let diff = eps.sub(target)?;
        let n = diff.len() as f64;
        let loss = diff.data().iter().map(|v| v * v).sum::<f64>() / n;
        let grad_eps = diff.scale(2.0 / n);
        Ok((loss, trace, grad_eps))
    }

    pub fn noise_loss(&self, x_t: &Tensor, t: usize, target: &Tensor) -> Result<f64> {
        Ok(self.loss_traced(x_t, t, target)?.0)
    }

    /// Gradient of [`Self::noise_loss`] with respect to every parameter, in
    /// [`Self::tensors`] order.
    pub fn noise_loss_grad(&self, x_t: &Tensor, t: usize, target: &Tensor) -> Result<(f64, Vec<Tensor>)> {
        let (loss, trace, grad_eps) = self.loss_traced(x_t, t, target)?;
        let grad_tokens = self.patchify(&grad_eps)?;
        Ok((loss, self.backward(&trace, &grad_tokens)?))
    }

    fn backward(&self, tr: &Trace, d_out: &Tensor) -> Result<Vec<Tensor>> {
        let d = self.config.dim as f64;
        let g_w_out = t_matmul(&tr.h_final, d_out)?;
        let g_b_out = col_sums(d_out);
        let mut dh = d_out.matmul_t(&self.w_out)?;

        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for (b, bt) in self.blocks.iter().zip(&tr.blocks).rev() {
            // h_next = h_mid + relu(h_mid W1 + b1) W2 + b2
            let g_w2 = t_matmul(&bt.act, &dh)?;
            let g_b2 = col_sums(&dh);
            let d_act = dh.matmul_t(&b.w2)?;
            let d_pre = d_act.zip_map(&bt.pre, |g, p| if p > 0.0 { g } else { 0.0 })?;
            let g_w1 = t_matmul(&bt.h_mid, &d_pre)?;
            let g_b1 = col_sums(&d_pre);
            let d_mid = dh.add(&d_pre.matmul_t(&b.w1)?)?;

            // h_mid = h_in + attn Wo
            let g_wo = t_matmul(&bt.attn, &d_mid)?;
            let d_attn = d_mid.matmul_t(&b.wo)?;

            // attn = softmax(q k^T / sqrt(d)) v
            let probs = bt
                .probs
                .as_ref()
                .ok_or_else(|| Error::Contract("cannot backpropagate through an override".into()))?;
            let d_v = t_matmul(probs, &d_attn)?;
            let d_p = d_attn.matmul_t(&bt.v)?;
            let mut d_s = d_p.clone();
            for i in 0..d_s.rows() {
                let p_row = probs.row(i);
                let dot: f64 = d_p.row(i).iter().zip(p_row).map(|(a, b)| a * b).sum();
                for (s, (&g, &p)) in d_s.row_mut(i).iter_mut().zip(d_p.row(i).iter().zip(p_row)) {
                    *s = p * (g - dot);
                }
            }
            let d_s = d_s.scale(1.0 / d.sqrt());
            let d_q = d_s.matmul(&bt.k)?;
            let d_k = t_matmul(&d_s, &bt.q)?;

            let g_wq = t_matmul(&bt.h_in, &d_q)?;
            let g_wk = t_matmul(&bt.h_in, &d_k)?;
            let g_wv = t_matmul(&bt.h_in, &d_v)?;
            dh = d_mid
                .add(&d_q.matmul_t(&b.wq)?)?
                .add(&d_k.matmul_t(&b.wk)?)?
                .add(&d_v.matmul_t(&b.wv)?)?;
            block_grads.push([g_wq, g_wk, g_wv, g_wo, g_w1, g_b1, g_w2, g_b2]);
        }
        block_grads.reverse();

        let g_w_in = t_matmul(&tr.patches, &dh)?;
        let g_b_in = col_sums(&dh);
        let mut g_time = Tensor::zeros(self.time.shape());
        g_time.row_mut(tr.t).copy_from_slice(g_b_in.data());

        let mut out = vec![g_w_in, g_b_in, g_time];
        for g in block_grads {
            out.extend(g);
        }
        out.extend([g_w_out, g_b_out]);
        Ok(out)
    }

    fn sgd_step(&mut self, grads: &[Tensor], lr: f64) {
        for (p, g) in self.tensors_mut().into_iter().zip(grads) {
            for (w, dw) in p.data_mut().iter_mut().zip(g.data()) {
                *w -= lr * dw;
            }
        }
    }
}

/// Images in `[0, 1]` are mapped to latents `2x - 1` before noising.
pub fn train(
    dataset: &[Tensor],
    s: &NoiseSchedule,
    config: ToyConfig,
    opts: &TrainConfig,
) -> Result<(ToyDenoiser, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Config("training needs a non-empty dataset".into()));
    }
    if config.steps != s.steps() {
        return Err(Error::Config(format!(
            "denoiser has {} steps, schedule has {}",
            config.steps,
            s.steps()
        )));
    }
    if !(opts.lr.is_finite() && opts.lr >= 0.0) {
        return Err(Error::Config(format!("learning rate must be finite and >= 0, got {}", opts.lr)));
    }
    let mut rng = SeededRng::new(opts.seed);
    let mut model = ToyDenoiser::init(config, rng.index(0, usize::MAX) as u64)?;
    let latents: Vec<Tensor> = dataset.iter().map(|img| img.map(|v| 2.0 * v - 1.0)).collect();
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let mut total = 0.0;
        for x0 in &latents {
            let t = rng.index(1, s.steps() + 1);
            let z = rng.normal_tensor(x0.shape(), 1.0);
            let x_t = forward_noise(x0, t, &z, s)?;
            let (loss, grads) = model
                .noise_loss_grad(&x_t, t, &z)
                .map_err(|e| Error::Training { epoch, reason: e.to_string() })?;
            if !loss.is_finite() {
                return Err(Error::Training { epoch, reason: format!("loss became {loss}") });
            }
            total += loss;
            model.sgd_step(&grads, opts.lr);
        }
        let mean = total / latents.len() as f64;
        if model.tensors().iter().any(|t| !t.is_finite()) {
            return Err(Error::Training { epoch, reason: "weights became non-finite".into() });
        }
        epoch_losses.push(mean);
    }
    Ok((model, TrainReport { epoch_losses }))
}
