//! Noise schedules, forward corruption, the deterministic DDIM update and
//! DDIM inversion over any [`Denoiser`].

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{load_zten, save_zten, Tensor};

/// Offset used by the cosine schedule unless overridden.
pub const COSINE_OFFSET: f64 = 0.008;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScheduleKind {
    /// `alpha_t = 1 - (1 - alpha_min) * t / T`.
    LinearAlphaBar { alpha_min: f64 },
    /// `alpha_t = alpha_min + (1 - alpha_min) f(t) / f(0)` for `t >= 1`,
    /// `f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2)`.
    Cosine { offset: f64, alpha_min: f64 },
}

impl Default for ScheduleKind {
    fn default() -> Self {
        ScheduleKind::LinearAlphaBar { alpha_min: 0.01 }
    }
}

/// Cumulative signal levels `alpha_0..=alpha_T` plus per-step `sigma_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        let sigmas = vec![0.0; alphas.len()];
        Self::with_sigmas(alphas, sigmas)
    }

    pub fn with_sigmas(alphas: Vec<f64>, sigmas: Vec<f64>) -> Result<Self> {
        if alphas.len() < 2 {
            return Err(Error::Config("a schedule needs at least one step".into()));
        }
        if sigmas.len() != alphas.len() {
            return Err(Error::Config("sigma policy length must equal alpha length".into()));
        }
        if alphas[0] != 1.0 {
            return Err(Error::Config(format!("alpha_0 must be 1, got {}", alphas[0])));
        }
        if alphas.iter().any(|a| !a.is_finite() || *a < 0.0 || *a > 1.0) {
            return Err(Error::Config("alphas must lie in [0, 1]".into()));
        }
        for t in 2..alphas.len() {
            if alphas[t] >= alphas[t - 1] {
                return Err(Error::Config(format!(
                    "alphas must strictly decrease on (0, T]: alpha_{} = {} >= alpha_{} = {}",
                    t,
                    alphas[t],
                    t - 1,
                    alphas[t - 1]
                )));
            }
        }
        if sigmas.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::Config("sigmas must be finite and non-negative".into()));
        }
        Ok(Self { alphas, sigmas })
    }

    pub fn steps(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn is_deterministic(&self) -> bool {
        self.sigmas.iter().all(|&s| s == 0.0)
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::Domain(format!("step {t} outside schedule 0..={}", self.steps())));
        }
        Ok(())
    }
}

pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs T >= 1".into()));
    }
    let big_t = steps as f64;
    let alphas = match kind {
        ScheduleKind::LinearAlphaBar { alpha_min } => {
            if !(0.0..1.0).contains(&alpha_min) {
                return Err(Error::Config(format!("alpha_min must be in [0, 1), got {alpha_min}")));
            }
            (0..=steps)
                .map(|t| {
                    let r = t as f64 / big_t;
                    (1.0 - r) + r * alpha_min
                })
                .collect()
        }
        ScheduleKind::Cosine { offset, alpha_min } => {
            if !(offset > 0.0 && offset.is_finite()) {
                return Err(Error::Config(format!("cosine offset must be positive, got {offset}")));
            }
            if !(0.0..1.0).contains(&alpha_min) {
                return Err(Error::Config(format!("alpha_min must be in [0, 1), got {alpha_min}")));
            }
            let f = |t: f64| {
                let c = ((t / big_t + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2).cos();
                c * c
            };
            let f0 = f(0.0);
            (0..=steps)
                .map(|t| if t == 0 { 1.0 } else { alpha_min + (1.0 - alpha_min) * f(t as f64) / f0 })
                .collect()
        }
    };
    NoiseSchedule::from_alphas(alphas)
}

/// A noise predictor `eps(x_t, t)`; must be deterministic and shape-preserving.
pub trait Denoiser {
    fn predict_noise(&self, x_t: &Tensor, t: usize) -> Result<Tensor>;
}

impl<F> Denoiser for F
where
    F: Fn(&Tensor, usize) -> Result<Tensor>,
{
    fn predict_noise(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self(x_t, t)
    }
}

pub(crate) fn checked_noise<D: Denoiser + ?Sized>(d: &D, x_t: &Tensor, t: usize) -> Result<Tensor> {
    let eps = d.predict_noise(x_t, t)?;
    if eps.shape() != x_t.shape() {
        return Err(Error::Contract(format!(
            "denoiser returned shape {:?} for input {:?}",
            eps.shape(),
            x_t.shape()
        )));
    }
    Ok(eps)
}

/// `sqrt(alpha_t) x0 + sqrt(1 - alpha_t) z`.
pub fn forward_noise(x0: &Tensor, t: usize, z: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    s.check_step(t)?;
    let a = s.alpha(t);
    x0.lincomb(a.sqrt(), z, (1.0 - a).sqrt())
}

/// Noise-free estimate `(x_t - sqrt(1 - alpha_t) eps) / sqrt(alpha_t)`.
pub fn predict_x0(x_t: &Tensor, eps_hat: &Tensor, t: usize, s: &NoiseSchedule) -> Result<Tensor> {
    s.check_step(t)?;
    let a = s.alpha(t);
    if a == 0.0 {
        return Err(Error::SingularStep(t));
    }
    let inv = 1.0 / a.sqrt();
    x_t.lincomb(inv, eps_hat, -(1.0 - a).sqrt() * inv)
}

/// One reverse update `t -> t-1` given an already evaluated noise prediction.
pub fn ddim_update(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    s: &NoiseSchedule,
    z: Option<&Tensor>,
) -> Result<Tensor> {
    if t == 0 {
        return Err(Error::Domain("reverse step needs t >= 1".into()));
    }
    s.check_step(t)?;
    let x0_hat = predict_x0(x_t, eps_hat, t, s)?;
    let a_prev = s.alpha(t - 1);
    let sigma = s.sigma(t);
    let dir = 1.0 - a_prev - sigma * sigma;
    if dir < 0.0 {
        return Err(Error::Config(format!(
            "sigma_{t}^2 = {} exceeds 1 - alpha_{} = {}",
            sigma * sigma,
            t - 1,
            1.0 - a_prev
        )));
    }
    let mut out = x0_hat.lincomb(a_prev.sqrt(), eps_hat, dir.sqrt())?;
    if sigma > 0.0 {
        let z = z.ok_or_else(|| {
            Error::Config(format!("sigma_{t} > 0 requires a noise sample"))
        })?;
        out = out.lincomb(1.0, z, sigma)?;
    }
    Ok(out)
}

pub fn ddim_step<D: Denoiser + ?Sized>(
    x_t: &Tensor,
    t: usize,
    d: &D,
    s: &NoiseSchedule,
    z: Option<&Tensor>,
) -> Result<Tensor> {
    if t == 0 {
        return Err(Error::Domain("reverse step needs t >= 1".into()));
    }
    s.check_step(t)?;
    let eps = checked_noise(d, x_t, t)?;
    ddim_update(x_t, &eps, t, s, z)
}

/// One inversion update `t -> t+1`, reusing `eps` evaluated at the current state.
pub fn ddim_inverse_update(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    if t >= s.steps() {
        return Err(Error::Domain(format!("inversion step from t={t} leaves the schedule")));
    }
    let x0_hat = predict_x0(x_t, eps_hat, t, s)?;
    let a_next = s.alpha(t + 1);
    x0_hat.lincomb(a_next.sqrt(), eps_hat, (1.0 - a_next).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// `x_0 .. x_T` (inversion).
    Forward,
    /// `x_T .. x_0` (sampling).
    Reverse,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Forward => "fwd",
            Direction::Reverse => "rev",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Tensor>,
    pub direction: Direction,
}

const MANIFEST: &str = "manifest.txt";

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    /// State at noise level `t` regardless of direction.
    pub fn at(&self, t: usize) -> &Tensor {
        match self.direction {
            Direction::Forward => &self.states[t],
            Direction::Reverse => &self.states[self.steps() - t],
        }
    }

    pub fn first(&self) -> &Tensor {
        &self.states[0]
    }

    pub fn last(&self) -> &Tensor {
        self.states.last().expect("trajectory is never empty")
    }

    /// Writes `state_NNNN.zten` files plus a `T=<n> dir=<fwd|rev>` manifest.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, s) in self.states.iter().enumerate() {
            save_zten(dir.join(format!("state_{i:04}.zten")), s)?;
        }
        let manifest = format!("T={} dir={}\n", self.steps(), self.direction);
        let path = dir.join(MANIFEST);
        std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let bad = |why: &str| Error::Format { offset: 0, reason: format!("manifest: {why}") };
        let mut steps = None;
        let mut direction = None;
        for field in text.split_ascii_whitespace() {
            match field.split_once('=') {
                Some(("T", v)) => steps = Some(v.parse::<usize>().map_err(|_| bad("bad T"))?),
                Some(("dir", "fwd")) => direction = Some(Direction::Forward),
                Some(("dir", "rev")) => direction = Some(Direction::Reverse),
                _ => return Err(bad("unknown field")),
            }
        }
        let (steps, direction) = steps.zip(direction).ok_or_else(|| bad("missing field"))?;
        let states = (0..=steps)
            .map(|i| load_zten(dir.join(format!("state_{i:04}.zten"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { states, direction })
    }
}

/// Deterministic DDIM inversion `x_0 -> x_T`.
///
/// The step `t -> t+1` evaluates the denoiser on the current state `x_t` at
/// the target noise level `t+1`, so `t = 0` is never queried.
pub fn ddim_invert<D: Denoiser + ?Sized>(x0: &Tensor, d: &D, s: &NoiseSchedule) -> Result<Trajectory> {
    ddim_invert_refined(x0, d, s, 0)
}

/// DDIM inversion where each step is refined by `refinements` fixed-point
/// iterations `x_{t+1} <- invert(x_t, eps(x_{t+1}, t+1))`, driving the step
/// toward the exact inverse of the reverse update.
///
/// The iteration contracts when the denoiser's Jacobian is moderate (as for
/// the analytic Gaussian denoiser); it is not guaranteed to for arbitrary
/// networks.
pub fn ddim_invert_refined<D: Denoiser + ?Sized>(
    x0: &Tensor,
    d: &D,
    s: &NoiseSchedule,
    refinements: usize,
) -> Result<Trajectory> {
    if !s.is_deterministic() {
        return Err(Error::Config("DDIM inversion requires sigma_t = 0 everywhere".into()));
    }
    let mut states = Vec::with_capacity(s.steps() + 1);
    states.push(x0.clone());
    for t in 0..s.steps() {
        let x_t = &states[t];
        let eps = checked_noise(d, x_t, t + 1)?;
        let mut next = ddim_inverse_update(x_t, &eps, t, s)?;
        for _ in 0..refinements {
            let eps = checked_noise(d, &next, t + 1)?;
            next = ddim_inverse_update(x_t, &eps, t, s)?;
        }
        states.push(next);
    }
    Ok(Trajectory { states, direction: Direction::Forward })
}

/// Deterministic reverse sampling `x_T -> x_0`.
pub fn ddim_reverse<D: Denoiser + ?Sized>(x_big_t: &Tensor, d: &D, s: &NoiseSchedule) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(s.steps() + 1);
    states.push(x_big_t.clone());
    for t in (1..=s.steps()).rev() {
        let next = ddim_step(states.last().expect("non-empty"), t, d, s, None)?;
        states.push(next);
    }
    Ok(Trajectory { states, direction: Direction::Reverse })
}

/// Closed-form optimal noise predictor for data distributed as `N(mu, sigma0^2 I)`.
#[derive(Clone, Debug)]
pub struct GaussianDenoiser {
    mu: Tensor,
    sigma0: f64,
    schedule: NoiseSchedule,
}

pub fn analytic_gaussian_denoiser(mu: Tensor, sigma0: f64, s: &NoiseSchedule) -> Result<GaussianDenoiser> {
    if !(sigma0 > 0.0 && sigma0.is_finite()) {
        return Err(Error::Domain(format!("sigma0 must be positive, got {sigma0}")));
    }
    Ok(GaussianDenoiser { mu, sigma0, schedule: s.clone() })
}

impl GaussianDenoiser {
    /// `E[x0 | x_t] = (sigma0^2 sqrt(a) x_t + (1 - a) mu) / (a sigma0^2 + 1 - a)`.
    pub fn posterior_mean(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self.schedule.check_step(t)?;
        if x_t.shape() != self.mu.shape() {
            return Err(Error::Contract(format!(
                "input shape {:?} differs from prior mean shape {:?}",
                x_t.shape(),
                self.mu.shape()
            )));
        }
        let a = self.schedule.alpha(t);
        let v = self.sigma0 * self.sigma0;
        let denom = a * v + 1.0 - a;
        x_t.lincomb(v * a.sqrt() / denom, &self.mu, (1.0 - a) / denom)
    }
}

impl Denoiser for GaussianDenoiser {
    fn predict_noise(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self.schedule.check_step(t)?;
        let a = self.schedule.alpha(t);
        if a >= 1.0 {
            return Err(Error::Domain(format!("noise prediction undefined at t={t} (alpha_t = 1)")));
        }
        let mean = self.posterior_mean(x_t, t)?;
        x_t.lincomb(1.0 / (1.0 - a).sqrt(), &mean, -a.sqrt() / (1.0 - a).sqrt())
    }
}

/// Noise predictor that knows the clean sample; inverts and reverses exactly.
#[derive(Clone, Debug)]
pub struct KnownSampleDenoiser {
    pub x0: Tensor,
    pub schedule: NoiseSchedule,
}

impl Denoiser for KnownSampleDenoiser {
    fn predict_noise(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self.schedule.check_step(t)?;
        let a = self.schedule.alpha(t);
        if a >= 1.0 {
            return Err(Error::Domain(format!("noise prediction undefined at t={t} (alpha_t = 1)")));
        }
        x_t.lincomb(1.0 / (1.0 - a).sqrt(), &self.x0, -a.sqrt() / (1.0 - a).sqrt())
    }
}
