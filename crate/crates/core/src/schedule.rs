//! Diffusion noise schedule, forward noising and the guided Gaussian posterior step.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffcore::Array2;
use crate::error::{Error, Result};

const MAX_BETA: f64 = 0.999;
const COSINE_OFFSET: f64 = 0.008;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "linear" => Ok(Self::Linear),
            other => Err(Error::Config(format!("unknown schedule kind `{other}`"))),
        }
    }
}

impl ScheduleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cosine => "cosine",
            Self::Linear => "linear",
        }
    }
}

/// Tables for `N` diffusion steps, indexed `1..=N` through the accessors.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_var: Vec<f64>,
    /// Posterior variance with step 1 replaced by step 2 (step 1 is exactly 0).
    posterior_var_clipped: Vec<f64>,
    coef_x0: Vec<f64>,
    coef_xt: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(n: usize, kind: ScheduleKind) -> Result<Self> {
        if n < 2 {
            return Err(Error::Config(format!("schedule needs at least 2 steps, got {n}")));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Cosine => {
                let f = |i: usize| {
                    let x = (i as f64 / n as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                (1..=n).map(|i| (1.0 - f(i) / f(i - 1)).clamp(1e-8, MAX_BETA)).collect()
            }
            ScheduleKind::Linear => {
                // DDPM endpoints rescaled from 1000 steps to n.
                let scale = 1000.0 / n as f64;
                let (lo, hi) = (1e-4 * scale, (0.02 * scale).min(MAX_BETA));
                (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
            }
        };
        Self::from_betas(kind, betas)
    }

    fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Result<Self> {
        let n = betas.len();
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config("betas must lie in (0, 1)".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(n);
        let mut prod = 1.0;
        for a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        let mut posterior_var = Vec::with_capacity(n);
        let mut coef_x0 = Vec::with_capacity(n);
        let mut coef_xt = Vec::with_capacity(n);
        for k in 0..n {
            let ab = alpha_bars[k];
            let ab_prev = if k == 0 { 1.0 } else { alpha_bars[k - 1] };
            posterior_var.push(betas[k] * (1.0 - ab_prev) / (1.0 - ab));
            coef_x0.push(betas[k] * ab_prev.sqrt() / (1.0 - ab));
            coef_xt.push((1.0 - ab_prev) * alphas[k].sqrt() / (1.0 - ab));
        }
        let mut posterior_var_clipped = posterior_var.clone();
        posterior_var_clipped[0] = posterior_var[1];
        Ok(Self {
            kind,
            betas,
            alphas,
            alpha_bars,
            posterior_var,
            posterior_var_clipped,
            coef_x0,
            coef_xt,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn n_steps(&self) -> usize {
        self.betas.len()
    }

    fn idx(&self, i: usize) -> Result<usize> {
        if i == 0 || i > self.n_steps() {
            return Err(Error::StepOutOfRange { step: i, n: self.n_steps() });
        }
        Ok(i - 1)
    }

    pub fn beta(&self, i: usize) -> f64 {
        self.betas[i - 1]
    }

    pub fn alpha(&self, i: usize) -> f64 {
        self.alphas[i - 1]
    }

    pub fn alpha_bar(&self, i: usize) -> f64 {
        self.alpha_bars[i - 1]
    }

    /// True posterior variance `beta_i (1 - abar_{i-1}) / (1 - abar_i)`; zero at step 1.
    pub fn posterior_variance(&self, i: usize) -> f64 {
        self.posterior_var[i - 1]
    }

    /// Variance used for the guidance shift and noise; step 1 borrows step 2's value.
    pub fn guidance_variance(&self, i: usize) -> f64 {
        self.posterior_var_clipped[i - 1]
    }

    /// `(c0, ci)` with `mu = c0 * x0 + ci * x_i`.
    pub fn posterior_coefs(&self, i: usize) -> (f64, f64) {
        (self.coef_x0[i - 1], self.coef_xt[i - 1])
    }

    /// `sqrt(abar_i) * x0 + sqrt(1 - abar_i) * noise`.
    pub fn q_sample(&self, x0: &Array2, i: usize, noise: &Array2) -> Result<Array2> {
        let k = self.idx(i)?;
        x0.check_same_shape(noise, "q_sample")?;
        let ab = self.alpha_bars[k];
        Ok(q_sample_with(ab, x0, noise))
    }

    pub fn posterior_mean(&self, x0_hat: &Array2, x_i: &Array2, i: usize) -> Result<Array2> {
        let k = self.idx(i)?;
        x0_hat.check_same_shape(x_i, "posterior_mean")?;
        let (c0, ci) = (self.coef_x0[k], self.coef_xt[k]);
        let data = x0_hat.as_slice().iter().zip(x_i.as_slice()).map(|(a, b)| c0 * a + ci * b).collect();
        Array2::from_vec(x_i.rows(), x_i.cols(), data)
    }

    /// Samples `N(mu + alpha_scale * Sigma_i * g, Sigma_i)`; returns the shifted mean at step 1.
    #[allow(clippy::too_many_arguments)]
    pub fn posterior_step<R: Rng + ?Sized>(&self, x0_hat: &Array2, x_i: &Array2, i: usize, alpha_scale: f64, g: &Array2, rng: &mut R) -> Result<Array2> {
        let mut mu = self.posterior_mean(x0_hat, x_i, i)?;
        mu.check_same_shape(g, "posterior_step")?;
        if !g.is_finite() {
            return Err(Error::GuidanceDivergence { term: "composite".into() });
        }
        let var = self.guidance_variance(i);
        if alpha_scale != 0.0 {
            mu.axpy(alpha_scale * var, g);
        }
        if i > 1 {
            let sd = var.sqrt();
            for v in mu.as_mut_slice() {
                let z: f64 = rng.sample(StandardNormal);
                *v += sd * z;
            }
        }
        Ok(mu)
    }
}

pub(crate) fn q_sample_with(alpha_bar: f64, x0: &Array2, noise: &Array2) -> Array2 {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = x0.as_slice().iter().zip(noise.as_slice()).map(|(x, e)| a * x + b * e).collect();
    Array2::from_vec(x0.rows(), x0.cols(), data).expect("shapes checked by caller")
}

/// Standard-normal array.
pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2 {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Array2::from_vec(rows, cols, data).expect("length matches")
}
