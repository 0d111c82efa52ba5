//! Trajectory denoiser that predicts the clean trajectory directly.
//!
//! A fully-connected network sees the flattened noisy trajectory, a
//! sinusoidal embedding of the step and, for conditional models, the
//! condition vector followed by a presence flag. The null condition is the
//! all-zero vector (flag included), which is also what condition dropout
//! feeds during training.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::data::{episode_rows, DemoSet, Normalizer};
use crate::diffcore::checkpoint::{self, expect_magic, read_str, read_u32, write_str, write_u32};
use crate::diffcore::{seeded_rng, Activation, AdamState, Array2, MlpParams};
use crate::envs::EnvId;
use crate::error::{Error, Result};
use crate::schedule::{randn, NoiseSchedule, ScheduleKind};

pub const DENOISER_MAGIC: &[u8; 4] = b"CDN1";
pub const STEP_EMBED_DIM: usize = 16;
/// Planning horizon used by the default training and planning configs.
pub const DEFAULT_HORIZON: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel {
    pub params: MlpParams,
    pub horizon: usize,
    pub obs_dim: usize,
    pub act_dim: usize,
    /// Zero for unconditional models.
    pub cond_dim: usize,
    pub n_steps: usize,
    pub schedule: ScheduleKind,
    /// `None` for models trained on synthetic data.
    pub env: Option<EnvId>,
    pub normalizer: Normalizer,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr` (linear decay).
    pub lr_final_frac: f64,
    pub n_steps: usize,
    pub schedule: ScheduleKind,
    pub cond_dropout: f64,
    pub hidden: usize,
    pub depth: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch: 64,
            lr: 1e-3,
            lr_final_frac: 0.1,
            n_steps: 20,
            schedule: ScheduleKind::Cosine,
            cond_dropout: 0.25,
            hidden: 256,
            depth: 3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 || self.hidden == 0 || self.depth == 0 {
            return Err(Error::Config("train steps, batch, hidden and depth must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.lr_final_frac) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::Config(format!("condition dropout {} outside [0, 1]", self.cond_dropout)));
        }
        if self.n_steps < 2 {
            return Err(Error::Config("diffusion needs at least 2 steps".into()));
        }
        Ok(())
    }
}

/// Normalized training trajectories with optional per-trajectory conditions.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub horizon: usize,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub trajs: Vec<Array2>,
    /// Empty for unconditional data; otherwise one vector per trajectory.
    pub conds: Vec<Vec<f64>>,
    pub env: Option<EnvId>,
    pub normalizer: Normalizer,
    /// Replace the first state of each noisy input by its clean value.
    pub pin_first_state: bool,
}

impl TrainingSet {
    pub fn cond_dim(&self) -> usize {
        self.conds.first().map_or(0, Vec::len)
    }

    pub fn width(&self) -> usize {
        self.obs_dim + self.act_dim
    }

    /// Already-normalized data without an environment.
    pub fn synthetic(horizon: usize, obs_dim: usize, act_dim: usize, trajs: Vec<Array2>) -> Result<Self> {
        let set = Self {
            horizon,
            obs_dim,
            act_dim,
            trajs,
            conds: Vec::new(),
            env: None,
            normalizer: Normalizer::identity(obs_dim, act_dim),
            pin_first_state: false,
        };
        set.validate()?;
        Ok(set)
    }

    fn validate(&self) -> Result<()> {
        if self.trajs.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        for t in &self.trajs {
            if t.shape() != (self.horizon, self.width()) {
                return Err(Error::shape(
                    "training_set",
                    format!("{:?}", (self.horizon, self.width())),
                    format!("{:?}", t.shape()),
                ));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite("training trajectory"));
            }
        }
        if !self.conds.is_empty() && self.conds.len() != self.trajs.len() {
            return Err(Error::Config("one condition per trajectory required".into()));
        }
        Ok(())
    }
}

/// Windows of every demo episode, normalized.
///
/// With `conditional`, each window carries `goal - object_0` on the goal
/// dimensions, where the goal is taken in hindsight as the episode's final
/// object state.
pub fn build_training_set(demos: &DemoSet, normalizer: &Normalizer, horizon: usize, conditional: bool) -> Result<TrainingSet> {
    let spec = demos.env.spec();
    let windows = crate::data::window_dataset(demos, horizon)?;
    let finals: Vec<Vec<f64>> = demos
        .episodes
        .iter()
        .map(|ep| {
            let rows = episode_rows(ep, demos.act_dim);
            rows.last().expect("non-empty episode")[demos.act_dim..].to_vec()
        })
        .collect();
    let mut trajs = Vec::with_capacity(windows.len());
    let mut conds = Vec::new();
    for w in &windows {
        if conditional {
            let s0 = &w.traj.row(0)[demos.act_dim..];
            conds.push(goal_condition(&spec, s0, &spec_goal(&spec, &finals[w.episode])));
        }
        trajs.push(normalizer.normalize_traj(&w.traj));
    }
    let set = TrainingSet {
        horizon,
        obs_dim: demos.obs_dim,
        act_dim: demos.act_dim,
        trajs,
        conds,
        env: Some(demos.env),
        normalizer: normalizer.clone(),
        pin_first_state: true,
    };
    set.validate()?;
    Ok(set)
}

fn spec_goal(spec: &crate::envs::EnvSpec, state: &[f64]) -> Vec<f64> {
    spec.goal_idx.iter().map(|&i| state[i]).collect()
}

/// Condition vector: goal minus the current object value on the goal dimensions.
pub fn goal_condition(spec: &crate::envs::EnvSpec, state: &[f64], goal: &[f64]) -> Vec<f64> {
    spec.goal_idx
        .iter()
        .zip(goal)
        .map(|(&i, &g)| {
            if spec.wrapped_idx.contains(&i) {
                crate::envs::wrap_angle(g - state[i])
            } else {
                g - state[i]
            }
        })
        .collect()
}

/// Sinusoidal features of `i / N`.
pub fn step_embedding(i: usize, n: usize) -> [f64; STEP_EMBED_DIM] {
    let x = i as f64 / n as f64;
    let mut out = [0.0; STEP_EMBED_DIM];
    let half = STEP_EMBED_DIM / 2;
    for k in 0..half {
        let freq = std::f64::consts::PI * (1u64 << k) as f64 / 2.0;
        out[k] = (freq * x).sin();
        out[half + k] = (freq * x).cos();
    }
    out
}

impl DenoiserModel {
    pub fn width(&self) -> usize {
        self.obs_dim + self.act_dim
    }

    pub fn traj_len(&self) -> usize {
        self.horizon * self.width()
    }

    pub fn input_dim(&self) -> usize {
        Self::input_dim_for(self.traj_len(), self.cond_dim)
    }

    fn input_dim_for(traj_len: usize, cond_dim: usize) -> usize {
        traj_len + STEP_EMBED_DIM + if cond_dim > 0 { cond_dim + 1 } else { 0 }
    }

    pub fn is_conditional(&self) -> bool {
        self.cond_dim > 0
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.n_steps, self.schedule)
    }

    /// Zero-parameter model; predicts zeros for every input.
    pub fn zeros(horizon: usize, obs_dim: usize, act_dim: usize, cond_dim: usize, n_steps: usize, hidden: usize) -> Result<Self> {
        let traj_len = horizon * (obs_dim + act_dim);
        let sizes = [Self::input_dim_for(traj_len, cond_dim), hidden, hidden, hidden, traj_len];
        Ok(Self {
            params: MlpParams::zeros(&sizes, Activation::Mish)?,
            horizon,
            obs_dim,
            act_dim,
            cond_dim,
            n_steps,
            schedule: ScheduleKind::Cosine,
            env: None,
            normalizer: Normalizer::identity(obs_dim, act_dim),
        })
    }

    fn write_input_row(&self, row: &mut [f64], traj: &[f64], i: usize, cond: Option<&[f64]>) {
        let n = self.traj_len();
        row[..n].copy_from_slice(traj);
        row[n..n + STEP_EMBED_DIM].copy_from_slice(&step_embedding(i, self.n_steps));
        if self.cond_dim > 0 {
            let c = &mut row[n + STEP_EMBED_DIM..];
            match cond {
                Some(v) => {
                    c[..self.cond_dim].copy_from_slice(v);
                    c[self.cond_dim] = 1.0;
                }
                None => c.fill(0.0),
            }
        }
    }

    fn check_query(&self, i: usize, cond: Option<&[f64]>) -> Result<()> {
        if i == 0 || i > self.n_steps {
            return Err(Error::StepOutOfRange { step: i, n: self.n_steps });
        }
        if let Some(c) = cond {
            if c.len() != self.cond_dim {
                return Err(Error::shape(
                    "predict_x0",
                    format!("condition of length {}", self.cond_dim),
                    format!("length {}", c.len()),
                ));
            }
        }
        Ok(())
    }

    /// Clean-trajectory estimate for a batch of normalized noisy trajectories.
    pub fn predict_x0_batch(&self, xs: &[Array2], i: usize, cond: Option<&[f64]>) -> Result<Vec<Array2>> {
        self.check_query(i, cond)?;
        let mut input = Array2::zeros(xs.len(), self.input_dim());
        for (r, x) in xs.iter().enumerate() {
            if x.shape() != (self.horizon, self.width()) {
                return Err(Error::shape(
                    "predict_x0",
                    format!("{:?}", (self.horizon, self.width())),
                    format!("{:?}", x.shape()),
                ));
            }
            self.write_input_row(input.row_mut(r), x.as_slice(), i, cond);
        }
        let out = self.params.forward(&input)?;
        (0..xs.len())
            .map(|r| Array2::from_vec(self.horizon, self.width(), out.row(r).to_vec()))
            .collect()
    }

    pub fn predict_x0(&self, x: &Array2, i: usize, cond: Option<&[f64]>) -> Result<Array2> {
        Ok(self.predict_x0_batch(std::slice::from_ref(x), i, cond)?.remove(0))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(DENOISER_MAGIC)?;
        for v in [self.horizon, self.obs_dim, self.act_dim, self.cond_dim, self.n_steps] {
            write_u32(w, v as u32)?;
        }
        write_str(w, self.schedule.as_str())?;
        write_str(w, self.env.map_or("", EnvId::as_str))?;
        self.normalizer.write(w)?;
        checkpoint::write_params(w, &self.params)
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        expect_magic(r, DENOISER_MAGIC)?;
        let mut dims = [0usize; 5];
        for d in dims.iter_mut() {
            *d = read_u32(r)? as usize;
        }
        let [horizon, obs_dim, act_dim, cond_dim, n_steps] = dims;
        let schedule: ScheduleKind = read_str(r)?.parse()?;
        let env_name = read_str(r)?;
        let env = if env_name.is_empty() { None } else { Some(env_name.parse()?) };
        let normalizer = Normalizer::read(r)?;
        let params = checkpoint::read_params(r)?;
        let model = Self {
            params,
            horizon,
            obs_dim,
            act_dim,
            cond_dim,
            n_steps,
            schedule,
            env,
            normalizer,
        };
        if model.params.input_dim() != model.input_dim()
            || model.params.output_dim() != model.traj_len()
            || model.normalizer.obs_dim() != obs_dim
            || model.normalizer.act_dim() != act_dim
            || n_steps < 2
        {
            return Err(Error::Format("denoiser header does not match its parameters".into()));
        }
        if let Some(env) = env {
            let spec = env.spec();
            if spec.obs_dim != obs_dim || spec.act_dim != act_dim {
                return Err(Error::Dimension(format!("denoiser dims do not fit {env}")));
            }
        }
        Ok(model)
    }
}

/// Per-step training record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
}

/// Trains on the x0 objective `|tau0 - model(q_sample(tau0, i, eps), i, c)|^2`.
///
/// For environment data the first state of every noisy input is replaced by
/// its clean value, as the planner does at every reverse step. Returns the model and the loss of
/// every step.
pub fn train(set: &TrainingSet, cfg: &TrainConfig) -> Result<(DenoiserModel, Vec<LossRecord>)> {
    cfg.validate()?;
    set.validate()?;
    let sched = NoiseSchedule::new(cfg.n_steps, cfg.schedule)?;
    let cond_dim = set.cond_dim();
    let traj_len = set.horizon * set.width();
    let mut rng = seeded_rng(cfg.seed);
    let mut sizes = vec![DenoiserModel::input_dim_for(traj_len, cond_dim)];
    sizes.extend(std::iter::repeat_n(cfg.hidden, cfg.depth));
    sizes.push(traj_len);
    let params = MlpParams::init(&sizes, Activation::Mish, &mut rng)?;
    let mut model = DenoiserModel {
        params,
        horizon: set.horizon,
        obs_dim: set.obs_dim,
        act_dim: set.act_dim,
        cond_dim,
        n_steps: cfg.n_steps,
        schedule: cfg.schedule,
        env: set.env,
        normalizer: set.normalizer.clone(),
    };
    let mut adam = AdamState::new(&model.params, cfg.lr);
    let mut input = Array2::zeros(cfg.batch, model.input_dim());
    let mut target = Array2::zeros(cfg.batch, traj_len);
    let mut log = Vec::with_capacity(cfg.steps);
    let (act, width) = (set.act_dim, set.width());
    for step in 0..cfg.steps {
        for r in 0..cfg.batch {
            let k = rng.random_range(0..set.trajs.len());
            let x0 = &set.trajs[k];
            let i = rng.random_range(1..=cfg.n_steps);
            let noise = randn(set.horizon, width, &mut rng);
            let mut xi = crate::schedule::q_sample_with(sched.alpha_bar(i), x0, &noise);
            if set.pin_first_state {
                xi.row_mut(0)[act..].copy_from_slice(&x0.row(0)[act..]);
            }
            let keep = cond_dim > 0 && rng.random::<f64>() >= cfg.cond_dropout;
            let cond = if keep { Some(set.conds[k].as_slice()) } else { None };
            model.write_input_row(input.row_mut(r), xi.as_slice(), i, cond);
            target.row_mut(r).copy_from_slice(x0.as_slice());
        }
        let cache = model.params.forward_cached(&input)?;
        let mut up = cache.output.clone();
        let denom = (cfg.batch * traj_len) as f64;
        let mut loss = 0.0;
        for (u, t) in up.as_mut_slice().iter_mut().zip(target.as_slice()) {
            let d = *u - t;
            loss += d * d;
            *u = 2.0 * d / denom;
        }
        loss /= denom;
        if !loss.is_finite() {
            return Err(Error::TrainingDivergence { step, loss });
        }
        log.push(LossRecord { step, loss });
        let (grads, _) = model.params.backward_cached(&cache, &up)?;
        let frac = step as f64 / cfg.steps as f64;
        adam.lr = cfg.lr * (1.0 - (1.0 - cfg.lr_final_frac) * frac);
        adam.update(&mut model.params, &grads)?;
        if !model.params.is_finite() {
            return Err(Error::TrainingDivergence { step, loss: f64::NAN });
        }
    }
    Ok((model, log))
}

/// Classifier-free composition in x0 space, `x(null) + w (x(c) - x(null))`.
pub fn cf_compose(model: &DenoiserModel, x: &Array2, i: usize, cond: &[f64], omega: f64) -> Result<Array2> {
    if !model.is_conditional() {
        return Err(Error::Unsupported("classifier-free composition needs a conditional model".into()));
    }
    let mut uncond = model.predict_x0(x, i, None)?;
    let mut diff = model.predict_x0(x, i, Some(cond))?;
    diff.axpy(-1.0, &uncond);
    uncond.axpy(omega, &diff);
    Ok(uncond)
}

/// Unguided ancestral sampling of `count` trajectories (normalized units).
pub fn sample_unguided<R: Rng + ?Sized>(model: &DenoiserModel, count: usize, cond: Option<&[f64]>, rng: &mut R) -> Result<Vec<Array2>> {
    let sched = model.schedule()?;
    let mut xs: Vec<Array2> = (0..count).map(|_| randn(model.horizon, model.width(), rng)).collect();
    let zero = Array2::zeros(model.horizon, model.width());
    for i in (1..=model.n_steps).rev() {
        let x0s = model.predict_x0_batch(&xs, i, cond)?;
        for (x, x0) in xs.iter_mut().zip(&x0s) {
            *x = sched.posterior_step(x0, x, i, 0.0, &zero, rng)?;
        }
    }
    Ok(xs)
}
