//! Guided reverse diffusion, baseline samplers and receding-horizon control.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::denoiser::{cf_compose, goal_condition, DenoiserModel};
use crate::diffcore::{seeded_rng, Array2, SeedRng};
use crate::dynmodel::DynamicsModel;
use crate::envs::{self, EnvSpec, EnvState};
use crate::error::{Error, Result};
use crate::guidance::{apply_projections, builtin_terms, compose_gradient, naive_terms, phase_weights, EnergyTerm, GuidanceConfig, GuideInput};
use crate::schedule::{randn, NoiseSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PlanMode {
    /// Dual-phase guidance with dynamics and penalty terms.
    Full,
    NoGuide,
    /// Goal energy only.
    NaiveGuide,
    /// Goal substituted at the final step.
    Inpaint,
    /// Classifier-free conditional model.
    CFree,
}

impl PlanMode {
    pub const ALL: [PlanMode; 5] = [PlanMode::Full, PlanMode::NoGuide, PlanMode::NaiveGuide, PlanMode::Inpaint, PlanMode::CFree];

    pub fn as_str(self) -> &'static str {
        match self {
            PlanMode::Full => "full",
            PlanMode::NoGuide => "no_guide",
            PlanMode::NaiveGuide => "naive_guide",
            PlanMode::Inpaint => "inpaint",
            PlanMode::CFree => "cfree",
        }
    }
}

impl fmt::Display for PlanMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PlanMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PlanMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}` (expected full, no_guide, naive_guide, inpaint or cfree)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanConfig {
    pub mode: PlanMode,
    /// Actions executed per plan.
    pub execute_k: usize,
    pub guidance: GuidanceConfig,
    /// Classifier-free weight.
    pub omega: f64,
    pub goal: Vec<f64>,
    pub seed: u64,
    /// Optional clamp on the normalized clean-trajectory estimate.
    pub clip_x0: Option<f64>,
}

impl PlanConfig {
    pub fn new(spec: &EnvSpec, mode: PlanMode, goal: Vec<f64>) -> Self {
        Self {
            mode,
            execute_k: 8,
            guidance: GuidanceConfig::for_env(spec),
            omega: 1.0,
            goal,
            seed: 0,
            clip_x0: Some(1.0),
        }
    }
}

/// Trained models for one environment.
#[derive(Clone, Debug)]
pub struct Models {
    pub denoiser: Arc<DenoiserModel>,
    pub conditional: Option<Arc<DenoiserModel>>,
    pub dynamics: Option<Arc<DynamicsModel>>,
    /// Per-dimension std of the training states, used by the ghost metric.
    pub state_std: Vec<f64>,
}

pub trait Planner: Send + Sync {
    fn horizon(&self) -> usize;
    /// A plan in env units whose first state is `state`.
    fn plan(&self, state: &[f64], rng: &mut SeedRng) -> Result<Array2>;
}

fn pin_state(x: &mut Array2, s0n: &[f64], act: usize) {
    x.row_mut(0)[act..].copy_from_slice(s0n);
}

/// Shared reverse loop. `predict` gives the clean estimate for `(x_i, i)`;
/// `guide` may edit that estimate and returns the scale and gradient of the
/// guidance shift.
fn reverse_loop<P, G>(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    s0: &[f64],
    clip: Option<f64>,
    rng: &mut SeedRng,
    mut predict: P,
    mut guide: G,
) -> Result<Array2>
where
    P: FnMut(&Array2, usize) -> Result<Array2>,
    G: FnMut(&mut Array2, usize) -> Result<Option<(f64, Array2)>>,
{
    let act = model.act_dim;
    if s0.len() != model.obs_dim {
        return Err(Error::Dimension(format!("start state has {} dims, model expects {}", s0.len(), model.obs_dim)));
    }
    let s0n = model.normalizer.normalize_state(s0);
    let mut x = randn(model.horizon, model.width(), rng);
    pin_state(&mut x, &s0n, act);
    let zero = Array2::zeros(model.horizon, model.width());
    for i in (1..=sched.n_steps()).rev() {
        let mut x0 = predict(&x, i)?;
        if let Some(c) = clip {
            x0 = x0.map(|v| v.clamp(-c, c));
        }
        pin_state(&mut x0, &s0n, act);
        let shift = guide(&mut x0, i)?;
        let (alpha, g) = match &shift {
            Some((a, g)) => (*a, g),
            None => (0.0, &zero),
        };
        x = sched.posterior_step(&x0, &x, i, alpha, g, rng)?;
        pin_state(&mut x, &s0n, act);
    }
    let mut den = model.normalizer.denormalize_traj(&x);
    den.row_mut(0)[act..].copy_from_slice(s0);
    Ok(den)
}

/// Classifier-guided sampling: at every step the clean estimate is
/// projected, the phase is read from it and the composed gradient shifts the
/// posterior mean by `alpha * Sigma_i * g`.
pub fn guided_sample(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    spec: &EnvSpec,
    terms: &[Arc<dyn EnergyTerm>],
    cfg: &GuidanceConfig,
    clip: Option<f64>,
    s0: &[f64],
    rng: &mut SeedRng,
) -> Result<Array2> {
    let norm = &model.normalizer;
    let act = model.act_dim;
    let s0n = norm.normalize_state(s0);
    reverse_loop(
        model,
        sched,
        s0,
        clip,
        rng,
        |x, i| model.predict_x0(x, i, None),
        |x0, _| {
            let mut input = GuideInput::from_normalized(x0.clone(), norm);
            let pw = phase_weights(spec, &input.den, cfg);
            if let Some(p) = apply_projections(terms, &input.den, pw) {
                input = GuideInput::from_env_units(p, norm);
                pin_state(&mut input.norm, &s0n, act);
                *x0 = input.norm.clone();
            }
            let g = compose_gradient(terms, &input, pw, cfg)?;
            Ok(Some((cfg.alpha, g)))
        },
    )
}

/// Conditioning by substitution: the goal is written into the final step's
/// object columns of every estimate and every sample.
pub fn inpaint_goal_sample(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    spec: &EnvSpec,
    clip: Option<f64>,
    s0: &[f64],
    goal: &[f64],
    rng: &mut SeedRng,
) -> Result<Array2> {
    spec.validate_goal(goal)?;
    let norm = &model.normalizer;
    let h = model.horizon;
    let cols: Vec<(usize, f64)> = spec
        .goal_idx
        .iter()
        .zip(goal)
        .map(|(&i, &g)| (model.act_dim + i, (g - norm.state_offset[i]) / norm.state_scale[i]))
        .collect();
    let pin_goal = |x: &mut Array2| {
        for &(c, v) in &cols {
            x[(h - 1, c)] = v;
        }
    };
    let mut den = reverse_loop(
        model,
        sched,
        s0,
        clip,
        rng,
        |x, i| {
            let mut xg = x.clone();
            pin_goal(&mut xg);
            model.predict_x0(&xg, i, None)
        },
        |x0, _| {
            pin_goal(x0);
            Ok(None)
        },
    )?;
    for (&i, &g) in spec.goal_idx.iter().zip(goal) {
        den[(h - 1, model.act_dim + i)] = g;
    }
    Ok(den)
}

/// Classifier-free sampling with condition `goal - object_0`.
pub fn cfree_sample(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    spec: &EnvSpec,
    clip: Option<f64>,
    s0: &[f64],
    goal: &[f64],
    omega: f64,
    rng: &mut SeedRng,
) -> Result<Array2> {
    if !model.is_conditional() {
        return Err(Error::Unsupported("cfree mode needs a conditional denoiser".into()));
    }
    spec.validate_goal(goal)?;
    let cond = goal_condition(spec, s0, goal);
    reverse_loop(model, sched, s0, clip, rng, |x, i| cf_compose(model, x, i, &cond, omega), |_, _| Ok(None))
}

/// Diffusion planner for one goal and one mode.
pub struct DiffusionPlanner {
    spec: EnvSpec,
    cfg: PlanConfig,
    model: Arc<DenoiserModel>,
    sched: NoiseSchedule,
    terms: Vec<Arc<dyn EnergyTerm>>,
}

impl DiffusionPlanner {
    pub fn new(spec: &EnvSpec, models: &Models, cfg: PlanConfig) -> Result<Self> {
        spec.validate_goal(&cfg.goal)?;
        cfg.guidance.validate()?;
        let model = match cfg.mode {
            PlanMode::CFree => models
                .conditional
                .clone()
                .ok_or_else(|| Error::Unsupported("cfree mode needs a conditional denoiser checkpoint".into()))?,
            _ => models.denoiser.clone(),
        };
        if model.env.is_some_and(|e| e != spec.id) {
            return Err(Error::Dimension(format!("denoiser trained for another environment than {}", spec.id)));
        }
        if cfg.execute_k == 0 || cfg.execute_k > model.horizon {
            return Err(Error::Config(format!("execute_k must lie in 1..={}, got {}", model.horizon, cfg.execute_k)));
        }
        let terms = match cfg.mode {
            PlanMode::Full => builtin_terms(spec, &cfg.goal, &cfg.guidance, models.dynamics.clone())?,
            PlanMode::NaiveGuide => naive_terms(spec, &cfg.goal, &cfg.guidance)?,
            _ => Vec::new(),
        };
        Ok(Self {
            spec: spec.clone(),
            sched: model.schedule()?,
            cfg,
            model,
            terms,
        })
    }

    pub fn with_terms(mut self, terms: Vec<Arc<dyn EnergyTerm>>) -> Self {
        self.terms = terms;
        self
    }

    pub fn config(&self) -> &PlanConfig {
        &self.cfg
    }
}

impl Planner for DiffusionPlanner {
    fn horizon(&self) -> usize {
        self.model.horizon
    }

    fn plan(&self, state: &[f64], rng: &mut SeedRng) -> Result<Array2> {
        let (m, s, c) = (&*self.model, &self.sched, &self.cfg);
        match c.mode {
            PlanMode::Full | PlanMode::NaiveGuide => guided_sample(m, s, &self.spec, &self.terms, &c.guidance, c.clip_x0, state, rng),
            PlanMode::NoGuide => guided_sample(m, s, &self.spec, &[], &c.guidance, c.clip_x0, state, rng),
            PlanMode::Inpaint => inpaint_goal_sample(m, s, &self.spec, c.clip_x0, state, &c.goal, rng),
            PlanMode::CFree => cfree_sample(m, s, &self.spec, c.clip_x0, state, &c.goal, c.omega, rng),
        }
    }
}

/// Plans by rolling the scripted expert through the true simulator.
pub struct ExpertReplayPlanner {
    pub spec: EnvSpec,
    pub goal: Vec<f64>,
    pub horizon: usize,
}

impl Planner for ExpertReplayPlanner {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn plan(&self, state: &[f64], _rng: &mut SeedRng) -> Result<Array2> {
        let (act, w) = (self.spec.act_dim, self.spec.act_dim + self.spec.obs_dim);
        let mut out = Array2::zeros(self.horizon, w);
        let mut s = state.to_vec();
        for t in 0..self.horizon {
            let a = envs::expert_action(&self.spec, &s, &self.goal);
            out.row_mut(t)[..act].copy_from_slice(&a);
            out.row_mut(t)[act..].copy_from_slice(&s);
            s = envs::step(&self.spec, &s, &a)?;
        }
        Ok(out)
    }
}

/// Executed trace of one closed-loop episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRollout {
    pub goal: Vec<f64>,
    /// Visited states; `states[0]` is the reset state.
    pub states: Vec<EnvState>,
    pub actions: Vec<Vec<f64>>,
    /// Plans in env units with the step at which each was made.
    pub plans: Vec<(usize, Array2)>,
    pub success: bool,
    /// Mean ghost metric over plans.
    pub ghost: f64,
    pub steps: usize,
    /// Planner error that ended the episode early.
    pub aborted: Option<String>,
}

/// Plans from the current state, executes the first `k` actions and repeats
/// until the goal holds for the settle window or `max_steps` is reached.
pub fn receding_control(spec: &EnvSpec, planner: &dyn Planner, goal: &[f64], max_steps: usize, k: usize, sigma: &[f64], seed: u64) -> Result<EpisodeRollout> {
    spec.validate_goal(goal)?;
    let h = planner.horizon();
    if max_steps < h {
        return Err(Error::Config(format!("max_steps {max_steps} shorter than the plan horizon {h}")));
    }
    if k == 0 || k > h {
        return Err(Error::Config(format!("execute_k must lie in 1..={h}, got {k}")));
    }
    let mut rng = seeded_rng(seed);
    let mut s = envs::reset(spec, goal, &mut rng);
    let mut roll = EpisodeRollout {
        goal: goal.to_vec(),
        states: vec![s.clone()],
        actions: Vec::new(),
        plans: Vec::new(),
        success: false,
        ghost: 0.0,
        steps: 0,
        aborted: None,
    };
    let act = spec.act_dim;
    'outer: while roll.steps < max_steps {
        let plan = match planner.plan(&s, &mut rng) {
            Ok(p) => p,
            Err(e) => {
                roll.aborted = Some(e.to_string());
                break;
            }
        };
        for t in 0..k {
            let a = spec.clip_action(&plan.row(t)[..act]);
            s = envs::step(spec, &s, &a)?;
            roll.actions.push(a);
            roll.states.push(s.clone());
            roll.steps += 1;
            if envs::settled(spec, &roll.states, goal) || roll.steps >= max_steps {
                roll.plans.push((roll.steps - t - 1, plan));
                break 'outer;
            }
        }
        roll.plans.push((roll.steps - k, plan));
    }
    let mut ghost = 0.0;
    for (_, p) in &roll.plans {
        let states: Vec<Vec<f64>> = (0..p.rows()).map(|t| p.row(t)[act..].to_vec()).collect();
        let actions: Vec<Vec<f64>> = (0..p.rows()).map(|t| p.row(t)[..act].to_vec()).collect();
        ghost += envs::ghost_metric(spec, &states, &actions, sigma)?;
    }
    if !roll.plans.is_empty() {
        ghost /= roll.plans.len() as f64;
    }
    roll.ghost = ghost;
    roll.success = roll.aborted.is_none() && envs::success(spec, &roll.states, goal);
    Ok(roll)
}
