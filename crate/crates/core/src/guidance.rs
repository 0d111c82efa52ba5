//! Energy terms, phase gating and the composed guidance gradient.
//!
//! Each term is an expert `h_i = exp(-e_i)`; the guidance gradient is
//! `g = -sum_i w_i grad e_i` over the terms active in the current phase.
//! Environment-unit energies are evaluated on the denormalized trajectory and
//! their gradients are mapped back through the normalizer scale, so every
//! gradient returned here is with respect to the normalized trajectory.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::data::Normalizer;
use crate::diffcore::{sigmoid, softplus, Array2};
use crate::dynmodel::{dyn_energy_and_grad, DynamicsModel};
use crate::envs::{wrap_angle, EnvId, EnvSpec};
use crate::error::{Error, Result};

/// Interaction phase of a plan.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Pre,
    Post,
}

/// Phases in which a term is active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TermPhase {
    Pre,
    Post,
    Both,
}

impl TermPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            TermPhase::Pre => "pre",
            TermPhase::Post => "post",
            TermPhase::Both => "both",
        }
    }
}

impl fmt::Display for TermPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TermPhase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre" => Ok(TermPhase::Pre),
            "post" => Ok(TermPhase::Post),
            "both" => Ok(TermPhase::Both),
            other => Err(Error::Config(format!("unknown phase `{other}`"))),
        }
    }
}

/// Multipliers applied to pre- and post-phase terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseWeights {
    pub pre: f64,
    pub post: f64,
}

impl PhaseWeights {
    pub fn hard(phase: Phase) -> Self {
        match phase {
            Phase::Pre => Self { pre: 1.0, post: 0.0 },
            Phase::Post => Self { pre: 0.0, post: 1.0 },
        }
    }

    pub fn for_term(&self, phase: TermPhase) -> f64 {
        match phase {
            TermPhase::Pre => self.pre,
            TermPhase::Post => self.post,
            TermPhase::Both => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TermWeights {
    pub goal: f64,
    pub align: f64,
    pub activity: f64,
    pub dynamics: f64,
}

impl Default for TermWeights {
    fn default() -> Self {
        Self {
            goal: 30.0,
            align: 12.0,
            activity: 12.0,
            dynamics: 1.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceConfig {
    pub alpha: f64,
    /// Phase threshold on the hand to contact-point distance.
    pub delta1: f64,
    /// Max per-step object change.
    pub delta2: f64,
    /// Min actuator activity.
    pub delta3: f64,
    /// Per-step discount applied to gradient rows.
    pub gamma: f64,
    pub weights: TermWeights,
    /// Soft goal (interpolated path) instead of final-step goal.
    pub soft_goal: bool,
    /// Linear blend between phases over the distance band `[delta1, 2 delta1]`.
    pub blend: bool,
    /// Sharpness `k` of the activity surrogate `softplus(k x) / k`.
    pub activity_sharpness: f64,
}

impl GuidanceConfig {
    pub fn for_env(spec: &EnvSpec) -> Self {
        // The goal energy lives in env units, so a goal dimension with a
        // tiny range (nail depth) needs a matching weight.
        let (alpha, goal_weight) = match spec.id {
            EnvId::Door1D => (40.0, 30.0),
            EnvId::Hammer1D => (60.0, 40_000.0),
            EnvId::Disk => (1000.0, 30.0),
        };
        Self {
            alpha,
            delta1: spec.delta_contact,
            delta2: spec.delta_object,
            delta3: spec.delta_activity,
            gamma: 1.0,
            weights: TermWeights {
                goal: goal_weight,
                ..TermWeights::default()
            },
            soft_goal: true,
            blend: false,
            activity_sharpness: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("guidance scale must be positive, got {}", self.alpha)));
        }
        for (name, v) in [("delta1", self.delta1), ("delta2", self.delta2), ("delta3", self.delta3)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        let w = &self.weights;
        if [w.goal, w.align, w.activity, w.dynamics].iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::Config("term weights must be non-negative".into()));
        }
        if !(self.activity_sharpness > 0.0) {
            return Err(Error::Config("activity sharpness must be positive".into()));
        }
        Ok(())
    }
}

/// A trajectory in both unit systems, rows `[a_t | s_t]`.
#[derive(Clone, Debug)]
pub struct GuideInput {
    pub norm: Array2,
    pub den: Array2,
    /// Per-column normalizer scale (`d den / d norm`).
    pub scales: Vec<f64>,
    pub act_dim: usize,
}

impl GuideInput {
    pub fn from_normalized(norm: Array2, normalizer: &Normalizer) -> Self {
        let den = normalizer.denormalize_traj(&norm);
        Self {
            norm,
            den,
            scales: normalizer.column_scales(),
            act_dim: normalizer.act_dim(),
        }
    }

    pub fn from_env_units(den: Array2, normalizer: &Normalizer) -> Self {
        let norm = normalizer.normalize_traj(&den);
        Self {
            norm,
            den,
            scales: normalizer.column_scales(),
            act_dim: normalizer.act_dim(),
        }
    }

    /// Converts a gradient with respect to env units into normalized units.
    pub fn chain(&self, mut grad_den: Array2) -> Array2 {
        for r in 0..grad_den.rows() {
            for (g, k) in grad_den.row_mut(r).iter_mut().zip(&self.scales) {
                *g *= k;
            }
        }
        grad_den
    }
}

pub trait EnergyTerm: Send + Sync {
    fn name(&self) -> &str;
    fn phase(&self) -> TermPhase;
    fn weight(&self) -> f64;
    /// Energy and gradient with respect to the normalized trajectory.
    fn eval(&self, x: &GuideInput) -> Result<(f64, Array2)>;
    /// Projection on the env-unit trajectory; `None` for gradient terms.
    fn project(&self, _den: &Array2) -> Option<Array2> {
        None
    }
}

fn obs_col(spec: &EnvSpec, i: usize) -> usize {
    spec.act_dim + i
}

/// Mean over t of `|hand_t - contact_t|^2`; zero for tasks without contact.
pub fn align_energy(spec: &EnvSpec, den: &Array2) -> (f64, Array2) {
    let h = den.rows();
    let mut grad = Array2::zeros(h, den.cols());
    let Some(c) = spec.contact else {
        return (0.0, grad);
    };
    let (hc, tc) = (obs_col(spec, c.hand), obs_col(spec, c.target));
    let mut e = 0.0;
    for t in 0..h {
        let d = den[(t, hc)] - den[(t, tc)];
        e += d * d;
        grad[(t, hc)] += 2.0 * d / h as f64;
        grad[(t, tc)] -= 2.0 * d / h as f64;
    }
    (e / h as f64, grad)
}

fn goal_diff(spec: &EnvSpec, i: usize, x: f64, g: f64) -> f64 {
    if spec.wrapped_idx.contains(&i) {
        wrap_angle(x - g)
    } else {
        x - g
    }
}

/// Hard: `|obj_{H-1} - goal|^2`. Soft: mean over t of
/// `|obj_t - ((1 - t/H) obj_0 + (t/H) goal)|^2`.
///
/// Wrapped dimensions use the wrapped difference.
pub fn goal_energy(spec: &EnvSpec, den: &Array2, goal: &[f64], soft: bool) -> (f64, Array2) {
    let h = den.rows();
    let mut grad = Array2::zeros(h, den.cols());
    let mut e = 0.0;
    for (&i, &g) in spec.goal_idx.iter().zip(goal) {
        let col = obs_col(spec, i);
        if !soft {
            let d = goal_diff(spec, i, den[(h - 1, col)], g);
            e += d * d;
            grad[(h - 1, col)] += 2.0 * d;
            continue;
        }
        let o0 = den[(0, col)];
        for t in 0..h {
            let s = t as f64 / h as f64;
            // Target (1 - s) o0 + s g, written around o0 so wrapping acts on the offset.
            let d = goal_diff(spec, i, den[(t, col)] - o0, s * goal_diff(spec, i, g, o0));
            e += d * d / h as f64;
            grad[(t, col)] += 2.0 * d / h as f64;
            grad[(0, col)] -= 2.0 * d * (1.0 - s) / h as f64;
        }
    }
    (e, grad)
}

/// Clamps every per-step object change to at most `delta2` in magnitude.
pub fn penalty_project(spec: &EnvSpec, den: &Array2, delta2: f64) -> Array2 {
    let mut out = den.clone();
    for &i in &spec.object_idx {
        let col = obs_col(spec, i);
        for t in 0..out.rows().saturating_sub(1) {
            let prev = out[(t, col)];
            let d = goal_diff(spec, i, out[(t + 1, col)], prev);
            if d.abs() > delta2 {
                let wrap = |v: f64| if spec.wrapped_idx.contains(&i) { wrap_angle(v) } else { v };
                let mut v = wrap(prev + d.clamp(-delta2, delta2));
                // Rounding in `prev + d` can overshoot by an ulp; pull back until the
                // measured change is within the limit.
                loop {
                    let d = goal_diff(spec, i, v, prev);
                    if d.abs() <= delta2 {
                        break;
                    }
                    v = wrap(ulp_toward(v, v - d));
                }
                out[(t + 1, col)] = v;
            }
        }
    }
    out
}

/// Adjacent float from `v` in the direction of `target`.
fn ulp_toward(v: f64, target: f64) -> f64 {
    if v == target {
        return v;
    }
    if v == 0.0 {
        return f64::from_bits(1).copysign(target - v);
    }
    let bits = v.to_bits();
    // Magnitude grows with the bit pattern for either sign.
    if (target > v) == (v > 0.0) {
        f64::from_bits(bits + 1)
    } else {
        f64::from_bits(bits - 1)
    }
}

/// Largest per-step object change, wrapped where applicable.
pub fn max_object_delta(spec: &EnvSpec, den: &Array2) -> f64 {
    let mut m: f64 = 0.0;
    for &i in &spec.object_idx {
        let col = obs_col(spec, i);
        for t in 0..den.rows().saturating_sub(1) {
            m = m.max(goal_diff(spec, i, den[(t + 1, col)], den[(t, col)]).abs());
        }
    }
    m
}

/// Mean over transitions of `softplus(k (delta3 - a_t)) / k` where `a_t` is
/// the mean absolute actuator change.
pub fn finger_activity_energy(spec: &EnvSpec, den: &Array2, delta3: f64, sharpness: f64) -> (f64, Array2) {
    let h = den.rows();
    let mut grad = Array2::zeros(h, den.cols());
    if h < 2 || spec.actuator_idx.is_empty() {
        return (0.0, grad);
    }
    let n = spec.actuator_idx.len() as f64;
    let steps = (h - 1) as f64;
    let mut e = 0.0;
    for t in 0..h - 1 {
        let mut act = 0.0;
        for &i in &spec.actuator_idx {
            let col = obs_col(spec, i);
            act += (den[(t + 1, col)] - den[(t, col)]).abs() / n;
        }
        let z = sharpness * (delta3 - act);
        e += softplus(z) / sharpness / steps;
        // d/d act of softplus(k (delta3 - act)) / k = -sigmoid(z)
        let da = -sigmoid(z) / steps;
        for &i in &spec.actuator_idx {
            let col = obs_col(spec, i);
            let d = den[(t + 1, col)] - den[(t, col)];
            let s = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            grad[(t + 1, col)] += da * s / n;
            grad[(t, col)] -= da * s / n;
        }
    }
    (e, grad)
}

/// Post iff the hand is strictly within `delta1` of the contact point at the
/// first step. Tasks without a contact point are always post-contact.
pub fn select_phase(spec: &EnvSpec, den: &Array2, delta1: f64) -> Phase {
    match contact_gap(spec, den) {
        Some(d) if d >= delta1 => Phase::Pre,
        _ => Phase::Post,
    }
}

fn contact_gap(spec: &EnvSpec, den: &Array2) -> Option<f64> {
    spec.contact_distance(&den.row(0)[spec.act_dim..])
}

/// Hard phase mask, or the linear blend when `cfg.blend` is set.
pub fn phase_weights(spec: &EnvSpec, den: &Array2, cfg: &GuidanceConfig) -> PhaseWeights {
    if !cfg.blend {
        return PhaseWeights::hard(select_phase(spec, den, cfg.delta1));
    }
    match contact_gap(spec, den) {
        None => PhaseWeights::hard(Phase::Post),
        Some(d) => {
            let post = ((2.0 * cfg.delta1 - d) / cfg.delta1).clamp(0.0, 1.0);
            PhaseWeights { pre: 1.0 - post, post }
        }
    }
}

/// `g = -sum_i w_i p_i grad e_i` over gradient terms; terms with zero phase
/// weight contribute exactly nothing. Rows are discounted by `gamma^t`.
pub fn compose_gradient(terms: &[Arc<dyn EnergyTerm>], x: &GuideInput, phase: PhaseWeights, cfg: &GuidanceConfig) -> Result<Array2> {
    let mut g = Array2::zeros(x.norm.rows(), x.norm.cols());
    for term in terms {
        let pw = phase.for_term(term.phase());
        if pw == 0.0 || term.weight() == 0.0 || term.project(&x.den).is_some() {
            continue;
        }
        let (_, grad) = term.eval(x)?;
        if !grad.is_finite() {
            return Err(Error::GuidanceDivergence { term: term.name().to_string() });
        }
        g.axpy(-term.weight() * pw, &grad);
    }
    if cfg.gamma != 1.0 {
        let mut d = 1.0;
        for r in 0..g.rows() {
            for v in g.row_mut(r) {
                *v *= d;
            }
            d *= cfg.gamma;
        }
    }
    Ok(g)
}

/// `sum_i w_i p_i e_i` over the same terms as [`compose_gradient`].
pub fn total_energy(terms: &[Arc<dyn EnergyTerm>], x: &GuideInput, phase: PhaseWeights) -> Result<f64> {
    let mut e = 0.0;
    for term in terms {
        let pw = phase.for_term(term.phase());
        if pw == 0.0 || term.weight() == 0.0 || term.project(&x.den).is_some() {
            continue;
        }
        e += term.weight() * pw * term.eval(x)?.0;
    }
    Ok(e)
}

/// Applies every projection active in the given phase, in term order.
pub fn apply_projections(terms: &[Arc<dyn EnergyTerm>], den: &Array2, phase: PhaseWeights) -> Option<Array2> {
    let mut cur: Option<Array2> = None;
    for term in terms {
        if phase.for_term(term.phase()) == 0.0 {
            continue;
        }
        if let Some(p) = term.project(cur.as_ref().unwrap_or(den)) {
            cur = Some(p);
        }
    }
    cur
}

pub struct AlignTerm {
    pub spec: EnvSpec,
    pub weight: f64,
}

impl EnergyTerm for AlignTerm {
    fn name(&self) -> &str {
        "align"
    }
    fn phase(&self) -> TermPhase {
        TermPhase::Pre
    }
    fn weight(&self) -> f64 {
        self.weight
    }
    fn eval(&self, x: &GuideInput) -> Result<(f64, Array2)> {
        let (e, g) = align_energy(&self.spec, &x.den);
        Ok((e, x.chain(g)))
    }
}

pub struct GoalTerm {
    pub spec: EnvSpec,
    pub goal: Vec<f64>,
    pub soft: bool,
    pub phase: TermPhase,
    pub weight: f64,
}

impl EnergyTerm for GoalTerm {
    fn name(&self) -> &str {
        "goal"
    }
    fn phase(&self) -> TermPhase {
        self.phase
    }
    fn weight(&self) -> f64 {
        self.weight
    }
    fn eval(&self, x: &GuideInput) -> Result<(f64, Array2)> {
        let (e, g) = goal_energy(&self.spec, &x.den, &self.goal, self.soft);
        Ok((e, x.chain(g)))
    }
}

pub struct ActivityTerm {
    pub spec: EnvSpec,
    pub delta3: f64,
    pub sharpness: f64,
    pub weight: f64,
}

impl EnergyTerm for ActivityTerm {
    fn name(&self) -> &str {
        "finger_activity"
    }
    fn phase(&self) -> TermPhase {
        TermPhase::Both
    }
    fn weight(&self) -> f64 {
        self.weight
    }
    fn eval(&self, x: &GuideInput) -> Result<(f64, Array2)> {
        let (e, g) = finger_activity_energy(&self.spec, &x.den, self.delta3, self.sharpness);
        Ok((e, x.chain(g)))
    }
}

/// Dynamics consistency, evaluated in normalized units.
pub struct DynamicsTerm {
    pub model: Arc<DynamicsModel>,
    pub weight: f64,
}

impl EnergyTerm for DynamicsTerm {
    fn name(&self) -> &str {
        "dynamics"
    }
    fn phase(&self) -> TermPhase {
        TermPhase::Both
    }
    fn weight(&self) -> f64 {
        self.weight
    }
    fn eval(&self, x: &GuideInput) -> Result<(f64, Array2)> {
        dyn_energy_and_grad(&self.model, &x.norm, true)
    }
}

/// Per-step object limit, applied as a projection.
pub struct PenaltyTerm {
    pub spec: EnvSpec,
    pub delta2: f64,
    pub phase: TermPhase,
}

impl EnergyTerm for PenaltyTerm {
    fn name(&self) -> &str {
        "penalty"
    }
    fn phase(&self) -> TermPhase {
        self.phase
    }
    fn weight(&self) -> f64 {
        1.0
    }
    /// Number of violating steps; carries no gradient.
    fn eval(&self, x: &GuideInput) -> Result<(f64, Array2)> {
        let mut count = 0.0;
        for &i in &self.spec.object_idx {
            let col = obs_col(&self.spec, i);
            for t in 0..x.den.rows().saturating_sub(1) {
                if goal_diff(&self.spec, i, x.den[(t + 1, col)], x.den[(t, col)]).abs() > self.delta2 {
                    count += 1.0;
                }
            }
        }
        Ok((count, Array2::zeros(x.den.rows(), x.den.cols())))
    }
    fn project(&self, den: &Array2) -> Option<Array2> {
        Some(penalty_project(&self.spec, den, self.delta2))
    }
}

/// The dual-phase recipe. Contact tasks: alignment before contact; goal and
/// penalty after; dynamics throughout. In-hand tasks: goal, finger activity,
/// dynamics and penalty, with no alignment.
pub fn builtin_terms(spec: &EnvSpec, goal: &[f64], cfg: &GuidanceConfig, dynamics: Option<Arc<DynamicsModel>>) -> Result<Vec<Arc<dyn EnergyTerm>>> {
    spec.validate_goal(goal)?;
    let w = &cfg.weights;
    let mut terms: Vec<Arc<dyn EnergyTerm>> = Vec::new();
    let in_hand = spec.contact.is_none();
    let post = if in_hand { TermPhase::Both } else { TermPhase::Post };
    if !in_hand {
        terms.push(Arc::new(AlignTerm {
            spec: spec.clone(),
            weight: w.align,
        }));
    }
    terms.push(Arc::new(GoalTerm {
        spec: spec.clone(),
        goal: goal.to_vec(),
        soft: cfg.soft_goal,
        phase: post,
        weight: w.goal,
    }));
    if in_hand {
        terms.push(Arc::new(ActivityTerm {
            spec: spec.clone(),
            delta3: cfg.delta3,
            sharpness: cfg.activity_sharpness,
            weight: w.activity,
        }));
    }
    if let Some(model) = dynamics {
        if model.env != spec.id {
            return Err(Error::Dimension(format!("dynamics model for {} used on {}", model.env, spec.id)));
        }
        terms.push(Arc::new(DynamicsTerm { model, weight: w.dynamics }));
    }
    terms.push(Arc::new(PenaltyTerm {
        spec: spec.clone(),
        delta2: cfg.delta2,
        phase: post,
    }));
    Ok(terms)
}

/// Goal energy alone, active in every phase, with no dynamics or penalty.
pub fn naive_terms(spec: &EnvSpec, goal: &[f64], cfg: &GuidanceConfig) -> Result<Vec<Arc<dyn EnergyTerm>>> {
    spec.validate_goal(goal)?;
    Ok(vec![Arc::new(GoalTerm {
        spec: spec.clone(),
        goal: goal.to_vec(),
        soft: cfg.soft_goal,
        phase: TermPhase::Both,
        weight: cfg.weights.goal,
    })])
}
