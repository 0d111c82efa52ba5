//! Deterministic kinematic contact toys.
//!
//! Each environment has controllable hand dimensions and object dimensions
//! that only move through contact (door, hammer) or through sufficiently
//! active finger motion (disk). Because object motion is always mediated by
//! the hand, a plan whose object states move on their own is physically
//! impossible and shows up in [`ghost_metric`].

use std::f64::consts::{FRAC_PI_2, FRAC_PI_3, FRAC_PI_4, PI};
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};

pub type EnvState = Vec<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EnvId {
    Door1D,
    Hammer1D,
    Disk,
}

impl EnvId {
    pub const ALL: [EnvId; 3] = [EnvId::Door1D, EnvId::Hammer1D, EnvId::Disk];

    pub fn as_str(self) -> &'static str {
        match self {
            EnvId::Door1D => "door1d",
            EnvId::Hammer1D => "hammer1d",
            EnvId::Disk => "disk",
        }
    }

    pub fn spec(self) -> EnvSpec {
        match self {
            EnvId::Door1D => door::spec(),
            EnvId::Hammer1D => hammer::spec(),
            EnvId::Disk => disk::spec(),
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "door1d" => Ok(EnvId::Door1D),
            "hammer1d" => Ok(EnvId::Hammer1D),
            "disk" => Ok(EnvId::Disk),
            other => Err(Error::UnknownEnv(other.to_string())),
        }
    }
}

/// Observation indices of the hand position and the object's contact point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContactPoints {
    pub hand: usize,
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub id: EnvId,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub obs_names: Vec<&'static str>,
    pub act_names: Vec<&'static str>,
    pub hand_idx: Vec<usize>,
    pub object_idx: Vec<usize>,
    /// `None` for in-hand tasks, which have no pre-contact phase.
    pub contact: Option<ContactPoints>,
    /// State dimensions whose motion counts as actuator activity.
    pub actuator_idx: Vec<usize>,
    /// Object dimensions a goal vector refers to.
    pub goal_idx: Vec<usize>,
    /// Dimensions holding angles wrapped to (-pi, pi].
    pub wrapped_idx: Vec<usize>,
    pub action_bounds: Vec<f64>,
    pub obs_low: Vec<f64>,
    pub obs_high: Vec<f64>,
    /// Contact distance (also the default phase threshold).
    pub delta_contact: f64,
    /// Max per-step object delta.
    pub delta_object: f64,
    /// Min actuator activity.
    pub delta_activity: f64,
    pub success_tol: f64,
    /// Consecutive final steps the goal must hold before an episode may stop early.
    pub settle_steps: usize,
    pub training_goal: Vec<f64>,
    pub default_max_steps: usize,
    pub demo_length: usize,
}

impl EnvSpec {
    pub fn goal_dim(&self) -> usize {
        self.goal_idx.len()
    }

    pub fn validate_goal(&self, goal: &[f64]) -> Result<()> {
        if goal.len() != self.goal_dim() {
            return Err(Error::Config(format!(
                "{} expects a {}-dimensional goal, got {}",
                self.id,
                self.goal_dim(),
                goal.len()
            )));
        }
        for (&g, &i) in goal.iter().zip(&self.goal_idx) {
            if !g.is_finite() || g < self.obs_low[i] || g > self.obs_high[i] {
                return Err(Error::Config(format!(
                    "goal {g} for `{}` outside [{}, {}]",
                    self.obs_names[i], self.obs_low[i], self.obs_high[i]
                )));
            }
        }
        Ok(())
    }

    pub fn clip_action(&self, action: &[f64]) -> Vec<f64> {
        action.iter().zip(&self.action_bounds).map(|(a, b)| a.clamp(-b, *b)).collect()
    }

    /// Distance between hand and contact point, if the task has one.
    pub fn contact_distance(&self, state: &[f64]) -> Option<f64> {
        self.contact.map(|c| (state[c.hand] - state[c.target]).abs())
    }

    fn diff(&self, i: usize, a: f64, b: f64) -> f64 {
        if self.wrapped_idx.contains(&i) {
            wrap_angle(a - b)
        } else {
            a - b
        }
    }
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(x: f64) -> f64 {
    if x > -PI && x <= PI {
        return x;
    }
    let two_pi = 2.0 * PI;
    let mut y = (x + PI).rem_euclid(two_pi) - PI;
    if y <= -PI {
        y += two_pi;
    }
    y
}

fn check_inputs(spec: &EnvSpec, state: &[f64], action: &[f64]) -> Result<()> {
    if state.len() != spec.obs_dim || action.len() != spec.act_dim {
        return Err(Error::Dimension(format!(
            "{} expects state {} / action {}, got {} / {}",
            spec.id,
            spec.obs_dim,
            spec.act_dim,
            state.len(),
            action.len()
        )));
    }
    if state.iter().chain(action).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("environment step input"));
    }
    Ok(())
}

/// Advances the simulator by one step. Actions are clipped to the bounds.
pub fn step(spec: &EnvSpec, state: &[f64], action: &[f64]) -> Result<EnvState> {
    check_inputs(spec, state, action)?;
    let a = spec.clip_action(action);
    Ok(match spec.id {
        EnvId::Door1D => door::step(spec, state, &a),
        EnvId::Hammer1D => hammer::step(spec, state, &a),
        EnvId::Disk => disk::step(spec, state, &a),
    })
}

/// Initial state for an episode aiming at `goal`.
pub fn reset<R: Rng + ?Sized>(spec: &EnvSpec, goal: &[f64], rng: &mut R) -> EnvState {
    match spec.id {
        EnvId::Door1D => door::reset(goal, rng),
        EnvId::Hammer1D => hammer::reset(rng),
        EnvId::Disk => disk::reset(rng),
    }
}

/// Scripted proportional controller that reaches `goal` from any reset state.
pub fn expert_action(spec: &EnvSpec, state: &[f64], goal: &[f64]) -> Vec<f64> {
    let a = match spec.id {
        EnvId::Door1D => door::expert(state, goal[0]),
        EnvId::Hammer1D => hammer::expert(state, goal[0]),
        EnvId::Disk => disk::expert(state, goal[0]),
    };
    spec.clip_action(&a)
}

fn goal_error(spec: &EnvSpec, state: &[f64], goal: &[f64]) -> f64 {
    spec.goal_idx
        .iter()
        .zip(goal)
        .map(|(&i, &g)| spec.diff(i, state[i], g).abs())
        .fold(0.0, f64::max)
}

/// Task success over a rollout's visited states (`states[0]` is the reset state).
///
/// Door and disk must hold the goal over the final `settle_steps` states;
/// the hammer only looks at the final nail depth.
pub fn success(spec: &EnvSpec, states: &[EnvState], goal: &[f64]) -> bool {
    let Some(last) = states.last() else {
        return false;
    };
    match spec.id {
        EnvId::Hammer1D => goal_error(spec, last, goal) < spec.success_tol,
        EnvId::Door1D | EnvId::Disk => held(spec, states, goal, spec.settle_steps),
    }
}

/// True once the goal has held for the last `spec.settle_steps` states.
pub fn settled(spec: &EnvSpec, states: &[EnvState], goal: &[f64]) -> bool {
    held(spec, states, goal, spec.settle_steps)
}

fn held(spec: &EnvSpec, states: &[EnvState], goal: &[f64], n: usize) -> bool {
    states.len() >= n && states[states.len() - n..].iter().all(|s| goal_error(spec, s, goal) < spec.success_tol)
}

/// Mean per-step normalized L2 gap between predicted states and the
/// simulator's replay of the predicted actions from the first predicted state.
///
/// Dimensions whose `sigma` is zero are skipped.
pub fn ghost_metric(spec: &EnvSpec, predicted_states: &[EnvState], predicted_actions: &[Vec<f64>], sigma: &[f64]) -> Result<f64> {
    let h = predicted_states.len();
    if h == 0 || predicted_actions.len() + 1 < h || sigma.len() != spec.obs_dim {
        return Err(Error::Dimension(format!(
            "ghost metric needs H states, >= H-1 actions and {} sigmas",
            spec.obs_dim
        )));
    }
    let mut skipped = Vec::new();
    for (i, &s) in sigma.iter().enumerate() {
        if !(s > 0.0) {
            skipped.push(i);
        }
    }
    if !skipped.is_empty() {
        log::warn!("ghost metric: skipping zero-variance dimensions {skipped:?}");
    }
    let mut sim = predicted_states[0].clone();
    let mut total = 0.0;
    for t in 0..h {
        if t > 0 {
            sim = step(spec, &sim, &predicted_actions[t - 1])?;
        }
        let pred = &predicted_states[t];
        let mut sq = 0.0;
        for i in 0..spec.obs_dim {
            if skipped.contains(&i) {
                continue;
            }
            let d = spec.diff(i, pred[i], sim[i]) / sigma[i];
            sq += d * d;
        }
        total += sq.sqrt();
    }
    Ok(total / h as f64)
}

pub mod door {
    //! Door with a latch. State `[p, grip, latch, hinge, handle_x]`,
    //! action `[dp, dgrip]`. The handle sits at `1 - 0.5 * hinge`, so pulling
    //! the hand toward -x opens the door and the handle tracks the hand.

    use super::*;

    pub const HANDLE_REST: f64 = 1.0;
    pub const HANDLE_ARM: f64 = 0.5;
    pub const LATCH_GAIN: f64 = 1.2;
    pub const LATCH_OPEN: f64 = FRAC_PI_4;
    pub const HINGE_MAX: f64 = 2.0 * FRAC_PI_3;
    const LATCH_TARGET: f64 = 1.0;
    const ALIGN_TOL: f64 = 0.02;

    pub fn handle_x(hinge: f64) -> f64 {
        HANDLE_REST - HANDLE_ARM * hinge
    }

    pub(super) fn spec() -> EnvSpec {
        EnvSpec {
            id: EnvId::Door1D,
            obs_dim: 5,
            act_dim: 2,
            obs_names: vec!["hand_x", "grip", "latch", "hinge", "handle_x"],
            act_names: vec!["d_hand_x", "d_grip"],
            hand_idx: vec![0, 1],
            object_idx: vec![2, 3, 4],
            contact: Some(ContactPoints { hand: 0, target: 4 }),
            actuator_idx: vec![1],
            goal_idx: vec![3],
            wrapped_idx: vec![],
            action_bounds: vec![0.05, 0.1],
            obs_low: vec![-0.5, 0.0, 0.0, 0.0, handle_x(HINGE_MAX)],
            obs_high: vec![2.0, 1.0, FRAC_PI_2, HINGE_MAX, HANDLE_REST],
            delta_contact: 0.1,
            delta_object: 0.15,
            delta_activity: 0.01,
            success_tol: 0.1,
            settle_steps: 5,
            training_goal: vec![FRAC_PI_2],
            default_max_steps: 80,
            demo_length: 64,
        }
    }

    pub(super) fn step(spec: &EnvSpec, s: &[f64], a: &[f64]) -> EnvState {
        let (lo, hi) = (&spec.obs_low, &spec.obs_high);
        let (p, g, latch, hinge, handle) = (s[0], s[1], s[2], s[3], s[4]);
        let p2 = (p + a[0]).clamp(lo[0], hi[0]);
        let g2 = (g + a[1]).clamp(lo[1], hi[1]);
        let mut out = vec![p2, g2, latch, hinge, handle];
        if (p - handle).abs() < spec.delta_contact {
            out[2] = (latch + LATCH_GAIN * (g2 - g)).clamp(lo[2], hi[2]);
            if latch >= LATCH_OPEN {
                let h2 = (hinge - a[0] / HANDLE_ARM).clamp(lo[3], hi[3]);
                out[3] = h2;
                out[4] = handle_x(h2);
            }
        }
        out
    }

    pub(super) fn reset<R: Rng + ?Sized>(goal: &[f64], rng: &mut R) -> EnvState {
        let closing = goal.first().is_some_and(|&g| g < 0.2);
        if closing {
            let hinge = rng.random_range(1.0..1.4);
            let h = handle_x(hinge);
            let p = h - rng.random_range(0.3..0.5);
            vec![p, 0.0, FRAC_PI_3, hinge, h]
        } else {
            vec![rng.random_range(0.0..0.3), 0.0, 0.0, 0.0, HANDLE_REST]
        }
    }

    pub(super) fn expert(s: &[f64], goal: f64) -> Vec<f64> {
        let (p, latch, hinge, handle) = (s[0], s[2], s[3], s[4]);
        let gap = handle - p;
        if gap.abs() > ALIGN_TOL {
            vec![gap, 0.0]
        } else if latch < LATCH_TARGET {
            vec![gap, 0.1]
        } else {
            vec![-HANDLE_ARM * (goal - hinge), 0.0]
        }
    }
}

pub mod hammer {
    //! Hammer and nail. State `[p_hand, p_hammer, depth]`, action `[dp]`.
    //! A grasped hammer moves with the hand; crossing the nail head at
    //! `x = 1` while moving +x drives the nail by `0.5 * dp`.

    use super::*;

    pub const NAIL_X: f64 = 1.0;
    pub const DRIVE_GAIN: f64 = 0.5;
    pub const FULL_DRIVE: f64 = 0.09;
    const GRASP_REACH: f64 = 0.1;
    const RETRACT_X: f64 = 0.6;
    const CONTACT_EPS: f64 = 1e-9;

    pub(super) fn spec() -> EnvSpec {
        EnvSpec {
            id: EnvId::Hammer1D,
            obs_dim: 3,
            act_dim: 1,
            obs_names: vec!["hand_x", "hammer_x", "nail_depth"],
            act_names: vec!["d_hand_x"],
            hand_idx: vec![0],
            object_idx: vec![1, 2],
            contact: Some(ContactPoints { hand: 0, target: 1 }),
            actuator_idx: vec![0],
            goal_idx: vec![2],
            wrapped_idx: vec![],
            action_bounds: vec![0.04],
            obs_low: vec![-0.5, -0.5, 0.0],
            obs_high: vec![1.5, NAIL_X, FULL_DRIVE],
            delta_contact: 0.1,
            delta_object: 0.05,
            delta_activity: 0.01,
            success_tol: 0.01,
            settle_steps: 12,
            training_goal: vec![FULL_DRIVE],
            default_max_steps: 96,
            demo_length: 72,
        }
    }

    pub(super) fn step(spec: &EnvSpec, s: &[f64], a: &[f64]) -> EnvState {
        let (lo, hi) = (&spec.obs_low, &spec.obs_high);
        let (hand, hammer, depth) = (s[0], s[1], s[2]);
        let dp = a[0];
        if (hand - hammer).abs() >= spec.delta_contact {
            return vec![(hand + dp).clamp(lo[0], hi[0]), hammer, depth];
        }
        let mut d2 = depth;
        let mut h2 = (hammer + dp).clamp(lo[1], hi[1]);
        if h2 >= NAIL_X - CONTACT_EPS {
            h2 = NAIL_X;
            if dp > 0.0 && hammer < NAIL_X - CONTACT_EPS {
                d2 = (depth + DRIVE_GAIN * dp).clamp(lo[2], hi[2]);
            }
        }
        let hand2 = (hand + (h2 - hammer)).clamp(lo[0], hi[0]);
        vec![hand2, h2, d2]
    }

    pub(super) fn reset<R: Rng + ?Sized>(rng: &mut R) -> EnvState {
        vec![rng.random_range(0.0..0.2), rng.random_range(0.45..0.55), 0.0]
    }

    pub(super) fn expert(s: &[f64], goal: f64) -> Vec<f64> {
        let (hand, hammer, depth) = (s[0], s[1], s[2]);
        let gap = hammer - hand;
        // The grasp closes as soon as the hand is within contact range.
        if gap.abs() >= GRASP_REACH {
            vec![gap]
        } else if depth < goal - 0.005 {
            // Two-step strike cycle: back off the nail head, then swing through it.
            if hammer >= NAIL_X - CONTACT_EPS {
                vec![-0.04]
            } else {
                vec![0.04]
            }
        } else {
            vec![RETRACT_X - hammer]
        }
    }
}

pub mod disk {
    //! Disk held by three fingers. State `[f1, f2, f3, theta]`, action
    //! `[df1, df2, df3]`. The disk turns by `K * mean(df)` only when the mean
    //! absolute finger motion exceeds the activity floor.

    use super::*;

    pub const TURN_GAIN: f64 = 1.2;
    pub const FINGER_LIMIT: f64 = 3.0;

    pub(super) fn spec() -> EnvSpec {
        EnvSpec {
            id: EnvId::Disk,
            obs_dim: 4,
            act_dim: 3,
            obs_names: vec!["finger1", "finger2", "finger3", "theta"],
            act_names: vec!["d_finger1", "d_finger2", "d_finger3"],
            hand_idx: vec![0, 1, 2],
            object_idx: vec![3],
            contact: None,
            actuator_idx: vec![0, 1, 2],
            goal_idx: vec![3],
            wrapped_idx: vec![3],
            action_bounds: vec![0.1, 0.1, 0.1],
            obs_low: vec![-FINGER_LIMIT, -FINGER_LIMIT, -FINGER_LIMIT, -PI],
            obs_high: vec![FINGER_LIMIT, FINGER_LIMIT, FINGER_LIMIT, PI],
            delta_contact: 0.1,
            delta_object: 0.15,
            delta_activity: 0.01,
            success_tol: 0.15,
            settle_steps: 5,
            training_goal: vec![FRAC_PI_2],
            default_max_steps: 64,
            demo_length: 48,
        }
    }

    pub(super) fn step(spec: &EnvSpec, s: &[f64], a: &[f64]) -> EnvState {
        let mut out = s.to_vec();
        let mut moved = [0.0; 3];
        for k in 0..3 {
            out[k] = (s[k] + a[k]).clamp(spec.obs_low[k], spec.obs_high[k]);
            moved[k] = out[k] - s[k];
        }
        let activity = moved.iter().map(|d| d.abs()).sum::<f64>() / 3.0;
        if activity > spec.delta_activity {
            let mean = moved.iter().sum::<f64>() / 3.0;
            out[3] = wrap_angle(s[3] + TURN_GAIN * mean);
        }
        out
    }

    pub(super) fn reset<R: Rng + ?Sized>(rng: &mut R) -> EnvState {
        let mut s: Vec<f64> = (0..3).map(|_| rng.random_range(-0.1..0.1)).collect();
        s.push(rng.random_range(-0.2..0.2));
        s
    }

    pub(super) fn expert(s: &[f64], goal: f64) -> Vec<f64> {
        let d = wrap_angle(goal - s[3]) / TURN_GAIN;
        vec![d; 3]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::seeded_rng;

    fn run_expert(spec: &EnvSpec, goal: &[f64], seed: u64, steps: usize) -> Vec<EnvState> {
        let mut rng = seeded_rng(seed);
        let mut s = reset(spec, goal, &mut rng);
        let mut states = vec![s.clone()];
        for _ in 0..steps {
            let a = expert_action(spec, &s, goal);
            s = step(spec, &s, &a).unwrap();
            states.push(s.clone());
        }
        states
    }

    #[test]
    fn door_no_contact_object_fixed() {
        let spec = EnvId::Door1D.spec();
        let s = vec![0.0, 0.0, 1.0, 0.3, door::handle_x(0.3)];
        for a in [[0.05, 0.1], [-0.05, -0.1], [0.0, 0.1]] {
            let s2 = step(&spec, &s, &a).unwrap();
            assert_eq!(&s2[2..], &s[2..]);
        }
    }

    #[test]
    fn door_latched_hinge_fixed() {
        let spec = EnvId::Door1D.spec();
        let s = vec![1.0, 0.0, 0.2, 0.0, 1.0];
        let s2 = step(&spec, &s, &[-0.05, 0.0]).unwrap();
        assert!((s2[0] - 0.95).abs() < 1e-15);
        assert_eq!(s2[3], 0.0);
        assert_eq!(s2[4], 1.0);
    }

    #[test]
    fn door_unlatched_pull_opens() {
        let spec = EnvId::Door1D.spec();
        let s = vec![1.0, 0.8, FRAC_PI_4, 0.0, 1.0];
        let s2 = step(&spec, &s, &[-0.05, 0.0]).unwrap();
        assert!((s2[3] - 0.1).abs() < 1e-12);
        assert!((s2[4] - s2[0]).abs() < 1e-12, "handle tracks hand");
    }

    #[test]
    fn hammer_depth_clamped() {
        let spec = EnvId::Hammer1D.spec();
        assert_eq!(spec.obs_high[2], 0.09);
        let s = vec![0.97, 0.97, 0.085];
        let s2 = step(&spec, &s, &[0.04]).unwrap();
        assert_eq!(s2[2], 0.09);
        assert_eq!(s2[1], 1.0);
    }

    #[test]
    fn hammer_strike_only_when_crossing() {
        let spec = EnvId::Hammer1D.spec();
        // Resting on the nail head: no drive.
        let s = vec![1.0, 1.0, 0.02];
        assert_eq!(step(&spec, &s, &[0.04]).unwrap()[2], 0.02);
        // Ungrasped hammer never moves.
        let s = vec![0.5, 0.97, 0.0];
        assert_eq!(step(&spec, &s, &[0.04]).unwrap()[1..], [0.97, 0.0]);
        let s = vec![0.97, 0.97, 0.0];
        assert!((step(&spec, &s, &[0.04]).unwrap()[2] - 0.02).abs() < 1e-15);
    }

    #[test]
    fn disk_zero_action_still() {
        let spec = EnvId::Disk.spec();
        let s = vec![0.1, -0.2, 0.3, 1.0];
        assert_eq!(step(&spec, &s, &[0.0, 0.0, 0.0]).unwrap(), s);
        // Below the activity floor nothing turns.
        let s2 = step(&spec, &s, &[0.005, 0.005, 0.005]).unwrap();
        assert_eq!(s2[3], 1.0);
        let s3 = step(&spec, &s, &[0.05, 0.05, 0.05]).unwrap();
        assert!((s3[3] - (1.0 + 1.2 * 0.05)).abs() < 1e-12);
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert_eq!(wrap_angle(0.3), 0.3);
    }

    #[test]
    fn experts_succeed_on_30_seeds() {
        for id in EnvId::ALL {
            let spec = id.spec();
            for seed in 0..30 {
                let states = run_expert(&spec, &spec.training_goal, seed, 200);
                assert!(success(&spec, &states, &spec.training_goal), "{id} seed {seed}");
            }
        }
    }

    #[test]
    fn door_expert_first_moves() {
        let spec = EnvId::Door1D.spec();
        let a = expert_action(&spec, &[0.1, 0.0, 0.0, 0.0, 1.0], &[FRAC_PI_2]);
        assert!(a[0] > 0.0);
        assert_eq!(a[1], 0.0);
        let a = expert_action(&spec, &[1.0, 0.0, 0.0, 0.0, 1.0], &[FRAC_PI_2]);
        assert!(a[1] > 0.0);
    }

    #[test]
    fn experts_reach_other_goals() {
        let door = EnvId::Door1D.spec();
        for goal in [PI / 6.0, 5.0 * PI / 18.0, 11.0 * PI / 18.0, 0.05] {
            for seed in 0..5 {
                let states = run_expert(&door, &[goal], seed, 200);
                assert!(success(&door, &states, &[goal]), "door goal {goal} seed {seed}");
            }
        }
        let hammer = EnvId::Hammer1D.spec();
        let states = run_expert(&hammer, &[0.04], 1, 200);
        assert!(success(&hammer, &states, &[0.04]));
        let disk = EnvId::Disk.spec();
        let states = run_expert(&disk, &[-2.0], 1, 200);
        assert!(success(&disk, &states, &[-2.0]));
    }

    #[test]
    fn success_requires_hold() {
        let spec = EnvId::Door1D.spec();
        let at = |h: f64| vec![0.0, 0.0, 1.0, h, door::handle_x(h)];
        let held: Vec<_> = (0..6).map(|_| at(0.5)).collect();
        assert!(success(&spec, &held, &[0.5]));
        let mut swung = held.clone();
        swung.push(at(0.8));
        assert!(!success(&spec, &swung, &[0.5]));
        let hammer = EnvId::Hammer1D.spec();
        assert!(success(&hammer, &[vec![0.5, 0.5, 0.04]], &[0.04]));
    }

    #[test]
    fn ghost_metric_zero_for_simulated_plans() {
        let spec = EnvId::Door1D.spec();
        let mut rng = seeded_rng(9);
        let mut s = reset(&spec, &spec.training_goal, &mut rng);
        let mut states = vec![s.clone()];
        let mut actions = Vec::new();
        for _ in 0..31 {
            let a = expert_action(&spec, &s, &spec.training_goal);
            s = step(&spec, &s, &a).unwrap();
            actions.push(a);
            states.push(s.clone());
        }
        let sigma = vec![0.3, 0.4, 0.5, 0.6, 0.3];
        assert_eq!(ghost_metric(&spec, &states, &actions, &sigma).unwrap(), 0.0);
    }

    #[test]
    fn ghost_metric_grows_with_teleport() {
        let spec = EnvId::Door1D.spec();
        let sigma = vec![0.3, 0.4, 0.5, 0.6, 0.3];
        let actions = vec![vec![0.0, 0.0]; 9];
        let mut last = 0.0;
        for jump in [0.1, 0.3, 0.6] {
            let states: Vec<_> = (0..10)
                .map(|t| {
                    let h = jump * t as f64 / 9.0;
                    vec![0.0, 0.0, 0.0, h, door::handle_x(h)]
                })
                .collect();
            let m = ghost_metric(&spec, &states, &actions, &sigma).unwrap();
            assert!(m > last, "jump {jump}: {m} <= {last}");
            last = m;
        }
    }

    #[test]
    fn non_finite_step_rejected() {
        let spec = EnvId::Disk.spec();
        assert!(step(&spec, &[0.0, 0.0, f64::NAN, 0.0], &[0.0; 3]).is_err());
        assert!(step(&spec, &[0.0; 3], &[0.0; 3]).is_err());
    }
}
