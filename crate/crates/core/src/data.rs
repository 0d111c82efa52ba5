//! Demonstrations, trajectory windows, normalization and the demo file format.
//!
//! Demo file layout (all little-endian): magic `CDD1`, `u32` env-id length,
//! UTF-8 env id, `u32` obs_dim, `u32` act_dim, `u32` episode count, then per
//! episode a `u32` transition count followed by `f64` rows of
//! `(state, action, next_state)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffcore::checkpoint::{expect_magic, read_f64s, read_str, read_u32, write_f64s, write_str, write_u32};
use crate::diffcore::{seeded_rng, Array2};
use crate::envs::{self, EnvId, EnvSpec};
use crate::error::{Error, Result};

pub const DEMO_MAGIC: &[u8; 4] = b"CDD1";

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub next_state: Vec<f64>,
}

pub type Episode = Vec<Transition>;

/// Per-dimension summary statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct DimStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl DimStats {
    fn from_rows<'a>(dim: usize, rows: impl Iterator<Item = &'a [f64]>) -> Self {
        let mut min = vec![f64::INFINITY; dim];
        let mut max = vec![f64::NEG_INFINITY; dim];
        let mut sum = vec![0.0; dim];
        let mut sum_sq = vec![0.0; dim];
        let mut n = 0usize;
        for r in rows {
            n += 1;
            for i in 0..dim {
                min[i] = min[i].min(r[i]);
                max[i] = max[i].max(r[i]);
                sum[i] += r[i];
                sum_sq[i] += r[i] * r[i];
            }
        }
        let nf = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let std = sum_sq.iter().zip(&mean).map(|(s, m)| (s / nf - m * m).max(0.0).sqrt()).collect();
        Self { min, max, mean, std }
    }

    /// Dimensions with `max - min` below `1e-12`.
    pub fn constant_dims(&self) -> Vec<usize> {
        (0..self.min.len()).filter(|&i| self.max[i] - self.min[i] < 1e-12).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoSet {
    pub env: EnvId,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub episodes: Vec<Episode>,
    pub state_stats: DimStats,
    pub action_stats: DimStats,
}

impl DemoSet {
    pub fn new(env: EnvId, obs_dim: usize, act_dim: usize, episodes: Vec<Episode>) -> Result<Self> {
        if episodes.is_empty() {
            return Err(Error::Config("demo set has no episodes".into()));
        }
        for (k, ep) in episodes.iter().enumerate() {
            if ep.is_empty() {
                return Err(Error::Config(format!("episode {k} is empty")));
            }
            for t in ep {
                if t.state.len() != obs_dim || t.next_state.len() != obs_dim || t.action.len() != act_dim {
                    return Err(Error::Dimension(format!("episode {k} has a transition with wrong dimensions")));
                }
                if t.state.iter().chain(&t.action).chain(&t.next_state).any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("demonstration"));
                }
            }
        }
        let state_stats = DimStats::from_rows(
            obs_dim,
            episodes
                .iter()
                .flat_map(|e| e.iter().flat_map(|t| [t.state.as_slice(), t.next_state.as_slice()])),
        );
        let action_stats = DimStats::from_rows(act_dim, episodes.iter().flat_map(|e| e.iter().map(|t| t.action.as_slice())));
        Ok(Self {
            env,
            obs_dim,
            act_dim,
            episodes,
            state_stats,
            action_stats,
        })
    }

    pub fn num_transitions(&self) -> usize {
        self.episodes.iter().map(Vec::len).sum()
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.episodes.iter().flatten()
    }
}

/// How the episode goal is drawn during collection.
#[derive(Clone, Debug, PartialEq)]
pub enum GoalSampler {
    Fixed(Vec<f64>),
    /// Independent uniform draw per goal dimension.
    Uniform {
        low: Vec<f64>,
        high: Vec<f64>,
    },
}

impl GoalSampler {
    /// Door and hammer train on a single goal; the disk trains on `(0, pi)`.
    pub fn training(spec: &EnvSpec) -> Self {
        match spec.id {
            EnvId::Disk => GoalSampler::Uniform {
                low: vec![0.3],
                high: vec![2.8],
            },
            _ => GoalSampler::Fixed(spec.training_goal.clone()),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            GoalSampler::Fixed(g) => g.clone(),
            GoalSampler::Uniform { low, high } => low.iter().zip(high).map(|(l, h)| rng.random_range(*l..*h)).collect(),
        }
    }
}

/// Source of demonstration actions.
pub trait Expert {
    fn act(&self, spec: &EnvSpec, state: &[f64], goal: &[f64], rng: &mut dyn rand::RngCore) -> Vec<f64>;
}

/// The environment's scripted controller with Gaussian action noise
/// (standard deviation `noise` times the action bound).
#[derive(Clone, Debug)]
pub struct ScriptedExpert {
    pub noise: f64,
}

impl Default for ScriptedExpert {
    fn default() -> Self {
        Self { noise: 0.15 }
    }
}

impl Expert for ScriptedExpert {
    fn act(&self, spec: &EnvSpec, state: &[f64], goal: &[f64], rng: &mut dyn rand::RngCore) -> Vec<f64> {
        let mut a = envs::expert_action(spec, state, goal);
        if self.noise > 0.0 {
            for (v, b) in a.iter_mut().zip(&spec.action_bounds) {
                let z: f64 = rng.sample(StandardNormal);
                *v += self.noise * b * z;
            }
        }
        spec.clip_action(&a)
    }
}

#[derive(Clone, Debug)]
pub struct DemoConfig {
    pub episodes: usize,
    pub seed: u64,
    pub goals: GoalSampler,
    /// Steps per episode; `None` uses the environment default.
    pub length: Option<usize>,
}

impl DemoConfig {
    pub fn new(spec: &EnvSpec, episodes: usize, seed: u64) -> Self {
        Self {
            episodes,
            seed,
            goals: GoalSampler::training(spec),
            length: None,
        }
    }
}

/// Rolls out the expert; every episode must end in success.
pub fn collect_demos(spec: &EnvSpec, expert: &dyn Expert, cfg: &DemoConfig) -> Result<DemoSet> {
    if cfg.episodes == 0 {
        return Err(Error::Config("episodes must be at least 1".into()));
    }
    let len = cfg.length.unwrap_or(spec.demo_length);
    let mut rng = seeded_rng(cfg.seed);
    let mut episodes = Vec::with_capacity(cfg.episodes);
    for k in 0..cfg.episodes {
        let goal = cfg.goals.sample(&mut rng);
        let mut s = envs::reset(spec, &goal, &mut rng);
        let mut states = vec![s.clone()];
        let mut ep = Vec::with_capacity(len);
        for _ in 0..len {
            let a = expert.act(spec, &s, &goal, &mut rng);
            let s2 = envs::step(spec, &s, &a)?;
            ep.push(Transition {
                state: s,
                action: a,
                next_state: s2.clone(),
            });
            states.push(s2.clone());
            s = s2;
        }
        if !envs::success(spec, &states, &goal) {
            return Err(Error::ExpertFailure { episode: k, seed: cfg.seed });
        }
        episodes.push(ep);
    }
    DemoSet::new(spec.id, spec.obs_dim, spec.act_dim, episodes)
}

/// Rows `(a_t, s_t)` of an episode, ending with the terminal state and a zero action.
pub fn episode_rows(ep: &Episode, act_dim: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = ep.iter().map(|t| t.action.iter().chain(&t.state).copied().collect()).collect();
    if let Some(last) = ep.last() {
        rows.push(std::iter::repeat_n(0.0, act_dim).chain(last.next_state.iter().copied()).collect());
    }
    rows
}

/// A window together with the episode it came from and its start offset.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub episode: usize,
    pub offset: usize,
    pub traj: Array2,
}

/// All contiguous length-`horizon` windows; short episodes are padded with
/// their terminal state and zero actions.
pub fn window_dataset(demos: &DemoSet, horizon: usize) -> Result<Vec<Window>> {
    if horizon < 2 {
        return Err(Error::Config(format!("horizon must be at least 2, got {horizon}")));
    }
    let width = demos.act_dim + demos.obs_dim;
    let mut out = Vec::new();
    for (e, ep) in demos.episodes.iter().enumerate() {
        let mut rows = episode_rows(ep, demos.act_dim);
        if rows.len() < horizon {
            let pad = rows.last().cloned().expect("episodes are non-empty");
            rows.resize(horizon, pad);
        }
        for k in 0..=rows.len() - horizon {
            let data = rows[k..k + horizon].iter().flatten().copied().collect();
            out.push(Window {
                episode: e,
                offset: k,
                traj: Array2::from_vec(horizon, width, data)?,
            });
        }
    }
    Ok(out)
}

/// Affine per-dimension map `x -> (x - offset) / scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub state_offset: Vec<f64>,
    pub state_scale: Vec<f64>,
    pub action_offset: Vec<f64>,
    pub action_scale: Vec<f64>,
}

fn minmax_affine(stats: &DimStats) -> (Vec<f64>, Vec<f64>) {
    let mut offset = Vec::with_capacity(stats.min.len());
    let mut scale = Vec::with_capacity(stats.min.len());
    for (&lo, &hi) in stats.min.iter().zip(&stats.max) {
        if hi - lo < 1e-12 {
            offset.push(lo);
            scale.push(1.0);
        } else {
            offset.push(0.5 * (hi + lo));
            scale.push(0.5 * (hi - lo));
        }
    }
    (offset, scale)
}

impl Normalizer {
    /// Min-max fit to `[-1, 1]`; constant dimensions map to 0 with scale 1.
    pub fn fit(demos: &DemoSet) -> Result<Self> {
        if demos.num_transitions() == 0 {
            return Err(Error::Config("cannot fit a normalizer to an empty demo set".into()));
        }
        let (state_offset, state_scale) = minmax_affine(&demos.state_stats);
        let (action_offset, action_scale) = minmax_affine(&demos.action_stats);
        Ok(Self {
            state_offset,
            state_scale,
            action_offset,
            action_scale,
        })
    }

    pub fn identity(obs_dim: usize, act_dim: usize) -> Self {
        Self {
            state_offset: vec![0.0; obs_dim],
            state_scale: vec![1.0; obs_dim],
            action_offset: vec![0.0; act_dim],
            action_scale: vec![1.0; act_dim],
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.state_offset.len()
    }

    pub fn act_dim(&self) -> usize {
        self.action_offset.len()
    }

    pub fn width(&self) -> usize {
        self.obs_dim() + self.act_dim()
    }

    pub fn normalize_state(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(self.state_offset.iter().zip(&self.state_scale))
            .map(|(x, (o, k))| (x - o) / k)
            .collect()
    }

    pub fn denormalize_state(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(self.state_offset.iter().zip(&self.state_scale))
            .map(|(x, (o, k))| x * k + o)
            .collect()
    }

    pub fn normalize_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(self.action_offset.iter().zip(&self.action_scale))
            .map(|(x, (o, k))| (x - o) / k)
            .collect()
    }

    pub fn denormalize_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(self.action_offset.iter().zip(&self.action_scale))
            .map(|(x, (o, k))| x * k + o)
            .collect()
    }

    /// Per-column scale of a `[action | state]` trajectory row.
    pub fn column_scales(&self) -> Vec<f64> {
        self.action_scale.iter().chain(&self.state_scale).copied().collect()
    }

    fn column_offsets(&self) -> Vec<f64> {
        self.action_offset.iter().chain(&self.state_offset).copied().collect()
    }

    pub fn normalize_traj(&self, traj: &Array2) -> Array2 {
        let (o, k) = (self.column_offsets(), self.column_scales());
        let mut out = traj.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - o[c]) / k[c];
            }
        }
        out
    }

    pub fn denormalize_traj(&self, traj: &Array2) -> Array2 {
        let (o, k) = (self.column_offsets(), self.column_scales());
        let mut out = traj.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = *v * k[c] + o[c];
            }
        }
        out
    }

    pub(crate) fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        write_u32(w, self.obs_dim() as u32)?;
        write_u32(w, self.act_dim() as u32)?;
        for block in [&self.state_offset, &self.state_scale, &self.action_offset, &self.action_scale] {
            write_f64s(w, block)?;
        }
        Ok(())
    }

    pub(crate) fn read<R: Read>(r: &mut R) -> Result<Self> {
        let obs = read_u32(r)? as usize;
        let act = read_u32(r)? as usize;
        if obs > 4096 || act > 4096 {
            return Err(Error::Format("implausible normalizer dimensions".into()));
        }
        let mut n = Self::identity(obs, act);
        for block in [&mut n.state_offset, &mut n.state_scale, &mut n.action_offset, &mut n.action_scale] {
            read_f64s(r, block)?;
        }
        if n.state_scale.iter().chain(&n.action_scale).any(|&k| !(k > 0.0 && k.is_finite())) {
            return Err(Error::Format("normalizer scale must be positive".into()));
        }
        Ok(n)
    }
}

pub fn write_demos<W: Write>(w: &mut W, demos: &DemoSet) -> Result<()> {
    w.write_all(DEMO_MAGIC)?;
    write_str(w, demos.env.as_str())?;
    write_u32(w, demos.obs_dim as u32)?;
    write_u32(w, demos.act_dim as u32)?;
    write_u32(w, demos.episodes.len() as u32)?;
    for ep in &demos.episodes {
        write_u32(w, ep.len() as u32)?;
        for t in ep {
            write_f64s(w, &t.state)?;
            write_f64s(w, &t.action)?;
            write_f64s(w, &t.next_state)?;
        }
    }
    Ok(())
}

pub fn read_demos<R: Read>(r: &mut R) -> Result<DemoSet> {
    expect_magic(r, DEMO_MAGIC)?;
    let env: EnvId = read_str(r)?.parse().map_err(|e: Error| Error::Format(e.to_string()))?;
    let obs_dim = read_u32(r)? as usize;
    let act_dim = read_u32(r)? as usize;
    let spec = env.spec();
    if obs_dim != spec.obs_dim || act_dim != spec.act_dim {
        return Err(Error::Dimension(format!(
            "header declares {obs_dim}/{act_dim} dims but {env} has {}/{}",
            spec.obs_dim, spec.act_dim
        )));
    }
    let n_eps = read_u32(r)? as usize;
    let mut episodes = Vec::with_capacity(n_eps.min(1 << 16));
    for _ in 0..n_eps {
        let len = read_u32(r)? as usize;
        let mut ep = Vec::with_capacity(len.min(1 << 16));
        for _ in 0..len {
            let mut t = Transition {
                state: vec![0.0; obs_dim],
                action: vec![0.0; act_dim],
                next_state: vec![0.0; obs_dim],
            };
            read_f64s(r, &mut t.state)?;
            read_f64s(r, &mut t.action)?;
            read_f64s(r, &mut t.next_state)?;
            ep.push(t);
        }
        episodes.push(ep);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after last episode".into()));
    }
    DemoSet::new(env, obs_dim, act_dim, episodes)
}

pub fn save_demos(path: &Path, demos: &DemoSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_demos(&mut w, demos)?;
    w.flush()?;
    Ok(())
}

pub fn load_demos(path: &Path) -> Result<DemoSet> {
    let mut r = BufReader::new(File::open(path)?);
    read_demos(&mut r)
}

/// Loads a demo file and checks it belongs to `spec`'s environment.
pub fn load_demos_for(path: &Path, spec: &EnvSpec) -> Result<DemoSet> {
    let demos = load_demos(path)?;
    if demos.env != spec.id || demos.obs_dim != spec.obs_dim || demos.act_dim != spec.act_dim {
        return Err(Error::Dimension(format!(
            "demo file is for {} ({} obs / {} act), expected {} ({} / {})",
            demos.env, demos.obs_dim, demos.act_dim, spec.id, spec.obs_dim, spec.act_dim
        )));
    }
    Ok(demos)
}
