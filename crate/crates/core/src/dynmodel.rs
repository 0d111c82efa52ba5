//! Learned one-step forward model and the dynamics-consistency energy.
//!
//! The network works in normalized units and predicts a residual, so
//! `s' = s + f([s, a])`. Trajectories follow the planner layout: each row is
//! `[a_t | s_t]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{DemoSet, Normalizer};
use crate::diffcore::checkpoint::{self, expect_magic, read_str, write_str};
use crate::diffcore::{seeded_rng, Activation, AdamState, Array2, MlpParams};
use crate::envs::EnvId;
use crate::error::{Error, Result};

pub const DYN_MAGIC: &[u8; 4] = b"CDY1";

#[derive(Clone, Debug)]
pub struct DynTrainConfig {
    pub hidden: usize,
    pub depth: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Fraction of transitions held out for the reported MSE.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for DynTrainConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            depth: 2,
            steps: 4000,
            batch: 128,
            lr: 1e-3,
            holdout: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsModel {
    pub params: MlpParams,
    pub env: EnvId,
    pub normalizer: Normalizer,
    /// Held-out one-step MSE in normalized units, measured after training.
    pub heldout_mse: f64,
}

impl DynamicsModel {
    pub fn obs_dim(&self) -> usize {
        self.normalizer.obs_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.normalizer.act_dim()
    }

    /// Next normalized state for a batch of normalized `[s | a]` rows.
    pub fn predict_batch(&self, inputs: &Array2) -> Result<Array2> {
        let mut out = self.params.forward(inputs)?;
        let obs = self.obs_dim();
        for r in 0..out.rows() {
            let s = &inputs.row(r)[..obs];
            for (o, x) in out.row_mut(r).iter_mut().zip(s) {
                *o += x;
            }
        }
        Ok(out)
    }

    /// Next normalized state from a normalized state and action.
    pub fn predict(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        let x = Array2::from_vec(1, s.len() + a.len(), s.iter().chain(a).copied().collect())?;
        Ok(self.predict_batch(&x)?.into_vec())
    }

    /// Prediction and its Jacobian (`obs x (obs + act)`) with respect to `[s | a]`.
    pub fn jacobian(&self, s: &[f64], a: &[f64]) -> Result<(Vec<f64>, Array2)> {
        let obs = self.obs_dim();
        let width = s.len() + a.len();
        let x = Array2::from_vec(1, width, s.iter().chain(a).copied().collect())?;
        let cache = self.params.forward_cached(&x)?;
        let mut pred = cache.output.clone().into_vec();
        for (p, v) in pred.iter_mut().zip(s) {
            *p += v;
        }
        let mut jac = Array2::zeros(obs, width);
        for k in 0..obs {
            let mut up = Array2::zeros(1, obs);
            up[(0, k)] = 1.0;
            let (_, dx) = self.params.backward_cached(&cache, &up)?;
            jac.row_mut(k).copy_from_slice(dx.row(0));
            jac[(k, k)] += 1.0;
        }
        Ok((pred, jac))
    }

    /// Mean squared one-step error in normalized units over the given transitions.
    pub fn mse(&self, demos: &DemoSet) -> Result<f64> {
        let (x, y) = transition_arrays(demos, &self.normalizer)?;
        let pred = self.predict_batch(&x)?;
        Ok(mean_sq_diff(&pred, &y))
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
        w.write_all(DYN_MAGIC)?;
        write_str(w, self.env.as_str())?;
        checkpoint::write_f64s(w, &[self.heldout_mse])?;
        self.normalizer.write(w)?;
        checkpoint::write_params(w, &self.params)
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        expect_magic(r, DYN_MAGIC)?;
        let env: EnvId = read_str(r)?.parse()?;
        let mut mse = [0.0];
        checkpoint::read_f64s(r, &mut mse)?;
        let normalizer = Normalizer::read(r)?;
        let params = checkpoint::read_params(r)?;
        let spec = env.spec();
        if normalizer.obs_dim() != spec.obs_dim
            || normalizer.act_dim() != spec.act_dim
            || params.input_dim() != spec.obs_dim + spec.act_dim
            || params.output_dim() != spec.obs_dim
        {
            return Err(Error::Dimension(format!("dynamics checkpoint does not fit {env}")));
        }
        Ok(Self {
            params,
            env,
            normalizer,
            heldout_mse: mse[0],
        })
    }
}

fn mean_sq_diff(a: &Array2, b: &Array2) -> f64 {
    let n = a.len().max(1) as f64;
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

/// Normalized `[s | a]` inputs and next-state targets.
fn transition_arrays(demos: &DemoSet, norm: &Normalizer) -> Result<(Array2, Array2)> {
    let (obs, act) = (demos.obs_dim, demos.act_dim);
    let n = demos.num_transitions();
    let mut x = Vec::with_capacity(n * (obs + act));
    let mut y = Vec::with_capacity(n * obs);
    for t in demos.transitions() {
        x.extend(norm.normalize_state(&t.state));
        x.extend(norm.normalize_action(&t.action));
        y.extend(norm.normalize_state(&t.next_state));
    }
    Ok((Array2::from_vec(n, obs + act, x)?, Array2::from_vec(n, obs, y)?))
}

fn gather(src: &Array2, idx: &[usize]) -> Array2 {
    let mut out = Array2::zeros(idx.len(), src.cols());
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(src.row(i));
    }
    out
}

/// Fits the residual forward model on the demo transitions.
pub fn train_dynamics(demos: &DemoSet, normalizer: &Normalizer, cfg: &DynTrainConfig) -> Result<DynamicsModel> {
    if demos.num_transitions() < 2 {
        return Err(Error::Config("dynamics training needs at least 2 transitions".into()));
    }
    if cfg.steps == 0 || cfg.batch == 0 || cfg.depth == 0 || cfg.hidden == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("dynamics config values must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.holdout) {
        return Err(Error::Config(format!("holdout fraction {} outside [0, 1)", cfg.holdout)));
    }
    let (obs, act) = (demos.obs_dim, demos.act_dim);
    let (x, y) = transition_arrays(demos, normalizer)?;
    let mut rng = seeded_rng(cfg.seed);
    let mut order: Vec<usize> = (0..x.rows()).collect();
    order.shuffle(&mut rng);
    let n_hold = ((x.rows() as f64 * cfg.holdout) as usize).min(x.rows() - 1);
    let (hold, train) = order.split_at(n_hold);

    let mut sizes = vec![obs + act];
    sizes.extend(std::iter::repeat_n(cfg.hidden, cfg.depth));
    sizes.push(obs);
    let mut params = MlpParams::init(&sizes, Activation::Mish, &mut rng)?;
    let mut adam = AdamState::new(&params, cfg.lr);
    let mut idx = vec![0usize; cfg.batch];
    for step in 0..cfg.steps {
        for i in idx.iter_mut() {
            *i = train[rng.random_range(0..train.len())];
        }
        let xb = gather(&x, &idx);
        let yb = gather(&y, &idx);
        let cache = params.forward_cached(&xb)?;
        let scale = 2.0 / (cfg.batch * obs) as f64;
        let mut up = cache.output.clone();
        let mut loss = 0.0;
        for r in 0..up.rows() {
            let s = &xb.row(r)[..obs];
            let target = yb.row(r);
            for ((u, sv), tv) in up.row_mut(r).iter_mut().zip(s).zip(target) {
                let d = *u + sv - tv;
                loss += d * d;
                *u = scale * d;
            }
        }
        loss /= (cfg.batch * obs) as f64;
        if !loss.is_finite() {
            return Err(Error::TrainingDivergence { step, loss });
        }
        let (grads, _) = params.backward_cached(&cache, &up)?;
        adam.update(&mut params, &grads)?;
    }
    let mut model = DynamicsModel {
        params,
        env: demos.env,
        normalizer: normalizer.clone(),
        heldout_mse: f64::NAN,
    };
    let eval_idx = if hold.is_empty() { train } else { hold };
    let pred = model.predict_batch(&gather(&x, eval_idx))?;
    model.heldout_mse = mean_sq_diff(&pred, &gather(&y, eval_idx));
    log::info!("dynamics {}: held-out mse {:.3e}", demos.env, model.heldout_mse);
    Ok(model)
}

/// `sum_{t < H-1} |s_{t+1} - T(s_t, a_t)|^2` on a normalized trajectory.
pub fn dyn_energy(model: &DynamicsModel, traj: &Array2) -> Result<f64> {
    Ok(dyn_energy_and_grad(model, traj, false)?.0)
}

/// Gradient of [`dyn_energy`] with respect to every trajectory entry.
pub fn dyn_energy_grad(model: &DynamicsModel, traj: &Array2) -> Result<Array2> {
    Ok(dyn_energy_and_grad(model, traj, true)?.1)
}

pub fn dyn_energy_and_grad(model: &DynamicsModel, traj: &Array2, want_grad: bool) -> Result<(f64, Array2)> {
    let (obs, act) = (model.obs_dim(), model.act_dim());
    let h = traj.rows();
    if traj.cols() != obs + act {
        return Err(Error::shape("dyn_energy", format!("{} columns", obs + act), format!("{} columns", traj.cols())));
    }
    let mut grad = Array2::zeros(h, obs + act);
    if h < 2 {
        return Ok((0.0, grad));
    }
    // Network rows are [s | a]; trajectory rows are [a | s].
    let mut x = Array2::zeros(h - 1, obs + act);
    for t in 0..h - 1 {
        let row = traj.row(t);
        let xr = x.row_mut(t);
        xr[..obs].copy_from_slice(&row[act..]);
        xr[obs..].copy_from_slice(&row[..act]);
    }
    let cache = model.params.forward_cached(&x)?;
    let mut resid = Array2::zeros(h - 1, obs);
    let mut energy = 0.0;
    for t in 0..h - 1 {
        let next = &traj.row(t + 1)[act..];
        let s = &x.row(t)[..obs];
        let out = cache.output.row(t);
        for k in 0..obs {
            let r = next[k] - (s[k] + out[k]);
            resid[(t, k)] = r;
            energy += r * r;
        }
    }
    if !want_grad {
        return Ok((energy, grad));
    }
    let mut up = resid.clone();
    up.scale(-2.0);
    let (_, dx) = model.params.backward_cached(&cache, &up)?;
    for t in 0..h - 1 {
        for k in 0..obs {
            let r2 = 2.0 * resid[(t, k)];
            grad[(t + 1, act + k)] += r2;
            grad[(t, act + k)] += dx[(t, k)] - r2;
        }
        for j in 0..act {
            grad[(t, j)] += dx[(t, obs + j)];
        }
    }
    Ok((energy, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{collect_demos, DemoConfig, ScriptedExpert};
    use crate::envs;

    fn small_model(env: EnvId, seed: u64) -> DynamicsModel {
        let spec = env.spec();
        let mut rng = seeded_rng(seed);
        let sizes = [spec.obs_dim + spec.act_dim, 16, 16, spec.obs_dim];
        DynamicsModel {
            params: MlpParams::init(&sizes, Activation::Mish, &mut rng).unwrap(),
            env,
            normalizer: Normalizer::identity(spec.obs_dim, spec.act_dim),
            heldout_mse: 0.0,
        }
    }

    fn random_traj(h: usize, w: usize, seed: u64) -> Array2 {
        crate::schedule::randn(h, w, &mut seeded_rng(seed))
    }

    #[test]
    fn self_rollout_has_zero_energy() {
        let m = small_model(EnvId::Door1D, 1);
        let (obs, act) = (5, 2);
        let mut rng = seeded_rng(2);
        let mut traj = Array2::zeros(6, obs + act);
        let mut s: Vec<f64> = (0..obs).map(|_| rng.random_range(-1.0..1.0)).collect();
        for t in 0..6 {
            let a: Vec<f64> = (0..act).map(|_| rng.random_range(-1.0..1.0)).collect();
            traj.row_mut(t)[..act].copy_from_slice(&a);
            traj.row_mut(t)[act..].copy_from_slice(&s);
            s = m.predict(&s, &a).unwrap();
        }
        let (e, g) = dyn_energy_and_grad(&m, &traj, true).unwrap();
        assert!(e < 1e-24, "{e}");
        assert!(g.max_abs() < 1e-12);
    }

    #[test]
    fn perturbation_is_quadratic() {
        let m = small_model(EnvId::Hammer1D, 3);
        let mut traj = Array2::zeros(4, 4);
        let mut s = vec![0.1, 0.2, 0.0];
        for t in 0..4 {
            traj.row_mut(t)[1..].copy_from_slice(&s);
            s = m.predict(&s, &[0.0]).unwrap();
        }
        let delta = 1e-3;
        traj[(3, 2)] += delta;
        let e = dyn_energy(&m, &traj).unwrap();
        assert!((e - delta * delta).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = small_model(EnvId::Door1D, 4);
        for seed in 0..5 {
            let traj = random_traj(5, 7, seed);
            let g = dyn_energy_grad(&m, &traj).unwrap();
            for idx in 0..traj.len() {
                let h = 1e-5;
                let mut p = traj.clone();
                p.as_mut_slice()[idx] += h;
                let mut q = traj.clone();
                q.as_mut_slice()[idx] -= h;
                let fd = (dyn_energy(&m, &p).unwrap() - dyn_energy(&m, &q).unwrap()) / (2.0 * h);
                let an = g.as_slice()[idx];
                assert!((fd - an).abs() <= 1e-4 * an.abs().max(1.0), "{idx}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let m = small_model(EnvId::Disk, 5);
        let s = [0.1, -0.2, 0.3, 0.4];
        let a = [0.05, 0.0, -0.1];
        let (p, jac) = m.jacobian(&s, &a).unwrap();
        assert_eq!(p, m.predict(&s, &a).unwrap());
        let x: Vec<f64> = s.iter().chain(&a).copied().collect();
        for j in 0..7 {
            let h = 1e-6;
            let mut xp = x.clone();
            xp[j] += h;
            let mut xm = x.clone();
            xm[j] -= h;
            let fp = m.predict(&xp[..4], &xp[4..]).unwrap();
            let fm = m.predict(&xm[..4], &xm[4..]).unwrap();
            for k in 0..4 {
                let fd = (fp[k] - fm[k]) / (2.0 * h);
                assert!((fd - jac[(k, j)]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn trained_door_model_predicts_free_motion() {
        let spec = EnvId::Door1D.spec();
        let demos = collect_demos(&spec, &ScriptedExpert::default(), &DemoConfig::new(&spec, 20, 7)).unwrap();
        let norm = Normalizer::fit(&demos).unwrap();
        let cfg = DynTrainConfig {
            steps: 2000,
            ..Default::default()
        };
        let m = train_dynamics(&demos, &norm, &cfg).unwrap();
        assert!(m.heldout_mse < 5e-3, "{}", m.heldout_mse);
        // Contact-free step.
        let s = vec![0.2, 0.0, 0.0, 0.0, 1.0];
        for a in [[0.04, 0.0], [0.0, 0.0]] {
            let truth = envs::step(&spec, &s, &a).unwrap();
            let pred = norm.denormalize_state(&m.predict(&norm.normalize_state(&s), &norm.normalize_action(&a)).unwrap());
            for k in 0..5 {
                assert!((pred[k] - truth[k]).abs() < 0.02, "dim {k}: {pred:?} vs {truth:?}");
            }
        }
        let again = train_dynamics(&demos, &norm, &cfg).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = small_model(EnvId::Disk, 8);
        let mut buf = Vec::new();
        m.write(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"CDY1");
        assert_eq!(DynamicsModel::read(&mut buf.as_slice()).unwrap(), m);
        let mut other = small_model(EnvId::Door1D, 8);
        other.env = EnvId::Disk;
        let mut buf = Vec::new();
        other.write(&mut buf).unwrap();
        assert!(matches!(DynamicsModel::read(&mut buf.as_slice()), Err(Error::Dimension(_))));
    }
}
