use std::fmt::Write as _;
use std::sync::Arc;

use super::ast::{Program, TermDef};
use super::eval::EvalInput;
use crate::diffcore::Array2;
use crate::dynmodel::DynamicsModel;
use crate::envs::EnvSpec;
use crate::error::Result;
use crate::guidance::{EnergyTerm, GuidanceConfig, GuideInput, TermPhase};

/// Weighted value the first term is scaled to on a calibration batch.
pub const FIRST_TERM_TARGET: f64 = 12.0;

/// A program term usable wherever a built-in energy is.
pub struct DslTerm {
    pub def: TermDef,
    pub goal: Vec<f64>,
    pub dynamics: Option<Arc<DynamicsModel>>,
}

impl EnergyTerm for DslTerm {
    fn name(&self) -> &str {
        &self.def.name
    }
    fn phase(&self) -> TermPhase {
        self.def.phase
    }
    fn weight(&self) -> f64 {
        self.def.weight
    }
    fn eval(&self, x: &GuideInput) -> Result<(f64, Array2)> {
        let (v, g) = self.def.eval_grad(EvalInput::new(x, &self.goal, self.dynamics.as_deref()))?;
        Ok((v, g.normalized(&x.scales)))
    }
}

pub fn program_terms(program: &Program, goal: &[f64], dynamics: Option<Arc<DynamicsModel>>) -> Vec<Arc<dyn EnergyTerm>> {
    program
        .terms
        .iter()
        .map(|def| {
            Arc::new(DslTerm {
                def: def.clone(),
                goal: goal.to_vec(),
                dynamics: dynamics.clone(),
            }) as Arc<dyn EnergyTerm>
        })
        .collect()
}

/// Rescales the first term so its weighted mean magnitude over `batch`
/// equals `target`. Returns the new weight; a batch on which the term is
/// identically zero leaves the weight unchanged.
pub fn calibrate_first_term(program: &mut Program, batch: &[GuideInput], goal: &[f64], dynamics: Option<&DynamicsModel>, target: f64) -> Result<f64> {
    let Some(first) = program.terms.first_mut() else {
        return Ok(0.0);
    };
    if batch.is_empty() {
        return Ok(first.weight);
    }
    let mut total = 0.0;
    for x in batch {
        total += first.eval(EvalInput::new(x, goal, dynamics))?.abs();
    }
    let mean = total / batch.len() as f64;
    if mean > 0.0 && mean.is_finite() {
        first.weight = target / mean;
    }
    Ok(first.weight)
}

fn obs_list(idx: &[usize]) -> Vec<String> {
    idx.iter().map(|i| i.to_string()).collect()
}

/// Program source equivalent to the built-in terms for `spec`
/// (without the penalty projection, which is not a gradient term).
pub fn builtin_source(spec: &EnvSpec, cfg: &GuidanceConfig, with_dynamics: bool) -> String {
    let w = &cfg.weights;
    let in_hand = spec.contact.is_none();
    let post = if in_hand { "both" } else { "post" };
    let mut out = String::new();
    if let Some(c) = spec.contact {
        let _ = writeln!(
            out,
            "align (weight = {}, phase = pre): mean_t(sqnorm(obs[t, {}] - obs[t, {}]))",
            w.align, c.hand, c.target
        );
    }
    let goal_parts: Vec<String> = spec
        .goal_idx
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let wrapped = spec.wrapped_idx.contains(&i);
            let wrap = |s: String| if wrapped { format!("wrap({s})") } else { format!("({s})") };
            if cfg.soft_goal {
                let step = wrap(format!("goal[{k}] - obs[0, {i}]"));
                format!("sqnorm({})", wrap(format!("obs[t, {i}] - obs[0, {i}] - (t / H) * {step}")))
            } else {
                format!("sqnorm({})", wrap(format!("obs[H-1, {i}] - goal[{k}]")))
            }
        })
        .collect();
    let goal_body = goal_parts.join(" + ");
    let goal_expr = if cfg.soft_goal { format!("mean_t({goal_body})") } else { goal_body };
    let _ = writeln!(out, "goal (weight = {}, phase = {post}): {goal_expr}", w.goal);
    if in_hand && !spec.actuator_idx.is_empty() {
        let n = spec.actuator_idx.len();
        let moves: Vec<String> = obs_list(&spec.actuator_idx)
            .iter()
            .map(|i| format!("abs(obs[t+1, {i}] - obs[t, {i}])"))
            .collect();
        let k = cfg.activity_sharpness;
        let _ = writeln!(
            out,
            "finger_activity (weight = {}, phase = both): mean_t(softplus({k} * ({} - ({}) / {n})) / {k})",
            w.activity,
            cfg.delta3,
            moves.join(" + ")
        );
    }
    if with_dynamics {
        let _ = writeln!(
            out,
            "dynamics (weight = {}, phase = both): sum_t(sqnorm(nobs[t+1, 0:{obs}] - npred[t, 0:{obs}]))",
            w.dynamics,
            obs = spec.obs_dim
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::parser::{compile, DslContext};
    use super::*;
    use crate::data::Normalizer;
    use crate::envs::EnvId;
    use crate::guidance::{align_energy, finger_activity_energy, goal_energy};
    use rand::{Rng, SeedableRng};

    fn random_traj(spec: &EnvSpec, h: usize, seed: u64) -> GuideInput {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let w = spec.obs_dim + spec.act_dim;
        let norm = Normalizer {
            state_offset: (0..spec.obs_dim).map(|_| rng.random_range(-0.5..0.5)).collect(),
            state_scale: (0..spec.obs_dim).map(|_| rng.random_range(0.2..2.0)).collect(),
            action_offset: vec![0.0; spec.act_dim],
            action_scale: (0..spec.act_dim).map(|_| rng.random_range(0.05..0.5)).collect(),
        };
        let data = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        GuideInput::from_normalized(Array2::from_vec(h, w, data).unwrap(), &norm)
    }

    #[test]
    fn builtin_programs_match_builtin_energies() {
        for id in [EnvId::Door1D, EnvId::Hammer1D, EnvId::Disk] {
            let spec = id.spec();
            for soft in [false, true] {
                let mut cfg = GuidanceConfig::for_env(&spec);
                cfg.soft_goal = soft;
                let src = builtin_source(&spec, &cfg, false);
                let prog = compile(&src, &DslContext::for_env(&spec)).unwrap();
                let goal = vec![0.3];
                for seed in 0..10 {
                    let x = random_traj(&spec, 9, seed);
                    let input = EvalInput::new(&x, &goal, None);
                    let (ge, gg) = goal_energy(&spec, &x.den, &goal, soft);
                    let (v, g) = prog.term("goal").unwrap().eval_grad(input).unwrap();
                    assert!((v - ge).abs() < 1e-12, "{id} goal soft={soft}");
                    assert!(g.env_units(&x.scales).max_abs_diff(&gg) < 1e-12);
                    if spec.contact.is_some() {
                        let (ae, ag) = align_energy(&spec, &x.den);
                        let (v, g) = prog.term("align").unwrap().eval_grad(input).unwrap();
                        assert!((v - ae).abs() < 1e-12);
                        assert!(g.env_units(&x.scales).max_abs_diff(&ag) < 1e-12);
                    } else {
                        let (fe, fg) = finger_activity_energy(&spec, &x.den, cfg.delta3, cfg.activity_sharpness);
                        let (v, g) = prog.term("finger_activity").unwrap().eval_grad(input).unwrap();
                        assert!((v - fe).abs() < 1e-12);
                        assert!(g.env_units(&x.scales).max_abs_diff(&fg) < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn builtin_dynamics_program_matches_energy() {
        use crate::diffcore::{seeded_rng, Activation, MlpParams};
        use crate::dynmodel::dyn_energy_and_grad;
        for id in [EnvId::Door1D, EnvId::Hammer1D, EnvId::Disk] {
            let spec = id.spec();
            let sizes = [spec.obs_dim + spec.act_dim, 16, 16, spec.obs_dim];
            let model = DynamicsModel {
                params: MlpParams::init(&sizes, Activation::Mish, &mut seeded_rng(7)).unwrap(),
                env: id,
                normalizer: Normalizer::identity(spec.obs_dim, spec.act_dim),
                heldout_mse: 0.0,
            };
            let cfg = GuidanceConfig::for_env(&spec);
            let prog = compile(&builtin_source(&spec, &cfg, true), &DslContext::for_env(&spec)).unwrap();
            let term = prog.term("dynamics").unwrap();
            for seed in 0..5 {
                let x = random_traj(&spec, 7, seed);
                let (e, g) = dyn_energy_and_grad(&model, &x.norm, true).unwrap();
                let (v, dg) = term.eval_grad(EvalInput::new(&x, &[0.0], Some(&model))).unwrap();
                assert!((v - e).abs() < 1e-9 * e.abs().max(1.0), "{id}");
                assert!(dg.normalized(&x.scales).max_abs_diff(&g) < 1e-6);
            }
        }
    }

    #[test]
    fn calibration_hits_target() {
        let spec = EnvId::Door1D.spec();
        let ctx = DslContext::for_env(&spec);
        let mut prog = compile(
            "goal: sqnorm(obs[H-1, 3] - goal[0])\nalign (weight = 2): mean_t(sqnorm(obs[t, 0] - obs[t, 4]))",
            &ctx,
        )
        .unwrap();
        let batch: Vec<_> = (0..8).map(|s| random_traj(&spec, 6, s)).collect();
        let w = calibrate_first_term(&mut prog, &batch, &[1.0], None, FIRST_TERM_TARGET).unwrap();
        let mean: f64 = batch
            .iter()
            .map(|x| prog.terms[0].eval(EvalInput::new(x, &[1.0], None)).unwrap().abs())
            .sum::<f64>()
            / 8.0;
        assert!((w * mean - FIRST_TERM_TARGET).abs() < 1e-9);
        assert_eq!(prog.terms[1].weight, 2.0);
    }

    #[test]
    fn adapter_reports_normalized_gradient() {
        let spec = EnvId::Door1D.spec();
        let prog = compile("g (weight = 4, phase = post): sqnorm(obs[H-1, 3] - goal[0])", &DslContext::for_env(&spec)).unwrap();
        let terms = program_terms(&prog, &[0.5], None);
        let x = random_traj(&spec, 5, 3);
        let (e, g) = terms[0].eval(&x).unwrap();
        let (ge, gg) = goal_energy(&spec, &x.den, &[0.5], false);
        assert!((e - ge).abs() < 1e-12);
        assert!(g.max_abs_diff(&x.chain(gg)) < 1e-12);
        assert_eq!((terms[0].weight(), terms[0].phase(), terms[0].name()), (4.0, TermPhase::Post, "g"));
    }
}
