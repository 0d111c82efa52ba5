//! One-call training of every model a planner needs, and their on-disk layout.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde_json::json;

use crate::data::{DemoSet, Normalizer};
use crate::denoiser::{build_training_set, sample_unguided, train, DenoiserModel, LossRecord, TrainConfig, DEFAULT_HORIZON};
use crate::diffcore::seeded_rng;
use crate::dynmodel::{train_dynamics, DynTrainConfig, DynamicsModel};
use crate::envs::EnvId;
use crate::error::{Error, Result};
use crate::guidance::GuideInput;
use crate::guidescript::{calibrate_first_term, compile, DslContext, Program, FIRST_TERM_TARGET};
use crate::planner::Models;

pub const DENOISER_FILE: &str = "denoiser.cdn";
pub const CONDITIONAL_FILE: &str = "conditional.cdn";
pub const DYNAMICS_FILE: &str = "dynamics.cdy";
pub const META_FILE: &str = "models.json";

#[derive(Clone, Debug)]
pub struct TrainRecipe {
    pub horizon: usize,
    pub denoiser: TrainConfig,
    pub dynamics: DynTrainConfig,
    /// Also train the goal-conditioned denoiser used by `cfree`.
    pub conditional: bool,
}

impl Default for TrainRecipe {
    fn default() -> Self {
        Self {
            horizon: DEFAULT_HORIZON,
            denoiser: TrainConfig::default(),
            dynamics: DynTrainConfig::default(),
            conditional: false,
        }
    }
}

pub struct TrainedModels {
    pub models: Models,
    pub denoiser_log: Vec<LossRecord>,
    pub conditional_log: Vec<LossRecord>,
}

/// Trains the denoiser, the dynamics model and optionally the conditional
/// denoiser. The three jobs run concurrently; each is seeded on its own.
pub fn train_models(demos: &DemoSet, recipe: &TrainRecipe) -> Result<TrainedModels> {
    let norm = Normalizer::fit(demos)?;
    let uncond_set = build_training_set(demos, &norm, recipe.horizon, false)?;
    let cond_set = if recipe.conditional {
        Some(build_training_set(demos, &norm, recipe.horizon, true)?)
    } else {
        None
    };
    let ((den, dynamics), cond) = rayon::join(
        || rayon::join(|| train(&uncond_set, &recipe.denoiser), || train_dynamics(demos, &norm, &recipe.dynamics)),
        || cond_set.as_ref().map(|s| train(s, &recipe.denoiser)).transpose(),
    );
    let (den, denoiser_log) = den?;
    let dynamics = dynamics?;
    let (conditional, conditional_log) = match cond? {
        Some((m, log)) => (Some(Arc::new(m)), log),
        None => (None, Vec::new()),
    };
    Ok(TrainedModels {
        models: Models {
            denoiser: Arc::new(den),
            conditional,
            dynamics: Some(Arc::new(dynamics)),
            state_std: demos.state_stats.std.clone(),
        },
        denoiser_log,
        conditional_log,
    })
}

pub fn save_models(dir: &Path, env: EnvId, models: &Models) -> Result<()> {
    fs::create_dir_all(dir)?;
    models.denoiser.save(&dir.join(DENOISER_FILE))?;
    if let Some(c) = &models.conditional {
        c.save(&dir.join(CONDITIONAL_FILE))?;
    }
    if let Some(d) = &models.dynamics {
        d.save(&dir.join(DYNAMICS_FILE))?;
    }
    let meta = json!({
        "env": env.as_str(),
        "horizon": models.denoiser.horizon,
        "state_std": models.state_std,
        "conditional": models.conditional.is_some(),
        "dynamics_heldout_mse": models.dynamics.as_ref().map(|d| d.heldout_mse),
    });
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join(META_FILE), text + "\n")?;
    Ok(())
}

/// Loads what [`save_models`] wrote; the conditional and dynamics
/// checkpoints are optional.
pub fn load_models(dir: &Path, env: EnvId) -> Result<Models> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::MissingModel(format!("{}: {e}", meta_path.display())))?;
    let meta: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", meta_path.display())))?;
    if meta["env"].as_str() != Some(env.as_str()) {
        return Err(Error::MissingModel(format!("{} holds models for {}, not {env}", dir.display(), meta["env"])));
    }
    let state_std = meta["state_std"]
        .as_array()
        .and_then(|a| a.iter().map(|v| v.as_f64()).collect::<Option<Vec<_>>>())
        .ok_or_else(|| Error::Format(format!("{}: bad state_std", meta_path.display())))?;
    let den_path = dir.join(DENOISER_FILE);
    if !den_path.exists() {
        return Err(Error::MissingModel(den_path.display().to_string()));
    }
    let optional = |name: &str| dir.join(name).exists().then(|| dir.join(name));
    Ok(Models {
        denoiser: Arc::new(DenoiserModel::load(&den_path)?),
        conditional: optional(CONDITIONAL_FILE).map(|p| DenoiserModel::load(&p)).transpose()?.map(Arc::new),
        dynamics: optional(DYNAMICS_FILE).map(|p| DynamicsModel::load(&p)).transpose()?.map(Arc::new),
        state_std,
    })
}

/// Batch size of the unguided samples the first program term is scaled on.
pub const CALIBRATION_BATCH: usize = 8;

/// Compiles a guidance script for `env` and rescales its first term to
/// [`FIRST_TERM_TARGET`] on a batch of unguided samples from the denoiser.
pub fn prepare_program(source: &str, env: EnvId, models: &Models, goal: &[f64], seed: u64) -> Result<Program> {
    let spec = env.spec();
    let mut program = compile(source, &DslContext::for_env(&spec))?;
    let model = &models.denoiser;
    let batch: Vec<GuideInput> = sample_unguided(model, CALIBRATION_BATCH, None, &mut seeded_rng(seed))?
        .into_iter()
        .map(|x| GuideInput::from_normalized(x, &model.normalizer))
        .collect();
    let w = calibrate_first_term(&mut program, &batch, goal, models.dynamics.as_deref(), FIRST_TERM_TARGET)?;
    log::info!("first guidance term weight calibrated to {w}");
    Ok(program)
}
