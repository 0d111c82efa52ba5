//! `key = value` run configuration with flag overrides.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cdiff::denoiser::DEFAULT_HORIZON;
use cdiff::envs::EnvId;
use cdiff::evalharness::door_suite_goals;
use cdiff::guidance::GuidanceConfig;
use cdiff::pipeline::TrainRecipe;
use cdiff::planner::{PlanConfig, PlanMode};
use cdiff::{Error, Result};

/// Every accepted key with its default; `-` marks an env-dependent default.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("env", "door1d", "door1d | hammer1d | disk"),
    ("demos", "40", "demonstration episodes"),
    ("demo_seed", "1", "demonstration seed"),
    ("demo_path", "-", "demo file (default <out>/demos.cdd)"),
    ("model_dir", "-", "checkpoint directory (default <out>)"),
    ("horizon", "16", "plan length H"),
    ("n_steps", "20", "diffusion steps N"),
    ("train_steps", "10000", "denoiser optimizer steps"),
    ("dyn_steps", "4000", "dynamics optimizer steps"),
    ("train_seed", "0", "training seed"),
    ("hidden", "256", "denoiser hidden width"),
    ("conditional", "false", "also train the goal-conditioned denoiser"),
    ("alpha", "-", "guidance scale"),
    ("omega", "1", "classifier-free weight"),
    ("delta1", "-", "contact threshold"),
    ("delta2", "-", "per-step object limit"),
    ("delta3", "-", "finger activity floor"),
    ("goal_weight", "-", "goal energy weight"),
    ("soft_goal", "true", "interpolated goal energy"),
    ("execute_k", "8", "actions executed per plan"),
    ("max_steps", "-", "episode step limit"),
    ("mode", "full", "plan mode"),
    ("modes", "full", "eval modes, comma-separated"),
    ("goal", "-", "goal, components comma-separated (default: training goal)"),
    ("goals", "-", "eval goals separated by `;`, or `door_suite`"),
    ("seed", "0", "episode seed for plan"),
    ("seeds", "10", "eval seeds"),
    ("tries", "3", "eval tries per seed"),
    ("program", "-", "guidance script replacing the built-in full-mode energies"),
    ("fixture", "-", "recorded LLM responses separated by `---` lines"),
    ("max_rounds", "3", "guidance generation rounds"),
    ("two_stage", "false", "ask for a plan before the script"),
    ("instruction", "", "task instruction for guidance generation"),
    ("llm_url", "-", "chat-completion endpoint (else CDIFF_LLM_URL)"),
    ("llm_model", "-", "model name (else CDIFF_LLM_MODEL)"),
];

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub env: EnvId,
    pub out: PathBuf,
    pub demos: usize,
    pub demo_seed: u64,
    pub demo_path: PathBuf,
    pub model_dir: PathBuf,
    pub recipe: TrainRecipe,
    pub plan: PlanConfig,
    pub max_steps: usize,
    pub modes: Vec<PlanMode>,
    pub goals: Vec<Vec<f64>>,
    pub seeds: usize,
    pub tries: usize,
    pub program: Option<PathBuf>,
    pub fixture: Option<PathBuf>,
    pub max_rounds: usize,
    pub two_stage: bool,
    pub instruction: String,
    pub llm_url: Option<String>,
    pub llm_model: Option<String>,
    /// Effective `key = value` pairs, for the manifest.
    pub resolved: BTreeMap<String, String>,
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{origin}:{}: expected `key = value`, found `{line}`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad value `{v}` for `{key}` (expected true or false)"))),
    }
}

fn vector(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|x| value(key, x.trim())).collect()
}

impl RunConfig {
    /// Merges the optional file and the overrides (later wins) and checks
    /// everything against the environment before any work starts.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)], out: &Path) -> Result<Self> {
        let mut raw: BTreeMap<String, String> = BTreeMap::new();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            raw.extend(parse_pairs(&text, &path.display().to_string())?);
        }
        raw.extend(overrides.iter().cloned());
        for k in raw.keys() {
            if !KEYS.iter().any(|(name, _, _)| name == k) {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            }
        }
        let get = |k: &str| raw.get(k).map(String::as_str);
        let env: EnvId = get("env").unwrap_or("door1d").parse()?;
        let spec = env.spec();

        let num = |k: &str, d: &str| -> Result<f64> { value(k, get(k).unwrap_or(d)) };
        let int = |k: &str, d: &str| -> Result<usize> { value(k, get(k).unwrap_or(d)) };
        let int64 = |k: &str, d: &str| -> Result<u64> { value(k, get(k).unwrap_or(d)) };
        let flag = |k: &str, d: &str| -> Result<bool> { boolean(k, get(k).unwrap_or(d)) };

        let mut recipe = TrainRecipe {
            horizon: int("horizon", &DEFAULT_HORIZON.to_string())?,
            ..Default::default()
        };
        recipe.denoiser.n_steps = int("n_steps", "20")?;
        recipe.denoiser.steps = int("train_steps", "10000")?;
        recipe.denoiser.seed = int64("train_seed", "0")?;
        recipe.denoiser.hidden = int("hidden", "256")?;
        recipe.dynamics.steps = int("dyn_steps", "4000")?;
        recipe.dynamics.seed = recipe.denoiser.seed;
        recipe.conditional = flag("conditional", "false")?;
        recipe.denoiser.validate()?;
        if recipe.horizon < 2 || recipe.dynamics.steps == 0 {
            return Err(Error::Config("horizon must be at least 2 and dyn_steps positive".into()));
        }

        let mut guidance = GuidanceConfig::for_env(&spec);
        if let Some(v) = get("alpha") {
            guidance.alpha = value("alpha", v)?;
        }
        if let Some(v) = get("delta1") {
            guidance.delta1 = value("delta1", v)?;
        }
        if let Some(v) = get("delta2") {
            guidance.delta2 = value("delta2", v)?;
        }
        if let Some(v) = get("delta3") {
            guidance.delta3 = value("delta3", v)?;
        }
        if let Some(v) = get("goal_weight") {
            guidance.weights.goal = value("goal_weight", v)?;
        }
        guidance.soft_goal = flag("soft_goal", "true")?;
        guidance.validate()?;

        let goal = match get("goal") {
            Some(v) => vector("goal", v)?,
            None => spec.training_goal.clone(),
        };
        spec.validate_goal(&goal)?;
        let mode: PlanMode = get("mode").unwrap_or("full").parse()?;
        let mut plan = PlanConfig::new(&spec, mode, goal.clone());
        plan.guidance = guidance;
        plan.omega = num("omega", "1")?;
        plan.seed = int64("seed", "0")?;
        plan.execute_k = int("execute_k", "8")?;
        if plan.execute_k == 0 || plan.execute_k > recipe.horizon {
            return Err(Error::Config(format!("execute_k must lie in 1..={}", recipe.horizon)));
        }
        if !plan.omega.is_finite() || plan.omega < 0.0 {
            return Err(Error::Config("omega must be non-negative".into()));
        }
        let max_steps = int("max_steps", &spec.default_max_steps.to_string())?;
        if max_steps < recipe.horizon {
            return Err(Error::Config(format!("max_steps {max_steps} is shorter than the horizon {}", recipe.horizon)));
        }

        let modes = get("modes")
            .unwrap_or("full")
            .split(',')
            .map(|m| m.trim().parse())
            .collect::<Result<Vec<PlanMode>>>()?;
        let goals = match get("goals") {
            None => vec![goal.clone()],
            Some("door_suite") if env == EnvId::Door1D => door_suite_goals(),
            Some(v) => v.split(';').map(|g| vector("goals", g.trim())).collect::<Result<Vec<_>>>()?,
        };
        for g in &goals {
            spec.validate_goal(g)?;
        }
        let seeds = int("seeds", "10")?;
        let tries = int("tries", "3")?;
        let demos = int("demos", "40")?;
        let max_rounds = int("max_rounds", "3")?;
        if seeds == 0 || tries == 0 || demos == 0 || max_rounds == 0 {
            return Err(Error::Config("demos, seeds, tries and max_rounds must be at least 1".into()));
        }

        let path = |k: &str| get(k).map(PathBuf::from);
        let cfg = Self {
            env,
            out: out.to_path_buf(),
            demos,
            demo_seed: int64("demo_seed", "1")?,
            demo_path: path("demo_path").unwrap_or_else(|| out.join("demos.cdd")),
            model_dir: path("model_dir").unwrap_or_else(|| out.to_path_buf()),
            recipe,
            plan,
            max_steps,
            modes,
            goals,
            seeds,
            tries,
            program: path("program"),
            fixture: path("fixture"),
            max_rounds,
            two_stage: flag("two_stage", "false")?,
            instruction: get("instruction").unwrap_or("").to_string(),
            llm_url: get("llm_url").map(str::to_string),
            llm_model: get("llm_model").map(str::to_string),
            resolved: BTreeMap::new(),
        };
        Ok(Self { resolved: cfg.pairs(), ..cfg })
    }

    fn pairs(&self) -> BTreeMap<String, String> {
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let g = &self.plan.guidance;
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("env", self.env.to_string());
        put("demos", self.demos.to_string());
        put("demo_seed", self.demo_seed.to_string());
        put("demo_path", self.demo_path.display().to_string());
        put("model_dir", self.model_dir.display().to_string());
        put("horizon", self.recipe.horizon.to_string());
        put("n_steps", self.recipe.denoiser.n_steps.to_string());
        put("train_steps", self.recipe.denoiser.steps.to_string());
        put("dyn_steps", self.recipe.dynamics.steps.to_string());
        put("train_seed", self.recipe.denoiser.seed.to_string());
        put("hidden", self.recipe.denoiser.hidden.to_string());
        put("conditional", self.recipe.conditional.to_string());
        put("alpha", g.alpha.to_string());
        put("omega", self.plan.omega.to_string());
        put("delta1", g.delta1.to_string());
        put("delta2", g.delta2.to_string());
        put("delta3", g.delta3.to_string());
        put("goal_weight", g.weights.goal.to_string());
        put("soft_goal", g.soft_goal.to_string());
        put("execute_k", self.plan.execute_k.to_string());
        put("max_steps", self.max_steps.to_string());
        put("mode", self.plan.mode.to_string());
        put("modes", self.modes.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(","));
        put("goal", join(&self.plan.goal));
        put("goals", self.goals.iter().map(|g| join(g)).collect::<Vec<_>>().join(";"));
        put("seed", self.plan.seed.to_string());
        put("seeds", self.seeds.to_string());
        put("tries", self.tries.to_string());
        put("max_rounds", self.max_rounds.to_string());
        put("two_stage", self.two_stage.to_string());
        put("instruction", self.instruction.clone());
        if let Some(p) = &self.program {
            put("program", p.display().to_string());
        }
        if let Some(p) = &self.fixture {
            put("fixture", p.display().to_string());
        }
        if let Some(u) = &self.llm_url {
            put("llm_url", u.clone());
        }
        if let Some(u) = &self.llm_model {
            put("llm_model", u.clone());
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(pairs: &[(&str, &str)]) -> Result<RunConfig> {
        let o: Vec<_> = pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        RunConfig::load(None, &o, Path::new("out"))
    }

    #[test]
    fn defaults_follow_env() {
        let c = load(&[("env", "hammer1d")]).unwrap();
        assert_eq!(c.plan.goal, EnvId::Hammer1D.spec().training_goal);
        assert_eq!(c.recipe.horizon, 16);
        assert_eq!(c.demo_path, Path::new("out/demos.cdd"));
        assert_eq!(c.resolved["alpha"], "60");
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("run.cfg");
        fs::write(&f, "# door run\nenv = door1d\nalpha = 5   # weak\ngoals = 0.5; 1.0\n").unwrap();
        let c = RunConfig::load(Some(&f), &[("alpha".into(), "7".into())], Path::new("o")).unwrap();
        assert_eq!(c.plan.guidance.alpha, 7.0);
        assert_eq!(c.goals, vec![vec![0.5], vec![1.0]]);
    }

    #[test]
    fn validation_errors() {
        for bad in [
            vec![("env", "kitchen")],
            vec![("colour", "red")],
            vec![("goal", "9")],
            vec![("alpha", "x")],
            vec![("alpha", "-1")],
            vec![("execute_k", "40")],
            vec![("mode", "fast")],
            vec![("seeds", "0")],
            vec![("soft_goal", "maybe")],
            vec![("max_steps", "3")],
        ] {
            assert!(matches!(load(&bad), Err(Error::Config(_)) | Err(Error::UnknownEnv(_))), "{bad:?}");
        }
        assert!(parse_pairs("novalue\n", "f").is_err());
    }

    #[test]
    fn door_suite_keyword() {
        assert_eq!(load(&[("goals", "door_suite")]).unwrap().goals.len(), 6);
    }
}
