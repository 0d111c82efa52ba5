//! Experiment driver: episodes over modes x goals x seeds x tries, reduced
//! into a success table, with CSV and markdown rendering and a rollout archive.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde_json::json;

use crate::envs::{EnvId, EnvSpec};
use crate::error::{Error, Result};
use crate::guidescript::{program_terms, Program};
use crate::planner::{receding_control, DiffusionPlanner, EpisodeRollout, ExpertReplayPlanner, Models, PlanConfig, PlanMode, Planner};

pub const CSV_HEADER: &str = "mode,goal,success_rate,std,ghost_metric,mean_steps";

/// Offset between tries in the episode seed, larger than any seed count used.
const TRY_STRIDE: u64 = 10_000;

/// Door goals mirroring the reference suite: open 30, 50, 70, 90 and 110
/// degrees, then close.
pub fn door_suite_goals() -> Vec<Vec<f64>> {
    use std::f64::consts::PI;
    [PI / 6.0, 5.0 * PI / 18.0, 7.0 * PI / 18.0, PI / 2.0, 11.0 * PI / 18.0, 0.0]
        .into_iter()
        .map(|g| vec![g])
        .collect()
}

#[derive(Clone)]
pub struct ExperimentSpec {
    pub env: EnvId,
    pub training_goal: Vec<f64>,
    pub goals: Vec<Vec<f64>>,
    pub modes: Vec<PlanMode>,
    pub seeds: usize,
    pub tries: usize,
    pub seed_base: u64,
    pub max_steps: usize,
    /// Everything but mode, goal and seed is taken from here.
    pub template: PlanConfig,
    /// Replaces the built-in energies of `full` mode.
    pub program: Option<Program>,
    /// Directory for `results.csv`, `results.md` and `rollouts.jsonl`.
    pub out: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn new(env: EnvId, goals: Vec<Vec<f64>>, modes: Vec<PlanMode>) -> Self {
        let spec = env.spec();
        Self {
            env,
            training_goal: spec.training_goal.clone(),
            goals,
            modes,
            seeds: 10,
            tries: 3,
            seed_base: 0,
            max_steps: spec.default_max_steps,
            template: PlanConfig::new(&spec, PlanMode::Full, spec.training_goal.clone()),
            program: None,
            out: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.env.spec();
        if self.seeds == 0 || self.tries == 0 {
            return Err(Error::Config("seeds and tries must be at least 1".into()));
        }
        if self.goals.is_empty() || self.modes.is_empty() {
            return Err(Error::Config("an experiment needs at least one goal and one mode".into()));
        }
        for g in self.goals.iter().chain(std::iter::once(&self.training_goal)) {
            spec.validate_goal(g)?;
        }
        Ok(())
    }

    pub fn episode_seed(&self, seed: usize, r#try: usize) -> u64 {
        self.seed_base + seed as u64 + r#try as u64 * TRY_STRIDE
    }
}

/// What plans the episodes.
#[derive(Clone)]
pub enum PlannerSource {
    Diffusion(Models),
    /// Scripted expert rolled through the true simulator.
    Expert {
        horizon: usize,
        state_std: Vec<f64>,
    },
}

impl PlannerSource {
    fn state_std(&self) -> &[f64] {
        match self {
            PlannerSource::Diffusion(m) => &m.state_std,
            PlannerSource::Expert { state_std, .. } => state_std,
        }
    }

    fn planner(&self, spec: &EnvSpec, exp: &ExperimentSpec, mode: PlanMode, goal: &[f64]) -> Result<Arc<dyn Planner>> {
        match self {
            PlannerSource::Expert { horizon, .. } => Ok(Arc::new(ExpertReplayPlanner {
                spec: spec.clone(),
                goal: goal.to_vec(),
                horizon: *horizon,
            })),
            PlannerSource::Diffusion(models) => {
                if mode == PlanMode::CFree && models.conditional.is_none() {
                    return Err(Error::MissingModel("cfree mode needs a conditional denoiser".into()));
                }
                let mut cfg = exp.template.clone();
                cfg.mode = mode;
                cfg.goal = goal.to_vec();
                let mut p = DiffusionPlanner::new(spec, models, cfg)?;
                if let (PlanMode::Full, Some(prog)) = (mode, &exp.program) {
                    p = p.with_terms(program_terms(prog, goal, models.dynamics.clone()));
                }
                Ok(Arc::new(p))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub mode: String,
    pub goal: Vec<f64>,
    /// Percent over seeds x tries.
    pub success_rate: f64,
    /// Population std of the per-try success rates, in percent.
    pub std: f64,
    pub ghost_metric: f64,
    pub mean_steps: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

#[derive(Clone, Debug)]
pub struct EpisodeRecord {
    pub mode: PlanMode,
    pub goal_index: usize,
    pub seed: usize,
    pub r#try: usize,
    pub rollout: EpisodeRollout,
}

pub struct ExperimentResult {
    pub table: ResultTable,
    pub episodes: Vec<EpisodeRecord>,
}

/// Runs every episode in parallel; the reduction follows (mode, goal, try,
/// seed) order, so results do not depend on scheduling.
pub fn run_experiment(exp: &ExperimentSpec, source: &PlannerSource) -> Result<ExperimentResult> {
    exp.validate()?;
    let spec = exp.env.spec();
    let mut planners = Vec::new();
    for &mode in &exp.modes {
        for goal in &exp.goals {
            planners.push(source.planner(&spec, exp, mode, goal)?);
        }
    }
    let mut jobs = Vec::new();
    for (mi, &mode) in exp.modes.iter().enumerate() {
        for gi in 0..exp.goals.len() {
            for r in 0..exp.tries {
                for s in 0..exp.seeds {
                    jobs.push((mi * exp.goals.len() + gi, mode, gi, s, r));
                }
            }
        }
    }
    let k = exp.template.execute_k;
    let episodes = jobs
        .par_iter()
        .map(|&(pi, mode, gi, s, r)| {
            let rollout = receding_control(
                &spec,
                &*planners[pi],
                &exp.goals[gi],
                exp.max_steps,
                k,
                source.state_std(),
                exp.episode_seed(s, r),
            )?;
            Ok(EpisodeRecord {
                mode,
                goal_index: gi,
                seed: s,
                r#try: r,
                rollout,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let per_cell = exp.seeds * exp.tries;
    let rows = episodes
        .chunks(per_cell)
        .map(|cell| {
            let n = cell.len() as f64;
            let wins: Vec<bool> = cell.iter().map(|e| e.rollout.success).collect();
            let (success_rate, std) = rate_and_std(&wins, exp.seeds);
            ResultRow {
                mode: cell[0].mode.to_string(),
                goal: exp.goals[cell[0].goal_index].clone(),
                success_rate,
                std,
                ghost_metric: cell.iter().map(|e| e.rollout.ghost).sum::<f64>() / n,
                mean_steps: cell.iter().map(|e| e.rollout.steps as f64).sum::<f64>() / n,
            }
        })
        .collect();
    let result = ExperimentResult {
        table: ResultTable { rows },
        episodes,
    };
    if let Some(dir) = &exp.out {
        write_outputs(dir, &result)?;
    }
    Ok(result)
}

/// Percent success over all episodes and the population std of the per-try
/// rates; `wins` is try-major with `seeds` entries per try.
fn rate_and_std(wins: &[bool], seeds: usize) -> (f64, f64) {
    let rate = |w: &[bool]| 100.0 * w.iter().filter(|&&b| b).count() as f64 / w.len() as f64;
    let tries: Vec<f64> = wins.chunks(seeds).map(rate).collect();
    let mean = tries.iter().sum::<f64>() / tries.len() as f64;
    let var = tries.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / tries.len() as f64;
    (rate(wins), var.sqrt())
}

fn write_outputs(dir: &Path, result: &ExperimentResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("results.csv"), report(&result.table, ReportFormat::Csv))?;
    fs::write(dir.join("results.md"), report(&result.table, ReportFormat::Markdown))?;
    write_rollouts(&dir.join("rollouts.jsonl"), &result.episodes)
}

/// One JSON object per episode, in reduction order.
pub fn write_rollouts(path: &Path, episodes: &[EpisodeRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for e in episodes {
        let r = &e.rollout;
        let plans: Vec<_> = r
            .plans
            .iter()
            .map(|(step, p)| json!({"step": step, "rows": (0..p.rows()).map(|t| p.row(t).to_vec()).collect::<Vec<_>>()}))
            .collect();
        let line = json!({
            "mode": e.mode.as_str(),
            "goal": r.goal,
            "seed": e.seed,
            "try": e.r#try,
            "success": r.success,
            "ghost": r.ghost,
            "steps": r.steps,
            "aborted": r.aborted,
            "states": r.states,
            "actions": r.actions,
            "plans": plans,
        });
        serde_json::to_writer(&mut w, &line).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

fn goal_str(goal: &[f64]) -> String {
    goal.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(";")
}

/// Renders the table. CSV floats use shortest round-trip formatting so
/// [`parse_csv`] recovers the table exactly.
pub fn report(table: &ResultTable, format: ReportFormat) -> String {
    let mut s = String::new();
    match format {
        ReportFormat::Csv => {
            s.push_str(CSV_HEADER);
            s.push('\n');
            for r in &table.rows {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{}",
                    r.mode,
                    goal_str(&r.goal),
                    r.success_rate,
                    r.std,
                    r.ghost_metric,
                    r.mean_steps
                );
            }
        }
        ReportFormat::Markdown => {
            s.push_str("| Mode | Goal | Success (%) | Ghost | Steps |\n|---|---|---|---|---|\n");
            for r in &table.rows {
                let goal: Vec<String> = r.goal.iter().map(|g| format!("{g:.3}")).collect();
                let _ = writeln!(
                    s,
                    "| {} | {} | {:.1} ± {:.1} | {:.3} | {:.1} |",
                    r.mode,
                    goal.join(", "),
                    r.success_rate,
                    r.std,
                    r.ghost_metric,
                    r.mean_steps
                );
            }
        }
    }
    s
}

pub fn parse_csv(text: &str) -> Result<ResultTable> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        other => return Err(Error::Format(format!("expected CSV header `{CSV_HEADER}`, found {other:?}"))),
    }
    let num = |field: &str, line: usize| -> Result<f64> { field.parse().map_err(|_| Error::Format(format!("line {line}: `{field}` is not a number"))) };
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let n = i + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(Error::Format(format!("line {n}: expected 6 fields, found {}", f.len())));
        }
        rows.push(ResultRow {
            mode: f[0].to_string(),
            goal: f[1].split(';').map(|g| num(g, n)).collect::<Result<_>>()?,
            success_rate: num(f[2], n)?,
            std: num(f[3], n)?,
            ghost_metric: num(f[4], n)?,
            mean_steps: num(f[5], n)?,
        });
    }
    Ok(ResultTable { rows })
}
