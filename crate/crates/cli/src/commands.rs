use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use cdiff::data::{collect_demos, load_demos_for, save_demos, DemoConfig, ScriptedExpert};
use cdiff::denoiser::sample_unguided;
use cdiff::diffcore::seeded_rng;
use cdiff::evalharness::{parse_csv, report as render, run_experiment, write_rollouts, EpisodeRecord, ExperimentSpec, PlannerSource, ReportFormat};
use cdiff::guidance::GuideInput;
use cdiff::guidescript::{generate_guidance, render_prompt, DslContext, FixtureClient, GenerateOptions, HttpClient, LlmClient, Probe, Program};
use cdiff::pipeline::{load_models, prepare_program, save_models, train_models, CONDITIONAL_FILE, DENOISER_FILE, DYNAMICS_FILE, META_FILE};
use cdiff::planner::{receding_control, DiffusionPlanner, Models};
use cdiff::{Error, Result};

use crate::config::{parse_override, RunConfig};
use crate::manifest::Manifest;
use crate::{Common, Format};

pub fn run(name: &str, common: &Common, typed: Vec<(&'static str, Option<String>)>) -> Result<()> {
    // Precedence: file, then --env and --set, then dedicated flags.
    let mut overrides = Vec::new();
    if let Some(e) = &common.env {
        overrides.push(("env".to_string(), e.clone()));
    }
    for s in &common.set {
        overrides.push(parse_override(s)?);
    }
    overrides.extend(typed.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
    let cfg = RunConfig::load(common.config.as_deref(), &overrides, &common.out)?;
    let mut manifest = Manifest::new(name, &cfg.resolved);
    if let Some(c) = &common.config {
        manifest.input(c);
    }
    fs::create_dir_all(&cfg.out)?;
    match name {
        "gen-demos" => gen_demos(&cfg, &mut manifest)?,
        "train" => train(&cfg, &mut manifest)?,
        "plan" => plan(&cfg, &mut manifest)?,
        "eval" => eval(&cfg, &mut manifest)?,
        "guidance-gen" => guidance_gen(&cfg, &mut manifest)?,
        other => return Err(Error::Config(format!("unknown command {other}"))),
    }
    manifest.write(&cfg.out)?;
    Ok(())
}

fn gen_demos(cfg: &RunConfig, m: &mut Manifest) -> Result<()> {
    let spec = cfg.env.spec();
    let demos = collect_demos(&spec, &ScriptedExpert::default(), &DemoConfig::new(&spec, cfg.demos, cfg.demo_seed))?;
    save_demos(&cfg.demo_path, &demos)?;
    m.output(&cfg.demo_path);
    let goals: Vec<f64> = demos
        .episodes
        .iter()
        .map(|ep| ep.last().expect("non-empty episode").next_state[spec.goal_idx[0]])
        .collect();
    let (lo, hi) = goals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &g| (a.min(g), b.max(g)));
    println!(
        "episodes={} transitions={} final_{}=[{lo:.4}, {hi:.4}] path={}",
        demos.episodes.len(),
        demos.num_transitions(),
        spec.obs_names[spec.goal_idx[0]],
        cfg.demo_path.display()
    );
    Ok(())
}

fn train(cfg: &RunConfig, m: &mut Manifest) -> Result<()> {
    let spec = cfg.env.spec();
    let demos = load_demos_for(&cfg.demo_path, &spec)?;
    m.input(&cfg.demo_path);
    let t = train_models(&demos, &cfg.recipe)?;
    save_models(&cfg.model_dir, cfg.env, &t.models)?;
    let mut log = String::from("model,step,loss\n");
    for (name, records) in [("denoiser", &t.denoiser_log), ("conditional", &t.conditional_log)] {
        for r in records.iter() {
            if !r.loss.is_finite() {
                return Err(Error::TrainingDivergence { step: r.step, loss: r.loss });
            }
            let _ = writeln!(log, "{name},{},{}", r.step, r.loss);
        }
    }
    let log_path = cfg.out.join("train_loss.csv");
    fs::write(&log_path, log)?;
    for f in [DENOISER_FILE, CONDITIONAL_FILE, DYNAMICS_FILE, META_FILE] {
        let p = cfg.model_dir.join(f);
        if p.exists() {
            m.output(p);
        }
    }
    m.output(&log_path);
    let tail = |l: &[cdiff::denoiser::LossRecord]| l.iter().rev().take(100).map(|r| r.loss).sum::<f64>() / l.len().clamp(1, 100) as f64;
    println!(
        "denoiser_loss {:.5} -> {:.5} dynamics_heldout_mse={:.3e} conditional={}",
        t.denoiser_log.first().map_or(0.0, |r| r.loss),
        tail(&t.denoiser_log),
        t.models.dynamics.as_ref().map_or(f64::NAN, |d| d.heldout_mse),
        t.models.conditional.is_some()
    );
    Ok(())
}

fn models_for(cfg: &RunConfig, m: &mut Manifest) -> Result<Models> {
    let models = load_models(&cfg.model_dir, cfg.env)?;
    for f in [DENOISER_FILE, CONDITIONAL_FILE, DYNAMICS_FILE, META_FILE] {
        let p = cfg.model_dir.join(f);
        if p.exists() {
            m.input(p);
        }
    }
    Ok(models)
}

fn program_for(cfg: &RunConfig, models: &Models, goal: &[f64], m: &mut Manifest) -> Result<Option<Program>> {
    let Some(path) = &cfg.program else { return Ok(None) };
    let src = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read program {}: {e}", path.display())))?;
    m.input(path);
    prepare_program(&src, cfg.env, models, goal, cfg.plan.seed).map(Some)
}

fn plan(cfg: &RunConfig, m: &mut Manifest) -> Result<()> {
    let spec = cfg.env.spec();
    let models = models_for(cfg, m)?;
    let program = program_for(cfg, &models, &cfg.plan.goal, m)?;
    let mut planner = DiffusionPlanner::new(&spec, &models, cfg.plan.clone())?;
    if let (cdiff::planner::PlanMode::Full, Some(p)) = (cfg.plan.mode, &program) {
        planner = planner.with_terms(cdiff::guidescript::program_terms(p, &cfg.plan.goal, models.dynamics.clone()));
    }
    let rollout = receding_control(
        &spec,
        &planner,
        &cfg.plan.goal,
        cfg.max_steps,
        cfg.plan.execute_k,
        &models.state_std,
        cfg.plan.seed,
    )?;
    let path = cfg.out.join("rollout.jsonl");
    let summary = format!(
        "mode={} goal={} alpha={} seed={} success={} ghost={:.4} steps={}{}",
        cfg.plan.mode,
        cfg.resolved["goal"],
        cfg.plan.guidance.alpha,
        cfg.plan.seed,
        rollout.success,
        rollout.ghost,
        rollout.steps,
        rollout.aborted.as_ref().map(|a| format!(" aborted=\"{a}\"")).unwrap_or_default()
    );
    write_rollouts(
        &path,
        &[EpisodeRecord {
            mode: cfg.plan.mode,
            goal_index: 0,
            seed: cfg.plan.seed as usize,
            r#try: 0,
            rollout,
        }],
    )?;
    m.output(&path);
    println!("{summary}");
    Ok(())
}

fn eval(cfg: &RunConfig, m: &mut Manifest) -> Result<()> {
    let models = models_for(cfg, m)?;
    let spec = cfg.env.spec();
    let mut exp = ExperimentSpec::new(cfg.env, cfg.goals.clone(), cfg.modes.clone());
    exp.seeds = cfg.seeds;
    exp.tries = cfg.tries;
    exp.max_steps = cfg.max_steps;
    exp.template = cfg.plan.clone();
    exp.program = program_for(cfg, &models, &spec.training_goal, m)?;
    exp.out = Some(cfg.out.clone());
    let r = run_experiment(&exp, &PlannerSource::Diffusion(models))?;
    for f in ["results.csv", "results.md", "rollouts.jsonl"] {
        m.output(cfg.out.join(f));
    }
    print!("{}", render(&r.table, ReportFormat::Markdown));
    Ok(())
}

fn probe_inputs(models: &Models, count: usize) -> Result<Vec<GuideInput>> {
    let model = &models.denoiser;
    Ok(sample_unguided(model, count, None, &mut seeded_rng(0))?
        .into_iter()
        .map(|x| GuideInput::from_normalized(x, &model.normalizer))
        .collect())
}

fn guidance_gen(cfg: &RunConfig, m: &mut Manifest) -> Result<()> {
    let spec = cfg.env.spec();
    let mut client: Box<dyn LlmClient> = match &cfg.fixture {
        Some(path) => {
            m.input(path);
            Box::new(FixtureClient::load(path).map_err(|e| Error::Config(format!("cannot read fixture {}: {e}", path.display())))?)
        }
        None => {
            let mut c = match &cfg.llm_url {
                Some(url) => HttpClient {
                    url: url.clone(),
                    model: "default".into(),
                    api_key: std::env::var(cdiff::guidescript::llm::ENV_API_KEY).ok(),
                    timeout: std::time::Duration::from_secs(120),
                },
                None => HttpClient::from_env().map_err(|_| Error::Config("no LLM endpoint configured: set CDIFF_LLM_URL or pass --fixture".into()))?,
            };
            if let Some(model) = &cfg.llm_model {
                c.model = model.clone();
            }
            Box::new(c)
        }
    };
    // Candidates are executed on model samples when checkpoints are present.
    let probe = match load_models(&cfg.model_dir, cfg.env) {
        Ok(models) => Some(Probe {
            inputs: probe_inputs(&models, 4)?,
            goal: cfg.plan.goal.clone(),
            dynamics: models.dynamics.clone(),
        }),
        Err(_) => None,
    };
    let bundle = render_prompt(cfg.env.as_str(), &cfg.instruction, None)?;
    let opts = GenerateOptions {
        max_rounds: cfg.max_rounds,
        two_stage: cfg.two_stage,
        probe,
    };
    let generated = generate_guidance(&bundle, client.as_mut(), &DslContext::for_env(&spec), &opts)?;
    let script = cfg.out.join("guidance.gs");
    fs::write(&script, generated.program.to_string())?;
    let transcript = cfg.out.join("guidance_transcript.txt");
    let mut text = String::new();
    for msg in &generated.transcript {
        let _ = writeln!(text, "### {}\n{}\n", msg.role.as_str(), msg.content.trim_end());
    }
    fs::write(&transcript, text)?;
    m.output(&script);
    m.output(&transcript);
    println!("rounds={} terms={} path={}", generated.rounds, generated.program.terms.len(), script.display());
    Ok(())
}

pub fn report(common: &Common, input: Option<PathBuf>, format: Format) -> Result<()> {
    let input = input.unwrap_or_else(|| common.out.join("results.csv"));
    let text = fs::read_to_string(&input).map_err(|e| Error::Config(format!("cannot read {}: {e}", input.display())))?;
    let table = parse_csv(&text)?;
    let (fmt, name) = match format {
        Format::Csv => (ReportFormat::Csv, "report.csv"),
        Format::Markdown => (ReportFormat::Markdown, "report.md"),
    };
    let out = render(&table, fmt);
    fs::create_dir_all(&common.out)?;
    let path = common.out.join(name);
    fs::write(&path, &out)?;
    let mut m = Manifest::new("report", &Default::default());
    m.input(&input);
    m.output(&path);
    m.write(&common.out)?;
    print!("{out}");
    Ok(())
}
