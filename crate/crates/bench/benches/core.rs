use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use cdiff::diffcore::seeded_rng;
use cdiff::dynmodel::dyn_energy_and_grad;
use cdiff::envs::{self, EnvId};
use cdiff::guidance::{builtin_terms, GuidanceConfig, GuideInput};
use cdiff::guidescript::{builtin_source, compile, DslContext, EvalInput};
use cdiff::planner::{DiffusionPlanner, PlanConfig, PlanMode, Planner};
use cdiff::schedule::randn;
use cdiff_bench::random_models;

fn networks(c: &mut Criterion) {
    let spec = EnvId::Door1D.spec();
    let models = random_models(&spec, 1);
    let den = &models.denoiser;
    let x = randn(den.horizon, den.width(), &mut seeded_rng(2));
    c.bench_function("denoiser_predict_x0", |b| b.iter(|| den.predict_x0(black_box(&x), 10, None).unwrap()));
    let dynm = models.dynamics.as_ref().unwrap();
    c.bench_function("dynamics_energy_and_grad", |b| {
        b.iter(|| dyn_energy_and_grad(dynm, black_box(&x), true).unwrap())
    });
}

fn guidance(c: &mut Criterion) {
    let spec = EnvId::Door1D.spec();
    let models = random_models(&spec, 1);
    let cfg = GuidanceConfig::for_env(&spec);
    let x = GuideInput::from_normalized(randn(16, spec.obs_dim + spec.act_dim, &mut seeded_rng(3)), &models.denoiser.normalizer);
    let goal = vec![0.5];
    let terms = builtin_terms(&spec, &goal, &cfg, models.dynamics.clone()).unwrap();
    c.bench_function("builtin_terms_eval", |b| {
        b.iter(|| terms.iter().map(|t| t.eval(black_box(&x)).unwrap().0).sum::<f64>())
    });
    let prog = compile(&builtin_source(&spec, &cfg, true), &DslContext::for_env(&spec)).unwrap();
    c.bench_function("guidescript_eval_grad", |b| {
        b.iter(|| prog.eval_grad(EvalInput::new(black_box(&x), &goal, models.dynamics.as_deref())).unwrap())
    });
    let src = builtin_source(&spec, &cfg, true);
    c.bench_function("guidescript_compile", |b| {
        b.iter(|| compile(black_box(&src), &DslContext::for_env(&spec)).unwrap())
    });
}

fn planning(c: &mut Criterion) {
    let spec = EnvId::Door1D.spec();
    let models = random_models(&spec, 1);
    let s0 = envs::reset(&spec, &spec.training_goal, &mut seeded_rng(4));
    let mut group = c.benchmark_group("plan");
    group.sample_size(20);
    for mode in [PlanMode::NoGuide, PlanMode::Full] {
        let p = DiffusionPlanner::new(&spec, &models, PlanConfig::new(&spec, mode, vec![0.5])).unwrap();
        group.bench_function(mode.as_str(), |b| {
            b.iter_batched(|| seeded_rng(5), |mut rng| p.plan(black_box(&s0), &mut rng).unwrap(), BatchSize::SmallInput)
        });
    }
    group.finish();
}

fn simulator(c: &mut Criterion) {
    let spec = EnvId::Disk.spec();
    let s = envs::reset(&spec, &spec.training_goal, &mut seeded_rng(6));
    let a = vec![0.01; spec.act_dim];
    c.bench_function("env_step_disk", |b| b.iter(|| envs::step(&spec, black_box(&s), black_box(&a)).unwrap()));
}

criterion_group!(benches, networks, guidance, planning, simulator);
criterion_main!(benches);
