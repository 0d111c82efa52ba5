use std::fs;
use std::path::{Path, PathBuf};

use cdiff::envs::EnvId;
use cdiff::guidescript::{compile, generate_guidance, parse, render_prompt, DslContext, FixtureClient, GenerateOptions};
use cdiff::Error;
use proptest::prelude::*;

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/parser")
}

fn door_ctx() -> DslContext {
    DslContext::for_env(&EnvId::Door1D.spec())
}

fn render(src: &str) -> String {
    match compile(src, &door_ctx()) {
        Ok(p) => format!("{p}"),
        Err(e) => format!("error: {e}\n"),
    }
}

/// Each `*.gs` compiles (door env) to the printed program or error in `*.out`.
/// Set `CDIFF_BLESS=1` to rewrite the expectations.
#[test]
fn parser_golden_suite() {
    let bless = std::env::var_os("CDIFF_BLESS").is_some();
    let mut inputs: Vec<_> = fs::read_dir(golden_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "gs"))
        .collect();
    inputs.sort();
    assert!(inputs.len() >= 20);
    let mut failures = Vec::new();
    for input in inputs {
        let got = render(&fs::read_to_string(&input).unwrap());
        let out = input.with_extension("out");
        if bless {
            fs::write(&out, &got).unwrap();
            continue;
        }
        let want = fs::read_to_string(&out).unwrap_or_default();
        if got != want {
            failures.push(format!("{}:\n  want {want:?}\n  got  {got:?}", input.display()));
        }
    }
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}

#[test]
fn golden_programs_are_print_fixed_points() {
    for entry in fs::read_dir(golden_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_none_or(|x| x != "gs") {
            continue;
        }
        if let Ok(p) = compile(&fs::read_to_string(&path).unwrap(), &door_ctx()) {
            let printed = p.to_string();
            let again = parse(&printed).unwrap();
            assert_eq!(again, p, "{}", path.display());
            assert_eq!(again.to_string(), printed);
        }
    }
}

#[test]
fn repair_fixture_converges_in_two_rounds() {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/door_repair.txt");
    let mut client = FixtureClient::load(&fixture).unwrap();
    let bundle = render_prompt("door1d", "open the door to 30 degrees", None).unwrap();
    let g = generate_guidance(&bundle, &mut client, &door_ctx(), &GenerateOptions::default()).unwrap();
    assert_eq!(g.rounds, 2);
    assert_eq!(g.program.terms.len(), 3);
}

#[test]
fn always_invalid_fixture_exhausts() {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/door_invalid.txt");
    let mut client = FixtureClient::load(&fixture).unwrap();
    let bundle = render_prompt("door1d", "open", None).unwrap();
    match generate_guidance(&bundle, &mut client, &door_ctx(), &GenerateOptions::default()) {
        Err(Error::Exhausted { diagnostics }) => assert_eq!(diagnostics.len(), 3),
        other => panic!("expected exhaustion, got {other:?}"),
    }
}

// Source-level generator; the parser folds `-literal`, so the printer's
// output for a negative literal reparses to the same node.
fn expr_strategy() -> impl Strategy<Value = String> {
    let leaf = prop_oneof![
        (-50i32..50).prop_map(|v| format!("{}", v as f64 / 4.0)),
        (0i64..5).prop_map(|i| format!("obs[0, {i}]")),
        (0i64..2).prop_map(|i| format!("act[H-1, {i}]")),
        (0i64..5).prop_map(|i| format!("nobs[2, {i}]")),
        Just("goal[0]".to_string()),
        Just("H".to_string()),
    ];
    leaf.prop_recursive(4, 32, 3, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone(), prop::sample::select(vec!["+", "-", "*"])).prop_map(|(a, b, op)| format!("{a} {op} {b}")),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a}) / ({b})")),
            inner.clone().prop_map(|a| format!("-({a})")),
            (inner.clone(), prop::sample::select(vec!["softplus", "abs", "wrap", "heaviside"])).prop_map(|(a, f)| format!("{f}({a})")),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("clamp({a}, -1, {b})")),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("mask({a} < {b}, {a})")),
            (inner.clone(), inner).prop_map(|(a, b)| format!("interp({a}, {b}, 0.5)")),
        ]
    })
}

proptest! {
    #[test]
    fn parse_print_parse_is_fixed_point(exprs in prop::collection::vec(expr_strategy(), 1..4), w in 0u32..100) {
        let src: String = exprs
            .iter()
            .enumerate()
            .map(|(k, e)| format!("term{k} (weight = {}): {e}\n", w as f64 / 8.0))
            .collect();
        let p = compile(&src, &door_ctx()).unwrap();
        let printed = p.to_string();
        let q = parse(&printed).unwrap();
        prop_assert_eq!(&q, &p);
        prop_assert_eq!(q.to_string(), printed);
    }
}
