//! End-to-end acceptance suite. Runs without the libtest harness so that
//! every criterion prints exactly one PASS/FAIL line; the process exits
//! nonzero if any criterion fails.
//!
//! Numeric arguments restrict the run to those criteria, e.g.
//! `cargo test -p mactas --test acceptance -- 8 9`.

use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use mactas::envs::{blind_optimum, value_iteration, CuePassingSpec, EnvSpec, TwoStepCoop};
use mactas::mixer::MixerKind;
use mactas::run::{run_checks, CheckReport, ExploreScheme, Faults, RunConfig, SeedRun};

// Pinned tolerances and budgets.
const LAYER_GRAD_TOL: f64 = 1e-4;
const TD_GRAD_TOL: f64 = 1e-3;
const GRAD_RUNTIME_SECS: f64 = 60.0;
const EQUIVARIANCE_TOL: f64 = 1e-6;
const MONOTONICITY_FLOOR: f64 = -1e-6;
const DEPLOYMENT_TOL: f64 = 1e-6;
const REDUCTION_TOL: f64 = 1e-12;
const SAMPLING_TOL: f64 = 0.01;
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const CUE_BUDGET: u64 = 50_000;
const CUE_SUCCESS: f64 = 0.9;
const CUE_BASELINE_MARGIN: f64 = 0.15;
/// The blind-optimum bound used for the baseline ceiling. The true blind
/// optimum of CuePassing(3, 3) is 1/9; the ceiling is pinned to the value
/// 1/27 + 0.15 = 0.187, which is the stricter of the two.
const CUE_BASELINE_CEILING: f64 = 1.0 / 27.0 + CUE_BASELINE_MARGIN;
const TWO_STEP_BUDGET: u64 = 20_000;
const TWO_STEP_TOL: f64 = 0.05;
const CLIMBING_BUDGET: u64 = 5_000;
const CLIMBING_REPETITIONS: u64 = 3;
const CLIMBING_OPTIMUM: f64 = 11.0;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

/// Small networks for the learning criteria: one core has to train them.
fn toy_config(env: EnvSpec, mixer: MixerKind) -> RunConfig {
    let mut c = RunConfig {
        env,
        mixer,
        ..RunConfig::default()
    };
    c.agent.hidden_dim = 32;
    c.comm.ffn_dim = 64;
    c
}

fn check_line(report: &CheckReport, name: &str, tol: f64, lower: bool) -> (bool, String) {
    match report.get(name) {
        Some(c) => {
            let ok = c.passed && if lower { c.metric >= tol } else { c.metric <= tol };
            (ok, format!("{name}={:.3e}", c.metric))
        }
        None => (false, format!("{name} missing")),
    }
}

fn from_checks(report: &CheckReport, items: &[(&str, f64, bool)]) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for &(name, tol, lower) in items {
        let (p, s) = check_line(report, name, tol, lower);
        ok &= p;
        parts.push(s);
    }
    outcome(ok, parts.join(" "))
}

/// The fault-free check suite and how long it took; shared by criteria 1-7.
fn fresh_checks() -> &'static (CheckReport, f64) {
    static REPORT: OnceLock<(CheckReport, f64)> = OnceLock::new();
    REPORT.get_or_init(|| {
        let start = Instant::now();
        let report = run_checks(1, Faults::default());
        (report, start.elapsed().as_secs_f64())
    })
}

fn criterion_1() -> Outcome {
    let (report, secs) = fresh_checks();
    let secs = *secs;
    let mut o = from_checks(
        report,
        &[
            ("grad_mlp", LAYER_GRAD_TOL, false),
            ("grad_gru", LAYER_GRAD_TOL, false),
            ("grad_attention", LAYER_GRAD_TOL, false),
            ("grad_encoder", LAYER_GRAD_TOL, false),
            ("grad_qmix", LAYER_GRAD_TOL, false),
            ("grad_td_loss", TD_GRAD_TOL, false),
        ],
    );
    o.passed &= secs < GRAD_RUNTIME_SECS;
    o.detail = format!("{} (whole check suite {secs:.1}s)", o.detail);
    o
}

fn checks_for(items: &[(&str, f64, bool)]) -> Outcome {
    from_checks(&fresh_checks().0, items)
}

fn criterion_8() -> Outcome {
    let spec = CuePassingSpec { n_agents: 3, n_cues: 3 };
    let blind = blind_optimum(&spec).expect("enumerable");
    let env = EnvSpec::CuePassing { n_agents: 3, n_cues: 3 };
    let mut config = toy_config(env, MixerKind::Vdn);
    config.total_env_steps = CUE_BUDGET;

    // communicating runs advance in lockstep and stop once the seed-averaged
    // success reaches the target
    let mut runs: Vec<SeedRun<f32>> = SEEDS.iter().map(|&s| SeedRun::new(&config, s).unwrap()).collect();
    let mut reached = None;
    let mut best = 0.0f64;
    let mut checkpoint = 0;
    while checkpoint <= CUE_BUDGET {
        let mut total = 0.0;
        for run in &mut runs {
            while run.env_steps() < checkpoint {
                run.train_episode().unwrap();
            }
            total += run.test_round().unwrap().success_rate.unwrap();
        }
        let mean = total / runs.len() as f64;
        best = best.max(mean);
        if mean >= CUE_SUCCESS {
            reached = Some(checkpoint);
            break;
        }
        checkpoint += config.train.test_interval;
    }

    config.comm.enabled = false;
    let mut per_point: Vec<f64> = Vec::new();
    for &seed in &SEEDS {
        let rows = SeedRun::<f32>::new(&config, seed).unwrap().run(|_, _| Ok(())).unwrap();
        if per_point.is_empty() {
            per_point = vec![0.0; rows.len()];
        }
        for (acc, r) in per_point.iter_mut().zip(&rows) {
            *acc += r.success_rate.unwrap() / SEEDS.len() as f64;
        }
    }
    let baseline_max = per_point.iter().copied().fold(0.0, f64::max);
    let comm_ok = reached.is_some();
    let base_ok = baseline_max <= CUE_BASELINE_CEILING;
    outcome(
        comm_ok && base_ok,
        format!(
            "comm success {} (best {best:.3}); baseline max {baseline_max:.3} <= {CUE_BASELINE_CEILING:.3} \
             (blind optimum {blind:.4})",
            reached.map_or("never reached 0.9".into(), |s| format!(">= 0.9 at {s} steps")),
        ),
    )
}

fn criterion_9() -> Outcome {
    let mut config = toy_config(EnvSpec::TwoStepCoop, MixerKind::Qmix);
    config.total_env_steps = TWO_STEP_BUDGET;
    config.train.anneal_steps = TWO_STEP_BUDGET / 2;
    config.train.test_interval = 5_000;
    let optimum = value_iteration(&TwoStepCoop::new(), config.train.gamma).unwrap().value;
    let mut errors = Vec::new();
    for &seed in &SEEDS {
        let mut run = SeedRun::<f32>::new(&config, seed).unwrap();
        run.run(|_, _| Ok(())).unwrap();
        let greedy = run.evaluate(1, true).unwrap();
        errors.push((greedy[0].values[0] - optimum).abs());
    }
    let within = errors.iter().filter(|&&e| e <= TWO_STEP_TOL).count();
    outcome(
        within == SEEDS.len(),
        format!(
            "{within}/5 seeds within {TWO_STEP_TOL} of {optimum:.2}; errors {:?}",
            errors.iter().map(|e| format!("{e:.3}")).collect::<Vec<_>>()
        ),
    )
}

fn climbing_wins(scheme: ExploreScheme, repetition: u64) -> usize {
    let mut config = toy_config(EnvSpec::MatrixGame { payoff: None }, MixerKind::Qmix);
    config.total_env_steps = CLIMBING_BUDGET;
    config.train.anneal_steps = CLIMBING_BUDGET / 2;
    config.train.test_interval = CLIMBING_BUDGET;
    config.exploration.scheme = scheme;
    config.exploration.k = 2;
    config.exploration.temperature = 0.33;
    SEEDS
        .iter()
        .filter(|&&s| {
            let mut run = SeedRun::<f32>::new(&config, s + 100 * repetition).unwrap();
            run.run(|_, _| Ok(())).unwrap();
            run.evaluate(1, false).unwrap()[0].episode_return == CLIMBING_OPTIMUM
        })
        .count()
}

fn median(mut v: Vec<usize>) -> usize {
    v.sort_unstable();
    v[v.len() / 2]
}

fn criterion_10() -> Outcome {
    let mut topk = Vec::new();
    let mut greedy = Vec::new();
    for r in 0..CLIMBING_REPETITIONS {
        topk.push(climbing_wins(ExploreScheme::TopK, r));
        greedy.push(climbing_wins(ExploreScheme::EpsilonGreedy, r));
    }
    let at_least = topk[0] >= greedy[0];
    let strictly = median(topk.clone()) > median(greedy.clone());
    outcome(
        at_least && strictly,
        format!("optimal seeds per repetition: top-2 {topk:?} vs epsilon-greedy {greedy:?}"),
    )
}

fn criterion_11() -> Outcome {
    let no_abs = run_checks(1, Faults { qmix_no_abs: true, ..Faults::default() });
    let nonzero = run_checks(1, Faults { comm_nonzero_init: true, ..Faults::default() });
    outcome(
        !no_abs.passed && !nonzero.passed,
        format!(
            "without abs: monotonicity {:.3e}; nonzero init: passthrough mismatches {}",
            no_abs.get("qmix_monotonicity").map_or(f64::NAN, |c| c.metric),
            nonzero.get("passthrough").map_or(f64::NAN, |c| c.metric),
        ),
    )
}

fn main() -> ExitCode {
    let criteria: Vec<(u32, &str, Box<dyn Fn() -> Outcome>)> = vec![
        (1, "gradient fidelity", Box::new(criterion_1)),
        (2, "zero-init passthrough", Box::new(|| checks_for(&[("passthrough", 0.0, false)]))),
        (3, "parameter count independent of team size", Box::new(|| checks_for(&[("param_count", 0.0, false)]))),
        (4, "permutation equivariance", Box::new(|| checks_for(&[("equivariance", EQUIVARIANCE_TOL, false)]))),
        (
            5,
            "mixer contracts",
            Box::new(|| checks_for(&[("vdn_exact_sum", 0.0, false), ("qmix_monotonicity", MONOTONICITY_FLOOR, true)])),
        ),
        (
            6,
            "deployment equivalence",
            Box::new(|| {
                checks_for(&[
                    ("deployment_full", DEPLOYMENT_TOL, false),
                    ("deployment_masked", DEPLOYMENT_TOL, false),
                    ("deployment_traffic", 0.0, false),
                ])
            }),
        ),
        (
            7,
            "exploration reductions",
            Box::new(|| {
                checks_for(&[
                    ("exploration_reductions", REDUCTION_TOL, false),
                    ("exploration_sampling", SAMPLING_TOL, false),
                ])
            }),
        ),
        (8, "communication necessity on CuePassing(3, 3)", Box::new(criterion_8)),
        (9, "TwoStepCoop oracle convergence", Box::new(criterion_9)),
        (10, "top-k exploration on the climbing game", Box::new(criterion_10)),
        (11, "deliberate faults are detected", Box::new(criterion_11)),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, run) in &criteria {
        if !only.is_empty() && !only.contains(n) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        if !o.passed {
            failed += 1;
        }
        println!(
            "criterion {n} {name}: {} [{:.1}s] {}",
            if o.passed { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            o.detail
        );
    }
    if failed > 0 {
        println!("acceptance: {failed} criterion(s) failed");
        ExitCode::FAILURE
    } else {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    }
}
