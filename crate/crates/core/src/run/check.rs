//! Randomized invariant suite behind the `check` command.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::AgentConfig;
use crate::comm::{CommConfig, CommNet};
use crate::envs::{EnvRng, EnvSpec};
use crate::error::Result;
use crate::exploration::{action_distribution, select_action, ExplorationConfig};
use crate::ipu::{centralized_round, distributed_round, masked_round, Topology};
use crate::learner::{Architecture, Learner, Networks, TrainConfig};
use crate::mixer::{Mixer, MixerKind, Qmix};
use crate::nn::gradcheck::{finite_difference_gradient, finite_difference_input, max_relative_error};
use crate::nn::{Dense, EncoderLayer, Graph, Group, GruCell, Matrix, Mode, MultiHeadAttention, ParamStore, Var};
use super::rollout::{run_episode, ActSettings};

/// Deliberate defects, used to confirm that the suite notices them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Faults {
    pub qmix_no_abs: bool,
    pub comm_nonzero_init: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed value of the checked quantity.
    pub metric: f64,
    pub threshold: f64,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl CheckReport {
    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn at_most(name: &str, metric: f64, threshold: f64, detail: impl Into<String>) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed: metric <= threshold,
        metric,
        threshold,
        detail: detail.into(),
    }
}

fn at_least(name: &str, metric: f64, threshold: f64, detail: impl Into<String>) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed: metric >= threshold,
        metric,
        threshold,
        detail: detail.into(),
    }
}

fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
}

fn randomize(store: &mut ParamStore<f64>, dense: &Dense, rng: &mut impl Rng) {
    for id in [dense.weight, dense.bias] {
        for v in store.tensor_mut(id).as_mut_slice() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
}

/// Runs every check. Checks that error out are reported as failures.
pub fn run_checks(seed: u64, faults: Faults) -> CheckReport {
    type Check = fn(&mut ChaCha8Rng, Faults) -> Result<Vec<CheckResult>>;
    let suite: [(&str, Check); 8] = [
        ("gradients", gradient_checks),
        ("td_loss_gradient", td_loss_gradient),
        ("passthrough", passthrough),
        ("param_count", param_count),
        ("equivariance", equivariance),
        ("mixers", mixers),
        ("deployment", deployment),
        ("exploration", exploration),
    ];
    let mut checks = Vec::new();
    for (i, (name, check)) in suite.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64 * 7919));
        match check(&mut rng, faults) {
            Ok(results) => checks.extend(results),
            Err(e) => checks.push(CheckResult {
                name: (*name).into(),
                passed: false,
                metric: f64::NAN,
                threshold: f64::NAN,
                detail: format!("error: {e}"),
            }),
        }
    }
    CheckReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}

type Build<'b> = &'b dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>;

/// Max relative error between autodiff and central differences of
/// `sum(out * R)` for a fixed random `R`, over parameters and inputs.
pub fn layer_gradient_error(
    store: &mut ParamStore<f64>,
    inputs: &[Matrix<f64>],
    mode: Mode,
    build: Build<'_>,
    rng: &mut impl Rng,
) -> Result<f64> {
    let shape = {
        let mut g = Graph::new(store, mode);
        let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
        let out = build(&mut g, &vars)?;
        g.shape(out)
    };
    let weights = random_matrix(shape.0, shape.1, 1.0, rng);
    let objective = |store: &ParamStore<f64>, inputs: &[Matrix<f64>]| -> Result<(f64, Vec<Option<Matrix<f64>>>, crate::nn::Gradients<f64>)> {
        let mut g = Graph::new(store, mode);
        let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
        let out = build(&mut g, &vars)?;
        let w = g.constant(weights.clone());
        let y = g.mul(out, w)?;
        let s = g.sum_all(y);
        let grads = g.backward(s);
        let input_grads = vars.iter().map(|&v| grads.wrt(v).cloned()).collect();
        Ok((g.value(s)[(0, 0)], input_grads, grads))
    };
    let (_, input_grads, grads) = objective(store, inputs)?;
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut worst = 0.0f64;
    let numeric = finite_difference_gradient(
        |s| objective(s, inputs).map(|r| r.0).unwrap_or(f64::NAN),
        store,
        &ids,
        1e-6,
    );
    for (id, num) in ids.iter().zip(&numeric) {
        let zero = Matrix::zeros(num.rows(), num.cols());
        let analytic = grads.param(*id).unwrap_or(&zero);
        worst = worst.max(max_relative_error(analytic, num));
    }
    for (k, x) in inputs.iter().enumerate() {
        let num = finite_difference_input(
            |probe| {
                let mut xs = inputs.to_vec();
                xs[k] = probe.clone();
                objective(store, &xs).map(|r| r.0).unwrap_or(f64::NAN)
            },
            x,
            1e-6,
        );
        let zero = Matrix::zeros(num.rows(), num.cols());
        worst = worst.max(max_relative_error(input_grads[k].as_ref().unwrap_or(&zero), &num));
    }
    Ok(worst)
}

fn gradient_checks(rng: &mut ChaCha8Rng, _: Faults) -> Result<Vec<CheckResult>> {
    const TOL: f64 = 1e-4;
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let l1 = Dense::new(&mut store, "a", Group::Main, 5, 7, rng);
    let l2 = Dense::new(&mut store, "b", Group::Main, 7, 3, rng);
    let x = random_matrix(4, 5, 1.0, rng);
    let err = layer_gradient_error(
        &mut store,
        &[x],
        Mode::Eval,
        &|g, v| {
            let h = l1.forward(g, v[0])?;
            let h = g.relu(h);
            l2.forward(g, h)
        },
        rng,
    )?;
    out.push(at_most("grad_mlp", err, TOL, "two dense layers with relu"));

    let mut store = ParamStore::new();
    let gru = GruCell::new(&mut store, "gru", Group::Main, 4, 6, rng);
    let inputs = [random_matrix(3, 4, 1.0, rng), random_matrix(3, 6, 1.0, rng)];
    let err = layer_gradient_error(&mut store, &inputs, Mode::Eval, &|g, v| gru.forward(g, v[0], v[1]), rng)?;
    out.push(at_most("grad_gru", err, TOL, "single GRU step"));

    let mut store = ParamStore::new();
    let attn = MultiHeadAttention::new(&mut store, "attn", Group::Comm, 8, 2, rng)?;
    let x = random_matrix(6, 8, 1.0, rng);
    let err = layer_gradient_error(&mut store, &[x], Mode::Eval, &|g, v| attn.forward(g, v[0], 3, None), rng)?;
    out.push(at_most("grad_attention", err, TOL, "two heads, two groups of three"));

    let mut store = ParamStore::new();
    let enc = EncoderLayer::new(&mut store, "enc", Group::Comm, 8, 2, 12, 0.25, 1, rng)?;
    let x = random_matrix(6, 8, 1.0, rng);
    let mode = Mode::Train { seed: rng.gen(), step: 3 };
    let err = layer_gradient_error(&mut store, &[x], mode, &|g, v| enc.forward(g, v[0], 3, None), rng)?;
    out.push(at_most("grad_encoder", err, TOL, "pre-norm layer with active dropout"));

    let mut store = ParamStore::new();
    let qmix = Qmix::init(&mut store, 3, 5, rng.gen());
    let inputs = [random_matrix(4, 3, 2.0, rng), random_matrix(4, 5, 1.0, rng)];
    let err = layer_gradient_error(&mut store, &inputs, Mode::Eval, &|g, v| qmix.forward(g, v[0], v[1]), rng)?;
    out.push(at_most("grad_qmix", err, TOL, "monotonic mixer"));
    Ok(out)
}

fn td_loss_gradient(rng: &mut ChaCha8Rng, _: Faults) -> Result<Vec<CheckResult>> {
    let env_spec = EnvSpec::CuePassing { n_agents: 2, n_cues: 2 };
    let mut env = env_spec.build()?;
    let arch = Architecture {
        agent: AgentConfig {
            obs_dim: env.obs_dim(),
            n_actions: env.n_actions(),
            n_agents: 2,
            hidden_dim: 8,
        },
        comm: Some(CommConfig {
            num_layers: 1,
            ffn_dim: 8,
            model_dim: 8,
            heads: 2,
            dropout: 0.0,
        }),
        use_residual: true,
        mixer: MixerKind::Qmix,
        state_dim: env.state_dim(),
    };
    let mut learner = Learner::<f64>::new(&arch, TrainConfig::default(), rng.gen())?;
    // a nonzero output projection so gradients reach the encoder
    let out_layer = learner.online.team.comm.as_ref().expect("comm enabled").output.clone();
    randomize(&mut learner.online.store, &out_layer, rng);
    let settings = ActSettings {
        explore: ExplorationConfig::epsilon_greedy(1.0),
        mask: None,
        step_traffic: Default::default(),
        record_values: false,
    };
    let mut env_rng = EnvRng::seed_from_u64(rng.gen());
    let episodes = (0..3)
        .map(|_| run_episode(env.as_mut(), &learner.online, &settings, &mut env_rng, rng).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<_> = episodes.iter().collect();
    let batch = learner.prepare(&refs)?;
    let targets = learner.compute_targets(&batch)?;
    let (_, grads) = learner.td_loss_with(&learner.online.store, &batch, &targets, Mode::Eval)?;
    let mut store = learner.online.store.clone();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let numeric = finite_difference_gradient(
        |s| {
            learner
                .td_loss_with(s, &batch, &targets, Mode::Eval)
                .map(|r| r.0)
                .unwrap_or(f64::NAN)
        },
        &mut store,
        &ids,
        1e-6,
    );
    let mut worst = 0.0f64;
    for (id, num) in ids.iter().zip(&numeric) {
        let zero = Matrix::zeros(num.rows(), num.cols());
        worst = worst.max(max_relative_error(grads.param(*id).unwrap_or(&zero), num));
    }
    Ok(vec![at_most(
        "grad_td_loss",
        worst,
        1e-3,
        "end-to-end loss through mixer, communication and GRU over time",
    )])
}

fn passthrough(rng: &mut ChaCha8Rng, faults: Faults) -> Result<Vec<CheckResult>> {
    let agent = AgentConfig {
        obs_dim: 5,
        n_actions: 4,
        n_agents: 3,
        hidden_dim: 16,
    };
    let arch = |comm: bool| Architecture {
        agent,
        comm: comm.then(|| CommConfig {
            model_dim: 16,
            ..CommConfig::default()
        }),
        use_residual: true,
        mixer: MixerKind::Vdn,
        state_dim: 1,
    };
    let seed = rng.gen();
    let mut with = Networks::<f64>::build(&arch(true), seed)?;
    let without = Networks::<f64>::build(&arch(false), seed)?;
    if faults.comm_nonzero_init {
        let out_layer = with.team.comm.as_ref().expect("comm enabled").output.clone();
        randomize(&mut with.store, &out_layer, rng);
    }
    let mut mismatches = 0usize;
    let trials = 100;
    for _ in 0..trials {
        let x = random_matrix(3, agent.input_dim(), 2.0, rng);
        let h = random_matrix(3, 16, 1.0, rng);
        let run = |nets: &Networks<f64>| -> Result<(Matrix<f64>, Matrix<f64>)> {
            let mut g = Graph::new(&nets.store, Mode::Eval);
            let xv = g.constant(x.clone());
            let hv = g.constant(h.clone());
            let o = nets.team.forward(&mut g, xv, hv, None)?;
            Ok((g.value(o.q).clone(), g.value(o.hidden).clone()))
        };
        let (a, b) = (run(&with)?, run(&without)?);
        let same = |p: &Matrix<f64>, q: &Matrix<f64>| {
            p.as_slice().iter().zip(q.as_slice()).all(|(u, v)| u.to_bits() == v.to_bits())
        };
        if !(same(&a.0, &b.0) && same(&a.1, &b.1)) {
            mismatches += 1;
        }
    }
    Ok(vec![at_most(
        "passthrough",
        mismatches as f64,
        0.0,
        format!("{mismatches} of {trials} random inputs differ bitwise with fresh communication"),
    )])
}

fn param_count(rng: &mut ChaCha8Rng, _: Faults) -> Result<Vec<CheckResult>> {
    let cfg = CommConfig::default();
    let mut counts = Vec::new();
    for n in [2, 8, 27] {
        let mut store = ParamStore::<f64>::new();
        let net = CommNet::init(&mut store, &cfg, rng.gen())?;
        // the module must actually run on n agents with those parameters
        net.communicate(&store, &random_matrix(n, cfg.model_dim, 1.0, rng), Mode::Eval, None)?;
        counts.push(net.param_count(&store));
    }
    let spread = counts.iter().max().unwrap() - counts.iter().min().unwrap();
    let formula_gap = counts[0].abs_diff(cfg.param_count());
    Ok(vec![at_most(
        "param_count",
        (spread + formula_gap) as f64,
        0.0,
        format!("counts for n = 2, 8, 27: {counts:?}; formula {}", cfg.param_count()),
    )])
}

fn comm_with_random_output(rng: &mut ChaCha8Rng, cfg: &CommConfig) -> Result<(ParamStore<f64>, CommNet)> {
    let mut store = ParamStore::new();
    let net = CommNet::init(&mut store, cfg, rng.gen())?;
    randomize(&mut store, &net.output, rng);
    Ok((store, net))
}

fn equivariance(rng: &mut ChaCha8Rng, _: Faults) -> Result<Vec<CheckResult>> {
    let cfg = CommConfig {
        num_layers: 2,
        ffn_dim: 16,
        model_dim: 8,
        heads: 2,
        dropout: 0.1,
    };
    let (store, net) = comm_with_random_output(rng, &cfg)?;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(2..7);
        let h = random_matrix(n, 8, 2.0, rng);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        let z = net.communicate(&store, &h, Mode::Eval, None)?.z;
        let zp = net.communicate(&store, &h.select_rows(&perm), Mode::Eval, None)?.z;
        worst = worst.max(zp.max_abs_diff(&z.select_rows(&perm)));
    }
    Ok(vec![at_most("equivariance", worst, 1e-6, "max |C(PH) - P C(H)| over 100 draws")])
}

fn mixers(rng: &mut ChaCha8Rng, faults: Faults) -> Result<Vec<CheckResult>> {
    let empty = ParamStore::<f64>::new();
    let mut vdn_err = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(1..10);
        let q: Vec<f64> = (0..n).map(|_| rng.gen_range(-100.0..100.0)).collect();
        let exact = q.iter().fold(0.0, |a, &b| a + b);
        vdn_err = vdn_err.max((Mixer::Vdn.mix(&empty, &q, &[])? - exact).abs());
        let mut g = Graph::new(&empty, Mode::Eval);
        let qv = g.constant(Matrix::from_vec(1, n, q.clone())?);
        let y = Mixer::Vdn.forward(&mut g, qv, qv)?;
        vdn_err = vdn_err.max((g.value(y)[(0, 0)] - exact).abs());
    }

    let (n, sd, probes) = (3, 6, 1000);
    let mut store = ParamStore::<f64>::new();
    let mut qmix = Qmix::init(&mut store, n, sd, rng.gen());
    if faults.qmix_no_abs {
        qmix = qmix.without_weight_positivity();
    }
    let mixer = Mixer::Qmix(qmix);
    let q = random_matrix(probes, n, 5.0, rng);
    let s = random_matrix(probes, sd, 2.0, rng);
    let agents: Vec<usize> = (0..probes).map(|_| rng.gen_range(0..n)).collect();
    let h = 1e-4;
    let shifted = |sign: f64| {
        let mut m = q.clone();
        for (r, &i) in agents.iter().enumerate() {
            m.row_mut(r)[i] += sign * h;
        }
        m
    };
    let eval = |m: Matrix<f64>| -> Result<Matrix<f64>> {
        let mut g = Graph::new(&store, Mode::Eval);
        let qv = g.constant(m);
        let sv = g.constant(s.clone());
        let y = mixer.forward(&mut g, qv, sv)?;
        Ok(g.value(y).clone())
    };
    let (up, down) = (eval(shifted(1.0))?, eval(shifted(-1.0))?);
    let min_slope = (0..probes)
        .map(|r| (up[(r, 0)] - down[(r, 0)]) / (2.0 * h))
        .fold(f64::INFINITY, f64::min);
    Ok(vec![
        at_most("vdn_exact_sum", vdn_err, 0.0, "graph and direct sums against f64 fold"),
        at_least(
            "qmix_monotonicity",
            min_slope,
            -1e-6,
            format!("minimum finite-difference slope over {probes} probes"),
        ),
    ])
}

fn deployment(rng: &mut ChaCha8Rng, _: Faults) -> Result<Vec<CheckResult>> {
    let cfg = CommConfig {
        num_layers: 2,
        ffn_dim: 32,
        model_dim: 16,
        heads: 4,
        dropout: 0.1,
    };
    let (store, net) = comm_with_random_output(rng, &cfg)?;
    let mut worst_full = 0.0f64;
    let mut worst_masked = 0.0f64;
    let mut traffic_ok = true;
    for _ in 0..20 {
        let n = rng.gen_range(2..7);
        let h = random_matrix(n, 16, 2.0, rng);
        let (zc, tc) = centralized_round(&net, &store, &h)?;
        let (zd, td) = distributed_round(&net, &store, &h, &Topology::full(n))?;
        worst_full = worst_full.max(zc.z.max_abs_diff(&zd.z));
        traffic_ok &= tc.floats_transferred == (2 * n * 16) as u64
            && tc.messages == 2 * n as u64
            && td.messages == (cfg.num_layers * n * (n - 1)) as u64;
        let adjacency: Vec<Vec<bool>> = (0..n).map(|_| (0..n).map(|_| rng.gen_bool(0.5)).collect()).collect();
        let topo = Topology::from_adjacency(&adjacency)?;
        let (zp, tp) = distributed_round(&net, &store, &h, &topo)?;
        let zm = masked_round(&net, &store, &h, &topo)?;
        worst_masked = worst_masked.max(zp.z.max_abs_diff(&zm.z));
        traffic_ok &= tp.messages == cfg.num_layers as u64 * topo.links();
    }
    Ok(vec![
        at_most("deployment_full", worst_full, 1e-6, "distributed vs centralized, full topology"),
        at_most("deployment_masked", worst_masked, 1e-6, "distributed vs masked batch, random topology"),
        at_most(
            "deployment_traffic",
            if traffic_ok { 0.0 } else { 1.0 },
            0.0,
            "message and float counters match closed forms",
        ),
    ])
}

fn exploration(rng: &mut ChaCha8Rng, _: Faults) -> Result<Vec<CheckResult>> {
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let len = rng.gen_range(1..8);
        let q: Vec<f64> = (0..len).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut avail: Vec<bool> = (0..len).map(|_| rng.gen_bool(0.7)).collect();
        avail[rng.gen_range(0..len)] = true;
        let eps = rng.gen_range(0.0..1.0);
        let base = action_distribution(&q, &avail, &ExplorationConfig::epsilon_greedy(eps))?;
        let k1 = ExplorationConfig {
            epsilon: eps,
            k: 1,
            temperature: rng.gen_range(0.01..5.0),
        };
        let cold = ExplorationConfig {
            epsilon: eps,
            k: rng.gen_range(1..6),
            temperature: 0.0,
        };
        for cfg in [k1, cold] {
            let p = action_distribution(&q, &avail, &cfg)?;
            for (a, b) in p.iter().zip(&base) {
                worst = worst.max((a - b).abs());
            }
        }
    }

    let cases = [
        (vec![3.0, 1.0, 0.0, 2.5], vec![true, true, true, true], ExplorationConfig { epsilon: 0.2, k: 2, temperature: 0.33 }),
        (vec![0.5, 0.4, 0.3], vec![true, false, true], ExplorationConfig { epsilon: 0.5, k: 3, temperature: 1.0 }),
        (vec![1.0, 1.0, -1.0], vec![true; 3], ExplorationConfig::epsilon_greedy(0.3)),
    ];
    let samples = 100_000;
    let mut worst_mc = 0.0f64;
    for (q, avail, cfg) in &cases {
        let p = action_distribution(q, avail, cfg)?;
        let mut counts = vec![0usize; q.len()];
        for _ in 0..samples {
            counts[select_action(q, avail, cfg, rng)?] += 1;
        }
        for (c, pa) in counts.iter().zip(&p) {
            worst_mc = worst_mc.max((*c as f64 / samples as f64 - pa).abs());
        }
    }
    Ok(vec![
        at_most("exploration_reductions", worst, 1e-12, "k = 1 and tau = 0 against epsilon-greedy"),
        at_most("exploration_sampling", worst_mc, 0.01, "Monte Carlo frequencies at 1e5 samples"),
    ])
}
