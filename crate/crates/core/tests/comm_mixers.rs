use mactas::comm::{CommConfig, CommNet};
use mactas::exploration::{action_distribution, select_action, ExplorationConfig};
use mactas::ipu::{centralized_round, distributed_round, masked_round, Topology, TrafficStats};
use mactas::mixer::{Mixer, MixerKind};
use mactas::nn::{Graph, Matrix, Mode, ParamStore};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(layers: usize) -> CommConfig {
    CommConfig {
        num_layers: layers,
        ffn_dim: 12,
        model_dim: 8,
        heads: 2,
        dropout: 0.1,
    }
}

/// A communication module whose output projection is no longer zero.
fn trained_comm(layers: usize, seed: u64) -> (ParamStore<f64>, CommNet) {
    let mut store = ParamStore::new();
    let net = CommNet::init(&mut store, &cfg(layers), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for id in [net.output.weight, net.output.bias] {
        for v in store.tensor_mut(id).as_mut_slice() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    (store, net)
}

fn random(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-2.0..2.0))
}

#[test]
fn param_count_matches_hand_formula() {
    for (layers, d, f) in [(1, 8, 12), (3, 64, 512), (2, 16, 4)] {
        let c = CommConfig {
            num_layers: layers,
            ffn_dim: f,
            model_dim: d,
            heads: 2,
            dropout: 0.0,
        };
        // per layer: q,k,v,o projections, two layer norms, two ffn layers
        let per_layer = 4 * (d * d + d) + 2 * 2 * d + (d * f + f) + (f * d + d);
        let want = layers * per_layer + d * d + d;
        let mut store = ParamStore::<f32>::new();
        let net = CommNet::init(&mut store, &c, 1).unwrap();
        assert_eq!(net.param_count(&store), want);
        assert_eq!(c.param_count(), want);
    }
}

#[test]
fn fresh_module_passes_hidden_states_through() {
    let mut store = ParamStore::<f64>::new();
    let net = CommNet::init(&mut store, &cfg(2), 4).unwrap();
    for s in 0..20 {
        let h = random(5, 8, s);
        for mode in [Mode::Eval, Mode::Train { seed: 3, step: s }] {
            let z = net.communicate(&store, &h, mode, None).unwrap().z;
            assert!(z.as_slice().iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn block_mask_matches_running_each_block_alone() {
    let (store, net) = trained_comm(2, 6);
    let h = random(5, 8, 2);
    let blocks = [vec![0, 2, 3], vec![1, 4]];
    let adjacency: Vec<Vec<bool>> = (0..5)
        .map(|i| (0..5).map(|j| blocks.iter().any(|b| b.contains(&i) && b.contains(&j))).collect())
        .collect();
    let topo = Topology::from_adjacency(&adjacency).unwrap();
    let masked = masked_round(&net, &store, &h, &topo).unwrap().z;
    for b in &blocks {
        let alone = net.communicate(&store, &h.select_rows(b), Mode::Eval, None).unwrap().z;
        for (k, &row) in b.iter().enumerate() {
            for (x, y) in masked.row(row).iter().zip(alone.row(k)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn deployment_modes_agree_and_count_traffic() {
    let (store, net) = trained_comm(2, 9);
    let h = random(4, 8, 5);
    let (central, ct) = centralized_round(&net, &store, &h).unwrap();
    let (dist, dt) = distributed_round(&net, &store, &h, &Topology::full(4)).unwrap();
    assert!(central.z.max_abs_diff(&dist.z) < 1e-12);
    assert_eq!(ct, TrafficStats { messages: 8, floats_transferred: 64, rounds: 1 });
    // 2 layers, 4 * 3 links, width 8
    assert_eq!(dt, TrafficStats { messages: 24, floats_transferred: 192, rounds: 2 });

    let mut sparse = Topology::full(4);
    sparse.set(0, 3, false);
    sparse.set(2, 1, false);
    let (dist, dt) = distributed_round(&net, &store, &h, &sparse).unwrap();
    let masked = masked_round(&net, &store, &h, &sparse).unwrap();
    assert!(masked.z.max_abs_diff(&dist.z) < 1e-12);
    assert_eq!(dt.messages, 2 * 10);
    assert_eq!(dt, TrafficStats::distributed(2, sparse.links(), 8));
}

#[test]
fn isolated_agent_ignores_teammates() {
    let (store, net) = trained_comm(1, 3);
    let topo = Topology::isolating(4, 2);
    let h = random(4, 8, 1);
    let mut h2 = h.clone();
    for r in [0, 1, 3] {
        for v in h2.row_mut(r) {
            *v += 1.0;
        }
    }
    let a = masked_round(&net, &store, &h, &topo).unwrap().z;
    let b = masked_round(&net, &store, &h2, &topo).unwrap().z;
    assert_eq!(a.row(2), b.row(2));
    let alone = net.communicate(&store, &h.select_rows(&[2]), Mode::Eval, None).unwrap().z;
    assert!(a.row(2).iter().zip(alone.row(0)).all(|(x, y)| (x - y).abs() < 1e-12));
    // the others behave as if agent 2 were absent
    let rest = net.communicate(&store, &h.select_rows(&[0, 1, 3]), Mode::Eval, None).unwrap().z;
    assert!(a.select_rows(&[0, 1, 3]).max_abs_diff(&rest) < 1e-12);
    let (dist, _) = distributed_round(&net, &store, &h, &topo).unwrap();
    assert!(dist.z.max_abs_diff(&a) < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn communication_is_permutation_equivariant(seed in 0u64..1000, n in 2usize..6, shift in 1usize..5) {
        let (store, net) = trained_comm(2, seed);
        let h = random(n, 8, seed + 7);
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let z = net.communicate(&store, &h, Mode::Eval, None).unwrap().z;
        let zp = net.communicate(&store, &h.select_rows(&perm), Mode::Eval, None).unwrap().z;
        prop_assert!(zp.max_abs_diff(&z.select_rows(&perm)) < 1e-9);
    }

    #[test]
    fn qmix_is_monotone_in_every_local_value(seed in 0u64..1000, n in 1usize..5) {
        let mut store = ParamStore::<f64>::new();
        let mixer = Mixer::init(MixerKind::Qmix, &mut store, n, 3, seed);
        let q = random(6, n, seed + 1);
        let s = random(6, 3, seed + 2);
        let mut g = Graph::new(&store, Mode::Eval);
        let qv = g.input(q);
        let sv = g.constant(s);
        let y = mixer.forward(&mut g, qv, sv).unwrap();
        let total = g.sum_all(y);
        let grad = g.backward(total).wrt(qv).unwrap().clone();
        prop_assert!(grad.as_slice().iter().all(|&d| d >= 0.0));
    }

    #[test]
    fn vdn_is_the_plain_sum(q in proptest::collection::vec(-1e3f64..1e3, 1..8)) {
        let store = ParamStore::<f64>::new();
        let want = q.iter().fold(0.0, |a, b| a + b);
        prop_assert_eq!(Mixer::Vdn.mix(&store, &q, &[]).unwrap(), want);
    }

    #[test]
    fn distribution_is_normalized_and_supported_on_available(
        q in proptest::collection::vec(-5.0f64..5.0, 2..7),
        mask_bits in 1u32..127,
        epsilon in 0.0f64..1.0,
        k in 1usize..5,
        temperature in 0.0f64..2.0,
    ) {
        let available: Vec<bool> = (0..q.len()).map(|a| mask_bits >> a & 1 == 1).collect();
        prop_assume!(available.iter().any(|&a| a));
        let p = action_distribution(&q, &available, &ExplorationConfig { epsilon, k, temperature }).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (pa, av) in p.iter().zip(&available) {
            prop_assert!(*pa >= 0.0);
            if !av {
                prop_assert_eq!(*pa, 0.0);
            }
        }
    }
}

#[test]
fn qmix_gradient_matches_finite_differences() {
    let mut store = ParamStore::<f64>::new();
    let mixer = Mixer::init(MixerKind::Qmix, &mut store, 3, 4, 11);
    let q = random(1, 3, 1).as_slice().to_vec();
    let s = random(1, 4, 2).as_slice().to_vec();
    let mut g = Graph::new(&store, Mode::Eval);
    let qv = g.input(Matrix::from_vec(1, 3, q.clone()).unwrap());
    let sv = g.constant(Matrix::from_vec(1, 4, s.clone()).unwrap());
    let y = mixer.forward(&mut g, qv, sv).unwrap();
    let grad = g.backward(y).wrt(qv).unwrap().clone();
    for i in 0..3 {
        let mut up = q.clone();
        let mut down = q.clone();
        up[i] += 1e-6;
        down[i] -= 1e-6;
        let fd = (mixer.mix(&store, &up, &s).unwrap() - mixer.mix(&store, &down, &s).unwrap()) / 2e-6;
        assert!((fd - grad[(0, i)]).abs() < 1e-6);
    }
}

#[test]
fn sampling_frequencies_match_distribution() {
    let cfg = ExplorationConfig {
        epsilon: 0.2,
        k: 2,
        temperature: 0.5,
    };
    let q = [1.0, 2.0, 1.5, -1.0];
    let available = [true, true, true, false];
    let p = action_distribution(&q, &available, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut counts = [0usize; 4];
    let n = 100_000;
    for _ in 0..n {
        counts[select_action(&q, &available, &cfg, &mut rng).unwrap()] += 1;
    }
    for a in 0..4 {
        assert!((counts[a] as f64 / n as f64 - p[a]).abs() < 0.01, "{a}");
    }
    assert_eq!(counts[3], 0);
    // hand value: uniform 0.2/3, top-2 softmax over actions 1 and 2
    let e = (-1.0f64).exp();
    assert!((p[1] - (0.2 / 3.0 + 0.8 / (1.0 + e))).abs() < 1e-12);
    assert!((p[0] - 0.2 / 3.0).abs() < 1e-12);
}
