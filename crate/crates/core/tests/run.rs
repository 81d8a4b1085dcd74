use mactas::envs::{blind_optimum, value_iteration, CuePassingSpec, EnvSpec, MatrixGameSpec, TwoStepCoop};
use mactas::run::{
    cmd_eval, cmd_sweep, cmd_train, mean_curve, read_rows, seed_dir, train_seed, trapezoid_auc, write_rows,
    AgentSection, CommSection, MetricRow, RunConfig, SweepGrid, METRICS_FILE, SUMMARY_FILE,
};
use mactas::learner::TrainConfig;
use mactas::Error;

fn tiny(out: &std::path::Path) -> RunConfig {
    RunConfig {
        env: EnvSpec::CuePassing { n_agents: 2, n_cues: 2 },
        agent: AgentSection { hidden_dim: 8 },
        comm: CommSection {
            ffn_dim: 8,
            heads: 2,
            ..CommSection::default()
        },
        train: TrainConfig {
            batch_size: 4,
            buffer_capacity: 16,
            test_interval: 40,
            test_episodes: 4,
            anneal_steps: 100,
            ..TrainConfig::default()
        },
        seeds: vec![1, 2],
        total_env_steps: 120,
        out_dir: out.to_path_buf(),
        jobs: 1,
        ..RunConfig::default()
    }
}

#[test]
fn oracles_give_known_optima() {
    let two = value_iteration(&TwoStepCoop::new(), 0.99).unwrap();
    assert!((two.value - 7.92).abs() < 1e-12);
    let climbing = value_iteration(&MatrixGameSpec::climbing(), 0.99).unwrap();
    assert_eq!(climbing.value, 11.0);
    let cue = CuePassingSpec { n_agents: 3, n_cues: 3 };
    assert!((value_iteration(&cue, 0.99).unwrap().value - 0.99).abs() < 1e-12);
    // echoing your own cue wins exactly when all cues agree
    assert!((blind_optimum(&cue).unwrap() - 1.0 / 9.0).abs() < 1e-12);
    assert!((blind_optimum(&CuePassingSpec { n_agents: 2, n_cues: 2 }).unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn trapezoid_and_mean_curve() {
    // (0,0) (2,2) (3,0): 2 + 1
    assert_eq!(trapezoid_auc(&[(0.0, 0.0), (2.0, 2.0), (3.0, 0.0)]), 3.0);
    assert_eq!(trapezoid_auc(&[(1.0, 5.0)]), 0.0);
    let row = |seed, env_step, r| MetricRow {
        seed,
        env_step,
        mean_test_return: r,
        success_rate: None,
        loss: None,
        epsilon: 1.0,
        comm_messages: 0,
        comm_floats: 0,
    };
    let curve = mean_curve(&[
        vec![row(1, 0, 1.0), row(1, 10, 3.0)],
        vec![row(2, 0, 0.0), row(2, 12, 1.0), row(2, 20, 5.0)],
    ]);
    assert_eq!(curve, vec![(0.0, 0.5), (11.0, 2.0)]);
}

#[test]
fn sweep_grid_is_a_cartesian_product() {
    let base = RunConfig::default();
    let grid = SweepGrid {
        layers: vec![1, 2],
        dropout: vec![0.0, 0.1, 0.2],
        ..SweepGrid::default()
    };
    let cells = grid.cells(&base).unwrap();
    assert_eq!(cells.len(), 6);
    assert_eq!((cells[0].comm.num_layers, cells[0].comm.dropout), (1, 0.0));
    assert_eq!((cells[5].comm.num_layers, cells[5].comm.dropout), (2, 0.2));
    assert!(cells.iter().all(|c| c.comm.ffn_dim == base.comm.ffn_dim));
    assert!(matches!(SweepGrid::default().cells(&base), Err(Error::Usage(_))));
}

#[test]
fn csv_roundtrip_keeps_empty_columns() {
    let dir = tempfile::tempdir().unwrap();
    let rows = vec![
        MetricRow {
            seed: 3,
            env_step: 0,
            mean_test_return: 0.25,
            success_rate: None,
            loss: None,
            epsilon: 1.0,
            comm_messages: 12,
            comm_floats: 96,
        },
        MetricRow {
            seed: 3,
            env_step: 40,
            mean_test_return: -1.5,
            success_rate: Some(0.5),
            loss: Some(0.125),
            epsilon: 0.6,
            comm_messages: 0,
            comm_floats: 0,
        },
    ];
    let path = dir.path().join("m.csv");
    write_rows(&path, &rows).unwrap();
    assert_eq!(read_rows(&path).unwrap(), rows);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("3,0,0.25,,,1.0,12,96"));
}

#[test]
fn in_memory_training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(dir.path());
    let (a, la) = train_seed::<f32>(&config, 7).unwrap();
    let (b, lb) = train_seed::<f32>(&config, 7).unwrap();
    assert_eq!(a, b);
    assert!(la.online.store.values_equal(&lb.online.store));
    assert_eq!(a.first().unwrap().env_step, 0);
    assert_eq!(a.last().unwrap().env_step, 120);
    let (c, _) = train_seed::<f32>(&config, 8).unwrap();
    assert_ne!(a, c);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let full_dir = tempfile::tempdir().unwrap();
    let split_dir = tempfile::tempdir().unwrap();
    let full = tiny(full_dir.path());
    let report = cmd_train(&full, false).unwrap();

    let mut half = tiny(split_dir.path());
    half.total_env_steps = 60;
    cmd_train(&half, false).unwrap();
    let resumed = cmd_train(&tiny(split_dir.path()), true).unwrap();
    // resuming drops the replay buffer, so only the pre-interruption rows
    // are guaranteed to coincide
    for ((_, a), (_, b)) in report.rows.iter().zip(&resumed.rows) {
        assert_eq!(a.last().unwrap().env_step, b.last().unwrap().env_step);
        let early = |rows: &[MetricRow]| rows.iter().filter(|r| r.env_step < 60).cloned().collect::<Vec<_>>();
        assert_eq!(early(a), early(b));
    }
    let combined = read_rows(&split_dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(combined.len(), resumed.rows.iter().map(|(_, r)| r.len()).sum::<usize>());

    let report = cmd_eval(&tiny(split_dir.path()), 2, 3).unwrap();
    assert_eq!(report.episodes, 3);
    assert_eq!(report.env_steps, 120);
    assert!(seed_dir(split_dir.path(), 2).join("checkpoint").is_dir());
    assert!(matches!(cmd_eval(&tiny(split_dir.path()), 9, 3), Err(Error::Usage(_))));
}

#[test]
fn sweep_writes_cells_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny(dir.path());
    config.seeds = vec![1];
    config.total_env_steps = 40;
    let grid = SweepGrid {
        temperature: vec![0.1, 1.0],
        ..SweepGrid::default()
    };
    let summary = cmd_sweep(&config, &grid).unwrap();
    assert_eq!(summary.len(), 2);
    assert_eq!(summary[1].temperature, 1.0);
    assert!(dir.path().join("cell_001").join(METRICS_FILE).exists());
    let text = std::fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap();
    assert_eq!(text.lines().count(), 3);
}
