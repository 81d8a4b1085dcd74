use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Dtype, RunConfig};
use super::rollout::{run_episode, ActSettings, EpisodeSummary};
use crate::envs::{EnvRng, Environment};
use crate::error::{Error, Result};
use crate::exploration::ExplorationConfig;
use crate::ipu::TrafficStats;
use crate::learner::{stream_seed, Learner, ReplayBuffer};
use crate::nn::checkpoint;
use crate::nn::AttentionMask;
use crate::Scalar;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";

const ENV_STREAM: u64 = 10;
const REPLAY_STREAM: u64 = 11;
const EXPLORE_STREAM: u64 = 12;
const TEST_STREAM: u64 = 13;

/// One CSV row: the outcome of one evaluation round of one seed.
///
/// `success_rate` is empty for environments without a success notion and
/// `loss` is empty before the first training step; `loss` is the mean over
/// training steps since the previous row. Traffic columns total the
/// communication cost of the round's test episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub seed: u64,
    pub env_step: u64,
    pub mean_test_return: f64,
    pub success_rate: Option<f64>,
    pub loss: Option<f64>,
    pub epsilon: f64,
    pub comm_messages: u64,
    pub comm_floats: u64,
}

pub fn write_rows(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    r.deserialize().map(|row| row.map_err(csv_error)).collect()
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Training state of a single seed.
pub struct SeedRun<S> {
    config: RunConfig,
    seed: u64,
    env: Box<dyn Environment>,
    learner: Learner<S>,
    buffer: ReplayBuffer,
    env_rng: EnvRng,
    replay_rng: ChaCha8Rng,
    mask: Option<AttentionMask>,
    step_traffic: TrafficStats,
    env_steps: u64,
    episodes: u64,
    next_test: u64,
    test_rounds: u64,
    last_test_step: Option<u64>,
    loss_sum: f64,
    loss_count: u64,
}

impl<S: Scalar> SeedRun<S> {
    pub fn new(config: &RunConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let env = config.env.build()?;
        let arch = config.architecture(env.as_ref());
        let mut learner = Learner::new(&arch, config.train.clone(), seed)?;
        let comm = config.comm_config();
        let mask = match (&config.topology, &comm) {
            (Some(t), Some(_)) => Some(t.attention_mask()),
            _ => None,
        };
        learner.set_mask(mask.clone())?;
        let step_traffic = match (&config.topology, &comm) {
            (_, None) => TrafficStats::default(),
            (None, Some(_)) => TrafficStats::centralized(env.n_agents(), config.agent.hidden_dim),
            (Some(t), Some(c)) => TrafficStats::distributed(c.num_layers, t.links(), config.agent.hidden_dim),
        };
        Ok(Self {
            config: config.clone(),
            seed,
            env,
            learner,
            buffer: ReplayBuffer::new(config.train.buffer_capacity),
            env_rng: EnvRng::seed_from_u64(stream_seed(seed, ENV_STREAM)),
            replay_rng: ChaCha8Rng::seed_from_u64(stream_seed(seed, REPLAY_STREAM)),
            mask,
            step_traffic,
            env_steps: 0,
            episodes: 0,
            next_test: 0,
            test_rounds: 0,
            last_test_step: None,
            loss_sum: 0.0,
            loss_count: 0,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn learner(&self) -> &Learner<S> {
        &self.learner
    }

    pub fn learner_mut(&mut self) -> &mut Learner<S> {
        &mut self.learner
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn epsilon(&self) -> f64 {
        self.config.train.epsilon(self.env_steps)
    }

    fn settings(&self, explore: ExplorationConfig, record_values: bool) -> ActSettings<'_> {
        ActSettings {
            explore,
            mask: self.mask.as_ref(),
            step_traffic: self.step_traffic,
            record_values,
        }
    }

    /// Collects one exploratory episode, stores it and trains once.
    pub fn train_episode(&mut self) -> Result<EpisodeSummary> {
        let explore = self.config.exploration.at(self.epsilon());
        let mut act_rng = ChaCha8Rng::seed_from_u64(stream_seed(
            stream_seed(self.seed, EXPLORE_STREAM),
            self.episodes,
        ));
        let settings = ActSettings {
            explore,
            mask: self.mask.as_ref(),
            step_traffic: self.step_traffic,
            record_values: false,
        };
        let (record, summary) = run_episode(
            self.env.as_mut(),
            &self.learner.online,
            &settings,
            &mut self.env_rng,
            &mut act_rng,
        )?;
        self.env_steps += summary.steps as u64;
        self.episodes += 1;
        self.buffer.insert(record);
        if let Some(m) = self.learner.train_step(&self.buffer, &mut self.replay_rng)? {
            self.loss_sum += m.loss;
            self.loss_count += 1;
        }
        Ok(summary)
    }

    /// Greedy evaluation episodes; each round draws from its own stream so
    /// results do not depend on how training episodes were interleaved.
    pub fn evaluate(&self, episodes: usize, record_values: bool) -> Result<Vec<EpisodeSummary>> {
        let base = stream_seed(stream_seed(self.seed, TEST_STREAM), self.test_rounds);
        let mut env_rng = EnvRng::seed_from_u64(base);
        let mut act_rng = ChaCha8Rng::seed_from_u64(base ^ 1);
        let mut env = self.config.env.build()?;
        let settings = self.settings(ExplorationConfig::greedy(), record_values);
        (0..episodes)
            .map(|_| {
                run_episode(env.as_mut(), &self.learner.online, &settings, &mut env_rng, &mut act_rng)
                    .map(|(_, s)| s)
            })
            .collect()
    }

    /// Runs a test round and produces its CSV row.
    pub fn test_round(&mut self) -> Result<MetricRow> {
        let results = self.evaluate(self.config.train.test_episodes, false)?;
        self.test_rounds += 1;
        self.last_test_step = Some(self.env_steps);
        let count = results.len().max(1) as f64;
        let mean_return = results.iter().map(|s| s.episode_return).sum::<f64>() / count;
        let success_rate = if results.iter().all(|s| s.success.is_some()) && !results.is_empty() {
            Some(results.iter().filter(|s| s.success == Some(true)).count() as f64 / count)
        } else {
            None
        };
        let mut traffic = TrafficStats::default();
        for s in &results {
            traffic.accumulate(&s.traffic);
        }
        let loss = (self.loss_count > 0).then(|| self.loss_sum / self.loss_count as f64);
        self.loss_sum = 0.0;
        self.loss_count = 0;
        Ok(MetricRow {
            seed: self.seed,
            env_step: self.env_steps,
            mean_test_return: mean_return,
            success_rate,
            loss,
            epsilon: self.epsilon(),
            comm_messages: traffic.messages,
            comm_floats: traffic.floats_transferred,
        })
    }

    /// Trains to the configured budget, testing every `test_interval`
    /// environment steps and once more at the end. `on_row` sees each row
    /// as it is produced.
    pub fn run(&mut self, mut on_row: impl FnMut(&Self, &MetricRow) -> Result<()>) -> Result<Vec<MetricRow>> {
        let mut rows = Vec::new();
        while self.env_steps < self.config.total_env_steps {
            if self.env_steps >= self.next_test {
                let row = self.test_round()?;
                self.next_test += self.config.train.test_interval;
                on_row(self, &row)?;
                rows.push(row);
            }
            self.train_episode()?;
        }
        if self.last_test_step != Some(self.env_steps) {
            let row = self.test_round()?;
            // a resumed run must not test this step again
            while self.next_test <= self.env_steps {
                self.next_test += self.config.train.test_interval;
            }
            on_row(self, &row)?;
            rows.push(row);
        }
        Ok(rows)
    }

    /// Parameters, optimizer state and counters. The replay buffer is not
    /// saved; a resumed run refills it before training again.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        let (records, learner_meta) = self.learner.checkpoint_records();
        let meta = serde_json::json!({
            "seed": self.seed,
            "env_steps": self.env_steps,
            "episodes": self.episodes,
            "next_test": self.next_test,
            "test_rounds": self.test_rounds,
            "last_test_step": self.last_test_step,
            "loss_sum": self.loss_sum,
            "loss_count": self.loss_count,
            "env_rng_word_pos": self.env_rng.get_word_pos().to_string(),
            "replay_rng_word_pos": self.replay_rng.get_word_pos().to_string(),
            "learner": learner_meta,
        });
        checkpoint::save(dir, S::DTYPE, &records, meta)
    }

    pub fn load_checkpoint(&mut self, dir: &Path) -> Result<()> {
        let (records, manifest) = checkpoint::load(dir)?;
        let meta = &manifest.meta;
        if meta["seed"].as_u64() != Some(self.seed) {
            return Err(Error::Checkpoint(format!("checkpoint belongs to another seed than {}", self.seed)));
        }
        self.learner.restore_checkpoint(&records, &meta["learner"])?;
        let int = |key: &str| {
            meta[key]
                .as_u64()
                .ok_or_else(|| Error::Checkpoint(format!("missing {key}")))
        };
        let pos = |key: &str| -> Result<u128> {
            meta[key]
                .as_str()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("missing {key}")))
        };
        self.env_steps = int("env_steps")?;
        self.episodes = int("episodes")?;
        self.next_test = int("next_test")?;
        self.test_rounds = int("test_rounds")?;
        self.loss_count = int("loss_count")?;
        self.last_test_step = meta["last_test_step"].as_u64();
        self.loss_sum = meta["loss_sum"]
            .as_f64()
            .ok_or_else(|| Error::Checkpoint("missing loss_sum".into()))?;
        self.env_rng.set_word_pos(pos("env_rng_word_pos")?);
        self.replay_rng.set_word_pos(pos("replay_rng_word_pos")?);
        Ok(())
    }
}

/// In-memory training of one seed; returns its rows and final learner.
pub fn train_seed<S: Scalar>(config: &RunConfig, seed: u64) -> Result<(Vec<MetricRow>, Learner<S>)> {
    let mut run = SeedRun::<S>::new(config, seed)?;
    let rows = run.run(|_, _| Ok(()))?;
    Ok((rows, run.learner))
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

fn train_seed_to_disk<S: Scalar>(config: &RunConfig, seed: u64, out: &Path, resume: bool) -> Result<Vec<MetricRow>> {
    let dir = seed_dir(out, seed);
    std::fs::create_dir_all(&dir)?;
    let ckpt = dir.join(CHECKPOINT_DIR);
    let csv_path = dir.join(METRICS_FILE);
    let mut run = SeedRun::<S>::new(config, seed)?;
    let mut rows = Vec::new();
    if resume && ckpt.join(checkpoint::MANIFEST_FILE).exists() {
        run.load_checkpoint(&ckpt)?;
        if csv_path.exists() {
            rows = read_rows(&csv_path)?;
            rows.retain(|r| r.env_step <= run.env_steps());
        }
    }
    let mut sink = |r: &SeedRun<S>, row: &MetricRow| {
        rows.push(row.clone());
        write_rows(&csv_path, &rows)?;
        r.save_checkpoint(&ckpt)
    };
    let produced = run.run(&mut sink)?;
    if produced.is_empty() {
        // budget already reached when resuming
        run.save_checkpoint(&ckpt)?;
    }
    Ok(rows)
}

/// Everything a finished `train` invocation produced.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub out_dir: PathBuf,
    /// Rows per seed, in configuration order.
    pub rows: Vec<(u64, Vec<MetricRow>)>,
}

/// Trains every configured seed, writing the resolved config, one CSV and
/// checkpoint per seed, and a combined CSV.
pub fn cmd_train(config: &RunConfig, resume: bool) -> Result<TrainReport> {
    config.validate()?;
    let out = config.resolved_out_dir();
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join(CONFIG_FILE), config.to_json())?;
    let seeds = config.seeds.clone();
    let jobs = match config.jobs {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        j => j,
    }
    .min(seeds.len());
    let results: Mutex<Vec<Option<Result<Vec<MetricRow>>>>> = Mutex::new(seeds.iter().map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= seeds.len() {
                    break;
                }
                let r = match config.dtype {
                    Dtype::F32 => train_seed_to_disk::<f32>(config, seeds[i], &out, resume),
                    Dtype::F64 => train_seed_to_disk::<f64>(config, seeds[i], &out, resume),
                };
                results.lock().expect("result slot")[i] = Some(r);
            });
        }
    });
    let mut rows = Vec::new();
    for (seed, r) in seeds.iter().zip(results.into_inner().expect("results")) {
        rows.push((*seed, r.expect("every seed ran")?));
    }
    let all: Vec<MetricRow> = rows.iter().flat_map(|(_, r)| r.iter().cloned()).collect();
    write_rows(&out.join(METRICS_FILE), &all)?;
    Ok(TrainReport { out_dir: out, rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub env_steps: u64,
    pub episodes: usize,
    pub mean_return: f64,
    pub success_rate: Option<f64>,
    /// Mean joint value estimate of the first greedy decision.
    pub initial_value: f64,
}

/// Greedy evaluation of a saved seed.
pub fn cmd_eval(config: &RunConfig, seed: u64, episodes: usize) -> Result<EvalReport> {
    match config.dtype {
        Dtype::F32 => eval_impl::<f32>(config, seed, episodes),
        Dtype::F64 => eval_impl::<f64>(config, seed, episodes),
    }
}

fn eval_impl<S: Scalar>(config: &RunConfig, seed: u64, episodes: usize) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::Usage("need at least one evaluation episode".into()));
    }
    let ckpt = seed_dir(&config.resolved_out_dir(), seed).join(CHECKPOINT_DIR);
    if !ckpt.join(checkpoint::MANIFEST_FILE).exists() {
        return Err(Error::Usage(format!("no checkpoint at {}", ckpt.display())));
    }
    let mut run = SeedRun::<S>::new(config, seed)?;
    run.load_checkpoint(&ckpt)?;
    let results = run.evaluate(episodes, true)?;
    let n = results.len() as f64;
    let success_rate = results
        .iter()
        .all(|s| s.success.is_some())
        .then(|| results.iter().filter(|s| s.success == Some(true)).count() as f64 / n);
    Ok(EvalReport {
        seed,
        env_steps: run.env_steps(),
        episodes,
        mean_return: results.iter().map(|s| s.episode_return).sum::<f64>() / n,
        success_rate,
        initial_value: results.iter().map(|s| s.values[0]).sum::<f64>() / n,
    })
}
