//! Episode-batch Q-learning: networks, replay, double-Q targets and the
//! two-optimizer update (RMSProp for agents and mixer, Adam for the
//! communication stack).

mod config;
mod replay;
mod targets;

pub use config::TrainConfig;
pub use replay::{EpisodeRecord, ReplayBuffer};
pub use targets::{double_q_targets, greedy_actions};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{AgentConfig, AgentInput, AgentNet, CommFlags, TeamNet};
use crate::comm::{CommConfig, CommNet};
use crate::error::{Error, Result};
use crate::mixer::{Mixer, MixerKind};
use crate::nn::checkpoint::{self, Record};
use crate::nn::{AttentionMask, Gradients, Graph, Group, Matrix, Mode, Optimizer, OptimizerKind, ParamStore, Var};
use crate::Scalar;

/// Deterministic sub-seed for an independent stream.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const AGENT_STREAM: u64 = 1;
const COMM_STREAM: u64 = 2;
const MIXER_STREAM: u64 = 3;
const DROPOUT_STREAM: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub agent: AgentConfig,
    /// `None` disables communication entirely.
    pub comm: Option<CommConfig>,
    pub use_residual: bool,
    pub mixer: MixerKind,
    pub state_dim: usize,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let a = &self.agent;
        if a.n_agents == 0 || a.n_actions == 0 || a.hidden_dim == 0 {
            return Err(Error::Config("agents, actions and hidden width must be positive".into()));
        }
        if let Some(c) = &self.comm {
            c.validate()?;
            if c.model_dim != a.hidden_dim {
                return Err(Error::Config(format!(
                    "communication width {} differs from agent hidden width {}",
                    c.model_dim, a.hidden_dim
                )));
            }
        }
        Ok(())
    }
}

/// Parameters plus the modules that index into them.
#[derive(Clone, Debug)]
pub struct Networks<S> {
    pub store: ParamStore<S>,
    pub team: TeamNet,
    pub mixer: Mixer,
}

impl<S: Scalar> Networks<S> {
    /// Agent, communication and mixer weights come from separate streams, so
    /// toggling communication leaves the other initial weights unchanged.
    pub fn build(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut store = ParamStore::new();
        let agent = AgentNet::init(&mut store, arch.agent, stream_seed(seed, AGENT_STREAM));
        let comm = match &arch.comm {
            Some(c) => Some(CommNet::init(&mut store, c, stream_seed(seed, COMM_STREAM))?),
            None => None,
        };
        let mixer = Mixer::init(
            arch.mixer,
            &mut store,
            arch.agent.n_agents,
            arch.state_dim,
            stream_seed(seed, MIXER_STREAM),
        );
        let flags = CommFlags {
            use_comm: comm.is_some(),
            use_residual: arch.use_residual,
        };
        Ok(Self {
            store,
            team: TeamNet { agent, comm, flags },
            mixer,
        })
    }

    pub fn agent_config(&self) -> &AgentConfig {
        &self.team.agent.config
    }

    pub fn initial_hidden(&self, teams: usize) -> Matrix<S> {
        let c = self.agent_config();
        Matrix::zeros(teams * c.n_agents, c.hidden_dim)
    }

    /// One deterministic decision step for a single team. Returns local
    /// Q-values (`n x n_actions`) and the hidden state to carry forward.
    pub fn act(
        &self,
        inputs: &[AgentInput<'_>],
        hidden: &Matrix<S>,
        mask: Option<&AttentionMask>,
    ) -> Result<(Matrix<S>, Matrix<S>)> {
        let x = crate::agent::stack_inputs(self.agent_config(), inputs)?;
        let mut g = Graph::new(&self.store, Mode::Eval);
        let xv = g.constant(x);
        let hv = g.constant(hidden.clone());
        let out = self.team.forward(&mut g, xv, hv, mask)?;
        Ok((g.value(out.q).clone(), g.value(out.hidden).clone()))
    }

    /// Runs the team network over every timestep of a batch, returning the
    /// local Q-values (`B n x n_actions`) for steps `0..=steps`.
    pub fn unroll(&self, g: &mut Graph<'_, S>, batch: &PreparedBatch<S>, mask: Option<&AttentionMask>) -> Result<Vec<Var>> {
        let mut h = g.constant(self.initial_hidden(batch.batch));
        let mut qs = Vec::with_capacity(batch.inputs.len());
        for x in &batch.inputs {
            let xv = g.constant(x.clone());
            let out = self.team.forward(g, xv, h, mask)?;
            qs.push(out.q);
            h = out.hidden;
        }
        Ok(qs)
    }
}

/// Episodes padded to a common length and laid out as network inputs.
/// Rows are grouped per team: row `b * n + i` is agent `i` of episode `b`.
#[derive(Clone, Debug)]
pub struct PreparedBatch<S> {
    pub batch: usize,
    pub n_agents: usize,
    pub n_actions: usize,
    /// Longest episode length; per-step vectors below have `steps` entries,
    /// input-side vectors `steps + 1`.
    pub steps: usize,
    pub inputs: Vec<Matrix<S>>,
    pub states: Vec<Matrix<S>>,
    /// Flattened `[row][action]` availability; padding is all-available.
    pub available: Vec<Vec<bool>>,
    pub actions: Vec<Vec<usize>>,
    pub rewards: Vec<Vec<f64>>,
    pub terminal: Vec<Vec<bool>>,
    /// 1 where the step exists in the episode, 0 in padding.
    pub valid: Vec<Vec<bool>>,
}

impl<S: Scalar> PreparedBatch<S> {
    pub fn new(cfg: &AgentConfig, state_dim: usize, episodes: &[&EpisodeRecord]) -> Result<Self> {
        if episodes.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let (n, na) = (cfg.n_agents, cfg.n_actions);
        for e in episodes {
            e.validate()?;
            if e.n_agents != n || e.n_actions != na || e.is_empty() {
                return Err(Error::Contract("episode does not match the network layout".into()));
            }
        }
        let bsz = episodes.len();
        let steps = episodes.iter().map(|e| e.len()).max().unwrap_or(0);
        let mut inputs = Vec::with_capacity(steps + 1);
        let mut states = Vec::with_capacity(steps + 1);
        let mut available = Vec::with_capacity(steps + 1);
        let zero_obs = vec![0.0; cfg.obs_dim];
        for t in 0..=steps {
            let mut x = Matrix::zeros(bsz * n, cfg.input_dim());
            let mut s = Matrix::zeros(bsz, state_dim);
            let mut av = vec![true; bsz * n * na];
            for (b, e) in episodes.iter().enumerate() {
                let live = t <= e.len();
                if live {
                    if e.states[t].len() != state_dim {
                        return Err(Error::dim("episode state", (1, e.states[t].len()), (1, state_dim)));
                    }
                    for (dst, &v) in s.row_mut(b).iter_mut().zip(&e.states[t]) {
                        *dst = S::from_f64_lossy(v);
                    }
                }
                for i in 0..n {
                    let row = b * n + i;
                    let input = AgentInput {
                        observation: if live { &e.observations[t][i] } else { &zero_obs },
                        last_action: if t > 0 && t <= e.len() { Some(e.actions[t - 1][i]) } else { None },
                        agent_id: i,
                    };
                    input.write_into(cfg, x.row_mut(row))?;
                    if live {
                        let src = &e.available[t][i];
                        if src.len() != na {
                            return Err(Error::dim("availability", (1, src.len()), (1, na)));
                        }
                        av[row * na..(row + 1) * na].copy_from_slice(src);
                    }
                }
            }
            inputs.push(x);
            states.push(s);
            available.push(av);
        }
        let mut actions = Vec::with_capacity(steps);
        let mut rewards = Vec::with_capacity(steps);
        let mut terminal = Vec::with_capacity(steps);
        let mut valid = Vec::with_capacity(steps);
        for t in 0..steps {
            let mut a = vec![0; bsz * n];
            let mut r = vec![0.0; bsz];
            let mut term = vec![false; bsz];
            let mut v = vec![false; bsz];
            for (b, e) in episodes.iter().enumerate() {
                if t < e.len() {
                    a[b * n..(b + 1) * n].copy_from_slice(&e.actions[t]);
                    r[b] = e.rewards[t];
                    term[b] = e.is_terminal_step(t);
                    v[b] = true;
                }
            }
            actions.push(a);
            rewards.push(r);
            terminal.push(term);
            valid.push(v);
        }
        Ok(Self {
            batch: bsz,
            n_agents: n,
            n_actions: na,
            steps,
            inputs,
            states,
            available,
            actions,
            rewards,
            terminal,
            valid,
        })
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().flatten().filter(|&&v| v).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub train_step: u64,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub mean_q_taken: f64,
    pub mean_target: f64,
    pub target_updated: bool,
}

/// Online and target networks with their optimizers.
#[derive(Clone, Debug)]
pub struct Learner<S> {
    pub online: Networks<S>,
    pub target: Networks<S>,
    pub config: TrainConfig,
    main_opt: Optimizer<S>,
    comm_opt: Option<Optimizer<S>>,
    dropout_seed: u64,
    train_steps: u64,
    mask: Option<AttentionMask>,
}

impl<S: Scalar> Learner<S> {
    pub fn new(arch: &Architecture, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let online = Networks::build(arch, seed)?;
        let target = online.clone();
        let main_opt = Optimizer::new(OptimizerKind::rmsprop(), config.lr, Group::Main, &online.store);
        let comm_opt = online
            .team
            .uses_comm()
            .then(|| Optimizer::new(OptimizerKind::adam(), config.comm_lr, Group::Comm, &online.store));
        Ok(Self {
            online,
            target,
            config,
            main_opt,
            comm_opt,
            dropout_seed: stream_seed(seed, DROPOUT_STREAM),
            train_steps: 0,
            mask: None,
        })
    }

    /// Restricts attention for both online and target passes.
    pub fn set_mask(&mut self, mask: Option<AttentionMask>) -> Result<()> {
        if let Some(m) = &mask {
            m.validate()?;
            if m.size() != self.online.agent_config().n_agents {
                return Err(Error::Config("mask size differs from team size".into()));
            }
        }
        self.mask = mask;
        Ok(())
    }

    pub fn mask(&self) -> Option<&AttentionMask> {
        self.mask.as_ref()
    }

    pub fn train_steps(&self) -> u64 {
        self.train_steps
    }

    pub fn prepare(&self, episodes: &[&EpisodeRecord]) -> Result<PreparedBatch<S>> {
        let state_dim = self.online_state_dim(episodes);
        PreparedBatch::new(self.online.agent_config(), state_dim, episodes)
    }

    fn online_state_dim(&self, episodes: &[&EpisodeRecord]) -> usize {
        match &self.online.mixer {
            Mixer::Qmix(q) => q.state_dim,
            Mixer::Vdn => episodes.first().map_or(0, |e| e.states[0].len()),
        }
    }

    /// Samples a batch and performs one update, or returns `None` while the
    /// buffer holds fewer than `batch_size` episodes.
    pub fn train_step<R: Rng + ?Sized>(&mut self, buffer: &ReplayBuffer, rng: &mut R) -> Result<Option<TrainMetrics>> {
        match buffer.sample(self.config.batch_size, rng) {
            Some(episodes) => self.train_on(&episodes).map(Some),
            None => Ok(None),
        }
    }

    /// Bootstrap targets `[t][b]` given online values for steps `0..=steps`.
    pub fn targets_from(&self, batch: &PreparedBatch<S>, online_q: &[Matrix<S>]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new(&self.target.store, Mode::Eval);
        let target_q = self.target.unroll(&mut g, batch, self.mask.as_ref())?;
        let target_q: Vec<Matrix<S>> = target_q.iter().map(|&v| g.value(v).clone()).collect();
        drop(g);
        (0..batch.steps)
            .map(|t| {
                double_q_targets(
                    &batch.rewards[t],
                    &batch.terminal[t],
                    &online_q[t + 1],
                    &target_q[t + 1],
                    &batch.available[t + 1],
                    batch.n_agents,
                    self.config.gamma,
                    |picked| self.target_mix(picked, &batch.states[t + 1]),
                )
            })
            .collect()
    }

    fn target_mix(&self, picked: &Matrix<S>, state: &Matrix<S>) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.target.store, Mode::Eval);
        let q = g.constant(picked.clone());
        let s = g.constant(state.clone());
        let y = self.target.mixer.forward(&mut g, q, s)?;
        Ok(g.value(y).to_f64_vec())
    }

    /// Targets computed from a deterministic online pass.
    pub fn compute_targets(&self, batch: &PreparedBatch<S>) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new(&self.online.store, Mode::Eval);
        let qs = self.online.unroll(&mut g, batch, self.mask.as_ref())?;
        let vals: Vec<Matrix<S>> = qs.iter().map(|&v| g.value(v).clone()).collect();
        drop(g);
        self.targets_from(batch, &vals)
    }

    /// Masked mean squared TD error for fixed targets, evaluated with the
    /// parameter values in `store` (which must share the online layout).
    pub fn td_loss_with(
        &self,
        store: &ParamStore<S>,
        batch: &PreparedBatch<S>,
        targets: &[Vec<f64>],
        mode: Mode,
    ) -> Result<(S, Gradients<S>)> {
        let mut g = Graph::new(store, mode);
        let qs = self.online.unroll(&mut g, batch, self.mask.as_ref())?;
        let (loss, _) = self.loss_from(&mut g, &qs, batch, targets)?;
        Ok((g.value(loss)[(0, 0)], g.backward(loss)))
    }

    /// Builds the loss node; also returns the mean taken joint value.
    fn loss_from(
        &self,
        g: &mut Graph<'_, S>,
        qs: &[Var],
        batch: &PreparedBatch<S>,
        targets: &[Vec<f64>],
    ) -> Result<(Var, f64)> {
        let count = batch.valid_count();
        if count == 0 || targets.len() != batch.steps {
            return Err(Error::Contract("no valid transitions in batch".into()));
        }
        let (bsz, n) = (batch.batch, batch.n_agents);
        let mut total: Option<Var> = None;
        let mut q_sum = 0.0;
        for t in 0..batch.steps {
            let taken = g.gather_cols(qs[t], &batch.actions[t])?;
            let taken = g.reshape(taken, bsz, n)?;
            let state = g.constant(batch.states[t].clone());
            let q_tot = self.online.mixer.forward(g, taken, state)?;
            for (b, &v) in batch.valid[t].iter().enumerate() {
                if v {
                    q_sum += g.value(q_tot)[(b, 0)].as_f64();
                }
            }
            let y = g.constant(Matrix::from_f64(bsz, 1, &targets[t])?);
            let w: Vec<f64> = batch.valid[t].iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
            let w = g.constant(Matrix::from_f64(bsz, 1, &w)?);
            let diff = g.sub(q_tot, y)?;
            let diff = g.mul(diff, w)?;
            let sq = g.mul(diff, diff)?;
            let s = g.sum_all(sq);
            total = Some(match total {
                Some(acc) => g.add(acc, s)?,
                None => s,
            });
        }
        let loss = g.scale(total.unwrap(), S::from_f64_lossy(1.0 / count as f64));
        Ok((loss, q_sum / count as f64))
    }

    /// One gradient update on the given episodes.
    pub fn train_on(&mut self, episodes: &[&EpisodeRecord]) -> Result<TrainMetrics> {
        let batch = self.prepare(episodes)?;
        let mode = Mode::Train {
            seed: self.dropout_seed,
            step: self.train_steps,
        };
        let (loss, mean_q, mean_target, grads) = {
            let mut g = Graph::new(&self.online.store, mode);
            let qs = self.online.unroll(&mut g, &batch, self.mask.as_ref())?;
            let vals: Vec<Matrix<S>> = qs.iter().map(|&v| g.value(v).clone()).collect();
            let targets = self.targets_from(&batch, &vals)?;
            let (loss, mean_q) = self.loss_from(&mut g, &qs, &batch, &targets)?;
            let mut tsum = 0.0;
            for (ts, vs) in targets.iter().zip(&batch.valid) {
                tsum += ts.iter().zip(vs).filter(|(_, &v)| v).map(|(y, _)| y).sum::<f64>();
            }
            let loss_value = g.value(loss)[(0, 0)].as_f64();
            (loss_value, mean_q, tsum / batch.valid_count() as f64, g.backward(loss))
        };
        if !loss.is_finite() {
            return Err(Error::Contract(format!("non-finite loss {loss}")));
        }
        let store = &mut self.online.store;
        store.zero_grad();
        grads.accumulate_into(store);
        let grad_norm = store.clip_grad_norm(S::from_f64_lossy(self.config.grad_clip)).as_f64();
        self.main_opt.step(store)?;
        if let Some(opt) = &mut self.comm_opt {
            opt.step(store)?;
        }
        store.zero_grad();
        self.train_steps += 1;
        let target_updated = self.train_steps.is_multiple_of(self.config.target_update_interval);
        if target_updated {
            self.update_target();
        }
        Ok(TrainMetrics {
            train_step: self.train_steps,
            loss,
            grad_norm,
            mean_q_taken: mean_q,
            mean_target,
            target_updated,
        })
    }

    /// Hard copy of online weights into the target networks.
    pub fn update_target(&mut self) {
        self.target.store.copy_values_from(&self.online.store);
    }

    /// Parameters, target parameters and optimizer state as checkpoint
    /// records; counters go into the metadata.
    pub fn checkpoint_records(&self) -> (Vec<Record>, serde_json::Value) {
        let mut recs = checkpoint::store_records(&self.online.store, "online/");
        recs.extend(checkpoint::store_records(&self.target.store, "target/"));
        let mut steps = serde_json::Map::new();
        for (tag, opt) in self.optimizers() {
            let (step, first, second) = opt.state();
            steps.insert(tag.into(), step.into());
            for (i, m) in first.iter().enumerate() {
                recs.push(Record::from_matrix(format!("optim.{tag}.first/{i}"), m));
            }
            for (i, m) in second.iter().enumerate() {
                recs.push(Record::from_matrix(format!("optim.{tag}.second/{i}"), m));
            }
        }
        let meta = serde_json::json!({
            "train_steps": self.train_steps,
            "optimizer_steps": steps,
        });
        (recs, meta)
    }

    pub fn restore_checkpoint(&mut self, records: &[Record], meta: &serde_json::Value) -> Result<()> {
        checkpoint::restore_store(&mut self.online.store, records, "online/")?;
        checkpoint::restore_store(&mut self.target.store, records, "target/")?;
        let collect = |prefix: String| -> Result<Vec<Matrix<S>>> {
            let mut found: Vec<(usize, &Record)> = records
                .iter()
                .filter_map(|r| {
                    r.name
                        .strip_prefix(&prefix)
                        .and_then(|i| i.parse().ok())
                        .map(|i| (i, r))
                })
                .collect();
            found.sort_by_key(|(i, _)| *i);
            found.into_iter().map(|(_, r)| r.to_matrix()).collect()
        };
        for (tag, opt) in [("main", Some(&mut self.main_opt)), ("comm", self.comm_opt.as_mut())] {
            let Some(opt) = opt else { continue };
            let step = meta["optimizer_steps"][tag]
                .as_u64()
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer step for {tag}")))?;
            let first = collect(format!("optim.{tag}.first/"))?;
            let second = collect(format!("optim.{tag}.second/"))?;
            opt.restore_state(step, first, second)?;
        }
        self.train_steps = meta["train_steps"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("missing train_steps".into()))?;
        Ok(())
    }

    fn optimizers(&self) -> Vec<(&'static str, &Optimizer<S>)> {
        let mut v = vec![("main", &self.main_opt)];
        if let Some(c) = &self.comm_opt {
            v.push(("comm", c));
        }
        v
    }
}
