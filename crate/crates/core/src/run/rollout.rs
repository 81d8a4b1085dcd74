use rand::Rng;

use crate::agent::AgentInput;
use crate::envs::{EnvRng, Environment};
use crate::error::{Error, Result};
use crate::exploration::{select_action, ExplorationConfig};
use crate::ipu::TrafficStats;
use crate::learner::{EpisodeRecord, Networks};
use crate::nn::AttentionMask;
use crate::Scalar;

/// How an episode is acted out.
#[derive(Clone, Copy, Debug)]
pub struct ActSettings<'a> {
    pub explore: ExplorationConfig,
    pub mask: Option<&'a AttentionMask>,
    /// Communication cost of one decision step.
    pub step_traffic: TrafficStats,
    /// Record the joint value of each chosen joint action.
    pub record_values: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeSummary {
    pub episode_return: f64,
    pub success: Option<bool>,
    pub steps: usize,
    pub traffic: TrafficStats,
    /// Joint value of the chosen joint action per step, when requested.
    pub values: Vec<f64>,
}

/// Plays one episode with decentralized execution: each agent picks its own
/// action from its own Q-values.
pub fn run_episode<S: Scalar, R: Rng + ?Sized>(
    env: &mut dyn Environment,
    nets: &Networks<S>,
    settings: &ActSettings<'_>,
    env_rng: &mut EnvRng,
    act_rng: &mut R,
) -> Result<(EpisodeRecord, EpisodeSummary)> {
    let n = env.n_agents();
    let mut ts = env.reset(env_rng);
    let mut record = EpisodeRecord::start(&ts, env.n_actions());
    let mut summary = EpisodeSummary::default();
    let mut hidden = nets.initial_hidden(1);
    let mut last: Option<Vec<usize>> = None;
    for _ in 0..env.episode_limit() {
        let inputs: Vec<AgentInput<'_>> = (0..n)
            .map(|i| AgentInput {
                observation: &ts.observations[i],
                last_action: last.as_ref().map(|a| a[i]),
                agent_id: i,
            })
            .collect();
        let (q, h) = nets.act(&inputs, &hidden, settings.mask)?;
        hidden = h;
        let mut actions = Vec::with_capacity(n);
        for i in 0..n {
            let row: Vec<f64> = q.row(i).iter().map(|v| v.as_f64()).collect();
            actions.push(select_action(&row, &ts.available[i], &settings.explore, act_rng)?);
        }
        if settings.record_values {
            let taken: Vec<f64> = (0..n).map(|i| q[(i, actions[i])].as_f64()).collect();
            summary.values.push(nets.mixer.mix(&nets.store, &taken, &ts.state)?);
        }
        let out = env.step(&actions)?;
        record.push(&actions, &out);
        summary.episode_return += out.reward;
        summary.steps += 1;
        summary.traffic.accumulate(&settings.step_traffic);
        if out.terminal {
            summary.success = out.success;
            return Ok((record, summary));
        }
        ts = out.next;
        last = Some(actions);
    }
    if summary.steps == 0 {
        return Err(Error::Contract("environment has a zero episode limit".into()));
    }
    Ok((record, summary))
}
