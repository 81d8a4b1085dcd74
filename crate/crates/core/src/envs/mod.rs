//! Cooperative environments sharing one team reward, plus exact oracles for
//! the enumerable ones.

mod cue_passing;
mod matrix_game;
mod oracle;
mod two_step;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cue_passing::{blind_optimum, CuePassing, CuePassingSpec};
pub use matrix_game::{MatrixGame, MatrixGameSpec, CLIMBING_PAYOFF};
pub use oracle::{discounted_return, policy_value, value_iteration, EnumerableModel, OracleSolution, Transition, MAX_STATE_ACTION_PAIRS};
pub use two_step::TwoStepCoop;

pub type EnvRng = ChaCha8Rng;

/// What every agent sees at one timestep, plus the centralized state.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeStep {
    pub observations: Vec<Vec<f64>>,
    pub state: Vec<f64>,
    pub available: Vec<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub terminal: bool,
    /// Set on the final step: whether the episode achieved the task.
    pub success: Option<bool>,
    pub next: TimeStep,
}

/// A cooperative DecPOMDP. Observations are deterministic functions of the
/// hidden state and the reward is one scalar shared by the whole team.
///
/// External simulators (for instance a game client driven over an
/// inter-process protocol) plug in by implementing this trait.
pub trait Environment: Send {
    fn n_agents(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn episode_limit(&self) -> usize;
    fn reset(&mut self, rng: &mut EnvRng) -> TimeStep;
    /// Advances one step. Fails on a finished episode or unavailable action.
    fn step(&mut self, actions: &[usize]) -> Result<StepOutcome>;
}

/// Shared validation for `step` implementations.
pub(crate) fn check_actions(
    actions: &[usize],
    available: &[Vec<bool>],
    done: bool,
) -> Result<()> {
    if done {
        return Err(Error::Usage("step called on a finished episode".into()));
    }
    if actions.len() != available.len() {
        return Err(Error::dim("team action", (1, actions.len()), (1, available.len())));
    }
    for (i, (&a, av)) in actions.iter().zip(available).enumerate() {
        if !av.get(a).copied().unwrap_or(false) {
            return Err(Error::Contract(format!("agent {i} chose unavailable action {a}")));
        }
    }
    Ok(())
}

pub(crate) fn one_hot(len: usize, hot: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[hot] = 1.0;
    v
}

/// Environment selection as it appears in run configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvSpec {
    CuePassing {
        n_agents: usize,
        n_cues: usize,
    },
    MatrixGame {
        /// Defaults to the climbing game.
        #[serde(default)]
        payoff: Option<Vec<Vec<f64>>>,
    },
    TwoStepCoop,
    /// Placeholder for an out-of-process simulator; not bundled.
    External {
        endpoint: String,
    },
}

impl EnvSpec {
    pub fn build(&self) -> Result<Box<dyn Environment>> {
        Ok(match self {
            EnvSpec::CuePassing { n_agents, n_cues } => Box::new(CuePassing::new(CuePassingSpec {
                n_agents: *n_agents,
                n_cues: *n_cues,
            })?),
            EnvSpec::MatrixGame { payoff } => {
                let payoff = payoff
                    .clone()
                    .unwrap_or_else(|| CLIMBING_PAYOFF.iter().map(|r| r.to_vec()).collect());
                Box::new(MatrixGame::new(MatrixGameSpec { payoff })?)
            }
            EnvSpec::TwoStepCoop => Box::new(TwoStepCoop::new()),
            EnvSpec::External { endpoint } => {
                return Err(Error::Usage(format!(
                    "external environment at {endpoint}: no adapter is bundled with this build"
                )))
            }
        })
    }
}
