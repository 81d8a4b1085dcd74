//! The per-agent network: input MLP, GRU, optional communication insertion
//! with a residual sum, and the Q-value head. One parameter set is shared by
//! every agent; identity enters through an id one-hot in the input.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::comm::CommNet;
use crate::error::{Error, Result};
use crate::nn::{AttentionMask, Dense, Graph, Group, GruCell, Matrix, ParamStore, Var};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub obs_dim: usize,
    pub n_actions: usize,
    pub n_agents: usize,
    pub hidden_dim: usize,
}

impl AgentConfig {
    /// Width of `[observation | last-action one-hot | agent-id one-hot]`.
    pub fn input_dim(&self) -> usize {
        self.obs_dim + self.n_actions + self.n_agents
    }
}

/// One agent's network input at one timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentInput<'a> {
    pub observation: &'a [f64],
    /// `None` at the first step of an episode.
    pub last_action: Option<usize>,
    pub agent_id: usize,
}

impl AgentInput<'_> {
    pub fn write_into<S: Scalar>(&self, cfg: &AgentConfig, row: &mut [S]) -> Result<()> {
        if self.observation.len() != cfg.obs_dim || row.len() != cfg.input_dim() {
            return Err(Error::dim(
                "agent input",
                (1, self.observation.len()),
                (1, cfg.obs_dim),
            ));
        }
        if self.agent_id >= cfg.n_agents || self.last_action.is_some_and(|a| a >= cfg.n_actions) {
            return Err(Error::Contract("agent id or last action out of range".into()));
        }
        row.fill(S::zero());
        for (dst, &src) in row.iter_mut().zip(self.observation) {
            *dst = S::from_f64_lossy(src);
        }
        if let Some(a) = self.last_action {
            row[cfg.obs_dim + a] = S::one();
        }
        row[cfg.obs_dim + cfg.n_actions + self.agent_id] = S::one();
        Ok(())
    }
}

/// Stacks inputs into a `len x input_dim` matrix.
pub fn stack_inputs<S: Scalar>(cfg: &AgentConfig, inputs: &[AgentInput<'_>]) -> Result<Matrix<S>> {
    let mut m = Matrix::zeros(inputs.len(), cfg.input_dim());
    for (r, inp) in inputs.iter().enumerate() {
        inp.write_into(cfg, m.row_mut(r))?;
    }
    Ok(m)
}

#[derive(Clone, Debug)]
pub struct AgentNet {
    pub config: AgentConfig,
    pub fc_in: Dense,
    pub gru: GruCell,
    pub fc_out: Dense,
}

impl AgentNet {
    pub fn init<S: Scalar>(store: &mut ParamStore<S>, config: AgentConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden_dim;
        Self {
            fc_in: Dense::new(store, "agent.fc_in", Group::Main, config.input_dim(), h, &mut rng),
            gru: GruCell::new(store, "agent.gru", Group::Main, h, h, &mut rng),
            fc_out: Dense::new(store, "agent.fc_out", Group::Main, h, config.n_actions, &mut rng),
            config,
        }
    }

    /// `h_t = GRU(ReLU(W x + b), h_{t-1})`.
    pub fn encode<S: Scalar>(&self, g: &mut Graph<'_, S>, inputs: Var, h_prev: Var) -> Result<Var> {
        let x = self.fc_in.forward(g, inputs)?;
        let x = g.relu(x);
        self.gru.forward(g, x, h_prev)
    }

    pub fn q_head<S: Scalar>(&self, g: &mut Graph<'_, S>, h_tilde: Var) -> Result<Var> {
        self.fc_out.forward(g, h_tilde)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommFlags {
    pub use_comm: bool,
    pub use_residual: bool,
}

impl Default for CommFlags {
    fn default() -> Self {
        Self {
            use_comm: true,
            use_residual: true,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TeamOutput {
    /// `rows x n_actions` local Q-values.
    pub q: Var,
    /// Post-GRU, pre-communication state carried to the next step.
    pub hidden: Var,
}

/// Agent network plus optional communication, evaluated over groups of
/// `n_agents` consecutive rows (one group per team instance).
#[derive(Clone, Debug)]
pub struct TeamNet {
    pub agent: AgentNet,
    pub comm: Option<CommNet>,
    pub flags: CommFlags,
}

impl TeamNet {
    pub fn n_agents(&self) -> usize {
        self.agent.config.n_agents
    }

    pub fn uses_comm(&self) -> bool {
        self.flags.use_comm && self.comm.is_some()
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        inputs: Var,
        h_prev: Var,
        mask: Option<&AttentionMask>,
    ) -> Result<TeamOutput> {
        let rows = g.shape(inputs).0;
        if !rows.is_multiple_of(self.n_agents()) {
            return Err(Error::dim(
                "team forward",
                g.shape(inputs),
                (self.n_agents(), self.agent.config.input_dim()),
            ));
        }
        let h = self.agent.encode(g, inputs, h_prev)?;
        let h_tilde = match (&self.comm, self.flags) {
            (Some(comm), CommFlags { use_comm: true, use_residual }) => {
                let z = comm.forward(g, h, self.n_agents(), mask)?;
                if use_residual {
                    g.add(h, z)?
                } else {
                    z
                }
            }
            _ => h,
        };
        let q = self.agent.q_head(g, h_tilde)?;
        Ok(TeamOutput { q, hidden: h })
    }
}
