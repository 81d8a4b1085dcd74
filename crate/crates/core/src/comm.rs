//! The inter-agent communication module: a stack of transformer encoder
//! layers over the team's hidden states, followed by a zero-initialized
//! output projection producing per-agent increments.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AttentionMask, Dense, EncoderLayer, Graph, Group, Matrix, Mode, ParamId, ParamStore, Var};
use crate::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommConfig {
    pub num_layers: usize,
    pub ffn_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub dropout: f64,
}

impl Default for CommConfig {
    fn default() -> Self {
        Self {
            num_layers: 1,
            ffn_dim: 128,
            model_dim: 64,
            heads: 4,
            dropout: 0.1,
        }
    }
}

impl CommConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config("communication needs at least one encoder layer".into()));
        }
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.ffn_dim == 0 {
            return Err(Error::Config("ffn_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Scalar parameter count implied by the configuration alone.
    pub fn param_count(&self) -> usize {
        self.num_layers * EncoderLayer::param_count(self.model_dim, self.ffn_dim)
            + Dense::param_count(self.model_dim, self.model_dim)
    }
}

/// Increments `z` for each agent, same shape as the input hidden states.
#[derive(Clone, Debug, PartialEq)]
pub struct CommIncrement<S> {
    pub z: Matrix<S>,
}

#[derive(Clone, Debug)]
pub struct CommNet {
    pub config: CommConfig,
    pub layers: Vec<EncoderLayer>,
    pub output: Dense,
}

impl CommNet {
    /// Registers the module's parameters (all in [`Group::Comm`]) in `store`.
    /// Encoder weights are drawn from a stream seeded by `seed`; the output
    /// projection starts at exactly zero.
    pub fn init<S: Scalar>(store: &mut ParamStore<S>, config: &CommConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..config.num_layers)
            .map(|l| {
                EncoderLayer::new(
                    store,
                    &format!("comm.layer{l}"),
                    Group::Comm,
                    config.model_dim,
                    config.heads,
                    config.ffn_dim,
                    config.dropout,
                    l as u64 + 1,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let output = Dense::zeros(store, "comm.out", Group::Comm, config.model_dim, config.model_dim);
        Ok(Self {
            config: config.clone(),
            layers,
            output,
        })
    }

    pub fn param_ids<S: Scalar>(&self, store: &ParamStore<S>) -> Vec<ParamId> {
        store
            .iter()
            .filter(|(_, p)| p.name.starts_with("comm."))
            .map(|(id, _)| id)
            .collect()
    }

    /// Total scalar parameters actually registered for this module.
    pub fn param_count<S: Scalar>(&self, store: &ParamStore<S>) -> usize {
        self.param_ids(store).iter().map(|&id| store.get(id).numel()).sum()
    }

    /// Runs the encoder stack over groups of `team` consecutive rows of `h`,
    /// then the output projection. Returns the increments.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        h: Var,
        team: usize,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let (r, c) = g.shape(h);
        if c != self.config.model_dim {
            return Err(Error::dim("communicate", (r, c), (team, self.config.model_dim)));
        }
        let mut x = h;
        for layer in &self.layers {
            x = layer.forward(g, x, team, mask)?;
        }
        self.output.forward(g, x)
    }

    /// Single-team convenience wrapper over [`CommNet::forward`].
    pub fn communicate<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        h: &Matrix<S>,
        mode: Mode,
        mask: Option<&AttentionMask>,
    ) -> Result<CommIncrement<S>> {
        let mut g = Graph::new(store, mode);
        let hv = g.constant(h.clone());
        let z = self.forward(&mut g, hv, h.rows(), mask)?;
        Ok(CommIncrement { z: g.value(z).clone() })
    }

    /// Output of the encoder layer `index` applied to `x` alone (no output
    /// projection); used by the distributed simulator.
    pub fn layer_forward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        index: usize,
        x: &Matrix<S>,
        mode: Mode,
        mask: Option<&AttentionMask>,
    ) -> Result<Matrix<S>> {
        let mut g = Graph::new(store, mode);
        let xv = g.constant(x.clone());
        let y = self.layers[index].forward(&mut g, xv, x.rows(), mask)?;
        Ok(g.value(y).clone())
    }

    pub fn project_output<S: Scalar>(&self, store: &ParamStore<S>, x: &Matrix<S>) -> Result<Matrix<S>> {
        let mut g = Graph::new(store, Mode::Eval);
        let xv = g.constant(x.clone());
        let z = self.output.forward(&mut g, xv)?;
        Ok(g.value(z).clone())
    }
}
