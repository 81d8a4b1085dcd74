use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::AgentConfig;
use crate::comm::CommConfig;
use crate::envs::{EnvSpec, Environment};
use crate::error::{Error, Result};
use crate::exploration::ExplorationConfig;
use crate::ipu::Topology;
use crate::learner::{Architecture, TrainConfig};
use crate::mixer::MixerKind;

/// Environment variable that, when set, roots relative output directories.
pub const OUT_ROOT_ENV: &str = "MACTAS_OUT_ROOT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentSection {
    pub hidden_dim: usize,
}

impl Default for AgentSection {
    fn default() -> Self {
        Self { hidden_dim: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommSection {
    pub enabled: bool,
    pub num_layers: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub residual: bool,
}

impl Default for CommSection {
    fn default() -> Self {
        let c = CommConfig::default();
        Self {
            enabled: true,
            num_layers: c.num_layers,
            ffn_dim: c.ffn_dim,
            heads: c.heads,
            dropout: c.dropout,
            residual: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExploreScheme {
    #[default]
    EpsilonGreedy,
    TopK,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplorationSection {
    pub scheme: ExploreScheme,
    /// Only read by the top-k scheme.
    pub k: usize,
    pub temperature: f64,
}

impl Default for ExplorationSection {
    fn default() -> Self {
        Self {
            scheme: ExploreScheme::EpsilonGreedy,
            k: 2,
            temperature: 0.33,
        }
    }
}

impl ExplorationSection {
    pub fn at(&self, epsilon: f64) -> ExplorationConfig {
        match self.scheme {
            ExploreScheme::EpsilonGreedy => ExplorationConfig::epsilon_greedy(epsilon),
            ExploreScheme::TopK => ExplorationConfig {
                epsilon,
                k: self.k,
                temperature: self.temperature,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvSpec,
    pub mixer: MixerKind,
    pub agent: AgentSection,
    pub comm: CommSection,
    pub exploration: ExplorationSection,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub total_env_steps: u64,
    /// Restricts who hears whom; absent means full connectivity.
    pub topology: Option<Topology>,
    pub out_dir: PathBuf,
    pub dtype: Dtype,
    /// Worker threads for seeds; 0 picks the machine's parallelism.
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvSpec::CuePassing {
                n_agents: 3,
                n_cues: 3,
            },
            mixer: MixerKind::Vdn,
            agent: AgentSection::default(),
            comm: CommSection::default(),
            exploration: ExplorationSection::default(),
            train: TrainConfig::default(),
            seeds: (1..=5).collect(),
            total_env_steps: 50_000,
            topology: None,
            out_dir: PathBuf::from("runs/default"),
            dtype: Dtype::F32,
            jobs: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn comm_config(&self) -> Option<CommConfig> {
        self.comm.enabled.then_some(CommConfig {
            num_layers: self.comm.num_layers,
            ffn_dim: self.comm.ffn_dim,
            model_dim: self.agent.hidden_dim,
            heads: self.comm.heads,
            dropout: self.comm.dropout,
        })
    }

    pub fn architecture(&self, env: &dyn Environment) -> Architecture {
        Architecture {
            agent: AgentConfig {
                obs_dim: env.obs_dim(),
                n_actions: env.n_actions(),
                n_agents: env.n_agents(),
                hidden_dim: self.agent.hidden_dim,
            },
            comm: self.comm_config(),
            use_residual: self.comm.residual,
            mixer: self.mixer,
            state_dim: env.state_dim(),
        }
    }

    /// Checks everything that can be checked without running.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.exploration.at(self.train.epsilon_start).validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("no seeds given".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Config("duplicate seeds".into()));
        }
        let env = self.env.build()?;
        self.architecture(env.as_ref()).validate()?;
        if let Some(t) = &self.topology {
            if t.n() != env.n_agents() {
                return Err(Error::Config(format!(
                    "topology covers {} agents, environment has {}",
                    t.n(),
                    env.n_agents()
                )));
            }
            if self.comm.enabled {
                t.attention_mask().validate()?;
            }
        }
        Ok(())
    }

    /// `out_dir`, placed under the override root when it is relative.
    pub fn resolved_out_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_ROOT_ENV) {
            Some(root) if self.out_dir.is_relative() => PathBuf::from(root).join(&self.out_dir),
            _ => self.out_dir.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_and_validate() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(c.seeds, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"total_env_step": 10}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"gama": 0.9}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"comm": {"layers": 2}}"#).is_err());
        let c = RunConfig::from_json(r#"{"env": {"kind": "two_step_coop"}, "mixer": "qmix"}"#).unwrap();
        assert_eq!(c.mixer, MixerKind::Qmix);
    }

    #[test]
    fn invalid_values_rejected() {
        let c = RunConfig {
            seeds: vec![1, 1],
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.comm.heads = 5;
        assert!(c.validate().is_err());
        let c = RunConfig {
            topology: Some(Topology::full(2)),
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
