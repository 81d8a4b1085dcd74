use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub batch_size: usize,
    /// RMSProp learning rate for agent and mixer parameters.
    pub lr: f64,
    /// Adam learning rate for the communication stack.
    pub comm_lr: f64,
    pub epsilon_start: f64,
    pub epsilon_finish: f64,
    pub anneal_steps: u64,
    /// Training steps between hard target-network copies.
    pub target_update_interval: u64,
    pub grad_clip: f64,
    /// Environment steps between evaluation rounds.
    pub test_interval: u64,
    pub test_episodes: usize,
    pub buffer_capacity: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            batch_size: 32,
            lr: 0.0005,
            comm_lr: 0.0005,
            epsilon_start: 1.0,
            epsilon_finish: 0.05,
            anneal_steps: 50_000,
            target_update_interval: 200,
            grad_clip: 10.0,
            test_interval: 2000,
            test_episodes: 32,
            buffer_capacity: 5000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.epsilon_start) || !(0.0..=1.0).contains(&self.epsilon_finish) {
            return bad("epsilon values must lie in [0, 1]".into());
        }
        if self.epsilon_finish > self.epsilon_start {
            return bad("epsilon_finish exceeds epsilon_start".into());
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return bad("need 0 < batch_size <= buffer_capacity".into());
        }
        if self.lr < 0.0 || self.comm_lr < 0.0 || self.grad_clip <= 0.0 {
            return bad("learning rates must be >= 0 and grad_clip > 0".into());
        }
        if self.target_update_interval == 0 || self.test_interval == 0 {
            return bad("intervals must be positive".into());
        }
        Ok(())
    }

    /// Linear anneal from start to finish, flat afterwards.
    pub fn epsilon(&self, env_step: u64) -> f64 {
        if self.anneal_steps == 0 {
            return self.epsilon_finish;
        }
        let frac = (env_step as f64 / self.anneal_steps as f64).min(1.0);
        self.epsilon_start + (self.epsilon_finish - self.epsilon_start) * frac
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let c = TrainConfig::default();
        assert_eq!(c.epsilon(0), 1.0);
        assert!((c.epsilon(50_000) - 0.05).abs() < 1e-15);
        assert!((c.epsilon(25_000) - 0.525).abs() < 1e-12);
        assert!((c.epsilon(1_000_000) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig {
            epsilon_finish: 0.9,
            epsilon_start: 0.5,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            gamma: 1.5,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
