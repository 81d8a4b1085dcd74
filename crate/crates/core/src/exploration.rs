//! Action selection: epsilon-greedy mixed with Boltzmann sampling over each
//! agent's top-k available actions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplorationConfig {
    pub epsilon: f64,
    pub k: usize,
    /// Softmax temperature; `0` is the greedy limit.
    pub temperature: f64,
}

impl ExplorationConfig {
    pub fn epsilon_greedy(epsilon: f64) -> Self {
        Self {
            epsilon,
            k: 1,
            temperature: 0.0,
        }
    }

    pub fn greedy() -> Self {
        Self::epsilon_greedy(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature {} must be >= 0", self.temperature)));
        }
        Ok(())
    }
}

/// Available actions ranked by value, ties broken by lower index.
fn ranked(q: &[f64], available: &[bool]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..q.len()).filter(|&a| available[a]).collect();
    idx.sort_by(|&a, &b| q[b].total_cmp(&q[a]).then(a.cmp(&b)));
    idx
}

/// Greedy action among the available ones (lowest index on ties).
pub fn argmax_available(q: &[f64], available: &[bool]) -> Result<usize> {
    check(q, available)?;
    Ok(ranked(q, available)[0])
}

fn check(q: &[f64], available: &[bool]) -> Result<()> {
    if q.len() != available.len() {
        return Err(Error::dim("action values", (1, q.len()), (1, available.len())));
    }
    if !available.iter().any(|&a| a) {
        return Err(Error::Contract("no available action".into()));
    }
    Ok(())
}

/// `p = eps * Uniform(available) + (1 - eps) * B`, with `B` the
/// temperature-scaled softmax over the top-k available actions.
pub fn action_distribution(q: &[f64], available: &[bool], cfg: &ExplorationConfig) -> Result<Vec<f64>> {
    check(q, available)?;
    cfg.validate()?;
    let order = ranked(q, available);
    let n_avail = order.len();
    let k = cfg.k.min(n_avail);
    let mut p = vec![0.0; q.len()];
    let uniform = cfg.epsilon / n_avail as f64;
    for &a in &order {
        p[a] = uniform;
    }
    let greedy_mass = 1.0 - cfg.epsilon;
    let top = &order[..k];
    if cfg.temperature == 0.0 || k == 1 {
        p[top[0]] += greedy_mass;
    } else {
        let max = q[top[0]];
        let weights: Vec<f64> = top
            .iter()
            .map(|&a| ((q[a] - max) / cfg.temperature).exp())
            .collect();
        let total: f64 = weights.iter().sum();
        for (&a, w) in top.iter().zip(weights) {
            p[a] += greedy_mass * w / total;
        }
    }
    Ok(p)
}

/// Samples one action from [`action_distribution`].
pub fn select_action<R: Rng + ?Sized>(
    q: &[f64],
    available: &[bool],
    cfg: &ExplorationConfig,
    rng: &mut R,
) -> Result<usize> {
    let p = action_distribution(q, available, cfg)?;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (a, &pa) in p.iter().enumerate() {
        if pa > 0.0 {
            acc += pa;
            last = a;
            if u < acc {
                return Ok(a);
            }
        }
    }
    Ok(last)
}
