//! Deployment simulator for the communication module.
//!
//! *Centralized*: every agent uploads its hidden state to an intermediate
//! processing unit (IPU), which runs the whole stack and sends each agent its
//! increment back. *Distributed*: agents run the stack themselves, exchanging
//! their current layer input with every peer that can hear them once per
//! encoder layer. Unreachable peers are simply absent from the attention.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::comm::{CommIncrement, CommNet};
use crate::error::{Error, Result};
use crate::nn::{AttentionMask, Matrix, Mode, ParamStore};
use crate::Scalar;

/// Directed reachability between agents; self-reachability always holds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TopologyFile", into = "TopologyFile")]
pub struct Topology {
    n: usize,
    reach: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologyFile {
    n: usize,
    /// `adjacency[from][to]`: `to` receives what `from` sends.
    adjacency: Vec<Vec<bool>>,
}

impl TryFrom<TopologyFile> for Topology {
    type Error = Error;

    fn try_from(f: TopologyFile) -> Result<Self> {
        if f.adjacency.len() != f.n {
            return Err(Error::dim("topology", (f.n, f.n), (f.adjacency.len(), f.n)));
        }
        Self::from_adjacency(&f.adjacency)
    }
}

impl From<Topology> for TopologyFile {
    fn from(t: Topology) -> Self {
        let adjacency = (0..t.n)
            .map(|from| (0..t.n).map(|to| t.reaches(from, to)).collect())
            .collect();
        TopologyFile { n: t.n, adjacency }
    }
}

impl Topology {
    pub fn full(n: usize) -> Self {
        Self {
            n,
            reach: vec![true; n * n],
        }
    }

    /// `adjacency[from][to]`; the diagonal is forced on.
    pub fn from_adjacency(adjacency: &[Vec<bool>]) -> Result<Self> {
        let n = adjacency.len();
        let mut reach = Vec::with_capacity(n * n);
        for (from, row) in adjacency.iter().enumerate() {
            if row.len() != n {
                return Err(Error::dim("topology", (n, n), (from, row.len())));
            }
            reach.extend(row.iter().enumerate().map(|(to, &r)| r || to == from));
        }
        Ok(Self { n, reach })
    }

    /// Full connectivity except that nobody hears `agent` and `agent` hears nobody.
    pub fn isolating(n: usize, agent: usize) -> Self {
        let mut t = Self::full(n);
        for other in 0..n {
            if other != agent {
                t.set(agent, other, false);
                t.set(other, agent, false);
            }
        }
        t
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("topology serializes")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn reaches(&self, from: usize, to: usize) -> bool {
        self.reach[from * self.n + to]
    }

    pub fn set(&mut self, from: usize, to: usize, on: bool) {
        if from != to {
            self.reach[from * self.n + to] = on;
        }
    }

    /// Agents whose transmissions `agent` receives, itself included, ascending.
    pub fn in_neighborhood(&self, agent: usize) -> Vec<usize> {
        (0..self.n).filter(|&j| self.reaches(j, agent)).collect()
    }

    /// Attention mask letting query `i` attend key `j` iff `j` reaches `i`.
    pub fn attention_mask(&self) -> AttentionMask {
        AttentionMask::from_fn(self.n, |i, j| self.reaches(j, i))
    }

    /// Directed sends per exchange round (self-delivery excluded).
    pub fn links(&self) -> u64 {
        (0..self.n)
            .map(|i| self.in_neighborhood(i).len() as u64 - 1)
            .sum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficStats {
    /// Directed vector transfers, each of width `n_h`.
    pub messages: u64,
    pub floats_transferred: u64,
    pub rounds: u64,
}

impl TrafficStats {
    pub fn accumulate(&mut self, other: &TrafficStats) {
        self.messages += other.messages;
        self.floats_transferred += other.floats_transferred;
        self.rounds += other.rounds;
    }

    /// Traffic of one IPU round: `n` uploads and `n` downloads.
    pub fn centralized(n: usize, width: usize) -> Self {
        let messages = 2 * n as u64;
        Self {
            messages,
            floats_transferred: messages * width as u64,
            rounds: 1,
        }
    }
}

impl TrafficStats {
    /// Traffic of one distributed round: every link carries one vector per
    /// encoder layer.
    pub fn distributed(layers: usize, links: u64, width: usize) -> Self {
        let messages = layers as u64 * links;
        Self {
            messages,
            floats_transferred: messages * width as u64,
            rounds: layers as u64,
        }
    }
}

/// One IPU round: the full stack without masking.
pub fn centralized_round<S: Scalar>(
    net: &CommNet,
    store: &ParamStore<S>,
    h: &Matrix<S>,
) -> Result<(CommIncrement<S>, TrafficStats)> {
    let z = net.communicate(store, h, Mode::Eval, None)?;
    Ok((z, TrafficStats::centralized(h.rows(), h.cols())))
}

/// Agent-by-agent simulation of the distributed protocol. For every layer,
/// each agent collects its in-neighbors' current rows, evaluates the layer
/// on that local set alone and keeps its own output row.
pub fn distributed_round<S: Scalar>(
    net: &CommNet,
    store: &ParamStore<S>,
    h: &Matrix<S>,
    topology: &Topology,
) -> Result<(CommIncrement<S>, TrafficStats)> {
    let n = h.rows();
    if topology.n() != n {
        return Err(Error::dim("distributed round", (n, n), (topology.n(), topology.n())));
    }
    let width = h.cols();
    let mut stats = TrafficStats::default();
    let mut x = h.clone();
    for layer in 0..net.layers.len() {
        let mut next = Matrix::zeros(n, width);
        for agent in 0..n {
            let peers = topology.in_neighborhood(agent);
            stats.messages += peers.len() as u64 - 1;
            let local = x.select_rows(&peers);
            let y = net.layer_forward(store, layer, &local, Mode::Eval, None)?;
            let own = peers.iter().position(|&p| p == agent).expect("self always reachable");
            next.row_mut(agent).copy_from_slice(y.row(own));
        }
        stats.rounds += 1;
        x = next;
    }
    stats.floats_transferred = stats.messages * width as u64;
    let z = net.project_output(store, &x)?;
    Ok((CommIncrement { z }, stats))
}

/// Same computation as [`distributed_round`] done in one batched pass with
/// the topology as an attention mask.
pub fn masked_round<S: Scalar>(
    net: &CommNet,
    store: &ParamStore<S>,
    h: &Matrix<S>,
    topology: &Topology,
) -> Result<CommIncrement<S>> {
    net.communicate(store, h, Mode::Eval, Some(&topology.attention_mask()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_roundtrip_forces_diagonal() {
        let t = Topology::from_json(r#"{"n":3,"adjacency":[[false,true,false],[false,false,false],[true,true,false]]}"#)
            .unwrap();
        assert!((0..3).all(|i| t.reaches(i, i)));
        assert!(t.reaches(0, 1));
        assert!(!t.reaches(1, 0));
        assert_eq!(t.in_neighborhood(1), vec![0, 1, 2]);
        assert_eq!(Topology::from_json(&t.to_json()).unwrap(), t);
        assert!(Topology::from_json(r#"{"n":2,"adjacency":[[true]]}"#).is_err());
        assert!(Topology::from_json(r#"{"n":1,"adjacency":[[true]],"extra":1}"#).is_err());
    }

    #[test]
    fn link_counts() {
        assert_eq!(Topology::full(4).links(), 12);
        assert_eq!(Topology::isolating(4, 2).links(), 6);
        let mask = Topology::isolating(3, 0).attention_mask();
        assert!(mask.allowed(0, 0) && !mask.allowed(0, 1) && !mask.allowed(1, 0));
        mask.validate().unwrap();
    }

    #[test]
    fn centralized_traffic_formula() {
        assert_eq!(TrafficStats::centralized(8, 64).floats_transferred, 1024);
        assert_eq!(TrafficStats::centralized(1, 64).messages, 2);
    }
}
