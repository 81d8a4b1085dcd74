//! Exact dynamic programming over small, fully enumerable team problems.

use std::collections::HashMap;
use std::fmt::Debug;
use std::hash::Hash;

use crate::error::{Error, Result};

pub const MAX_STATE_ACTION_PAIRS: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Transition<St> {
    pub prob: f64,
    pub reward: f64,
    /// `None` when the episode ends.
    pub next: Option<St>,
}

/// A finite-horizon team problem with enumerable states and joint actions,
/// viewed centrally (the joint policy sees the full state).
pub trait EnumerableModel {
    type State: Clone + Eq + Hash + Debug;

    fn n_agents(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn initial(&self) -> Vec<(f64, Self::State)>;
    fn transitions(&self, state: &Self::State, joint: &[usize]) -> Vec<Transition<Self::State>>;

    fn joint_actions(&self) -> Vec<Vec<usize>> {
        let (n, a) = (self.n_agents(), self.n_actions());
        let total = a.pow(n as u32);
        (0..total)
            .map(|mut code| {
                (0..n)
                    .map(|_| {
                        let x = code % a;
                        code /= a;
                        x
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct OracleSolution<St> {
    /// Expected optimal return from the initial-state distribution.
    pub value: f64,
    pub state_values: HashMap<St, f64>,
    /// One optimal joint action per reachable state (first in enumeration
    /// order on ties).
    pub policy: HashMap<St, Vec<usize>>,
}

/// Optimal values by memoized backward induction.
pub fn value_iteration<M: EnumerableModel>(model: &M, gamma: f64) -> Result<OracleSolution<M::State>> {
    let joints = model.joint_actions();
    let mut sol = OracleSolution {
        value: 0.0,
        state_values: HashMap::new(),
        policy: HashMap::new(),
    };
    let mut pairs = 0usize;
    let mut value = 0.0;
    for (p, s) in model.initial() {
        value += p * solve(model, gamma, &joints, &s, &mut sol, &mut pairs)?;
    }
    sol.value = value;
    Ok(sol)
}

fn solve<M: EnumerableModel>(
    model: &M,
    gamma: f64,
    joints: &[Vec<usize>],
    s: &M::State,
    sol: &mut OracleSolution<M::State>,
    pairs: &mut usize,
) -> Result<f64> {
    if let Some(&v) = sol.state_values.get(s) {
        return Ok(v);
    }
    *pairs += joints.len();
    if *pairs > MAX_STATE_ACTION_PAIRS {
        return Err(Error::Capacity {
            pairs: *pairs,
            limit: MAX_STATE_ACTION_PAIRS,
        });
    }
    let mut best = f64::NEG_INFINITY;
    let mut best_joint = Vec::new();
    for joint in joints {
        let mut q = 0.0;
        for tr in model.transitions(s, joint) {
            let future = match &tr.next {
                Some(ns) => solve(model, gamma, joints, ns, sol, pairs)?,
                None => 0.0,
            };
            q += tr.prob * (tr.reward + gamma * future);
        }
        if q > best {
            best = q;
            best_joint = joint.clone();
        }
    }
    sol.state_values.insert(s.clone(), best);
    sol.policy.insert(s.clone(), best_joint);
    Ok(best)
}

/// Expected return of a fixed joint policy.
pub fn policy_value<M: EnumerableModel>(
    model: &M,
    gamma: f64,
    policy: &dyn Fn(&M::State) -> Vec<usize>,
) -> f64 {
    fn eval<M: EnumerableModel>(
        model: &M,
        gamma: f64,
        policy: &dyn Fn(&M::State) -> Vec<usize>,
        s: &M::State,
    ) -> f64 {
        let joint = policy(s);
        model
            .transitions(s, &joint)
            .into_iter()
            .map(|tr| {
                let future = tr.next.as_ref().map_or(0.0, |ns| eval(model, gamma, policy, ns));
                tr.prob * (tr.reward + gamma * future)
            })
            .sum()
    }
    model
        .initial()
        .into_iter()
        .map(|(p, s)| p * eval(model, gamma, policy, &s))
        .sum()
}

/// `sum_i gamma^i r_i`.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |acc, &r| r + gamma * acc)
}
