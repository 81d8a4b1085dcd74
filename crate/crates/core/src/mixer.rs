//! Value-decomposition heads mapping local Q-values to a joint value.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Dense, Graph, Group, Matrix, Mode, ParamStore, Var};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerKind {
    Vdn,
    Qmix,
}

/// Monotonic mixing network whose weights are generated from the global
/// state by hypernetworks:
///
/// ```text
/// hidden = elu(q W1(s) + b1(s))      W1 = |hyper_w1(s)|, n x embed
/// Q_tot  = hidden . w2(s) + V(s)      w2 = |hyper_w2(s)|, embed
/// ```
#[derive(Clone, Debug)]
pub struct Qmix {
    pub n_agents: usize,
    pub state_dim: usize,
    pub embed: usize,
    pub hyper_w1: (Dense, Dense),
    pub hyper_b1: Dense,
    pub hyper_w2: (Dense, Dense),
    pub value: (Dense, Dense),
    positive_weights: bool,
}

impl Qmix {
    pub const EMBED: usize = 32;
    pub const HYPER_HIDDEN: usize = 64;

    pub fn init<S: Scalar>(store: &mut ParamStore<S>, n_agents: usize, state_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (e, hh) = (Self::EMBED, Self::HYPER_HIDDEN);
        let mut d = |name: &str, i, o| Dense::new(store, name, Group::Main, i, o, &mut rng);
        Self {
            n_agents,
            state_dim,
            embed: e,
            hyper_w1: (d("mixer.hyper_w1.0", state_dim, hh), d("mixer.hyper_w1.1", hh, n_agents * e)),
            hyper_b1: d("mixer.hyper_b1", state_dim, e),
            hyper_w2: (d("mixer.hyper_w2.0", state_dim, hh), d("mixer.hyper_w2.1", hh, e)),
            value: (d("mixer.v.0", state_dim, e), d("mixer.v.1", e, 1)),
            positive_weights: true,
        }
    }

    /// Fault injection for the invariant checker: drops the absolute value on
    /// generated mixing weights, breaking monotonicity.
    #[doc(hidden)]
    pub fn without_weight_positivity(mut self) -> Self {
        self.positive_weights = false;
        self
    }

    fn hyper<S: Scalar>(&self, g: &mut Graph<'_, S>, layers: &(Dense, Dense), state: Var) -> Result<Var> {
        let x = layers.0.forward(g, state)?;
        let x = g.relu(x);
        let w = layers.1.forward(g, x)?;
        Ok(if self.positive_weights { g.abs(w) } else { w })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, q: Var, state: Var) -> Result<Var> {
        let w1 = self.hyper(g, &self.hyper_w1, state)?;
        let b1 = self.hyper_b1.forward(g, state)?;
        let hidden = g.row_bmm(q, w1, self.embed)?;
        let hidden = g.add(hidden, b1)?;
        let hidden = g.elu(hidden);
        let w2 = self.hyper(g, &self.hyper_w2, state)?;
        let y = g.mul(hidden, w2)?;
        let y = g.row_sum(y);
        let v = self.value.0.forward(g, state)?;
        let v = g.relu(v);
        let v = self.value.1.forward(g, v)?;
        g.add(y, v)
    }
}

#[derive(Clone, Debug)]
pub enum Mixer {
    /// Joint value is the plain sum of local values.
    Vdn,
    Qmix(Qmix),
}

impl Mixer {
    pub fn init<S: Scalar>(
        kind: MixerKind,
        store: &mut ParamStore<S>,
        n_agents: usize,
        state_dim: usize,
        seed: u64,
    ) -> Self {
        match kind {
            MixerKind::Vdn => Mixer::Vdn,
            MixerKind::Qmix => Mixer::Qmix(Qmix::init(store, n_agents, state_dim, seed)),
        }
    }

    pub fn kind(&self) -> MixerKind {
        match self {
            Mixer::Vdn => MixerKind::Vdn,
            Mixer::Qmix(_) => MixerKind::Qmix,
        }
    }

    /// `q: B x n` chosen local values, `state: B x state_dim`; returns `B x 1`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, q: Var, state: Var) -> Result<Var> {
        match self {
            Mixer::Vdn => Ok(g.row_sum(q)),
            Mixer::Qmix(m) => {
                let (qs, ss) = (g.shape(q), g.shape(state));
                if qs.1 != m.n_agents || ss.1 != m.state_dim || qs.0 != ss.0 {
                    return Err(Error::dim("qmix", qs, ss));
                }
                m.forward(g, q, state)
            }
        }
    }

    /// Joint value of a single team.
    pub fn mix<S: Scalar>(&self, store: &ParamStore<S>, q_locals: &[f64], state: &[f64]) -> Result<f64> {
        if let Mixer::Vdn = self {
            // Exact accumulation in f64, independent of the training dtype.
            return Ok(q_locals.iter().sum());
        }
        let mut g = Graph::new(store, Mode::Eval);
        let q = g.constant(Matrix::from_f64(1, q_locals.len(), q_locals)?);
        let s = g.constant(Matrix::from_f64(1, state.len(), state)?);
        let y = self.forward(&mut g, q, s)?;
        Ok(g.value(y)[(0, 0)].as_f64())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vdn_is_exact_sum() {
        let s = ParamStore::<f32>::new();
        assert_eq!(Mixer::Vdn.mix(&s, &[1.0, 2.0, -0.5], &[]).unwrap(), 2.5);
    }

    #[test]
    fn zeroed_hypernetworks_give_zero() {
        let mut s = ParamStore::<f64>::new();
        let m = Mixer::init(MixerKind::Qmix, &mut s, 3, 5, 4);
        for (_, p) in s.iter_mut() {
            p.tensor.fill(0.0);
        }
        for q in [[1.0, -2.0, 3.0], [100.0, 0.0, -7.5]] {
            assert_eq!(m.mix(&s, &q, &[0.1, 0.2, 0.3, 0.4, 0.5]).unwrap(), 0.0);
        }
    }

    #[test]
    fn state_width_checked() {
        let mut s = ParamStore::<f64>::new();
        let m = Mixer::init(MixerKind::Qmix, &mut s, 2, 4, 4);
        assert!(matches!(m.mix(&s, &[1.0, 2.0], &[0.0; 3]), Err(Error::Dimension { .. })));
    }
}
