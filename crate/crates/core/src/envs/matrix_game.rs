use super::{check_actions, EnumerableModel, EnvRng, Environment, StepOutcome, TimeStep, Transition};
use crate::error::{Error, Result};

/// Climbing game: optimum (0, 0) worth 11, strict Nash equilibrium (2, 2)
/// worth 5, guarded by heavy miscoordination penalties.
pub const CLIMBING_PAYOFF: [[f64; 3]; 3] = [[11.0, -30.0, 0.0], [-30.0, 7.0, 0.0], [0.0, 6.0, 5.0]];

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixGameSpec {
    /// `payoff[a0][a1]`.
    pub payoff: Vec<Vec<f64>>,
}

impl MatrixGameSpec {
    pub fn climbing() -> Self {
        Self {
            payoff: CLIMBING_PAYOFF.iter().map(|r| r.to_vec()).collect(),
        }
    }

    pub fn max_payoff(&self) -> f64 {
        self.payoff.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Joint actions from which no single agent can improve by deviating alone.
    pub fn pure_nash_equilibria(&self) -> Vec<(usize, usize)> {
        let rows = self.payoff.len();
        let cols = self.payoff[0].len();
        let mut out = Vec::new();
        for a in 0..rows {
            for b in 0..cols {
                let v = self.payoff[a][b];
                let row_ok = (0..rows).all(|a2| self.payoff[a2][b] <= v);
                let col_ok = (0..cols).all(|b2| self.payoff[a][b2] <= v);
                if row_ok && col_ok {
                    out.push((a, b));
                }
            }
        }
        out
    }

    /// Whether `(a, b)` is an equilibrium with every unilateral deviation
    /// strictly worse.
    pub fn is_strict_nash(&self, a: usize, b: usize) -> bool {
        let v = self.payoff[a][b];
        (0..self.payoff.len()).all(|a2| a2 == a || self.payoff[a2][b] < v)
            && (0..self.payoff[0].len()).all(|b2| b2 == b || self.payoff[a][b2] < v)
    }
}

/// One-shot two-player cooperative matrix game with a constant observation.
#[derive(Clone, Debug)]
pub struct MatrixGame {
    spec: MatrixGameSpec,
    n_actions: usize,
    done: bool,
}

impl MatrixGame {
    pub fn new(spec: MatrixGameSpec) -> Result<Self> {
        let rows = spec.payoff.len();
        let cols = spec.payoff.first().map_or(0, Vec::len);
        if rows == 0 || cols == 0 || spec.payoff.iter().any(|r| r.len() != cols) {
            return Err(Error::Config("payoff table must be a non-empty rectangle".into()));
        }
        Ok(Self {
            n_actions: rows.max(cols),
            spec,
            done: true,
        })
    }

    pub fn spec(&self) -> &MatrixGameSpec {
        &self.spec
    }

    fn timestep(&self) -> TimeStep {
        let rows = self.spec.payoff.len();
        let cols = self.spec.payoff[0].len();
        TimeStep {
            observations: vec![vec![1.0]; 2],
            state: vec![1.0],
            available: vec![
                (0..self.n_actions).map(|a| a < rows).collect(),
                (0..self.n_actions).map(|a| a < cols).collect(),
            ],
        }
    }
}

impl Environment for MatrixGame {
    fn n_agents(&self) -> usize {
        2
    }

    fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn obs_dim(&self) -> usize {
        1
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn episode_limit(&self) -> usize {
        1
    }

    fn reset(&mut self, _rng: &mut EnvRng) -> TimeStep {
        self.done = false;
        self.timestep()
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepOutcome> {
        check_actions(actions, &self.timestep().available, self.done)?;
        self.done = true;
        let reward = self.spec.payoff[actions[0]][actions[1]];
        Ok(StepOutcome {
            reward,
            terminal: true,
            success: Some(reward == self.spec.max_payoff()),
            next: self.timestep(),
        })
    }
}

impl EnumerableModel for MatrixGameSpec {
    type State = ();

    fn n_agents(&self) -> usize {
        2
    }

    fn n_actions(&self) -> usize {
        self.payoff.len().max(self.payoff[0].len())
    }

    fn initial(&self) -> Vec<(f64, ())> {
        vec![(1.0, ())]
    }

    fn transitions(&self, _: &(), joint: &[usize]) -> Vec<Transition<()>> {
        let reward = self
            .payoff
            .get(joint[0])
            .and_then(|r| r.get(joint[1]))
            .copied()
            .unwrap_or(f64::NEG_INFINITY);
        vec![Transition {
            prob: 1.0,
            reward,
            next: None,
        }]
    }
}
