use super::{check_actions, one_hot, EnumerableModel, EnvRng, Environment, StepOutcome, TimeStep, Transition};
use crate::error::Result;

/// Two agents, two actions, two steps. Agent 0's first action picks the
/// second-stage game: a flat one paying 7 everywhere, or a coordination game
/// paying 8 only when both choose action 1.
#[derive(Clone, Debug, Default)]
pub struct TwoStepCoop {
    stage: Stage,
    done: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Stage {
    #[default]
    Start,
    Flat,
    Coordinate,
}

impl Stage {
    fn index(self) -> usize {
        match self {
            Stage::Start => 0,
            Stage::Flat => 1,
            Stage::Coordinate => 2,
        }
    }
}

const FLAT: [[f64; 2]; 2] = [[7.0, 7.0], [7.0, 7.0]];
const COORDINATE: [[f64; 2]; 2] = [[0.0, 1.0], [1.0, 8.0]];

impl TwoStepCoop {
    pub const OPTIMAL_RETURN: f64 = 8.0;

    pub fn new() -> Self {
        Self {
            stage: Stage::Start,
            done: true,
        }
    }

    fn timestep(&self) -> TimeStep {
        let o = one_hot(3, self.stage.index());
        TimeStep {
            observations: vec![o.clone(), o.clone()],
            state: o,
            available: vec![vec![true; 2]; 2],
        }
    }

    fn outcome(stage: Stage, joint: &[usize]) -> (f64, Option<Stage>) {
        match stage {
            Stage::Start => (0.0, Some(if joint[0] == 0 { Stage::Flat } else { Stage::Coordinate })),
            Stage::Flat => (FLAT[joint[0]][joint[1]], None),
            Stage::Coordinate => (COORDINATE[joint[0]][joint[1]], None),
        }
    }
}

impl Environment for TwoStepCoop {
    fn n_agents(&self) -> usize {
        2
    }

    fn n_actions(&self) -> usize {
        2
    }

    fn obs_dim(&self) -> usize {
        3
    }

    fn state_dim(&self) -> usize {
        3
    }

    fn episode_limit(&self) -> usize {
        2
    }

    fn reset(&mut self, _rng: &mut EnvRng) -> TimeStep {
        self.stage = Stage::Start;
        self.done = false;
        self.timestep()
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepOutcome> {
        check_actions(actions, &self.timestep().available, self.done)?;
        let (reward, next) = Self::outcome(self.stage, actions);
        let terminal = next.is_none();
        if let Some(s) = next {
            self.stage = s;
        } else {
            self.done = true;
        }
        Ok(StepOutcome {
            reward,
            terminal,
            success: terminal.then_some(reward == Self::OPTIMAL_RETURN),
            next: self.timestep(),
        })
    }
}

impl EnumerableModel for TwoStepCoop {
    type State = Stage;

    fn n_agents(&self) -> usize {
        2
    }

    fn n_actions(&self) -> usize {
        2
    }

    fn initial(&self) -> Vec<(f64, Stage)> {
        vec![(1.0, Stage::Start)]
    }

    fn transitions(&self, s: &Stage, joint: &[usize]) -> Vec<Transition<Stage>> {
        let (reward, next) = Self::outcome(*s, joint);
        vec![Transition {
            prob: 1.0,
            reward,
            next,
        }]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::value_iteration;
    use rand::SeedableRng;

    #[test]
    fn optimum_is_discounted_eight() {
        let sol = value_iteration(&TwoStepCoop::new(), 0.99).unwrap();
        assert!((sol.value - 0.99 * 8.0).abs() < 1e-12);
        assert_eq!(sol.policy[&Stage::Start][0], 1);
        assert_eq!(sol.policy[&Stage::Coordinate], vec![1, 1]);
    }

    #[test]
    fn episode_walkthrough() {
        let mut e = TwoStepCoop::new();
        let ts = e.reset(&mut EnvRng::seed_from_u64(0));
        assert_eq!(ts.state, vec![1.0, 0.0, 0.0]);
        let out = e.step(&[1, 0]).unwrap();
        assert_eq!(out.next.state, vec![0.0, 0.0, 1.0]);
        assert!(!out.terminal);
        let out = e.step(&[1, 1]).unwrap();
        assert_eq!((out.reward, out.terminal, out.success), (8.0, true, Some(true)));
    }
}
