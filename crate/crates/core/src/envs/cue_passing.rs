use rand::Rng;

use super::{check_actions, one_hot, EnumerableModel, EnvRng, Environment, StepOutcome, TimeStep, Transition};
use crate::error::{Error, Result};

/// Two-step relay task. Agent `i` privately sees cue `c_i` and must answer
/// `c_{(i-1) mod n}` on the second step; the team scores 1 only if every
/// answer is right. Without communication the best achievable success rate
/// is `(1/m)^n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CuePassingSpec {
    pub n_agents: usize,
    pub n_cues: usize,
}

impl CuePassingSpec {
    /// Cue each agent must report.
    pub fn target(&self, cues: &[usize], agent: usize) -> usize {
        cues[(agent + self.n_agents - 1) % self.n_agents]
    }
}

#[derive(Clone, Debug)]
pub struct CuePassing {
    spec: CuePassingSpec,
    cues: Vec<usize>,
    t: usize,
    done: bool,
}

impl CuePassing {
    pub const HORIZON: usize = 2;

    pub fn new(spec: CuePassingSpec) -> Result<Self> {
        if spec.n_agents == 0 || spec.n_cues == 0 {
            return Err(Error::Config("cue passing needs at least one agent and one cue".into()));
        }
        Ok(Self {
            spec,
            cues: vec![0; spec.n_agents],
            t: 0,
            done: true,
        })
    }

    pub fn spec(&self) -> CuePassingSpec {
        self.spec
    }

    /// Starts an episode with fixed cues instead of sampled ones.
    pub fn reset_with(&mut self, cues: &[usize]) -> TimeStep {
        assert_eq!(cues.len(), self.spec.n_agents);
        self.cues = cues.to_vec();
        self.t = 0;
        self.done = false;
        self.timestep()
    }

    fn timestep(&self) -> TimeStep {
        let m = self.spec.n_cues;
        let clock = one_hot(Self::HORIZON, self.t.min(Self::HORIZON - 1));
        let observations = self
            .cues
            .iter()
            .map(|&c| {
                let mut o = one_hot(m, c);
                o.extend_from_slice(&clock);
                o
            })
            .collect();
        let state = self.cues.iter().flat_map(|&c| one_hot(m, c)).collect();
        TimeStep {
            observations,
            state,
            available: vec![vec![true; m]; self.spec.n_agents],
        }
    }
}

impl Environment for CuePassing {
    fn n_agents(&self) -> usize {
        self.spec.n_agents
    }

    fn n_actions(&self) -> usize {
        self.spec.n_cues
    }

    fn obs_dim(&self) -> usize {
        self.spec.n_cues + Self::HORIZON
    }

    fn state_dim(&self) -> usize {
        self.spec.n_agents * self.spec.n_cues
    }

    fn episode_limit(&self) -> usize {
        Self::HORIZON
    }

    fn reset(&mut self, rng: &mut EnvRng) -> TimeStep {
        let cues: Vec<usize> = (0..self.spec.n_agents)
            .map(|_| rng.gen_range(0..self.spec.n_cues))
            .collect();
        self.reset_with(&cues)
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepOutcome> {
        check_actions(actions, &self.timestep().available, self.done)?;
        self.t += 1;
        if self.t < Self::HORIZON {
            return Ok(StepOutcome {
                reward: 0.0,
                terminal: false,
                success: None,
                next: self.timestep(),
            });
        }
        self.done = true;
        let correct = actions
            .iter()
            .enumerate()
            .all(|(i, &a)| a == self.spec.target(&self.cues, i));
        Ok(StepOutcome {
            reward: if correct { 1.0 } else { 0.0 },
            terminal: true,
            success: Some(correct),
            next: self.timestep(),
        })
    }
}

/// Centralized view of the task: a joint policy that sees every cue, which
/// is what unrestricted communication makes possible.
impl EnumerableModel for CuePassingSpec {
    type State = (usize, Vec<usize>);

    fn n_agents(&self) -> usize {
        self.n_agents
    }

    fn n_actions(&self) -> usize {
        self.n_cues
    }

    fn initial(&self) -> Vec<(f64, Self::State)> {
        let total = self.n_cues.pow(self.n_agents as u32);
        let p = 1.0 / total as f64;
        (0..total).map(|code| (p, (0, decode(code, self)))).collect()
    }

    fn transitions(&self, (t, cues): &Self::State, joint: &[usize]) -> Vec<Transition<Self::State>> {
        if *t + 1 < CuePassing::HORIZON {
            return vec![Transition {
                prob: 1.0,
                reward: 0.0,
                next: Some((t + 1, cues.clone())),
            }];
        }
        let correct = joint.iter().enumerate().all(|(i, &a)| a == self.target(cues, i));
        vec![Transition {
            prob: 1.0,
            reward: if correct { 1.0 } else { 0.0 },
            next: None,
        }]
    }
}

fn decode(mut code: usize, spec: &CuePassingSpec) -> Vec<usize> {
    (0..spec.n_agents)
        .map(|_| {
            let c = code % spec.n_cues;
            code /= spec.n_cues;
            c
        })
        .collect()
}

/// Best expected return of policies that act on local observations only,
/// by enumerating every deterministic map from own cue to final answer.
///
/// First-step actions are invisible to teammates and unrewarded, so only the
/// final-step maps matter.
pub fn blind_optimum(spec: &CuePassingSpec) -> Result<f64> {
    let (n, m) = (spec.n_agents, spec.n_cues);
    let per_agent = m.checked_pow(m as u32);
    let combos = per_agent.and_then(|p| p.checked_pow(n as u32));
    let episodes = m.checked_pow(n as u32);
    let work = combos
        .zip(episodes)
        .and_then(|(c, e)| c.checked_mul(e))
        .unwrap_or(usize::MAX);
    const LIMIT: usize = 50_000_000;
    if work > LIMIT {
        return Err(Error::Capacity { pairs: work, limit: LIMIT });
    }
    let (per_agent, combos, episodes) = (per_agent.unwrap(), combos.unwrap(), episodes.unwrap());
    let cue_sets: Vec<Vec<usize>> = (0..episodes).map(|c| decode(c, spec)).collect();
    let mut best = 0usize;
    for combo in 0..combos {
        // policies[i][cue] = answer
        let mut rest = combo;
        let policies: Vec<Vec<usize>> = (0..n)
            .map(|_| {
                let mut code = rest % per_agent;
                rest /= per_agent;
                (0..m)
                    .map(|_| {
                        let a = code % m;
                        code /= m;
                        a
                    })
                    .collect()
            })
            .collect();
        let wins = cue_sets
            .iter()
            .filter(|cues| (0..n).all(|i| policies[i][cues[i]] == spec.target(cues, i)))
            .count();
        best = best.max(wins);
    }
    Ok(best as f64 / episodes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::value_iteration;
    use rand::SeedableRng;

    fn env(n: usize, m: usize) -> CuePassing {
        CuePassing::new(CuePassingSpec {
            n_agents: n,
            n_cues: m,
        })
        .unwrap()
    }

    #[test]
    fn correct_relay_scores_one() {
        let mut e = env(3, 3);
        e.reset_with(&[2, 0, 1]);
        assert_eq!(e.step(&[0, 0, 0]).unwrap().reward, 0.0);
        let out = e.step(&[1, 2, 0]).unwrap();
        assert_eq!(out.reward, 1.0);
        assert!(out.terminal);
        assert_eq!(out.success, Some(true));
    }

    #[test]
    fn any_wrong_answer_scores_zero() {
        for wrong in 0..3 {
            let mut e = env(3, 3);
            e.reset_with(&[2, 0, 1]);
            e.step(&[0, 0, 0]).unwrap();
            let mut acts = vec![1, 2, 0];
            acts[wrong] = (acts[wrong] + 1) % 3;
            assert_eq!(e.step(&acts).unwrap().reward, 0.0);
        }
    }

    #[test]
    fn observations_keep_cues_private() {
        let mut e = env(3, 4);
        let ts = e.reset_with(&[3, 1, 0]);
        assert_eq!(ts.observations[0], vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        assert_eq!(ts.observations[1], vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(ts.state.len(), 12);
    }

    #[test]
    fn stepping_after_terminal_is_usage_error() {
        let mut e = env(2, 2);
        e.reset_with(&[0, 1]);
        e.step(&[0, 0]).unwrap();
        e.step(&[0, 0]).unwrap();
        assert!(matches!(e.step(&[0, 0]), Err(Error::Usage(_))));
        assert!(matches!(env(2, 2).step(&[0, 0]), Err(Error::Usage(_))));
    }

    #[test]
    fn deterministic_given_seed() {
        let run = |seed| {
            let mut e = env(3, 3);
            let mut rng = EnvRng::seed_from_u64(seed);
            e.reset(&mut rng);
            e.cues.clone()
        };
        assert_eq!(run(11), run(11));
    }

    #[test]
    fn blind_optimum_values() {
        let b = blind_optimum(&CuePassingSpec { n_agents: 3, n_cues: 3 }).unwrap();
        // echoing one's own cue wins exactly when all cues agree
        assert!((b - 1.0 / 9.0).abs() < 1e-15);
        let b = blind_optimum(&CuePassingSpec { n_agents: 2, n_cues: 2 }).unwrap();
        assert_eq!(b, 0.5);
        let b = blind_optimum(&CuePassingSpec { n_agents: 4, n_cues: 1 }).unwrap();
        assert_eq!(b, 1.0);
    }

    #[test]
    fn communication_gap() {
        for (n, m) in [(2, 2), (3, 2), (2, 3), (3, 3)] {
            let spec = CuePassingSpec { n_agents: n, n_cues: m };
            let full = value_iteration(&spec, 1.0).unwrap().value;
            assert!((full - 1.0).abs() < 1e-12);
            assert!(blind_optimum(&spec).unwrap() < full);
        }
    }
}
