//! Seedable desk-scale environments and their exact tabular exports.
//!
//! * `chain`: states `0..length`, actions left/right, start at 0, goal at the
//!   right end. Entering the goal pays +1 and terminates; every other step
//!   costs `step_cost`.
//! * `gridworld`: `width x height` cells, actions up/down/right/left, start in
//!   the top-left corner, goal in the bottom-right corner. Bumping a wall
//!   leaves the agent in place at the usual step cost. With probability
//!   `slip` the chosen action is replaced by a uniformly random one.
//! * `point_mass`: `x' = x + 0.1 * clamp(a, -1, 1)`, reward `-|x' - goal|^2`,
//!   start uniform in `[-1, 1]^d`.
//!
//! Discrete environments observe one-hot vectors. Every episode is cut at
//! `horizon` steps; such cuts are flagged `truncated`, distinct from true
//! terminals.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Action, PolicyHead};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvSpec {
    Chain {
        #[serde(default = "default_chain_length")]
        length: usize,
        #[serde(default = "default_step_cost")]
        step_cost: f64,
        #[serde(default = "default_chain_horizon")]
        horizon: usize,
    },
    Gridworld {
        #[serde(default = "default_grid_side")]
        width: usize,
        #[serde(default = "default_grid_side")]
        height: usize,
        #[serde(default = "default_step_cost")]
        step_cost: f64,
        #[serde(default)]
        slip: f64,
        #[serde(default = "default_grid_horizon")]
        horizon: usize,
    },
    PointMass {
        #[serde(default = "default_point_dim")]
        dim: usize,
        #[serde(default = "default_point_horizon")]
        horizon: usize,
    },
}

fn default_chain_length() -> usize {
    5
}
fn default_step_cost() -> f64 {
    0.01
}
fn default_chain_horizon() -> usize {
    20
}
fn default_grid_side() -> usize {
    4
}
fn default_grid_horizon() -> usize {
    50
}
fn default_point_dim() -> usize {
    2
}
fn default_point_horizon() -> usize {
    64
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec::chain(5)
    }
}

impl EnvSpec {
    pub fn chain(length: usize) -> Self {
        EnvSpec::Chain {
            length,
            step_cost: default_step_cost(),
            horizon: default_chain_horizon(),
        }
    }

    pub fn gridworld(width: usize, height: usize) -> Self {
        EnvSpec::Gridworld {
            width,
            height,
            step_cost: default_step_cost(),
            slip: 0.0,
            horizon: default_grid_horizon(),
        }
    }

    pub fn point_mass(dim: usize) -> Self {
        EnvSpec::PointMass {
            dim,
            horizon: default_point_horizon(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        match *self {
            EnvSpec::Chain { length, step_cost, horizon } => {
                if length < 2 {
                    return bad("env.length must be at least 2");
                }
                if !step_cost.is_finite() {
                    return bad("env.step_cost must be finite");
                }
                if horizon == 0 {
                    return bad("env.horizon must be positive");
                }
            }
            EnvSpec::Gridworld { width, height, step_cost, slip, horizon } => {
                if width * height < 2 {
                    return bad("env.width * env.height must be at least 2");
                }
                if !step_cost.is_finite() {
                    return bad("env.step_cost must be finite");
                }
                if !(0.0..=1.0).contains(&slip) {
                    return bad("env.slip must lie in [0, 1]");
                }
                if horizon == 0 {
                    return bad("env.horizon must be positive");
                }
            }
            EnvSpec::PointMass { dim, horizon } => {
                if dim == 0 {
                    return bad("env.dim must be positive");
                }
                if horizon == 0 {
                    return bad("env.horizon must be positive");
                }
            }
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Env> {
        self.validate()?;
        Ok(Env { spec: self.clone() })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Position {
    Cell(usize),
    Point(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub observation: Vec<f64>,
    pub terminal: bool,
    pub truncated: bool,
    pub step_index: usize,
    position: Position,
}

impl EnvState {
    pub fn done(&self) -> bool {
        self.terminal || self.truncated
    }

    /// Discrete state index, for finite environments.
    pub fn cell(&self) -> Option<usize> {
        match self.position {
            Position::Cell(s) => Some(s),
            Position::Point(_) => None,
        }
    }
}

/// Explicit finite MDP: `transitions[s][a][s']`, `rewards[s][a]`, `initial[s]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMDP {
    pub transitions: Vec<Vec<Vec<f64>>>,
    pub rewards: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
    pub gamma: f64,
}

impl TabularMDP {
    pub fn n_states(&self) -> usize {
        self.initial.len()
    }

    pub fn n_actions(&self) -> usize {
        self.rewards.first().map_or(0, |r| r.len())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_states();
        if n == 0 || self.n_actions() == 0 {
            return Err(Error::Input("MDP needs states and actions".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Input(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if (self.initial.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Input("initial distribution does not sum to 1".into()));
        }
        if self.transitions.len() != n || self.rewards.len() != n {
            return Err(Error::Input("transition/reward tables have the wrong state count".into()));
        }
        for (s, rows) in self.transitions.iter().enumerate() {
            if rows.len() != self.n_actions() || self.rewards[s].len() != self.n_actions() {
                return Err(Error::Input(format!("state {s} has the wrong action count")));
            }
            for (a, row) in rows.iter().enumerate() {
                if row.len() != n || row.iter().any(|p| *p < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                    return Err(Error::Input(format!("P[{s}][{a}] is not a distribution")));
                }
            }
        }
        Ok(())
    }
}

/// A built environment.
#[derive(Debug, Clone, PartialEq)]
pub struct Env {
    spec: EnvSpec,
}

const GRID_MOVES: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, 1), (0, -1)];

impl Env {
    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn obs_dim(&self) -> usize {
        match self.spec {
            EnvSpec::Chain { length, .. } => length,
            EnvSpec::Gridworld { width, height, .. } => width * height,
            EnvSpec::PointMass { dim, .. } => dim,
        }
    }

    /// Head shape a policy for this environment needs.
    pub fn action_head(&self) -> PolicyHead {
        match self.spec {
            EnvSpec::Chain { .. } => PolicyHead::Categorical { n_actions: 2 },
            EnvSpec::Gridworld { .. } => PolicyHead::Categorical { n_actions: 4 },
            EnvSpec::PointMass { dim, .. } => PolicyHead::Gaussian { action_dim: dim },
        }
    }

    pub fn horizon(&self) -> usize {
        match self.spec {
            EnvSpec::Chain { horizon, .. }
            | EnvSpec::Gridworld { horizon, .. }
            | EnvSpec::PointMass { horizon, .. } => horizon,
        }
    }

    fn n_cells(&self) -> Option<usize> {
        match self.spec {
            EnvSpec::PointMass { .. } => None,
            _ => Some(self.obs_dim()),
        }
    }

    fn goal_cell(&self) -> usize {
        self.obs_dim() - 1
    }

    fn one_hot(&self, cell: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.obs_dim()];
        v[cell] = 1.0;
        v
    }

    fn state_at(&self, position: Position, step_index: usize, terminal: bool) -> EnvState {
        let observation = match &position {
            Position::Cell(c) => self.one_hot(*c),
            Position::Point(x) => x.clone(),
        };
        EnvState {
            observation,
            terminal,
            truncated: !terminal && step_index >= self.horizon(),
            step_index,
            position,
        }
    }

    /// Observation of a discrete state index.
    pub fn observation_of(&self, cell: usize) -> Result<Vec<f64>> {
        match self.n_cells() {
            Some(n) if cell < n => Ok(self.one_hot(cell)),
            Some(n) => Err(Error::Input(format!("state {cell} out of range for {n} states"))),
            None => Err(Error::Unsupported("continuous environment has no state indices".into())),
        }
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> EnvState {
        let position = match self.spec {
            EnvSpec::Chain { .. } | EnvSpec::Gridworld { .. } => Position::Cell(0),
            EnvSpec::PointMass { dim, .. } => Position::Point((0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect()),
        };
        self.state_at(position, 0, false)
    }

    /// Deterministic part of a discrete move: successor cell and reward.
    fn cell_move(&self, cell: usize, action: usize) -> (usize, f64) {
        match self.spec {
            EnvSpec::Chain { length, step_cost, .. } => {
                let next = if action == 1 { (cell + 1).min(length - 1) } else { cell.saturating_sub(1) };
                let reward = if next == length - 1 { 1.0 } else { -step_cost };
                (next, reward)
            }
            EnvSpec::Gridworld { width, height, step_cost, .. } => {
                let (row, col) = ((cell / width) as isize, (cell % width) as isize);
                let (dr, dc) = GRID_MOVES[action];
                let (r, c) = (row + dr, col + dc);
                let next = if r < 0 || c < 0 || r >= height as isize || c >= width as isize {
                    cell
                } else {
                    r as usize * width + c as usize
                };
                let reward = if next == self.goal_cell() { 1.0 } else { -step_cost };
                (next, reward)
            }
            EnvSpec::PointMass { .. } => unreachable!("continuous environment"),
        }
    }

    pub fn step<R: Rng + ?Sized>(&self, state: &EnvState, action: &Action, rng: &mut R) -> Result<(EnvState, f64)> {
        if state.done() {
            return Err(Error::State("step called on a finished episode".into()));
        }
        let next_index = state.step_index + 1;
        match (&state.position, action, &self.spec) {
            (Position::Cell(cell), Action::Discrete(a), EnvSpec::Chain { .. }) if *a < 2 => {
                let (next, reward) = self.cell_move(*cell, *a);
                Ok((self.state_at(Position::Cell(next), next_index, next == self.goal_cell()), reward))
            }
            (Position::Cell(cell), Action::Discrete(a), EnvSpec::Gridworld { slip, .. }) if *a < 4 => {
                let mut chosen = *a;
                if *slip > 0.0 && rng.random::<f64>() < *slip {
                    chosen = rng.random_range(0..4);
                }
                let (next, reward) = self.cell_move(*cell, chosen);
                Ok((self.state_at(Position::Cell(next), next_index, next == self.goal_cell()), reward))
            }
            (Position::Point(x), Action::Continuous(a), EnvSpec::PointMass { .. }) if a.len() == x.len() => {
                if a.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Input("non-finite action".into()));
                }
                let next: Vec<f64> = x.iter().zip(a).map(|(x, a)| x + 0.1 * a.clamp(-1.0, 1.0)).collect();
                let reward = -next.iter().map(|v| v * v).sum::<f64>();
                Ok((self.state_at(Position::Point(next), next_index, false), reward))
            }
            _ => Err(Error::Input(format!("invalid action {action:?} for this environment"))),
        }
    }

    /// Exact tabular model matching [`step`](Self::step). The goal is an
    /// absorbing zero-reward state.
    pub fn export_tabular(&self, gamma: f64) -> Result<TabularMDP> {
        let n = self
            .n_cells()
            .ok_or_else(|| Error::Unsupported("continuous environments have no tabular export".into()))?;
        let n_actions = match self.action_head() {
            PolicyHead::Categorical { n_actions } => n_actions,
            PolicyHead::Gaussian { .. } => unreachable!(),
        };
        let slip = match self.spec {
            EnvSpec::Gridworld { slip, .. } => slip,
            _ => 0.0,
        };
        let goal = self.goal_cell();
        let mut transitions = vec![vec![vec![0.0; n]; n_actions]; n];
        let mut rewards = vec![vec![0.0; n_actions]; n];
        for s in 0..n {
            for a in 0..n_actions {
                if s == goal {
                    transitions[s][a][s] = 1.0;
                    continue;
                }
                for b in 0..n_actions {
                    let p = if b == a { 1.0 - slip } else { 0.0 } + slip / n_actions as f64;
                    if p == 0.0 {
                        continue;
                    }
                    let (next, reward) = self.cell_move(s, b);
                    transitions[s][a][next] += p;
                    rewards[s][a] += p * reward;
                }
            }
        }
        let mut initial = vec![0.0; n];
        initial[0] = 1.0;
        let mdp = TabularMDP {
            transitions,
            rewards,
            initial,
            gamma,
        };
        mdp.validate()?;
        Ok(mdp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    fn walk(env: &Env, actions: &[usize]) -> (EnvState, Vec<f64>) {
        let mut r = rng();
        let mut s = env.reset(&mut r);
        let mut rewards = vec![];
        for a in actions {
            let (n, rew) = env.step(&s, &Action::Discrete(*a), &mut r).unwrap();
            s = n;
            rewards.push(rew);
        }
        (s, rewards)
    }

    #[test]
    fn chain_resets_to_zero_and_pays_at_goal() {
        let env = EnvSpec::chain(5).build().unwrap();
        let s = env.reset(&mut rng());
        assert_eq!(s.cell(), Some(0));
        assert_eq!(s.observation, vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        let (s, rewards) = walk(&env, &[1, 1, 1]);
        assert_eq!(s.cell(), Some(3));
        let (next, reward) = env.step(&s, &Action::Discrete(1), &mut rng()).unwrap();
        assert_eq!(next.cell(), Some(4));
        assert!(next.terminal);
        assert_eq!(reward, 1.0);
        assert_eq!(rewards, vec![-0.01; 3]);
        assert!(matches!(env.step(&next, &Action::Discrete(0), &mut rng()), Err(Error::State(_))));
    }

    #[test]
    fn gridworld_wall_bump_stays_put() {
        let env = EnvSpec::gridworld(4, 4).build().unwrap();
        let s0 = env.reset(&mut rng());
        assert_eq!(s0, env.reset(&mut ChaCha8Rng::seed_from_u64(77)));
        let (s, rewards) = walk(&env, &[0]);
        assert_eq!(s.cell(), Some(0));
        assert_eq!(rewards, vec![-0.01]);
        let (s, _) = walk(&env, &[1, 1, 1, 2, 2]);
        assert_eq!(s.cell(), Some(14));
        let (s, rewards) = walk(&env, &[1, 1, 1, 2, 2, 2]);
        assert!(s.terminal && s.cell() == Some(15));
        assert_eq!(*rewards.last().unwrap(), 1.0);
    }

    #[test]
    fn horizon_truncates_without_terminal() {
        let env = EnvSpec::Chain { length: 5, step_cost: 0.01, horizon: 3 }.build().unwrap();
        let (s, _) = walk(&env, &[0, 0, 0]);
        assert!(s.truncated && !s.terminal);
    }

    #[test]
    fn point_mass_dynamics() {
        let env = EnvSpec::point_mass(2).build().unwrap();
        let s = env.reset(&mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(s, env.reset(&mut ChaCha8Rng::seed_from_u64(5)));
        let (n, r) = env.step(&s, &Action::Continuous(vec![0.0, 0.0]), &mut rng()).unwrap();
        assert_eq!(n.observation, s.observation);
        let d2: f64 = s.observation.iter().map(|v| v * v).sum();
        assert!((r + d2).abs() < 1e-15);
        let (n, _) = env.step(&s, &Action::Continuous(vec![5.0, -0.5]), &mut rng()).unwrap();
        assert!((n.observation[0] - (s.observation[0] + 0.1)).abs() < 1e-15);
        assert!((n.observation[1] - (s.observation[1] - 0.05)).abs() < 1e-15);
        assert!(matches!(env.export_tabular(0.9), Err(Error::Unsupported(_))));
    }

    #[test]
    fn chain_export_is_deterministic() {
        let env = EnvSpec::chain(5).build().unwrap();
        let mdp = env.export_tabular(0.9).unwrap();
        assert_eq!(mdp.n_states(), 5);
        for s in 0..5 {
            for a in 0..2 {
                assert_eq!(mdp.transitions[s][a].iter().filter(|p| **p == 1.0).count(), 1);
            }
        }
        assert_eq!(mdp.transitions[3][1][4], 1.0);
        assert_eq!(mdp.rewards[3][1], 1.0);
    }

    #[test]
    fn slippery_gridworld_sampling_matches_export() {
        let spec = EnvSpec::Gridworld { width: 4, height: 4, step_cost: 0.01, slip: 0.3, horizon: 1000 };
        let env = spec.build().unwrap();
        let mdp = env.export_tabular(0.9).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(123);
        let n = 100_000;
        // state 5 is interior; state 0 exercises wall bumps
        for (cell, action) in [(5usize, 2usize), (0, 0)] {
            let start = env.state_at(Position::Cell(cell), 0, false);
            let mut counts = vec![0usize; 16];
            let mut reward_sum = 0.0;
            for _ in 0..n {
                let (next, reward) = env.step(&start, &Action::Discrete(action), &mut r).unwrap();
                counts[next.cell().unwrap()] += 1;
                reward_sum += reward;
            }
            for (s_next, c) in counts.iter().enumerate() {
                let p = mdp.transitions[cell][action][s_next];
                let sigma = (n as f64 * p * (1.0 - p)).sqrt();
                assert!((*c as f64 - n as f64 * p).abs() <= 3.0 * sigma + 1e-9, "P[{cell}][{action}][{s_next}]");
            }
            assert!((reward_sum / n as f64 - mdp.rewards[cell][action]).abs() < 1e-2);
        }
    }
}
