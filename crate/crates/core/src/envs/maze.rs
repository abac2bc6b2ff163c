use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layout::{Cell, MazeLayout, COLS, NUM_CELLS, ROWS};
use super::render::{ObsKey, Renderer};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::contract(format!("action index {i} outside 0..4")))
    }

    pub fn index(self) -> usize {
        self as usize
    }

    fn apply(self, c: Cell) -> Option<Cell> {
        let (r, col) = (c.row, c.col);
        match self {
            Action::Up if r > 0 => Some(Cell::new(r - 1, col)),
            Action::Down if r + 1 < ROWS => Some(Cell::new(r + 1, col)),
            Action::Left if col > 0 => Some(Cell::new(r, col - 1)),
            Action::Right if col + 1 < COLS => Some(Cell::new(r, col + 1)),
            _ => None,
        }
    }
}

/// The cell the evaluation goal sits on.
pub const CENTER: Cell = Cell::new(ROWS / 2, COLS / 2);

/// How each episode picks its goal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GoalRule {
    /// Reward-free: no goal, episodes end only at the horizon.
    None,
    Fixed(Cell),
    /// Uniform over a finite set of training goals.
    OneOf(Vec<Cell>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MazeState {
    pub agent: Cell,
    pub goal: Option<Cell>,
    pub steps: u32,
    pub noise_seed: u64,
}

impl MazeState {
    pub fn key(&self) -> ObsKey {
        ObsKey {
            agent: self.agent,
            goal: self.goal,
            step: self.steps,
            noise_seed: self.noise_seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    /// Reached the goal.
    pub terminated: bool,
    /// Hit the horizon without reaching the goal.
    pub truncated: bool,
}

impl StepOutcome {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

/// One maze episode at a time.
#[derive(Clone, Debug)]
pub struct MazeEnv {
    pub layout: MazeLayout,
    pub goals: GoalRule,
    pub horizon: u32,
    pub renderer: Renderer,
    state: Option<MazeState>,
    finished: bool,
}

impl MazeEnv {
    pub fn new(layout: MazeLayout, goals: GoalRule, horizon: u32, renderer: Renderer) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::config("horizon must be positive"));
        }
        if let GoalRule::OneOf(set) = &goals {
            if set.is_empty() {
                return Err(Error::config("goal set is empty"));
            }
        }
        Ok(Self {
            layout,
            goals,
            horizon,
            renderer,
            state: None,
            finished: true,
        })
    }

    pub fn state(&self) -> Option<&MazeState> {
        self.state.as_ref()
    }

    pub fn is_done(&self) -> bool {
        self.finished
    }

    /// New episode: goal from the rule, agent uniform over cells other than
    /// the goal, fresh noise seed.
    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> MazeState {
        let goal = match &self.goals {
            GoalRule::None => None,
            GoalRule::Fixed(c) => Some(*c),
            GoalRule::OneOf(set) => Some(set[rng.random_range(0..set.len())]),
        };
        let free = NUM_CELLS - goal.is_some() as usize;
        let mut i = rng.random_range(0..free);
        if let Some(g) = goal {
            if i >= g.index() {
                i += 1;
            }
        }
        let noise_seed = rng.random::<u64>();
        self.start(Cell::from_index(i), goal, noise_seed)
    }

    /// Episode from a chosen start cell (evaluation).
    pub fn reset_to(&mut self, agent: Cell, goal: Option<Cell>, noise_seed: u64) -> MazeState {
        self.start(agent, goal, noise_seed)
    }

    /// Puts back a saved mid-episode state (checkpoint resume).
    pub fn restore(&mut self, state: MazeState) {
        self.finished = state.steps >= self.horizon || state.goal == Some(state.agent);
        self.state = Some(state);
    }

    fn start(&mut self, agent: Cell, goal: Option<Cell>, noise_seed: u64) -> MazeState {
        let s = MazeState {
            agent,
            goal,
            steps: 0,
            noise_seed,
        };
        self.state = Some(s);
        self.finished = false;
        s
    }

    /// Moves one cell unless a wall or the boundary blocks the way.
    /// Reward is −1, or 0 with termination when the goal is entered.
    pub fn step(&mut self, action: Action) -> Result<(MazeState, StepOutcome)> {
        if self.finished {
            return Err(Error::contract("step after the episode ended; call reset"));
        }
        let mut s = self.state.expect("running episode has a state");
        if let Some(next) = action.apply(s.agent) {
            if !self.layout.blocked(s.agent, next) {
                s.agent = next;
            }
        }
        s.steps += 1;
        let terminated = s.goal == Some(s.agent);
        let truncated = !terminated && s.steps >= self.horizon;
        let out = StepOutcome {
            reward: if terminated { 0.0 } else { -1.0 },
            terminated,
            truncated,
        };
        self.state = Some(s);
        self.finished = out.done();
        Ok((s, out))
    }

    pub fn observe(&self) -> Vec<f32> {
        let s = self.state.expect("observe needs a running episode");
        self.renderer.render(&self.layout, &s.key())
    }

    pub fn obs_dim(&self) -> usize {
        self.renderer.dim()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::layout::{GridWorld, LayoutGenerator, SpiralWorld};
    use crate::envs::render::{NoiseMode, ObsMode};
    use rand::SeedableRng;

    fn env(layout: MazeLayout, goals: GoalRule) -> MazeEnv {
        MazeEnv::new(layout, goals, 200, Renderer { mode: ObsMode::Onehot, noise: NoiseMode::Off }).unwrap()
    }

    #[test]
    fn grid_move_right() {
        let mut e = env(GridWorld.generate().unwrap(), GoalRule::Fixed(CENTER));
        e.reset_to(Cell::new(0, 0), Some(CENTER), 0);
        let (s, out) = e.step(Action::Right).unwrap();
        assert_eq!(s.agent, Cell::new(0, 1));
        assert_eq!(out, StepOutcome { reward: -1.0, terminated: false, truncated: false });
    }

    #[test]
    fn entering_goal_terminates_with_zero() {
        let mut e = env(GridWorld.generate().unwrap(), GoalRule::Fixed(CENTER));
        e.reset_to(Cell::new(3, 2), Some(CENTER), 0);
        let (_, out) = e.step(Action::Right).unwrap();
        assert_eq!(out.reward, 0.0);
        assert!(out.terminated && !out.truncated);
        assert!(matches!(e.step(Action::Left), Err(Error::Contract(_))));
    }

    #[test]
    fn spiral_wall_blocks() {
        let mut e = env(SpiralWorld.generate().unwrap(), GoalRule::None);
        // (0,0) -> (1,0) crosses the outer corridor's inner wall.
        e.reset_to(Cell::new(0, 0), None, 0);
        let (s, out) = e.step(Action::Down).unwrap();
        assert_eq!(s.agent, Cell::new(0, 0));
        assert_eq!(out.reward, -1.0);
    }

    #[test]
    fn horizon_truncates() {
        let mut e = MazeEnv::new(
            GridWorld.generate().unwrap(),
            GoalRule::None,
            3,
            Renderer { mode: ObsMode::Onehot, noise: NoiseMode::Off },
        )
        .unwrap();
        e.reset_to(Cell::new(0, 0), None, 0);
        for i in 0..3 {
            let (_, out) = e.step(Action::Up).unwrap();
            assert_eq!(out.truncated, i == 2);
            assert!(!out.terminated);
        }
    }

    #[test]
    fn resets_are_reproducible_and_avoid_goal() {
        let mut e = env(GridWorld.generate().unwrap(), GoalRule::Fixed(CENTER));
        let mut a = crate::SeedRng::seed_from_u64(7);
        let mut b = crate::SeedRng::seed_from_u64(7);
        for _ in 0..200 {
            let sa = e.reset(&mut a);
            let sb = e.reset(&mut b);
            assert_eq!(sa, sb);
            assert_ne!(sa.agent, CENTER);
            assert_eq!(sa.goal, Some(CENTER));
        }
    }

    #[test]
    fn start_cells_are_uniform() {
        // χ² goodness of fit over the 35 non-goal cells, 10⁴ resets.
        let mut e = env(GridWorld.generate().unwrap(), GoalRule::Fixed(CENTER));
        let mut rng = crate::SeedRng::seed_from_u64(123);
        let mut counts = [0usize; NUM_CELLS];
        let n = 10_000;
        for _ in 0..n {
            counts[e.reset(&mut rng).agent.index()] += 1;
        }
        assert_eq!(counts[CENTER.index()], 0);
        let expected = n as f64 / 35.0;
        let chi2: f64 = counts
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != CENTER.index())
            .map(|(_, &c)| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 99th percentile of χ² with 34 degrees of freedom.
        assert!(chi2 < 56.06, "chi2 = {chi2}");
    }

    #[test]
    fn noise_never_changes_dynamics() {
        let layout = SpiralWorld.generate().unwrap();
        let mut clean = env(layout.clone(), GoalRule::Fixed(CENTER));
        let mut noisy = MazeEnv::new(layout, GoalRule::Fixed(CENTER), 200, Renderer { mode: ObsMode::Onehot, noise: NoiseMode::Video }).unwrap();
        let mut r1 = crate::SeedRng::seed_from_u64(1);
        let mut r2 = crate::SeedRng::seed_from_u64(1);
        let mut acts = crate::SeedRng::seed_from_u64(2);
        clean.reset(&mut r1);
        noisy.reset(&mut r2);
        for _ in 0..150 {
            if clean.is_done() {
                break;
            }
            let a = Action::ALL[acts.random_range(0..4)];
            let (sa, oa) = clean.step(a).unwrap();
            let (sb, ob) = noisy.step(a).unwrap();
            assert_eq!((sa, oa), (sb, ob));
        }
    }
}
