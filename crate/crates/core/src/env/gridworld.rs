//! The frustration gridworld.
//!
//! An expert walks a small grid under one of several target-seeking
//! intentions. A hidden frustration counter grows with every attempted move
//! into a barrier or off the grid; after each such encounter the expert
//! abandons its current intention with probability `min(slope · c, cap)`,
//! and the counter resets. Because the switching hazard depends on the
//! whole encounter history, intention changes are not Markov in `(s, a)`.
//!
//! Cells are `(x, y)` with `x` the column and `y` the row; state id is
//! `y * width + x`. `Up` increases `y`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{Trajectory, TrajectoryDataset};
use crate::mdp::{
    boltzmann_policy, solve_q, PolicyTable, QTable, RewardTable, TabularMdp, DEFAULT_Q_MAX_ITERS,
    DEFAULT_Q_TOL,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
    Stay = 4,
}

impl Action {
    pub const ALL: [Action; 5] = [
        Action::Up,
        Action::Down,
        Action::Left,
        Action::Right,
        Action::Stay,
    ];

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Up => "up",
            Action::Down => "down",
            Action::Left => "left",
            Action::Right => "right",
            Action::Stay => "stay",
        }
    }

    /// Action that mirrors this one under a 180° rotation of the grid.
    pub fn rotated(self) -> Action {
        match self {
            Action::Up => Action::Down,
            Action::Down => Action::Up,
            Action::Left => Action::Right,
            Action::Right => Action::Left,
            Action::Stay => Action::Stay,
        }
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (0, 1),
            Action::Down => (0, -1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
            Action::Stay => (0, 0),
        }
    }

    fn laterals(self) -> [Action; 2] {
        match self {
            Action::Up | Action::Down => [Action::Left, Action::Right],
            Action::Left | Action::Right => [Action::Up, Action::Down],
            Action::Stay => [Action::Stay, Action::Stay],
        }
    }
}

/// Where the failure mass of a move goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlipModel {
    /// The agent stays in place.
    Stay,
    /// Split evenly between the two perpendicular moves.
    Lateral,
}

pub type Cell = (usize, usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrustrationGridworld {
    pub width: usize,
    pub height: usize,
    pub success_prob: f64,
    pub slip: SlipModel,
    pub barrier_cells: Vec<Cell>,
    /// One target cell per intention; the first is active at the start.
    pub targets: Vec<Cell>,
    pub switch_slope: f64,
    pub switch_cap: f64,
    /// Whether attempted moves off the grid count as barrier encounters.
    pub edges_frustrate: bool,
    pub discount: f64,
    pub horizon: usize,
}

impl Default for FrustrationGridworld {
    fn default() -> Self {
        Self {
            width: 5,
            height: 5,
            success_prob: 0.9,
            slip: SlipModel::Stay,
            barrier_cells: vec![(2, 1), (2, 2), (2, 3)],
            targets: vec![(4, 4), (0, 0)],
            switch_slope: 0.15,
            switch_cap: 0.9,
            edges_frustrate: true,
            discount: 0.97,
            horizon: 40,
        }
    }
}

/// Ground-truth reward and Boltzmann policy of one expert intention.
#[derive(Debug, Clone)]
pub struct ExpertIntention {
    pub target: Cell,
    pub reward: RewardTable,
    pub q: QTable,
    pub policy: PolicyTable,
}

/// Per-counter tallies of barrier encounters and the switches they caused.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SwitchLog {
    /// `encounters[c]`: encounters after which the counter read `c`.
    pub encounters: Vec<u64>,
    pub switches: Vec<u64>,
}

impl SwitchLog {
    fn record(&mut self, counter: usize, switched: bool) {
        if self.encounters.len() <= counter {
            self.encounters.resize(counter + 1, 0);
            self.switches.resize(counter + 1, 0);
        }
        self.encounters[counter] += 1;
        if switched {
            self.switches[counter] += 1;
        }
    }

    pub fn total_encounters(&self) -> u64 {
        self.encounters.iter().sum()
    }
}

impl FrustrationGridworld {
    /// Three-target variant used for intention-count sweeps: goal corner,
    /// origin and the bottom-right corner, visited cyclically on frustration.
    pub fn three_targets() -> Self {
        Self {
            targets: vec![(4, 4), (0, 0), (4, 0)],
            ..Self::default()
        }
    }

    pub fn num_states(&self) -> usize {
        self.width * self.height
    }

    pub fn num_actions(&self) -> usize {
        Action::ALL.len()
    }

    #[inline]
    pub fn state_of(&self, (x, y): Cell) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn cell_of(&self, s: usize) -> Cell {
        (s % self.width, s / self.width)
    }

    pub fn rotate180(&self, (x, y): Cell) -> Cell {
        (self.width - 1 - x, self.height - 1 - y)
    }

    pub fn is_barrier(&self, cell: Cell) -> bool {
        self.barrier_cells.contains(&cell)
    }

    /// Intended destination of `a` from `cell`, or `None` if the move is
    /// blocked (off-grid or into a barrier).
    pub fn intended(&self, (x, y): Cell, a: Action) -> Option<Cell> {
        let (dx, dy) = a.delta();
        let nx = x as isize + dx;
        let ny = y as isize + dy;
        if nx < 0 || ny < 0 || nx >= self.width as isize || ny >= self.height as isize {
            return None;
        }
        let next = (nx as usize, ny as usize);
        (!self.is_barrier(next)).then_some(next)
    }

    /// A barrier encounter is an attempted move whose intended cell is a
    /// barrier, or off the grid when `edges_frustrate` is set.
    pub fn is_encounter(&self, (x, y): Cell, a: Action) -> bool {
        if a == Action::Stay {
            return false;
        }
        let (dx, dy) = a.delta();
        let nx = x as isize + dx;
        let ny = y as isize + dy;
        if nx < 0 || ny < 0 || nx >= self.width as isize || ny >= self.height as isize {
            return self.edges_frustrate;
        }
        self.is_barrier((nx as usize, ny as usize))
    }

    /// Most likely successor (the intended cell, or the same cell if blocked).
    pub fn mode_next(&self, s: usize, a: Action) -> usize {
        let cell = self.cell_of(s);
        self.state_of(self.intended(cell, a).unwrap_or(cell))
    }

    pub fn switch_probability(&self, counter: u32) -> f64 {
        (self.switch_slope * counter as f64).min(self.switch_cap)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.width == 0 || self.height == 0 {
            return bad("grid must be non-empty".into());
        }
        if !(self.success_prob > 0.0 && self.success_prob <= 1.0) {
            return bad(format!("success_prob {} not in (0, 1]", self.success_prob));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return bad(format!("discount {} not in [0, 1)", self.discount));
        }
        if self.switch_slope < 0.0 || !(0.0..=1.0).contains(&self.switch_cap) {
            return bad("switch slope must be >= 0 and cap in [0, 1]".into());
        }
        if self.targets.is_empty() {
            return bad("at least one target is required".into());
        }
        let in_grid = |&(x, y): &Cell| x < self.width && y < self.height;
        if !self.barrier_cells.iter().all(in_grid) || !self.targets.iter().all(in_grid) {
            return bad("cells must lie inside the grid".into());
        }
        if self.targets.iter().any(|t| self.is_barrier(*t)) {
            return bad("a target cell is a barrier".into());
        }
        if self.start_cells().is_empty() {
            return bad("the left column is fully blocked".into());
        }
        if self.horizon == 0 {
            return bad("horizon must be >= 1".into());
        }
        Ok(())
    }

    /// Start cells: the non-barrier cells of the left column.
    pub fn start_cells(&self) -> Vec<Cell> {
        (0..self.height)
            .map(|y| (0, y))
            .filter(|c| !self.is_barrier(*c))
            .collect()
    }

    pub fn build_mdp(&self) -> Result<TabularMdp> {
        self.validate()?;
        let (ns, na) = (self.num_states(), self.num_actions());
        let mut rows = Vec::with_capacity(ns * na);
        for s in 0..ns {
            let cell = self.cell_of(s);
            for &a in &Action::ALL {
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(3);
                let mut push = |t: usize, p: f64| {
                    if p == 0.0 {
                        return;
                    }
                    match row.iter_mut().find(|(u, _)| *u == t) {
                        Some((_, q)) => *q += p,
                        None => row.push((t, p)),
                    }
                };
                if a == Action::Stay {
                    push(s, 1.0);
                } else {
                    let fail = 1.0 - self.success_prob;
                    push(self.mode_next(s, a), self.success_prob);
                    match self.slip {
                        SlipModel::Stay => push(s, fail),
                        SlipModel::Lateral => {
                            for lat in a.laterals() {
                                let t = self.state_of(self.intended(cell, lat).unwrap_or(cell));
                                push(t, fail / 2.0);
                            }
                        }
                    }
                }
                rows.push(row);
            }
        }
        TabularMdp::from_sparse(ns, na, self.discount, rows, vec![0.0; ns * na])
    }

    /// Indicator reward `r(s, ·) = 1` iff `s` is the target cell.
    pub fn target_reward(&self, target: Cell) -> RewardTable {
        let mut r = RewardTable::zeros(self.num_states(), self.num_actions());
        let s = self.state_of(target);
        r.0.row_mut(s).iter_mut().for_each(|x| *x = 1.0);
        r
    }

    /// Ground-truth experts, one per target, with Boltzmann policies under the
    /// built MDP.
    pub fn expert_intentions(&self, mdp: &TabularMdp) -> Result<Vec<ExpertIntention>> {
        self.targets
            .iter()
            .map(|&target| {
                let reward = self.target_reward(target);
                let q = solve_q(mdp, &reward, DEFAULT_Q_TOL, DEFAULT_Q_MAX_ITERS)?;
                let policy = boltzmann_policy(&q);
                Ok(ExpertIntention {
                    target,
                    reward,
                    q,
                    policy,
                })
            })
            .collect()
    }

    /// `(π_goal, π_abandon, r_goal, r_abandon)` for the two-target layout.
    pub fn expert_policies(
        &self,
    ) -> Result<(PolicyTable, PolicyTable, RewardTable, RewardTable)> {
        if self.targets.len() != 2 {
            return Err(Error::InvalidConfig(
                "expert_policies needs exactly two targets".into(),
            ));
        }
        let mdp = self.build_mdp()?;
        let mut experts = self.expert_intentions(&mdp)?.into_iter();
        let goal = experts.next().expect("two experts");
        let abandon = experts.next().expect("two experts");
        Ok((goal.policy, abandon.policy, goal.reward, abandon.reward))
    }

    /// Samples `num_trajectories` trajectories of `horizon` steps.
    pub fn generate(
        &self,
        num_trajectories: usize,
        horizon: usize,
        seed: u64,
    ) -> Result<TrajectoryDataset> {
        self.generate_with_log(num_trajectories, horizon, seed)
            .map(|(d, _)| d)
    }

    /// As [`generate`](Self::generate), also returning per-counter switch tallies.
    ///
    /// Trajectory `i` draws from its own ChaCha stream `(seed, i)`, so output
    /// does not depend on generation order.
    pub fn generate_with_log(
        &self,
        num_trajectories: usize,
        horizon: usize,
        seed: u64,
    ) -> Result<(TrajectoryDataset, SwitchLog)> {
        if num_trajectories == 0 || horizon == 0 {
            return Err(Error::InvalidConfig(
                "need at least one trajectory of at least one step".into(),
            ));
        }
        let mdp = self.build_mdp()?;
        let experts = self.expert_intentions(&mdp)?;
        let starts = self.start_cells();
        let num_k = self.targets.len();
        let mut log = SwitchLog::default();
        let mut trajectories = Vec::with_capacity(num_trajectories);

        for idx in 0..num_trajectories {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(idx as u64);
            let mut s = self.state_of(starts[rng.random_range(0..starts.len())]);
            let mut intention = 0usize;
            let mut counter = 0u32;
            let mut t = Trajectory {
                states: Vec::with_capacity(horizon),
                actions: Vec::with_capacity(horizon),
                labels: Some(Vec::with_capacity(horizon)),
                counters: Some(Vec::with_capacity(horizon)),
            };
            for _ in 0..horizon {
                let a = sample_index(experts[intention].policy.row(s), &mut rng);
                t.states.push(s);
                t.actions.push(a);
                t.labels.as_mut().unwrap().push(intention);
                t.counters.as_mut().unwrap().push(counter);

                let action = Action::from_index(a).expect("gridworld action");
                let encounter = self.is_encounter(self.cell_of(s), action);
                s = sample_successor(&mdp, s, a, &mut rng);
                if encounter {
                    counter += 1;
                    let switched = rng.random::<f64>() < self.switch_probability(counter);
                    log.record(counter as usize, switched);
                    if switched {
                        intention = (intention + 1) % num_k;
                        counter = 0;
                    }
                }
            }
            trajectories.push(t);
        }
        let mut dataset =
            TrajectoryDataset::new(self.num_states(), self.num_actions(), trajectories);
        dataset.generator = format!("frustration-gridworld/{}", env!("CARGO_PKG_VERSION"));
        dataset.seed = Some(seed);
        Ok((dataset, log))
    }
}

fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

pub(crate) fn sample_successor(mdp: &TabularMdp, s: usize, a: usize, rng: &mut impl Rng) -> usize {
    let mut u: f64 = rng.random();
    let uniform = mdp.uniform_mass(s, a);
    if u < uniform {
        return ((u / uniform) * mdp.num_states() as f64) as usize % mdp.num_states();
    }
    u -= uniform;
    let mut last = s;
    for (s2, p) in mdp.successors(s, a) {
        if u < p {
            return s2;
        }
        u -= p;
        last = s2;
    }
    last
}
