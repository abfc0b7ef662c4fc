//! Fully observed DoorKey gridworld and its exact planner.
//!
//! The grid has an outer wall and one vertical dividing wall with a single
//! locked door. The agent starts on the left side next to a key; the goal
//! sits in the bottom-right interior corner. The agent must pick up the key,
//! open the door and walk onto the goal within `max_steps` actions.
//!
//! Coordinates are `(x, y)` with `x` growing east and `y` growing south;
//! `(0, 0)` is the top-left wall cell.
//!
//! # Layout generation
//!
//! `generate(seed, size)` draws from [`SplitMix64`] seeded with `seed`, in
//! this order:
//!
//! 1. wall column: `2 + below(size - 4)`
//! 2. door row: `1 + below(size - 2)`
//! 3. agent cell: `below(cells)` over the left-region cells in row-major order
//! 4. key cell: `below(cells - 1)` over the same list with the agent removed
//! 5. agent direction: `below(4)` over north, east, south, west
//!
//! The goal is always `(size - 2, size - 2)`.
//!
//! # Text rendering
//!
//! ```text
//!    01234567
//!  0 ########
//!  1 #>.#...#
//!  2 #.K#...#
//!  3 #..D...#
//!  4 #..#...#
//!  5 #..#...#
//!  6 #..#..G#
//!  7 ########
//! legend: # wall, D locked door, / open door, K key, G goal, . floor, ^ > v < agent facing north/east/south/west
//! status: agent (1, 1) facing east; carrying key: no; door: locked; step 0/50
//! ```
//!
//! Column digits are `x mod 10`; row labels are right-aligned `y`.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;

pub const DEFAULT_SIZE: u32 = 8;
pub const DEFAULT_MAX_STEPS: u32 = 50;
pub const TASK_DESCRIPTION: &str =
    "Pick up the key, use it to open the locked door in the dividing wall, then reach the goal square (G).";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnvError {
    #[error("grid too small")]
    GridTooSmall,
    #[error("episode finished")]
    EpisodeFinished,
    #[error("no route")]
    NoRoute,
    #[error("unknown action {0:?}")]
    UnknownAction(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pos {
    pub x: i32,
    pub y: i32,
}

impl Pos {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    pub fn step(self, dir: Direction) -> Pos {
        let (dx, dy) = dir.delta();
        Pos::new(self.x + dx, self.y + dy)
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    North,
    East,
    South,
    West,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::North,
        Direction::East,
        Direction::South,
        Direction::West,
    ];

    fn index(self) -> usize {
        self as usize
    }

    pub fn delta(self) -> (i32, i32) {
        match self {
            Direction::North => (0, -1),
            Direction::East => (1, 0),
            Direction::South => (0, 1),
            Direction::West => (-1, 0),
        }
    }

    pub fn turn_left(self) -> Direction {
        Direction::ALL[(self.index() + 3) % 4]
    }

    pub fn turn_right(self) -> Direction {
        Direction::ALL[(self.index() + 1) % 4]
    }

    pub fn glyph(self) -> char {
        match self {
            Direction::North => '^',
            Direction::East => '>',
            Direction::South => 'v',
            Direction::West => '<',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::North => "north",
            Direction::East => "east",
            Direction::South => "south",
            Direction::West => "west",
        }
    }
}

/// The five commands the agent may issue. Ordering is the planner's
/// tie-breaking order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionName {
    Left,
    Right,
    Forward,
    Pickup,
    Toggle,
}

impl ActionName {
    pub const ALL: [ActionName; 5] = [
        ActionName::Left,
        ActionName::Right,
        ActionName::Forward,
        ActionName::Pickup,
        ActionName::Toggle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ActionName::Left => "left",
            ActionName::Right => "right",
            ActionName::Forward => "forward",
            ActionName::Pickup => "pickup",
            ActionName::Toggle => "toggle",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ActionName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActionName {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let folded = s.trim().to_lowercase();
        ActionName::ALL
            .into_iter()
            .find(|a| a.as_str() == folded)
            .ok_or_else(|| EnvError::UnknownAction(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub success: bool,
    pub steps_taken: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridState {
    pub width: u32,
    pub height: u32,
    pub wall_column: i32,
    pub door_position: Pos,
    /// `None` once the key has been picked up.
    pub key_position: Option<Pos>,
    pub goal_position: Pos,
    pub agent_position: Pos,
    pub agent_direction: Direction,
    pub carrying_key: bool,
    pub door_open: bool,
    pub step_count: u32,
    pub max_steps: u32,
}

/// Builds a seeded layout with the default step cap.
pub fn generate(seed: u64, size: u32) -> Result<GridState, EnvError> {
    generate_with_cap(seed, size, DEFAULT_MAX_STEPS)
}

pub fn generate_with_cap(seed: u64, size: u32, max_steps: u32) -> Result<GridState, EnvError> {
    if size < 5 {
        return Err(EnvError::GridTooSmall);
    }
    let mut rng = SplitMix64::new(seed);
    let n = size as i32;
    let wall_column = 2 + rng.below(size as u64 - 4) as i32;
    let door_row = 1 + rng.below(size as u64 - 2) as i32;

    let mut left_cells: Vec<Pos> = (1..n - 1)
        .flat_map(|y| (1..wall_column).map(move |x| Pos::new(x, y)))
        .collect();
    let agent = left_cells.remove(rng.below(left_cells.len() as u64) as usize);
    let key = left_cells[rng.below(left_cells.len() as u64) as usize];
    let direction = Direction::ALL[rng.below(4) as usize];

    Ok(GridState {
        width: size,
        height: size,
        wall_column,
        door_position: Pos::new(wall_column, door_row),
        key_position: Some(key),
        goal_position: Pos::new(n - 2, n - 2),
        agent_position: agent,
        agent_direction: direction,
        carrying_key: false,
        door_open: false,
        step_count: 0,
        max_steps,
    })
}

impl GridState {
    pub fn is_wall(&self, p: Pos) -> bool {
        let (w, h) = (self.width as i32, self.height as i32);
        if p.x <= 0 || p.y <= 0 || p.x >= w - 1 || p.y >= h - 1 {
            return true;
        }
        p.x == self.wall_column && p != self.door_position
    }

    pub fn front_cell(&self) -> Pos {
        self.agent_position.step(self.agent_direction)
    }

    pub fn at_goal(&self) -> bool {
        self.agent_position == self.goal_position
    }

    pub fn is_terminal(&self) -> bool {
        self.at_goal() || self.step_count >= self.max_steps
    }

    fn blocks_movement(&self, p: Pos) -> bool {
        self.is_wall(p)
            || (p == self.door_position && !self.door_open)
            || self.key_position == Some(p)
    }

    /// Applies `action` without touching the step counter.
    fn transition(&self, action: ActionName) -> GridState {
        let mut next = self.clone();
        let front = self.front_cell();
        match action {
            ActionName::Left => next.agent_direction = self.agent_direction.turn_left(),
            ActionName::Right => next.agent_direction = self.agent_direction.turn_right(),
            ActionName::Forward => {
                if !self.blocks_movement(front) {
                    next.agent_position = front;
                }
            }
            ActionName::Pickup => {
                if self.key_position == Some(front) && !self.carrying_key {
                    next.key_position = None;
                    next.carrying_key = true;
                }
            }
            ActionName::Toggle => {
                if front == self.door_position && self.carrying_key && !self.door_open {
                    next.door_open = true;
                }
            }
        }
        next
    }

    /// Advances one step. The outcome is present once the episode ends.
    pub fn step(&self, action: ActionName) -> Result<(GridState, Option<EpisodeOutcome>), EnvError> {
        if self.is_terminal() {
            return Err(EnvError::EpisodeFinished);
        }
        let mut next = self.transition(action);
        next.step_count += 1;
        let outcome = if next.at_goal() {
            Some(EpisodeOutcome {
                success: true,
                steps_taken: next.step_count,
            })
        } else if next.step_count >= next.max_steps {
            Some(EpisodeOutcome {
                success: false,
                steps_taken: next.step_count,
            })
        } else {
            None
        };
        Ok((next, outcome))
    }

    pub fn subgoal(&self) -> Subgoal {
        if !self.carrying_key {
            Subgoal::GetKey
        } else if !self.door_open {
            Subgoal::OpenDoor
        } else {
            Subgoal::GoToGoal
        }
    }

    pub fn subgoal_target(&self) -> Pos {
        match self.subgoal() {
            Subgoal::GetKey => self.key_position.unwrap_or(self.agent_position),
            Subgoal::OpenDoor => self.door_position,
            Subgoal::GoToGoal => self.goal_position,
        }
    }

    pub fn render_full_view(&self) -> String {
        let mut out = String::new();
        out.push_str("   ");
        for x in 0..self.width {
            out.push(char::from(b'0' + (x % 10) as u8));
        }
        out.push('\n');
        for y in 0..self.height as i32 {
            out.push_str(&format!("{y:>2} "));
            for x in 0..self.width as i32 {
                out.push(self.glyph_at(Pos::new(x, y)));
            }
            out.push('\n');
        }
        out.push_str(
            "legend: # wall, D locked door, / open door, K key, G goal, . floor, \
             ^ > v < agent facing north/east/south/west\n",
        );
        out.push_str(&format!(
            "status: agent {} facing {}; carrying key: {}; door: {}; step {}/{}",
            self.agent_position,
            self.agent_direction.name(),
            if self.carrying_key { "yes" } else { "no" },
            if self.door_open { "open" } else { "locked" },
            self.step_count,
            self.max_steps,
        ));
        out
    }

    fn glyph_at(&self, p: Pos) -> char {
        if p == self.agent_position {
            self.agent_direction.glyph()
        } else if p == self.door_position {
            if self.door_open {
                '/'
            } else {
                'D'
            }
        } else if self.is_wall(p) {
            '#'
        } else if self.key_position == Some(p) {
            'K'
        } else if p == self.goal_position {
            'G'
        } else {
            '.'
        }
    }

    fn node_index(&self) -> usize {
        let phase = match (self.carrying_key, self.door_open) {
            (false, _) => 0,
            (true, false) => 1,
            (true, true) => 2,
        };
        let cell = (self.agent_position.y * self.width as i32 + self.agent_position.x) as usize;
        (cell * 4 + self.agent_direction.index()) * 3 + phase
    }

    fn node_count(&self) -> usize {
        (self.width * self.height) as usize * 12
    }

    /// Planner-relevant part of the state, ignoring the step counter.
    fn same_configuration(&self, other: &GridState) -> bool {
        self.agent_position == other.agent_position
            && self.agent_direction == other.agent_direction
            && self.carrying_key == other.carrying_key
            && self.door_open == other.door_open
    }

    /// Forward breadth-first search. Returns the visited nodes, each with its
    /// parent link, and the index of the first goal node reached.
    fn search(&self) -> Option<(Vec<(GridState, Option<(usize, ActionName)>)>, usize)> {
        let mut seen = vec![false; self.node_count()];
        let mut nodes: Vec<(GridState, Option<(usize, ActionName)>)> = Vec::new();
        let mut queue = VecDeque::new();

        let mut root = self.clone();
        root.step_count = 0;
        seen[root.node_index()] = true;
        nodes.push((root, None));
        queue.push_back(0usize);

        while let Some(i) = queue.pop_front() {
            if nodes[i].0.at_goal() {
                return Some((nodes, i));
            }
            for action in ActionName::ALL {
                let next = nodes[i].0.transition(action);
                let idx = next.node_index();
                if !seen[idx] {
                    seen[idx] = true;
                    nodes.push((next, Some((i, action))));
                    queue.push_back(nodes.len() - 1);
                }
            }
        }
        None
    }

    /// Shortest number of actions to the goal, ignoring the step cap.
    pub fn distance_to_goal(&self) -> Option<u32> {
        self.plan_route().ok().map(|p| p.len() as u32)
    }

    /// Minimum-length action sequence to the goal. Ties are broken by the
    /// fixed order left < right < forward < pickup < toggle.
    pub fn plan_route(&self) -> Result<Vec<ActionName>, EnvError> {
        let (nodes, goal) = self.search().ok_or(EnvError::NoRoute)?;
        let mut plan = Vec::new();
        let mut cur = goal;
        while let Some((prev, action)) = nodes[cur].1 {
            plan.push(action);
            cur = prev;
        }
        plan.reverse();
        Ok(plan)
    }

    /// Scores each action by its effect on the distance to the goal:
    /// 1 if it gets strictly closer, 0.5 if equal, 0 if farther or if the
    /// action changes nothing.
    pub fn action_values(&self) -> Result<ActionValues, EnvError> {
        if self.is_terminal() {
            return Err(EnvError::EpisodeFinished);
        }
        let here = self.distance_to_goal().ok_or(EnvError::NoRoute)?;
        let mut values = [0.0; 5];
        for action in ActionName::ALL {
            let next = self.transition(action);
            if next.same_configuration(self) {
                continue;
            }
            let there = next.distance_to_goal().ok_or(EnvError::NoRoute)?;
            values[action.index()] = match there.cmp(&here) {
                std::cmp::Ordering::Less => 1.0,
                std::cmp::Ordering::Equal => 0.5,
                std::cmp::Ordering::Greater => 0.0,
            };
        }
        Ok(ActionValues(values))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subgoal {
    GetKey,
    OpenDoor,
    GoToGoal,
}

impl Subgoal {
    pub fn phrase(self) -> &'static str {
        match self {
            Subgoal::GetKey => "get key",
            Subgoal::OpenDoor => "open door",
            Subgoal::GoToGoal => "go to goal",
        }
    }
}

/// Per-action progress scores in `[0, 1]`, indexed by [`ActionName`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionValues(pub [f64; 5]);

impl ActionValues {
    pub fn get(&self, action: ActionName) -> f64 {
        self.0[action.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ActionName, f64)> + '_ {
        ActionName::ALL.into_iter().map(|a| (a, self.get(a)))
    }
}
