//! Key-Lock and Flags grid worlds.
//!
//! Board fixtures are plain text, one cell per character:
//!
//! ```text
//! .  empty            #  obstacle
//! K  key              L  lock
//! P  pit              S  default start
//! Fk flag captured k-th (k = 0..9), two characters wide
//! ```
//!
//! Lines starting with `;` are comments. Row 0 is the first line; `y` grows
//! downward, so North is `y - 1`.

use super::{Action, EnvError, StepResult};
use serde::{Deserialize, Serialize};

pub const STEP_CAP: usize = 100;

pub const KEY_REWARD: f64 = 500.0;
pub const LOCK_REWARD: f64 = 1000.0;
pub const PIT_REWARD: f64 = -400.0;
pub const STEP_REWARD: f64 = -10.0;
pub const FLAG_REWARD: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    pub fn offset(self, dir: Direction, dist: i32) -> Cell {
        let (dx, dy) = dir.delta();
        Cell::new(self.x + dx * dist, self.y + dy * dist)
    }

    fn dist2(self, other: Cell) -> i64 {
        let dx = (self.x - other.x) as i64;
        let dy = (self.y - other.y) as i64;
        dx * dx + dy * dy
    }

    pub fn chebyshev(self, other: Cell) -> i32 {
        (self.x - other.x).abs().max((self.y - other.y).abs())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn delta(self) -> (i32, i32) {
        match self {
            Direction::North => (0, -1),
            Direction::East => (1, 0),
            Direction::South => (0, 1),
            Direction::West => (-1, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridTask {
    KeyLock,
    Flags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: i32,
    pub height: i32,
    pub keys: Vec<Cell>,
    pub locks: Vec<Cell>,
    /// Flags in reading order; this is the order the observation lists them in.
    pub flags: Vec<Cell>,
    /// `flag_order[k]` is the index into `flags` of the flag that must be captured k-th.
    pub flag_order: Vec<usize>,
    pub pits: Vec<Cell>,
    pub obstacles: Vec<Cell>,
    pub default_start: Cell,
    pub step_cap: usize,
}

impl GridSpec {
    pub fn parse(text: &str) -> Result<Self, EnvError> {
        let mut rows: Vec<Vec<(char, Option<u32>)>> = Vec::new();
        for line in text.lines() {
            let line = line.trim_end();
            if line.trim().is_empty() || line.trim_start().starts_with(';') {
                continue;
            }
            let mut row = Vec::new();
            let mut chars = line.trim().chars().peekable();
            while let Some(c) = chars.next() {
                if c == 'F' {
                    let digit = chars
                        .next()
                        .and_then(|d| d.to_digit(10))
                        .ok_or_else(|| EnvError::Parse {
                            line: rows.len() + 1,
                            msg: "flag marker `F` must be followed by a digit".into(),
                        })?;
                    row.push((c, Some(digit)));
                } else {
                    row.push((c, None));
                }
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(EnvError::Parse {
                line: 0,
                msg: "empty board".into(),
            });
        }
        let width = rows[0].len();
        let mut spec = GridSpec {
            width: width as i32,
            height: rows.len() as i32,
            keys: Vec::new(),
            locks: Vec::new(),
            flags: Vec::new(),
            flag_order: Vec::new(),
            pits: Vec::new(),
            obstacles: Vec::new(),
            default_start: Cell::new(0, 0),
            step_cap: STEP_CAP,
        };
        let mut start = None;
        let mut flag_ranks = Vec::new();
        for (y, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(EnvError::Parse {
                    line: y + 1,
                    msg: format!("row has {} cells, expected {width}", row.len()),
                });
            }
            for (x, &(c, digit)) in row.iter().enumerate() {
                let cell = Cell::new(x as i32, y as i32);
                match c {
                    '.' => {}
                    '#' => spec.obstacles.push(cell),
                    'K' => spec.keys.push(cell),
                    'L' => spec.locks.push(cell),
                    'P' => spec.pits.push(cell),
                    'S' => {
                        if start.replace(cell).is_some() {
                            return Err(EnvError::Parse {
                                line: y + 1,
                                msg: "more than one start cell".into(),
                            });
                        }
                    }
                    'F' => {
                        spec.flags.push(cell);
                        flag_ranks.push(digit.unwrap_or(0) as usize);
                    }
                    other => {
                        return Err(EnvError::Parse {
                            line: y + 1,
                            msg: format!("unknown cell character `{other}`"),
                        })
                    }
                }
            }
        }
        spec.default_start = start.ok_or(EnvError::Parse {
            line: 0,
            msg: "board has no start cell `S`".into(),
        })?;
        let mut order: Vec<usize> = (0..spec.flags.len()).collect();
        order.sort_by_key(|&i| flag_ranks[i]);
        if order
            .iter()
            .enumerate()
            .any(|(rank, &i)| flag_ranks[i] != rank)
        {
            return Err(EnvError::Parse {
                line: 0,
                msg: "flag ranks must be 0..n-1 without gaps or repeats".into(),
            });
        }
        spec.flag_order = order;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let mut seen = std::collections::HashSet::new();
        let items = self
            .keys
            .iter()
            .chain(&self.locks)
            .chain(&self.flags)
            .chain(&self.pits)
            .chain(&self.obstacles);
        for c in items {
            if !self.in_bounds(*c) {
                return Err(EnvError::InvalidSpec(format!("item at {c:?} is off the board")));
            }
            if !seen.insert(*c) {
                return Err(EnvError::InvalidSpec(format!("two items share cell {c:?}")));
            }
        }
        if seen.contains(&self.default_start) || !self.in_bounds(self.default_start) {
            return Err(EnvError::InvalidSpec("start cell is occupied".into()));
        }
        if self.keys.len() > 32 || self.locks.len() > 32 {
            return Err(EnvError::InvalidSpec("at most 32 keys and 32 locks".into()));
        }
        let has_keylock = !self.keys.is_empty() || !self.locks.is_empty();
        match (has_keylock, self.flags.is_empty()) {
            (true, false) => Err(EnvError::InvalidSpec(
                "a board holds either keys/locks or flags, not both".into(),
            )),
            (false, true) => Err(EnvError::InvalidSpec("board has no goal items".into())),
            _ => Ok(()),
        }
    }

    pub fn task(&self) -> GridTask {
        if self.flags.is_empty() {
            GridTask::KeyLock
        } else {
            GridTask::Flags
        }
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        c.x >= 0 && c.y >= 0 && c.x < self.width && c.y < self.height
    }

    pub fn is_obstacle(&self, c: Cell) -> bool {
        !self.in_bounds(c) || self.obstacles.contains(&c)
    }

    pub fn is_pit(&self, c: Cell) -> bool {
        self.pits.contains(&c)
    }
}

/// Full grid state. Collected keys and locks are bit masks over `GridSpec` keys and locks.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridState {
    pub agent: Cell,
    pub keys_collected: u32,
    pub locks_collected: u32,
    pub flags_captured: usize,
    pub step_index: usize,
}

impl GridState {
    pub fn at(agent: Cell) -> Self {
        Self {
            agent,
            keys_collected: 0,
            locks_collected: 0,
            flags_captured: 0,
            step_index: 0,
        }
    }

    pub fn keys_held(&self) -> u32 {
        self.keys_collected.count_ones()
    }

    pub fn locks_opened(&self) -> u32 {
        self.locks_collected.count_ones()
    }
}

fn full_mask(n: usize) -> u32 {
    if n >= 32 {
        u32::MAX
    } else {
        (1u32 << n) - 1
    }
}

#[derive(Debug, Clone)]
pub struct GridWorld {
    spec: GridSpec,
    start: Option<GridState>,
    state: GridState,
    done: bool,
}

impl GridWorld {
    pub fn new(spec: GridSpec) -> Self {
        let state = GridState::at(spec.default_start);
        Self {
            spec,
            start: None,
            state,
            done: false,
        }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn state(&self) -> &GridState {
        &self.state
    }

    pub fn start_state(&self) -> GridState {
        self.start
            .clone()
            .unwrap_or_else(|| GridState::at(self.spec.default_start))
    }

    pub fn set_start(&mut self, start: Option<GridState>) -> Result<(), EnvError> {
        if let Some(s) = &start {
            self.check_start(s)?;
        }
        self.start = start;
        Ok(())
    }

    pub fn is_terminal(&self, s: &GridState) -> bool {
        match self.spec.task() {
            GridTask::KeyLock => {
                self.spec.is_pit(s.agent)
                    || (s.keys_collected == full_mask(self.spec.keys.len())
                        && s.locks_collected == full_mask(self.spec.locks.len()))
            }
            GridTask::Flags => s.flags_captured >= self.spec.flags.len(),
        }
    }

    pub fn check_start(&self, s: &GridState) -> Result<(), EnvError> {
        let spec = &self.spec;
        let bad = |why: &str| Err(EnvError::InvalidStart(format!("{:?}: {why}", s.agent)));
        if spec.is_obstacle(s.agent) {
            return bad("inside an obstacle or off the board");
        }
        if spec.is_pit(s.agent) {
            return bad("inside a pit");
        }
        if s.keys_collected & !full_mask(spec.keys.len()) != 0
            || s.locks_collected & !full_mask(spec.locks.len()) != 0
            || s.locks_opened() > s.keys_held()
            || s.flags_captured > spec.flags.len()
        {
            return bad("inconsistent item counters");
        }
        if self.is_terminal(s) {
            return bad("state is terminal");
        }
        // standing on an uncollected item is never reachable
        let on_key = spec
            .keys
            .iter()
            .enumerate()
            .any(|(i, &k)| k == s.agent && s.keys_collected & (1 << i) == 0);
        let on_lock = spec.locks.iter().enumerate().any(|(i, &l)| {
            l == s.agent && s.locks_collected & (1 << i) == 0 && s.keys_held() > s.locks_opened()
        });
        let on_flag = spec.task() == GridTask::Flags
            && spec.flags[spec.flag_order[s.flags_captured]] == s.agent;
        if on_key || on_lock || on_flag {
            return bad("standing on an uncollected item");
        }
        Ok(())
    }

    pub fn reset(&mut self, start: Option<&GridState>) -> Result<Vec<f64>, EnvError> {
        let mut s = match start {
            Some(s) => {
                self.check_start(s)?;
                s.clone()
            }
            None => self.start_state(),
        };
        s.step_index = 0;
        self.state = s;
        self.done = false;
        Ok(self.encode(&self.state))
    }

    /// Deterministic successor of `s` under `dir`, with the reward and terminal flag.
    pub fn transition(&self, s: &GridState, dir: Direction) -> (GridState, f64, bool) {
        let spec = &self.spec;
        let mut next = s.clone();
        next.step_index += 1;
        let target = s.agent.offset(dir, 1);
        let mut reward = STEP_REWARD;
        if !spec.is_obstacle(target) {
            next.agent = target;
            match spec.task() {
                GridTask::KeyLock => {
                    if spec.is_pit(target) {
                        reward = PIT_REWARD;
                    } else if let Some(i) = spec
                        .keys
                        .iter()
                        .enumerate()
                        .position(|(i, &k)| k == target && next.keys_collected & (1 << i) == 0)
                    {
                        next.keys_collected |= 1 << i;
                        reward = KEY_REWARD;
                    } else if let Some(i) = spec.locks.iter().position(|&l| l == target) {
                        if next.locks_collected & (1 << i) == 0
                            && next.keys_held() > next.locks_opened()
                        {
                            next.locks_collected |= 1 << i;
                            reward = LOCK_REWARD;
                        }
                    }
                }
                GridTask::Flags => {
                    if next.flags_captured < spec.flags.len()
                        && spec.flags[spec.flag_order[next.flags_captured]] == target
                    {
                        next.flags_captured += 1;
                        reward = FLAG_REWARD * next.flags_captured as f64;
                    }
                }
            }
        }
        let terminal = self.is_terminal(&next);
        (next, reward, terminal)
    }

    pub fn step(&mut self, action: &Action) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        let dir = match action {
            Action::Discrete(i) => Direction::from_index(*i).ok_or(EnvError::BadAction)?,
            Action::Continuous(_) => return Err(EnvError::BadAction),
        };
        let (next, reward, terminal) = self.transition(&self.state, dir);
        self.state = next;
        let truncated = !terminal && self.state.step_index >= self.spec.step_cap;
        self.done = terminal || truncated;
        Ok(StepResult {
            observation: self.encode(&self.state),
            reward,
            terminal,
            truncated,
        })
    }

    pub fn observation_dim(&self) -> usize {
        match self.spec.task() {
            GridTask::KeyLock => 26,
            GridTask::Flags => 4 * self.spec.flags.len() + 9,
        }
    }

    /// Feature vector of a state; see the crate README for the slot layout.
    pub fn encode(&self, s: &GridState) -> Vec<f64> {
        let spec = &self.spec;
        let mut out = Vec::with_capacity(self.observation_dim());
        match spec.task() {
            GridTask::KeyLock => {
                let keys: Vec<Cell> = spec
                    .keys
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| s.keys_collected & (1 << i) == 0)
                    .map(|(_, &c)| c)
                    .collect();
                let locks: Vec<Cell> = spec
                    .locks
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| s.locks_collected & (1 << i) == 0)
                    .map(|(_, &c)| c)
                    .collect();
                out.extend(displacement(s.agent, nearest(s.agent, &keys)));
                out.extend(displacement(s.agent, nearest(s.agent, &locks)));
                out.extend(obstacle_bits(spec, s.agent));
                for dir in Direction::ALL {
                    let c = s.agent.offset(dir, 1);
                    out.push(bit(keys.contains(&c) || locks.contains(&c)));
                }
                for dir in Direction::ALL {
                    for dist in 1..=2 {
                        out.push(bit(spec.is_pit(s.agent.offset(dir, dist))));
                    }
                }
                out.push(s.keys_held() as f64);
                out.push(s.locks_opened() as f64);
            }
            GridTask::Flags => {
                let remaining: Vec<Cell> = spec.flag_order[s.flags_captured.min(spec.flags.len())..]
                    .iter()
                    .map(|&i| spec.flags[i])
                    .collect();
                for (i, &f) in spec.flags.iter().enumerate() {
                    let captured = spec.flag_order[..s.flags_captured.min(spec.flags.len())].contains(&i);
                    out.extend(displacement(s.agent, (!captured).then_some(f)));
                }
                out.extend(obstacle_bits(spec, s.agent));
                for dir in Direction::ALL {
                    out.push(bit(remaining.contains(&s.agent.offset(dir, 1))));
                }
                out.push(s.flags_captured as f64);
            }
        }
        out
    }

    /// Goal-completing states: the final item of the task collected.
    pub fn positive_terminals(&self) -> Vec<GridState> {
        let spec = &self.spec;
        match spec.task() {
            GridTask::KeyLock => {
                let done = GridState {
                    agent: Cell::new(0, 0),
                    keys_collected: full_mask(spec.keys.len()),
                    locks_collected: full_mask(spec.locks.len()),
                    flags_captured: 0,
                    step_index: 0,
                };
                // a board without locks finishes on its last key
                let finals = if spec.locks.is_empty() {
                    &spec.keys
                } else {
                    &spec.locks
                };
                finals
                    .iter()
                    .map(|&c| GridState {
                        agent: c,
                        ..done.clone()
                    })
                    .collect()
            }
            GridTask::Flags => {
                let last = spec.flags[*spec.flag_order.last().expect("flags board has flags")];
                vec![GridState {
                    agent: last,
                    keys_collected: 0,
                    locks_collected: 0,
                    flags_captured: spec.flags.len(),
                    step_index: 0,
                }]
            }
        }
    }

    /// The state one move before completing the task at `terminal`, with the
    /// agent moved to `cell`. Used to sample starts around goals.
    pub fn pre_terminal_at(&self, terminal: &GridState, cell: Cell) -> GridState {
        let spec = &self.spec;
        let mut s = terminal.clone();
        s.agent = cell;
        s.step_index = 0;
        match spec.task() {
            GridTask::KeyLock => {
                if let Some(i) = spec.locks.iter().position(|&l| l == terminal.agent) {
                    s.locks_collected &= !(1 << i);
                } else if let Some(i) = spec.keys.iter().position(|&k| k == terminal.agent) {
                    s.keys_collected &= !(1 << i);
                }
            }
            GridTask::Flags => s.flags_captured = spec.flags.len() - 1,
        }
        s
    }

    /// Best undiscounted return reachable from `start` within the step cap.
    pub fn optimal_return(&self, start: &GridState) -> f64 {
        let root = GridState { step_index: 0, ..start.clone() };
        let mut states = vec![root.clone()];
        let mut index = std::collections::HashMap::from([(root, 0usize)]);
        let mut edges: Vec<[(usize, f64, bool); 4]> = Vec::new();
        let mut i = 0;
        while i < states.len() {
            let mut row = [(0, 0.0, true); 4];
            for (d, slot) in row.iter_mut().enumerate() {
                let dir = Direction::from_index(d).expect("four directions");
                let (mut next, r, done) = self.transition(&states[i], dir);
                next.step_index = 0;
                let n = states.len();
                let j = *index.entry(next.clone()).or_insert(n);
                if j == n {
                    states.push(next);
                }
                *slot = (j, r, done);
            }
            edges.push(row);
            i += 1;
        }
        let mut value = vec![0.0; states.len()];
        for _ in 0..self.spec.step_cap.saturating_sub(start.step_index) {
            value = edges
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|&(j, r, done)| if done { r } else { r + value[j] })
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
        }
        value[0]
    }

    /// All valid start states with no items collected, in reading order.
    pub fn fresh_starts(&self) -> Vec<GridState> {
        let mut out = Vec::new();
        for y in 0..self.spec.height {
            for x in 0..self.spec.width {
                let s = GridState::at(Cell::new(x, y));
                if self.check_start(&s).is_ok() {
                    out.push(s);
                }
            }
        }
        out
    }
}

fn bit(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn nearest(from: Cell, cells: &[Cell]) -> Option<Cell> {
    cells.iter().copied().min_by_key(|c| from.dist2(*c))
}

/// Signed offset split into the positive parts of North, East, South, West.
fn displacement(from: Cell, to: Option<Cell>) -> [f64; 4] {
    match to {
        None => [0.0; 4],
        Some(t) => {
            let dx = (t.x - from.x) as f64;
            let dy = (t.y - from.y) as f64;
            [(-dy).max(0.0), dx.max(0.0), dy.max(0.0), (-dx).max(0.0)]
        }
    }
}

fn obstacle_bits(spec: &GridSpec, at: Cell) -> [f64; 4] {
    Direction::ALL.map(|d| bit(spec.is_obstacle(at.offset(d, 1))))
}
