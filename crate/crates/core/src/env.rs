//! Mini-invaders: a continuing grid shooter with Space-Invaders reward semantics.
//!
//! The board is `grid_height` rows by `grid_width` columns, row 0 at the top.
//! Row 0 is the lane of the bonus ship and the player lives on the bottom row.
//! The swarm hovers `swarm_gap` empty rows above the player. Missed shots fly
//! on to the top of the board, so a low swarm under a tall empty band makes
//! misses cost more time than hits. Aliens sit every `alien_spacing` columns.
//!
//! The stream never terminates. Losing the last life re-initialises the board in
//! place and raises [`StepOutcome::reset_occurred`]; clearing the swarm respawns
//! it and play continues.
//!
//! Each step draws its randomness from a ChaCha stream keyed by
//! `(seed, step_index)`, so [`env_step`] is a pure function of `(state, action)`.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_ACTIONS: usize = 6;

/// Human-readable action names, indexed by action.
pub const ACTION_NAMES: [&str; NUM_ACTIONS] = [
    "do nothing",
    "fire",
    "move right",
    "move left",
    "move right and fire",
    "move left and fire",
];

/// Default observation stack depth.
pub const STACK_DEPTH: usize = 4;

/// Board columns around the player's bullet described in each frame.
const BULLET_WINDOW: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub swarm_rows: usize,
    pub swarm_cols: usize,
    /// Reward for an alien on the bottom swarm row.
    pub base_row_reward: f64,
    /// Extra reward per row going up.
    pub row_reward_step: f64,
    pub bonus_reward: f64,
    pub bonus_spawn_prob: f64,
    pub lives: u32,
    pub grid_width: usize,
    pub grid_height: usize,
    /// The swarm moves one cell sideways every this many steps.
    pub swarm_step_period: u64,
    /// Per step, per non-empty swarm column.
    pub bomb_prob: f64,
    /// Horizontal distance between neighbouring alien columns.
    pub alien_spacing: usize,
    /// Empty rows between the bottom swarm row and the player row.
    pub swarm_gap: usize,
    pub rng_seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            swarm_rows: 6,
            swarm_cols: 6,
            base_row_reward: 5.0,
            row_reward_step: 5.0,
            bonus_reward: 200.0,
            bonus_spawn_prob: 0.0005,
            lives: 3,
            grid_width: 16,
            grid_height: 20,
            swarm_step_period: 6,
            bomb_prob: 0.01,
            alien_spacing: 2,
            swarm_gap: 1,
            rng_seed: 0,
        }
    }
}

impl EnvConfig {
    /// Desk-scale variant with a 4×4 swarm.
    pub fn small() -> Self {
        EnvConfig {
            swarm_rows: 4,
            swarm_cols: 4,
            ..EnvConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.swarm_rows == 0 || self.swarm_cols == 0 {
            return bad("swarm dimensions must be at least 1×1".into());
        }
        if self.alien_spacing == 0 {
            return bad("alien_spacing must be at least 1".into());
        }
        if self.grid_width < self.swarm_width() {
            return bad(format!(
                "grid_width {} cannot hold a swarm {} cells wide",
                self.grid_width,
                self.swarm_width()
            ));
        }
        // bonus lane + swarm + gap + player row
        if self.grid_height < self.swarm_rows + self.swarm_gap + 2 {
            return bad(format!(
                "grid_height {} must be at least swarm_rows + swarm_gap + 2 = {}",
                self.grid_height,
                self.swarm_rows + self.swarm_gap + 2
            ));
        }
        if self.lives == 0 {
            return bad("lives must be at least 1".into());
        }
        if self.swarm_step_period == 0 {
            return bad("swarm_step_period must be at least 1".into());
        }
        for (name, p) in [("bonus_spawn_prob", self.bonus_spawn_prob), ("bomb_prob", self.bomb_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        if !(self.base_row_reward > 0.0) || self.row_reward_step < 0.0 || !self.row_reward_step.is_finite() {
            return bad("row rewards must be strictly positive".into());
        }
        if !(self.bonus_reward > 0.0) || !self.bonus_reward.is_finite() {
            return bad("bonus_reward must be strictly positive".into());
        }
        Ok(())
    }

    /// Board row of the swarm's top row at spawn.
    pub fn swarm_top_row(&self) -> usize {
        self.grid_height - 1 - self.swarm_gap - self.swarm_rows
    }

    pub fn swarm_width(&self) -> usize {
        (self.swarm_cols.max(1) - 1) * self.alien_spacing + 1
    }

    /// Reward for an alien `row_from_bottom` rows above the bottom swarm row.
    pub fn row_reward(&self, row_from_bottom: usize) -> f64 {
        self.base_row_reward + self.row_reward_step * row_from_bottom as f64
    }

    /// Length of one observation frame.
    pub fn feature_dim(&self) -> usize {
        11 + BULLET_WINDOW + 2 * (2 * self.grid_width - 1)
    }
}

/// Largest reward a single step can produce (R^S).
pub fn max_step_reward(config: &EnvConfig, include_bonus: bool) -> f64 {
    let top = config.row_reward(config.swarm_rows - 1);
    if include_bonus {
        config.bonus_reward.max(top)
    } else {
        top
    }
}

/// Reward collected by destroying one entire swarm.
pub fn total_swarm_reward(config: &EnvConfig) -> f64 {
    let per_column: f64 = (0..config.swarm_rows).map(|r| config.row_reward(r)).sum();
    config.swarm_cols as f64 * per_column
}

/// A cell on the board, `row` 0 at the top.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BonusShip {
    pub col: usize,
    /// +1 moving right, -1 moving left.
    pub direction: i8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameState {
    /// `alive[r][c]`, r = 0 is the top swarm row.
    pub alive: Vec<Vec<bool>>,
    pub swarm_offset: Cell,
    pub swarm_direction: i8,
    pub player_col: usize,
    pub player_bullet: Option<Cell>,
    pub bombs: Vec<Cell>,
    pub bonus_ship: Option<BonusShip>,
    pub lives_left: u32,
    pub step_index: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum StepEvent {
    /// `row` counts from the bottom swarm row (0) upward.
    AlienDestroyed { row: usize },
    BonusDestroyed,
    LifeLost,
    SwarmCleared,
    BoardReset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub reward: f64,
    pub reset_occurred: bool,
    pub events: Vec<StepEvent>,
}


fn fresh_swarm(config: &EnvConfig) -> Vec<Vec<bool>> {
    vec![vec![true; config.swarm_cols]; config.swarm_rows]
}

pub fn env_new(config: &EnvConfig, seed: u64) -> Result<GameState> {
    config.validate()?;
    Ok(GameState {
        alive: fresh_swarm(config),
        swarm_offset: Cell { row: config.swarm_top_row(), col: 0 },
        swarm_direction: 1,
        player_col: 0,
        player_bullet: None,
        bombs: Vec::new(),
        bonus_ship: None,
        lives_left: config.lives,
        step_index: 0,
        seed,
    })
}

fn step_rng(seed: u64, step_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step_index);
    rng
}

impl GameState {
    pub fn aliens_alive(&self) -> usize {
        self.alive.iter().flatten().filter(|a| **a).count()
    }

    fn alien_at(&self, config: &EnvConfig, cell: Cell) -> Option<(usize, usize)> {
        let top = self.swarm_offset.row;
        let left = self.swarm_offset.col;
        if cell.row < top || cell.col < left {
            return None;
        }
        let r = cell.row - top;
        let dx = cell.col - left;
        if r >= config.swarm_rows || dx % config.alien_spacing != 0 {
            return None;
        }
        let c = dx / config.alien_spacing;
        (c < config.swarm_cols && self.alive[r][c]).then_some((r, c))
    }

    /// Lowest alive swarm row (0 = top) of swarm column `c`.
    fn lowest_alive(&self, c: usize) -> Option<usize> {
        (0..self.alive.len()).rev().find(|&r| self.alive[r][c])
    }

    fn resolve_bullet(&mut self, config: &EnvConfig, outcome: &mut StepOutcome) {
        let Some(bullet) = self.player_bullet else { return };
        if let Some((r, c)) = self.alien_at(config, bullet) {
            self.alive[r][c] = false;
            self.player_bullet = None;
            let from_bottom = config.swarm_rows - 1 - r;
            outcome.reward += config.row_reward(from_bottom);
            outcome.events.push(StepEvent::AlienDestroyed { row: from_bottom });
        } else if let Some(ship) = self.bonus_ship {
            if bullet.row == 0 && bullet.col == ship.col {
                self.bonus_ship = None;
                self.player_bullet = None;
                outcome.reward += config.bonus_reward;
                outcome.events.push(StepEvent::BonusDestroyed);
            }
        }
    }

    fn reset_board(&mut self, config: &EnvConfig) {
        self.alive = fresh_swarm(config);
        self.swarm_offset = Cell { row: config.swarm_top_row(), col: 0 };
        self.swarm_direction = 1;
        self.player_col = 0;
        self.player_bullet = None;
        self.bombs.clear();
        self.bonus_ship = None;
        self.lives_left = config.lives;
    }
}

/// Advance the game by one step.
pub fn env_step(config: &EnvConfig, state: &GameState, action: usize) -> Result<(GameState, StepOutcome)> {
    if action >= NUM_ACTIONS {
        return Err(Error::Argument(format!("action {action} outside 0..{NUM_ACTIONS}")));
    }
    let mut s = state.clone();
    let mut rng = step_rng(s.seed, s.step_index);
    let mut outcome = StepOutcome { reward: 0.0, reset_occurred: false, events: Vec::new() };
    let width = config.grid_width;
    let player_row = config.grid_height - 1;

    match action {
        2 | 4 => s.player_col = (s.player_col + 1).min(width - 1),
        3 | 5 => s.player_col = s.player_col.saturating_sub(1),
        _ => {}
    }
    let fire = matches!(action, 1 | 4 | 5);
    if fire && s.player_bullet.is_none() {
        s.player_bullet = Some(Cell { row: player_row, col: s.player_col });
    }

    // Bullet advances one row; falling off the top removes it.
    if let Some(b) = s.player_bullet {
        s.player_bullet = b.row.checked_sub(1).map(|row| Cell { row, col: b.col });
        s.resolve_bullet(config, &mut outcome);
    }

    if (s.step_index + 1) % config.swarm_step_period == 0 {
        let max_left = width - config.swarm_width();
        let next = s.swarm_offset.col as i64 + s.swarm_direction as i64;
        if next < 0 || next > max_left as i64 {
            s.swarm_direction = -s.swarm_direction;
        } else {
            s.swarm_offset.col = next as usize;
            s.resolve_bullet(config, &mut outcome);
        }
    }

    match s.bonus_ship {
        Some(ship) => {
            let next = ship.col as i64 + ship.direction as i64;
            s.bonus_ship = (0..width as i64)
                .contains(&next)
                .then_some(BonusShip { col: next as usize, direction: ship.direction });
            s.resolve_bullet(config, &mut outcome);
        }
        None => {
            if rng.gen::<f64>() < config.bonus_spawn_prob {
                let ship = if rng.gen::<bool>() {
                    BonusShip { col: 0, direction: 1 }
                } else {
                    BonusShip { col: width - 1, direction: -1 }
                };
                s.bonus_ship = Some(ship);
                s.resolve_bullet(config, &mut outcome);
            }
        }
    }

    let mut hit = false;
    let player_col = s.player_col;
    s.bombs.retain_mut(|bomb| {
        bomb.row += 1;
        if bomb.row >= player_row {
            hit |= bomb.row == player_row && bomb.col == player_col;
            return false;
        }
        true
    });
    for c in 0..config.swarm_cols {
        let roll = rng.gen::<f64>();
        if let Some(r) = s.lowest_alive(c) {
            if roll < config.bomb_prob {
                s.bombs.push(Cell {
                    row: s.swarm_offset.row + r + 1,
                    col: s.swarm_offset.col + c * config.alien_spacing,
                });
            }
        }
    }
    if hit {
        s.lives_left -= 1;
        outcome.events.push(StepEvent::LifeLost);
    }

    if s.aliens_alive() == 0 {
        outcome.events.push(StepEvent::SwarmCleared);
        s.alive = fresh_swarm(config);
        s.swarm_offset = Cell { row: config.swarm_top_row(), col: 0 };
        s.swarm_direction = 1;
        s.bombs.clear();
    }
    if s.lives_left == 0 {
        s.reset_board(config);
        outcome.reset_occurred = true;
        outcome.events.push(StepEvent::BoardReset);
    }
    s.step_index += 1;
    Ok((s, outcome))
}

fn unit(x: f64, denom: f64) -> f64 {
    if denom > 0.0 {
        (x / denom).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Feature vector of one frame. Every entry lies in [0, 1].
///
/// Swarm columns and bombs are laid out egocentrically: slot `k` of a
/// `2·grid_width − 1` window describes board column `player_col + k − (grid_width − 1)`.
pub fn frame_features(config: &EnvConfig, s: &GameState) -> Vec<f64> {
    let w = (config.grid_width - 1) as f64;
    let h = (config.grid_height - 1) as f64;
    let span = 2 * config.grid_width - 1;
    let slot = |col: usize| col + config.grid_width - 1 - s.player_col;
    let rel = |col: usize| unit(slot(col) as f64, (span - 1) as f64);
    let mut f = Vec::with_capacity(config.feature_dim());
    f.push(unit(s.player_col as f64, w));
    f.push(unit(s.swarm_offset.col as f64, w));
    f.push(unit(s.swarm_offset.row as f64, h));
    f.push(if s.swarm_direction > 0 { 1.0 } else { 0.0 });
    let period = config.swarm_step_period;
    f.push(unit((s.step_index % period) as f64, (period.max(2) - 1) as f64));
    // Lowest alive row of the swarm column above each relative position
    // (0 = no live alien there, 1 = the bottom swarm row).
    let mut swarm = vec![0.0; span];
    for c in 0..config.swarm_cols {
        if let Some(r) = s.lowest_alive(c) {
            swarm[slot(s.swarm_offset.col + c * config.alien_spacing)] = (r + 1) as f64 / config.swarm_rows as f64;
        }
    }
    f.extend(swarm);
    match s.player_bullet {
        Some(b) => f.extend([1.0, rel(b.col), unit(b.row as f64, h)]),
        None => f.extend([0.0, 0.0, 0.0]),
    }
    // The same swarm profile seen from the bullet, for BULLET_WINDOW columns
    // centred on it.
    let half = BULLET_WINDOW / 2;
    for k in 0..BULLET_WINDOW {
        let v = s.player_bullet.and_then(|b| {
            let col = (b.col + k).checked_sub(half)?;
            let pos = col.checked_sub(s.swarm_offset.col)?;
            if pos % config.alien_spacing != 0 {
                return None;
            }
            let c = pos / config.alien_spacing;
            if c >= config.swarm_cols {
                return None;
            }
            s.lowest_alive(c).map(|r| (r + 1) as f64 / config.swarm_rows as f64)
        });
        f.push(v.unwrap_or(0.0));
    }
    // Proximity of the lowest bomb per relative position (1 = at the player row).
    let mut bombs = vec![0.0; span];
    for b in &s.bombs {
        let p = (b.row + 1) as f64 / config.grid_height as f64;
        let k = slot(b.col);
        if p > bombs[k] {
            bombs[k] = p;
        }
    }
    f.extend(bombs);
    match s.bonus_ship {
        Some(ship) => f.extend([1.0, rel(ship.col)]),
        None => f.extend([0.0, 0.0]),
    }
    f.push(s.lives_left as f64 / config.lives as f64);
    debug_assert_eq!(f.len(), config.feature_dim());
    f
}

/// The K most recent frames, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationStack {
    depth: usize,
    frames: VecDeque<Vec<f64>>,
}

impl ObservationStack {
    pub fn new(depth: usize) -> Self {
        assert!(depth >= 1, "stack depth must be positive");
        ObservationStack { depth, frames: VecDeque::with_capacity(depth) }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn frames(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.frames.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Append a frame, dropping the oldest. The first frame of a stream fills
    /// every slot.
    pub fn push(&mut self, frame: Vec<f64>) {
        if self.frames.is_empty() {
            for _ in 1..self.depth {
                self.frames.push_back(frame.clone());
            }
        } else if self.frames.len() == self.depth {
            self.frames.pop_front();
        }
        self.frames.push_back(frame);
    }

    /// Frames concatenated oldest to newest.
    pub fn flatten(&self) -> Vec<f64> {
        self.frames.iter().flatten().copied().collect()
    }
}

/// Append the current frame of `state` to `history`.
pub fn observe(config: &EnvConfig, state: &GameState, history: &ObservationStack) -> ObservationStack {
    let mut next = history.clone();
    next.push(frame_features(config, state));
    next
}

/// A running environment: state plus its observation stack.
#[derive(Debug, Clone)]
pub struct MiniInvaders {
    pub config: EnvConfig,
    pub state: GameState,
    pub obs: ObservationStack,
}

impl MiniInvaders {
    pub fn new(config: EnvConfig, seed: u64, depth: usize) -> Result<Self> {
        let state = env_new(&config, seed)?;
        let obs = observe(&config, &state, &ObservationStack::new(depth));
        Ok(MiniInvaders { config, state, obs })
    }

    pub fn step(&mut self, action: usize) -> Result<StepOutcome> {
        let (next, outcome) = env_step(&self.config, &self.state, action)?;
        self.state = next;
        self.obs.push(frame_features(&self.config, &self.state));
        Ok(outcome)
    }
}

/// Plain-text picture of the board, for debugging.
pub fn render_ascii(config: &EnvConfig, s: &GameState) -> String {
    let mut grid = vec![vec!['.'; config.grid_width]; config.grid_height];
    for (r, row) in s.alive.iter().enumerate() {
        for (c, &a) in row.iter().enumerate() {
            if a {
                grid[s.swarm_offset.row + r][s.swarm_offset.col + c * config.alien_spacing] = 'W';
            }
        }
    }
    if let Some(ship) = s.bonus_ship {
        grid[0][ship.col] = 'B';
    }
    for b in &s.bombs {
        grid[b.row][b.col] = '*';
    }
    if let Some(b) = s.player_bullet {
        grid[b.row][b.col] = '|';
    }
    grid[config.grid_height - 1][s.player_col] = 'A';
    let mut out = String::new();
    for row in grid {
        out.extend(row);
        out.push('\n');
    }
    out.push_str(&format!("lives {} step {}\n", s.lives_left, s.step_index));
    out
}
