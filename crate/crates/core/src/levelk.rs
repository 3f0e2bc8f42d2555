//! Offline pre-computation of level-k action-value tables.
//!
//! Human drivers are modeled on a two-player training game over the
//! roster-1 grid space: the agent being trained sits in the ego slot of the
//! state, its training opponent in the single agent slot, and both move
//! with the three longitudinal actions. Level 0 treats the opponent as a
//! static obstacle; level k best-responds to the perfectly rational
//! (argmax, uniform tie-break) policy of the level-(k−1) table, looked up
//! with the seats swapped. Rationality coefficients never enter training:
//! they are applied at runtime on top of these tables.
//!
//! The training window is closed: positions clamp at the grid edges so that
//! exact value iteration operates on a finite space. Collision transitions
//! are absorbing with zero further reward.

use crate::grid::{
    self, AgentPhysState, GridParams, GridState, HumanAction, LaneId, RewardParams,
    NUM_HUMAN_ACTIONS,
};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{self, Read};
use std::path::Path;
use thiserror::Error;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Training configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Highest intelligence level to train.
    pub k_max: u32,
    /// Discount factor; must match `RewardParams::gamma` used at runtime.
    pub gamma: f64,
    /// Sup-norm Bellman residual threshold.
    pub tol: f64,
    pub max_iters: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k_max: 2,
            gamma: 0.95,
            tol: 1e-6,
            max_iters: 10_000,
        }
    }
}

/// Converged state values for one level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueFunction {
    pub level: u32,
    pub values: Vec<f64>,
}

/// Action values for one level, row-major `[num_states x 3]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub level: u32,
    pub q: Vec<f64>,
}

impl QTable {
    pub fn row(&self, state_index: usize) -> [f64; NUM_HUMAN_ACTIONS] {
        let base = state_index * NUM_HUMAN_ACTIONS;
        [self.q[base], self.q[base + 1], self.q[base + 2]]
    }

    pub fn num_states(&self) -> usize {
        self.q.len() / NUM_HUMAN_ACTIONS
    }
}

/// The trained hierarchy plus the discretization it was trained on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QTableSet {
    pub params: GridParams,
    pub rewards: RewardParams,
    pub k_max: u32,
    /// Tables for levels `0..=k_max`, in order.
    pub tables: Vec<QTable>,
}

impl QTableSet {
    pub fn table(&self, level: u32) -> &QTable {
        &self.tables[level as usize]
    }

    pub fn all_finite(&self) -> bool {
        self.tables.iter().all(|t| t.q.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid grid parameters: {0}")]
    Params(#[from] grid::GridParamsError),
    #[error("k_max must be >= 1, got {0}")]
    KMaxTooSmall(u32),
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error(
        "value iteration for level {level} did not converge within {iters} sweeps \
         (residual {residual:.3e} > tol {tol:.3e})"
    )]
    NonConvergence {
        level: u32,
        iters: u32,
        residual: f64,
        tol: f64,
    },
}

/// Index stride helpers for the flattened transition tables.
const A: usize = NUM_HUMAN_ACTIONS;

/// Precomputed dynamics of the two-player training game.
///
/// `next`/`reward`/`terminal` are indexed `(s * 3 + a_self) * 3 + a_opp`;
/// the `frozen_*` tables (opponent fixed in place) are indexed
/// `s * 3 + a_self`. `swap` maps a state to the same state with the two
/// seats exchanged, which is how the opponent's policy is looked up.
pub struct TrainingGame {
    pub params: GridParams,
    pub rewards: RewardParams,
    pub num_states: usize,
    next: Vec<u32>,
    reward: Vec<f64>,
    terminal: Vec<bool>,
    frozen_next: Vec<u32>,
    frozen_reward: Vec<f64>,
    frozen_terminal: Vec<bool>,
    swap: Vec<u32>,
    absorbing: Vec<bool>,
}

/// One transition of the training game. The self agent occupies the ego
/// slot; `opp_action` of `None` freezes the opponent in place. Both
/// positions clamp at the window edges to keep the space closed.
fn training_transition(
    state: &GridState,
    self_action: HumanAction,
    opp_action: Option<HumanAction>,
    params: &GridParams,
    rewards: &RewardParams,
) -> (GridState, f64, bool) {
    let max_cell = params.length_cells as i64 - 1;
    let me = state.ego;
    let opp = state.agents[0];

    let my_vel = grid::human_next_vel(me.vel, self_action, params);
    let my_end_raw = me.cell as i64 + my_vel as i64;
    let (opp_vel, opp_end_raw) = match opp_action {
        Some(a) => {
            let v = grid::human_next_vel(opp.vel, a, params);
            (v, opp.cell as i64 + v as i64)
        }
        None => (opp.vel, opp.cell as i64),
    };

    let my_cell = my_end_raw.clamp(0, max_cell);
    let opp_cell = opp_end_raw.clamp(0, max_cell);

    let mut collided = same_lane_conflict(
        (me.cell as i64, me.lane),
        (my_end_raw, me.lane),
        (opp.cell as i64, opp.lane),
        (opp_end_raw, opp.lane),
    );
    // Clamping can pile both vehicles onto the edge cell.
    if me.lane == opp.lane && my_cell == opp_cell {
        collided = true;
    }

    let next = GridState {
        ego: AgentPhysState {
            cell: my_cell as u32,
            lane: me.lane,
            vel: my_vel,
        },
        indicating: state.indicating,
        agents: smallvec::smallvec![AgentPhysState {
            cell: opp_cell as u32,
            lane: opp.lane,
            vel: opp_vel,
        }],
        obstacles: smallvec::SmallVec::new(),
    };

    let mut reward = 0.0;
    if me.lane != LaneId::Target {
        reward += rewards.off_lane_penalty;
    }
    if collided {
        reward += rewards.collision_penalty;
    }
    (next, reward, collided)
}

fn same_lane_conflict(
    a_start: (i64, LaneId),
    a_end: (i64, LaneId),
    b_start: (i64, LaneId),
    b_end: (i64, LaneId),
) -> bool {
    if a_start.1 != b_start.1 {
        return false;
    }
    if a_end.0 == b_end.0 {
        return true;
    }
    (a_start.0 - b_start.0).signum() * (a_end.0 - b_end.0).signum() < 0
}

impl TrainingGame {
    pub fn build(params: &GridParams, rewards: &RewardParams) -> Result<TrainingGame, TrainError> {
        params.validate()?;
        let n = grid::num_states(params, 1);
        let mut game = TrainingGame {
            params: *params,
            rewards: *rewards,
            num_states: n,
            next: vec![0; n * A * A],
            reward: vec![0.0; n * A * A],
            terminal: vec![false; n * A * A],
            frozen_next: vec![0; n * A],
            frozen_reward: vec![0.0; n * A],
            frozen_terminal: vec![false; n * A],
            swap: vec![0; n],
            absorbing: vec![false; n],
        };

        for s in 0..n {
            let state = grid::state_from_index(s, params, 1);
            let me = state.ego;
            let opp = state.agents[0];
            game.absorbing[s] = me.lane == opp.lane && me.cell == opp.cell;

            let swapped = GridState {
                ego: opp,
                indicating: state.indicating,
                agents: smallvec::smallvec![me],
                obstacles: smallvec::SmallVec::new(),
            };
            game.swap[s] = grid::state_index(&swapped, params, 1) as u32;

            for (ai, &a_self) in HumanAction::ALL.iter().enumerate() {
                let f = s * A + ai;
                let (ns, r, term) = training_transition(&state, a_self, None, params, rewards);
                game.frozen_next[f] = grid::state_index(&ns, params, 1) as u32;
                game.frozen_reward[f] = r;
                game.frozen_terminal[f] = term;

                for (oi, &a_opp) in HumanAction::ALL.iter().enumerate() {
                    let t = f * A + oi;
                    let (ns, r, term) =
                        training_transition(&state, a_self, Some(a_opp), params, rewards);
                    game.next[t] = grid::state_index(&ns, params, 1) as u32;
                    game.reward[t] = r;
                    game.terminal[t] = term;
                }
            }
        }
        Ok(game)
    }

    /// Joint transition `(next_index, reward, terminal)`; `None` freezes the
    /// opponent. Exposed so independent oracles can share the dynamics
    /// while recomputing values their own way.
    pub fn transition(
        &self,
        s: usize,
        a_self: HumanAction,
        a_opp: Option<HumanAction>,
    ) -> (usize, f64, bool) {
        match a_opp {
            Some(a) => {
                let t = (s * A + a_self.ordinal()) * A + a.ordinal();
                (self.next[t] as usize, self.reward[t], self.terminal[t])
            }
            None => {
                let t = s * A + a_self.ordinal();
                (
                    self.frozen_next[t] as usize,
                    self.frozen_reward[t],
                    self.frozen_terminal[t],
                )
            }
        }
    }

    pub fn swap_index(&self, s: usize) -> usize {
        self.swap[s] as usize
    }

    /// Post-collision states (seats overlapping) are absorbing with zero
    /// further reward.
    pub fn is_absorbing(&self, s: usize) -> bool {
        self.absorbing[s]
    }
}

/// Opponent action distribution per state, aligned with `HumanAction::ALL`.
pub type OpponentPolicyTable = Vec<[f64; A]>;

/// Perfectly rational policy of a table: uniform over the exact argmax set,
/// evaluated with the seats swapped so the policy owner sits in the ego
/// slot of its own lookup.
pub fn argmax_policy_table(prev: &QTable, game: &TrainingGame) -> OpponentPolicyTable {
    (0..game.num_states)
        .map(|s| argmax_uniform(&prev.row(game.swap_index(s))))
        .collect()
}

pub fn argmax_uniform(row: &[f64; A]) -> [f64; A] {
    let mut best = f64::NEG_INFINITY;
    for &v in row {
        if v > best {
            best = v;
        }
    }
    let mut out = [0.0; A];
    let count = row.iter().filter(|&&v| v == best).count();
    let p = 1.0 / count as f64;
    for (i, &v) in row.iter().enumerate() {
        if v == best {
            out[i] = p;
        }
    }
    out
}

fn backup(
    game: &TrainingGame,
    s: usize,
    a_self: usize,
    policy: Option<&OpponentPolicyTable>,
    v: &[f64],
    gamma: f64,
) -> f64 {
    match policy {
        None => {
            let t = s * A + a_self;
            let cont = if game.frozen_terminal[t] {
                0.0
            } else {
                v[game.frozen_next[t] as usize]
            };
            game.frozen_reward[t] + gamma * cont
        }
        Some(pol) => {
            let row = &pol[s];
            let mut acc = 0.0;
            for o in 0..A {
                let p = row[o];
                if p > 0.0 {
                    let t = (s * A + a_self) * A + o;
                    let cont = if game.terminal[t] {
                        0.0
                    } else {
                        v[game.next[t] as usize]
                    };
                    acc += p * (game.reward[t] + gamma * cont);
                }
            }
            acc
        }
    }
}

fn state_value(
    game: &TrainingGame,
    s: usize,
    policy: Option<&OpponentPolicyTable>,
    v: &[f64],
    gamma: f64,
) -> f64 {
    if game.is_absorbing(s) {
        return 0.0;
    }
    let mut best = f64::NEG_INFINITY;
    for a in 0..A {
        let q = backup(game, s, a, policy, v, gamma);
        if q > best {
            best = q;
        }
    }
    best
}

/// One Bellman optimality sweep from `prev` into `out`; returns the
/// sup-norm residual. Sequential version; bit-identical to [`sweep`].
pub fn sweep_sequential(
    game: &TrainingGame,
    policy: Option<&OpponentPolicyTable>,
    prev: &[f64],
    out: &mut [f64],
    gamma: f64,
) -> f64 {
    let mut residual: f64 = 0.0;
    for (s, slot) in out.iter_mut().enumerate() {
        let value = state_value(game, s, policy, prev, gamma);
        residual = residual.max((value - prev[s]).abs());
        *slot = value;
    }
    residual
}

/// One Bellman optimality sweep, data-parallel across state indices when
/// the `parallel` feature is enabled. Every state value is computed from
/// the frozen previous array, so the result is bit-identical regardless of
/// thread count.
#[cfg(feature = "parallel")]
pub fn sweep(
    game: &TrainingGame,
    policy: Option<&OpponentPolicyTable>,
    prev: &[f64],
    out: &mut [f64],
    gamma: f64,
) -> f64 {
    out.par_iter_mut()
        .enumerate()
        .map(|(s, slot)| {
            let value = state_value(game, s, policy, prev, gamma);
            let delta = (value - prev[s]).abs();
            *slot = value;
            delta
        })
        .reduce(|| 0.0, f64::max)
}

#[cfg(not(feature = "parallel"))]
pub fn sweep(
    game: &TrainingGame,
    policy: Option<&OpponentPolicyTable>,
    prev: &[f64],
    out: &mut [f64],
    gamma: f64,
) -> f64 {
    sweep_sequential(game, policy, prev, out, gamma)
}

/// Value iteration outcome with convergence diagnostics.
pub struct ValueIterationOutcome {
    pub vf: ValueFunction,
    pub iters: u32,
    pub residual: f64,
}

fn solve_values(
    game: &TrainingGame,
    policy: Option<&OpponentPolicyTable>,
    level: u32,
    cfg: &TrainConfig,
) -> Result<ValueIterationOutcome, TrainError> {
    if cfg.tol <= 0.0 {
        return Err(TrainError::BadTolerance(cfg.tol));
    }
    let mut prev = vec![0.0; game.num_states];
    let mut next = vec![0.0; game.num_states];
    let mut residual = f64::INFINITY;
    for iter in 1..=cfg.max_iters {
        residual = sweep(game, policy, &prev, &mut next, cfg.gamma);
        std::mem::swap(&mut prev, &mut next);
        if residual <= cfg.tol {
            return Ok(ValueIterationOutcome {
                vf: ValueFunction {
                    level,
                    values: prev,
                },
                iters: iter,
                residual,
            });
        }
    }
    Err(TrainError::NonConvergence {
        level,
        iters: cfg.max_iters,
        residual,
        tol: cfg.tol,
    })
}

/// Value iteration for a level-k agent against a fixed opponent policy
/// (the level-(k−1) policy, defined for every state).
pub fn value_iteration(
    game: &TrainingGame,
    opponent_policy: &OpponentPolicyTable,
    level: u32,
    cfg: &TrainConfig,
) -> Result<ValueIterationOutcome, TrainError> {
    solve_values(game, Some(opponent_policy), level, cfg)
}

/// One-step backup of action values from a converged value function, using
/// the same discount the values were solved with; no further iteration.
pub fn compute_q(
    game: &TrainingGame,
    vf: &ValueFunction,
    opponent_policy: Option<&OpponentPolicyTable>,
    gamma: f64,
) -> QTable {
    let mut q = vec![0.0; game.num_states * A];
    for s in 0..game.num_states {
        for a in 0..A {
            q[s * A + a] = if game.is_absorbing(s) {
                0.0
            } else {
                backup(game, s, a, opponent_policy, &vf.values, gamma)
            };
        }
    }
    QTable {
        level: vf.level,
        q,
    }
}

/// Extra sweep over a returned value function; the return value is the
/// Bellman residual, used to assert convergence independently.
pub fn bellman_residual(
    game: &TrainingGame,
    policy: Option<&OpponentPolicyTable>,
    vf: &ValueFunction,
    gamma: f64,
) -> f64 {
    let mut out = vec![0.0; game.num_states];
    sweep_sequential(game, policy, &vf.values, &mut out, gamma)
}

/// Level-0 table: the single-agent problem in which the training opponent
/// is frozen in place as a static obstacle.
pub fn compute_level0(
    params: &GridParams,
    rewards: &RewardParams,
    cfg: &TrainConfig,
) -> Result<QTable, TrainError> {
    let game = TrainingGame::build(params, rewards)?;
    compute_level0_in(&game, cfg)
}

fn compute_level0_in(game: &TrainingGame, cfg: &TrainConfig) -> Result<QTable, TrainError> {
    let outcome = solve_values(game, None, 0, cfg)?;
    Ok(compute_q(game, &outcome.vf, None, cfg.gamma))
}

/// Trains the full hierarchy: level 0, then each level k against the
/// argmax policy of level k−1.
pub fn train_hierarchy(
    params: &GridParams,
    rewards: &RewardParams,
    cfg: &TrainConfig,
) -> Result<QTableSet, TrainError> {
    if cfg.k_max < 1 {
        return Err(TrainError::KMaxTooSmall(cfg.k_max));
    }
    let game = TrainingGame::build(params, rewards)?;
    let mut tables = vec![compute_level0_in(&game, cfg)?];
    for k in 1..=cfg.k_max {
        let policy = argmax_policy_table(&tables[(k - 1) as usize], &game);
        let outcome = value_iteration(&game, &policy, k, cfg)?;
        tables.push(compute_q(&game, &outcome.vf, Some(&policy), cfg.gamma));
    }
    Ok(QTableSet {
        params: *params,
        rewards: *rewards,
        k_max: cfg.k_max,
        tables,
    })
}

const MAGIC: &[u8; 8] = b"QLKTABLE";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum QTableFileError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("not a Q-table file (bad magic)")]
    BadMagic,
    #[error("unsupported format version {found} (expected {FORMAT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("file truncated while reading {context}")]
    Truncated { context: &'static str },
    #[error("{field} mismatch: expected {expected}, file has {found}")]
    ParamMismatch {
        field: &'static str,
        expected: String,
        found: String,
    },
    #[error("table for level {level} has {found} entries, expected {expected}")]
    BadTableShape {
        level: u32,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value in table for level {level}")]
    NonFinite { level: u32 },
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &'static str) -> Result<&'a [u8], QTableFileError> {
        if self.pos + n > self.buf.len() {
            return Err(QTableFileError::Truncated { context });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, context: &'static str) -> Result<u32, QTableFileError> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().unwrap()))
    }

    fn u64(&mut self, context: &'static str) -> Result<u64, QTableFileError> {
        Ok(u64::from_le_bytes(self.take(8, context)?.try_into().unwrap()))
    }

    fn f64(&mut self, context: &'static str) -> Result<f64, QTableFileError> {
        Ok(f64::from_le_bytes(self.take(8, context)?.try_into().unwrap()))
    }
}

fn check_u32(
    field: &'static str,
    expected: u32,
    found: u32,
) -> Result<(), QTableFileError> {
    if expected != found {
        return Err(QTableFileError::ParamMismatch {
            field,
            expected: expected.to_string(),
            found: found.to_string(),
        });
    }
    Ok(())
}

fn check_f64(
    field: &'static str,
    expected: f64,
    found: f64,
) -> Result<(), QTableFileError> {
    if expected != found {
        return Err(QTableFileError::ParamMismatch {
            field,
            expected: expected.to_string(),
            found: found.to_string(),
        });
    }
    Ok(())
}

/// Serializes the table set: magic, format version, grid and reward
/// parameters, k_max, then row-major little-endian f64 rows per level.
/// Byte-exact across runs and platforms.
pub fn save_qtables(set: &QTableSet, path: &Path) -> Result<(), QTableFileError> {
    let n = grid::num_states(&set.params, 1);
    let mut buf = Vec::with_capacity(64 + set.tables.len() * (4 + n * A * 8));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&set.params.length_cells.to_le_bytes());
    buf.extend_from_slice(&set.params.lanes.to_le_bytes());
    buf.extend_from_slice(&set.params.cell_length_m.to_le_bytes());
    buf.extend_from_slice(&set.params.max_vel.to_le_bytes());
    buf.extend_from_slice(&set.params.step_duration_s.to_le_bytes());
    buf.extend_from_slice(&set.rewards.off_lane_penalty.to_le_bytes());
    buf.extend_from_slice(&set.rewards.collision_penalty.to_le_bytes());
    buf.extend_from_slice(&set.rewards.gamma.to_le_bytes());
    buf.extend_from_slice(&set.k_max.to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    buf.extend_from_slice(&(A as u32).to_le_bytes());
    for table in &set.tables {
        buf.extend_from_slice(&table.level.to_le_bytes());
        for v in &table.q {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Loads a table set, verifying the format and that the file was trained
/// on exactly the given discretization. Truncated or mismatching files
/// yield an error, never a partial table.
pub fn load_qtables(
    path: &Path,
    expected_params: &GridParams,
    expected_rewards: &RewardParams,
) -> Result<QTableSet, QTableFileError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { buf: &bytes, pos: 0 };

    if r.take(8, "magic")? != MAGIC {
        return Err(QTableFileError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(QTableFileError::UnsupportedVersion { found: version });
    }

    let length_cells = r.u32("length_cells")?;
    let lanes = r.u32("lanes")?;
    let cell_length_m = r.f64("cell_length_m")?;
    let max_vel = r.u32("max_vel")?;
    let step_duration_s = r.f64("step_duration_s")?;
    check_u32("length_cells", expected_params.length_cells, length_cells)?;
    check_u32("lanes", expected_params.lanes, lanes)?;
    check_f64("cell_length_m", expected_params.cell_length_m, cell_length_m)?;
    check_u32("max_vel", expected_params.max_vel, max_vel)?;
    check_f64(
        "step_duration_s",
        expected_params.step_duration_s,
        step_duration_s,
    )?;

    let off_lane = r.f64("off_lane_penalty")?;
    let collision = r.f64("collision_penalty")?;
    let gamma = r.f64("gamma")?;
    check_f64("off_lane_penalty", expected_rewards.off_lane_penalty, off_lane)?;
    check_f64(
        "collision_penalty",
        expected_rewards.collision_penalty,
        collision,
    )?;
    check_f64("gamma", expected_rewards.gamma, gamma)?;

    let k_max = r.u32("k_max")?;
    let num_states = r.u64("num_states")? as usize;
    let expected_n = grid::num_states(expected_params, 1);
    if num_states != expected_n {
        return Err(QTableFileError::ParamMismatch {
            field: "num_states",
            expected: expected_n.to_string(),
            found: num_states.to_string(),
        });
    }
    let num_actions = r.u32("num_actions")?;
    check_u32("num_actions", A as u32, num_actions)?;

    let mut tables = Vec::with_capacity(k_max as usize + 1);
    for expected_level in 0..=k_max {
        let level = r.u32("table level")?;
        check_u32("table level", expected_level, level)?;
        let raw = r.take(num_states * A * 8, "table data")?;
        let mut q = Vec::with_capacity(num_states * A);
        for chunk in raw.chunks_exact(8) {
            q.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        if q.len() != num_states * A {
            return Err(QTableFileError::BadTableShape {
                level,
                expected: num_states * A,
                found: q.len(),
            });
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(QTableFileError::NonFinite { level });
        }
        tables.push(QTable { level, q });
    }

    Ok(QTableSet {
        params: *expected_params,
        rewards: *expected_rewards,
        k_max,
        tables,
    })
}

/// Human-readable JSON export for debugging. Float formatting is lossy;
/// the export is flagged non-canonical and cannot be loaded back.
pub fn export_qtables_json(set: &QTableSet, path: &Path) -> Result<(), QTableFileError> {
    #[derive(Serialize)]
    struct DebugExport<'a> {
        format: &'static str,
        canonical: bool,
        params: &'a GridParams,
        rewards: &'a RewardParams,
        k_max: u32,
        tables: &'a [QTable],
    }
    let export = DebugExport {
        format: "qtable-debug-json",
        canonical: false,
        params: &set.params,
        rewards: &set.rewards,
        k_max: set.k_max,
        tables: &set.tables,
    };
    let text = serde_json::to_string_pretty(&export).expect("tables serialize");
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_params() -> GridParams {
        GridParams {
            length_cells: 6,
            max_vel: 1,
            ..GridParams::default()
        }
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            k_max: 1,
            gamma: 0.4,
            tol: 1e-9,
            max_iters: 10_000,
        }
    }

    #[test]
    fn swap_is_an_involution() {
        let params = small_params();
        let game = TrainingGame::build(&params, &RewardParams::default()).unwrap();
        for s in 0..game.num_states {
            assert_eq!(game.swap_index(game.swap_index(s)), s);
        }
    }

    #[test]
    fn level0_prefers_braking_before_frozen_obstacle() {
        // Self one cell behind a frozen vehicle on the same lane, moving at
        // 1 cell/step: Maintain drives into it, Decelerate stops short.
        let params = small_params();
        let rewards = RewardParams::default();
        let cfg = small_cfg();
        let q0 = compute_level0(&params, &rewards, &cfg).unwrap();

        let state = GridState {
            ego: AgentPhysState {
                cell: 2,
                lane: LaneId::Target,
                vel: 1,
            },
            indicating: false,
            agents: smallvec::smallvec![AgentPhysState {
                cell: 3,
                lane: LaneId::Target,
                vel: 0,
            }],
            obstacles: smallvec::SmallVec::new(),
        };
        let s = grid::state_index(&state, &params, 1);
        let row = q0.row(s);
        let maintain = row[HumanAction::Maintain.ordinal()];
        let decel = row[HumanAction::Decelerate.ordinal()];
        assert!(
            maintain <= rewards.collision_penalty,
            "Maintain collides: {maintain}"
        );
        assert!(decel > rewards.collision_penalty / 2.0, "Decelerate is safe: {decel}");

        // Two-step hand rollout oracle for the Maintain branch: immediate
        // collision, absorbing afterwards.
        let (_, r, term) = game_transition_for(&params, &rewards, &state, HumanAction::Maintain);
        assert!(term);
        assert_eq!(r, rewards.collision_penalty);
        assert_eq!(maintain, r, "absorbing collision contributes exactly once");
    }

    fn game_transition_for(
        params: &GridParams,
        rewards: &RewardParams,
        state: &GridState,
        a: HumanAction,
    ) -> (GridState, f64, bool) {
        training_transition(state, a, None, params, rewards)
    }

    #[test]
    fn degenerate_constant_reward_value() {
        // A state whose self agent is alone on the wrong lane far from the
        // frozen opponent earns off_lane_penalty per step forever:
        // V = c / (1 - gamma).
        let params = small_params();
        let rewards = RewardParams::default();
        let cfg = small_cfg();
        let game = TrainingGame::build(&params, &rewards).unwrap();
        let outcome = solve_values(&game, None, 0, &cfg).unwrap();

        let state = GridState {
            ego: AgentPhysState {
                cell: 0,
                lane: LaneId::Ego,
                vel: 0,
            },
            indicating: false,
            agents: smallvec::smallvec![AgentPhysState {
                cell: 5,
                lane: LaneId::Target,
                vel: 0,
            }],
            obstacles: smallvec::SmallVec::new(),
        };
        let s = grid::state_index(&state, &params, 1);
        let expected = rewards.off_lane_penalty / (1.0 - cfg.gamma);
        assert!(
            (outcome.vf.values[s] - expected).abs() < 1e-6,
            "got {}, want {}",
            outcome.vf.values[s],
            expected
        );
    }

    #[test]
    fn bellman_consistency_of_q_and_v() {
        let params = small_params();
        let rewards = RewardParams::default();
        let cfg = small_cfg();
        let game = TrainingGame::build(&params, &rewards).unwrap();
        let set = train_hierarchy(&params, &rewards, &cfg).unwrap();
        assert_eq!(set.tables.len(), 2, "k_max = 1 yields levels 0 and 1");

        let policy = argmax_policy_table(&set.tables[0], &game);
        let outcome = value_iteration(&game, &policy, 1, &cfg).unwrap();
        for s in 0..game.num_states {
            let row = set.tables[1].row(s);
            let max_q = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(
                (max_q - outcome.vf.values[s]).abs() <= 10.0 * cfg.tol,
                "state {s}: max_a Q = {max_q}, V = {}",
                outcome.vf.values[s]
            );
        }
    }

    #[test]
    fn point_mass_opponent_reduces_to_deterministic_backup() {
        let params = small_params();
        let rewards = RewardParams::default();
        let game = TrainingGame::build(&params, &rewards).unwrap();
        let vf = ValueFunction {
            level: 1,
            values: (0..game.num_states).map(|s| (s % 7) as f64).collect(),
        };
        let mut point = vec![[0.0; A]; game.num_states];
        for row in &mut point {
            row[HumanAction::Decelerate.ordinal()] = 1.0;
        }
        let q = compute_q(&game, &vf, Some(&point), rewards.gamma);
        for s in (0..game.num_states).step_by(101) {
            if game.is_absorbing(s) {
                continue;
            }
            for a in HumanAction::ALL {
                let (ns, r, term) = game.transition(s, a, Some(HumanAction::Decelerate));
                let want = r + game.rewards.gamma * if term { 0.0 } else { vf.values[ns] };
                assert_eq!(q.row(s)[a.ordinal()], want);
            }
        }
    }

    #[test]
    fn uniform_opponent_averages_three_backups() {
        let params = small_params();
        let rewards = RewardParams::default();
        let game = TrainingGame::build(&params, &rewards).unwrap();
        let vf = ValueFunction {
            level: 1,
            values: (0..game.num_states).map(|s| ((s * 31) % 11) as f64).collect(),
        };
        let uniform = vec![[1.0 / 3.0; A]; game.num_states];
        let q = compute_q(&game, &vf, Some(&uniform), rewards.gamma);

        let s = game.num_states / 3;
        if !game.is_absorbing(s) {
            let a = HumanAction::Accelerate;
            let mut want = 0.0;
            for o in HumanAction::ALL {
                let (ns, r, term) = game.transition(s, a, Some(o));
                want += (r + game.rewards.gamma * if term { 0.0 } else { vf.values[ns] }) / 3.0;
            }
            assert!((q.row(s)[a.ordinal()] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn retraining_is_bit_identical() {
        let params = small_params();
        let rewards = RewardParams::default();
        let cfg = small_cfg();
        let a = train_hierarchy(&params, &rewards, &cfg).unwrap();
        let b = train_hierarchy(&params, &rewards, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parallel_and_sequential_sweeps_agree_bitwise() {
        let params = small_params();
        let rewards = RewardParams::default();
        let game = TrainingGame::build(&params, &rewards).unwrap();
        let prev: Vec<f64> = (0..game.num_states).map(|s| (s % 13) as f64 * 0.5).collect();
        let mut out_a = vec![0.0; game.num_states];
        let mut out_b = vec![0.0; game.num_states];
        let ra = sweep(&game, None, &prev, &mut out_a, 0.9);
        let rb = sweep_sequential(&game, None, &prev, &mut out_b, 0.9);
        assert_eq!(out_a, out_b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn save_load_roundtrip_is_byte_exact() {
        let params = small_params();
        let rewards = RewardParams::default();
        let cfg = small_cfg();
        let set = train_hierarchy(&params, &rewards, &cfg).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.qlk");
        let p2 = dir.path().join("b.qlk");
        save_qtables(&set, &p1).unwrap();
        let loaded = load_qtables(&p1, &params, &rewards).unwrap();
        save_qtables(&loaded, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn load_rejects_mismatched_length() {
        let params = small_params();
        let rewards = RewardParams::default();
        let cfg = small_cfg();
        let set = train_hierarchy(&params, &rewards, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.qlk");
        save_qtables(&set, &p).unwrap();

        let other = GridParams {
            length_cells: 8,
            ..params
        };
        let err = load_qtables(&p, &other, &rewards).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("length_cells"), "{msg}");
        assert!(msg.contains('6') && msg.contains('8'), "{msg}");
    }

    #[test]
    fn load_rejects_truncated_file() {
        let params = small_params();
        let rewards = RewardParams::default();
        let cfg = small_cfg();
        let set = train_hierarchy(&params, &rewards, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.qlk");
        save_qtables(&set, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 17]).unwrap();
        assert!(matches!(
            load_qtables(&p, &params, &rewards),
            Err(QTableFileError::Truncated { .. })
        ));
    }
}
