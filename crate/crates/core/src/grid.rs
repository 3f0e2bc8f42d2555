//! Two-lane grid-world driving environment.
//!
//! Deterministic dynamics, reward, collision semantics, exhaustive state
//! enumeration for the two-player training game, and the mapping between
//! world coordinates and the ego-centric grid.
//!
//! All operations are pure functions of their inputs; states are plain
//! values that are cheap to clone and safe to share across threads.

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use thiserror::Error;

/// Number of ego actions.
pub const NUM_EGO_ACTIONS: usize = 5;
/// Number of human (driver) actions.
pub const NUM_HUMAN_ACTIONS: usize = 3;

/// Lane identifiers. Lane 0 is the lane the ego starts on; lane 1 is the
/// lane it wants to merge into. Lane identity is shared between the world
/// and every grid frame (frames differ only by a longitudinal shift).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum LaneId {
    Ego = 0,
    Target = 1,
}

impl LaneId {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn other(self) -> LaneId {
        match self {
            LaneId::Ego => LaneId::Target,
            LaneId::Target => LaneId::Ego,
        }
    }

    pub fn from_index(i: usize) -> LaneId {
        match i {
            0 => LaneId::Ego,
            1 => LaneId::Target,
            _ => panic!("lane index {i} out of range"),
        }
    }
}

/// Ego maneuver set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum EgoAction {
    Accelerate = 0,
    Decelerate = 1,
    Maintain = 2,
    IndicateIntent = 3,
    LaneChange = 4,
}

impl EgoAction {
    pub const ALL: [EgoAction; NUM_EGO_ACTIONS] = [
        EgoAction::Accelerate,
        EgoAction::Decelerate,
        EgoAction::Maintain,
        EgoAction::IndicateIntent,
        EgoAction::LaneChange,
    ];

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn from_ordinal(i: usize) -> EgoAction {
        Self::ALL[i]
    }
}

/// Longitudinal action set shared by all human drivers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum HumanAction {
    Accelerate = 0,
    Decelerate = 1,
    Maintain = 2,
}

impl HumanAction {
    pub const ALL: [HumanAction; NUM_HUMAN_ACTIONS] = [
        HumanAction::Accelerate,
        HumanAction::Decelerate,
        HumanAction::Maintain,
    ];

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn from_ordinal(i: usize) -> HumanAction {
        Self::ALL[i]
    }

    /// Velocity delta in cells/step.
    fn vel_delta(self) -> i64 {
        match self {
            HumanAction::Accelerate => 1,
            HumanAction::Decelerate => -1,
            HumanAction::Maintain => 0,
        }
    }
}

/// Geometry and kinematic limits of the grid window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridParams {
    /// Longitudinal extent of the window in cells.
    pub length_cells: u32,
    /// Number of lanes; only 2 is supported.
    pub lanes: u32,
    /// Physical length of one cell in meters.
    pub cell_length_m: f64,
    /// Maximum velocity in cells/step.
    pub max_vel: u32,
    /// Duration of one decision step in seconds.
    pub step_duration_s: f64,
}

impl Default for GridParams {
    fn default() -> Self {
        GridParams {
            length_cells: 20,
            lanes: 2,
            cell_length_m: 2.0,
            max_vel: 3,
            step_duration_s: 1.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum GridParamsError {
    #[error("length_cells must be >= 4, got {0}")]
    LengthTooSmall(u32),
    #[error("exactly 2 lanes are supported, got {0}")]
    UnsupportedLanes(u32),
    #[error("max_vel must be >= 1, got {0}")]
    MaxVelTooSmall(u32),
    #[error("cell_length_m and step_duration_s must be positive")]
    NonPositiveScale,
}

impl GridParams {
    pub fn validate(&self) -> Result<(), GridParamsError> {
        if self.length_cells < 4 {
            return Err(GridParamsError::LengthTooSmall(self.length_cells));
        }
        if self.lanes != 2 {
            return Err(GridParamsError::UnsupportedLanes(self.lanes));
        }
        if self.max_vel < 1 {
            return Err(GridParamsError::MaxVelTooSmall(self.max_vel));
        }
        if self.cell_length_m <= 0.0 || self.step_duration_s <= 0.0 {
            return Err(GridParamsError::NonPositiveScale);
        }
        Ok(())
    }

    /// Cell the ego occupies in its own frame.
    pub fn center_cell(&self) -> u32 {
        self.length_cells / 2
    }

    /// Number of distinct per-agent physical states.
    pub fn agent_codes(&self) -> usize {
        (self.length_cells * self.lanes * (self.max_vel + 1)) as usize
    }

    /// Grid velocity corresponding to a world speed, rounded to the nearest
    /// level and clamped to `[0, max_vel]`.
    pub fn vel_from_world(&self, v_mps: f64) -> u32 {
        let cells = (v_mps.max(0.0) * self.step_duration_s / self.cell_length_m).round();
        (cells as i64).clamp(0, self.max_vel as i64) as u32
    }

    /// World speed of one grid velocity level (m/s).
    pub fn world_speed_per_level(&self) -> f64 {
        self.cell_length_m / self.step_duration_s
    }
}

/// Physical state of one vehicle on the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AgentPhysState {
    pub cell: u32,
    pub lane: LaneId,
    pub vel: u32,
}

/// Full physical grid state: ego, the lane-change-intent flag, tracked
/// agents, and static obstacle cells.
///
/// The agents list keeps its order across [`step`]; agents that leave the
/// window are dropped, survivors keep their relative order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridState {
    pub ego: AgentPhysState,
    /// Ego has signalled the lane change and holds a half-lane offset.
    /// Flag only: it does not alter collision geometry.
    pub indicating: bool,
    pub agents: SmallVec<[AgentPhysState; 6]>,
    pub obstacles: SmallVec<[(u32, LaneId); 2]>,
}

/// Reward shaping constants and the discount factor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    pub off_lane_penalty: f64,
    pub collision_penalty: f64,
    pub gamma: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams {
            off_lane_penalty: -1.0,
            collision_penalty: -100.0,
            gamma: 0.95,
        }
    }
}

/// Result of one environment transition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub next_state: GridState,
    pub reward: f64,
    pub collided: bool,
    pub ego_on_target: bool,
}

/// Updated velocity of the ego under an action.
fn ego_next_vel(vel: u32, action: EgoAction, params: &GridParams) -> u32 {
    match action {
        EgoAction::Accelerate => (vel + 1).min(params.max_vel),
        EgoAction::Decelerate => vel.saturating_sub(1),
        EgoAction::Maintain | EgoAction::IndicateIntent | EgoAction::LaneChange => vel,
    }
}

/// Updated velocity of a human agent under an action.
pub fn human_next_vel(vel: u32, action: HumanAction, params: &GridParams) -> u32 {
    ((vel as i64 + action.vel_delta()).clamp(0, params.max_vel as i64)) as u32
}

/// Unclamped next cell of a human agent (velocity updates first, then the
/// position advances by the updated velocity). Used both by [`step`] and by
/// callers that need to predict whether an agent stays inside the window.
pub fn human_next_cell(agent: &AgentPhysState, action: HumanAction, params: &GridParams) -> i64 {
    agent.cell as i64 + human_next_vel(agent.vel, action, params) as i64
}

/// Collision test for a pair of swept entities. Entities collide when they
/// end on the same cell of the same lane, or when they share the end lane
/// and their longitudinal order strictly flips during the move (a crossing
/// on a coarse grid cannot be a physical pass-by).
fn pair_collides(
    a_start: (i64, LaneId),
    a_end: (i64, LaneId),
    b_start: (i64, LaneId),
    b_end: (i64, LaneId),
) -> bool {
    if a_end.1 == b_end.1 {
        if a_end.0 == b_end.0 {
            return true;
        }
        let before = a_start.0 - b_start.0;
        let after = a_end.0 - b_end.0;
        if before.signum() * after.signum() < 0 {
            return true;
        }
    }
    false
}

/// Advances the grid by one step.
///
/// Velocities update first (Accelerate +1 clamped to `max_vel`, Decelerate
/// −1 clamped to 0, Maintain unchanged), then positions advance by the
/// updated velocity. `IndicateIntent` sets the `indicating` flag and keeps
/// the lane; `LaneChange` moves the ego to the target lane and clears the
/// flag. The ego clamps at the window edge; agents that leave the window
/// are dropped from the state (the caller retains their world identity).
///
/// Reward is `off_lane_penalty` if the ego does not end on the target lane
/// plus `collision_penalty` if the transition collides.
///
/// # Panics
///
/// Panics if `human_actions.len() != state.agents.len()`.
pub fn step(
    state: &GridState,
    ego_action: EgoAction,
    human_actions: &[HumanAction],
    params: &GridParams,
    rewards: &RewardParams,
) -> StepOutcome {
    assert_eq!(
        human_actions.len(),
        state.agents.len(),
        "one human action per tracked agent"
    );

    let max_cell = params.length_cells as i64 - 1;

    let ego_vel = ego_next_vel(state.ego.vel, ego_action, params);
    let ego_start = (state.ego.cell as i64, state.ego.lane);
    let ego_lane = match ego_action {
        EgoAction::LaneChange => LaneId::Target,
        _ => state.ego.lane,
    };
    let ego_cell = (state.ego.cell as i64 + ego_vel as i64).clamp(0, max_cell);
    let ego_end = (ego_cell, ego_lane);
    let indicating = match ego_action {
        EgoAction::IndicateIntent => true,
        EgoAction::LaneChange => false,
        _ => state.indicating,
    };

    // Swept trajectories for every agent; end cells are unclamped so that
    // crossings with departing agents are still detected.
    let mut agent_sweeps: SmallVec<[((i64, LaneId), (i64, LaneId), u32); 6]> = SmallVec::new();
    for (agent, &action) in state.agents.iter().zip(human_actions) {
        let vel = human_next_vel(agent.vel, action, params);
        let end = agent.cell as i64 + vel as i64;
        agent_sweeps.push(((agent.cell as i64, agent.lane), (end, agent.lane), vel));
    }

    let mut collided = false;
    for (a_start, a_end, _) in &agent_sweeps {
        if pair_collides(ego_start, ego_end, *a_start, *a_end) {
            collided = true;
        }
    }
    for i in 0..agent_sweeps.len() {
        for j in (i + 1)..agent_sweeps.len() {
            let (as_, ae, _) = agent_sweeps[i];
            let (bs, be, _) = agent_sweeps[j];
            if pair_collides(as_, ae, bs, be) {
                collided = true;
            }
        }
    }
    for &(cell, lane) in &state.obstacles {
        let ob = (cell as i64, lane);
        if pair_collides(ego_start, ego_end, ob, ob) {
            collided = true;
        }
        for (a_start, a_end, _) in &agent_sweeps {
            if pair_collides(*a_start, *a_end, ob, ob) {
                collided = true;
            }
        }
    }

    let mut agents: SmallVec<[AgentPhysState; 6]> = SmallVec::new();
    for ((_, (end, lane), vel), agent) in agent_sweeps.iter().zip(&state.agents) {
        if (0..=max_cell).contains(end) {
            agents.push(AgentPhysState {
                cell: *end as u32,
                lane: *lane,
                vel: *vel,
            });
        }
        let _ = agent;
    }

    let next_state = GridState {
        ego: AgentPhysState {
            cell: ego_cell as u32,
            lane: ego_lane,
            vel: ego_vel,
        },
        indicating,
        agents,
        obstacles: state.obstacles.clone(),
    };

    let ego_on_target = next_state.ego.lane == LaneId::Target;
    let mut reward = 0.0;
    if !ego_on_target {
        reward += rewards.off_lane_penalty;
    }
    if collided {
        reward += rewards.collision_penalty;
    }

    StepOutcome {
        next_state,
        reward,
        collided,
        ego_on_target,
    }
}

fn agent_code(agent: &AgentPhysState, params: &GridParams) -> usize {
    debug_assert!(agent.cell < params.length_cells && agent.vel <= params.max_vel);
    (agent.cell as usize * params.lanes as usize + agent.lane.index())
        * (params.max_vel as usize + 1)
        + agent.vel as usize
}

fn agent_from_code(code: usize, params: &GridParams) -> AgentPhysState {
    let vels = params.max_vel as usize + 1;
    let vel = code % vels;
    let rest = code / vels;
    let lane = LaneId::from_index(rest % params.lanes as usize);
    let cell = rest / params.lanes as usize;
    AgentPhysState {
        cell: cell as u32,
        lane,
        vel: vel as u32,
    }
}

/// Number of enumerable states with `roster` tracked agents (no obstacles).
pub fn num_states(params: &GridParams, roster: usize) -> usize {
    params.agent_codes().pow(roster as u32 + 1) * 2
}

/// Bijective index of an obstacle-free state with exactly `roster` agents.
///
/// # Panics
///
/// Panics if the agent count differs from `roster`, obstacles are present,
/// or any field lies outside the grid.
pub fn state_index(state: &GridState, params: &GridParams, roster: usize) -> usize {
    assert_eq!(state.agents.len(), roster, "state must use exactly the roster");
    assert!(
        state.obstacles.is_empty(),
        "enumeration covers obstacle-free states"
    );
    assert!(
        state.ego.cell < params.length_cells && state.ego.vel <= params.max_vel,
        "ego outside grid"
    );
    let codes = params.agent_codes();
    let mut acc = agent_code(&state.ego, params);
    for agent in &state.agents {
        assert!(
            agent.cell < params.length_cells && agent.vel <= params.max_vel,
            "agent outside grid"
        );
        acc = acc * codes + agent_code(agent, params);
    }
    acc * 2 + state.indicating as usize
}

/// Inverse of [`state_index`].
pub fn state_from_index(index: usize, params: &GridParams, roster: usize) -> GridState {
    assert!(index < num_states(params, roster), "index out of range");
    let indicating = index % 2 == 1;
    let mut acc = index / 2;
    let codes = params.agent_codes();
    let mut rev: SmallVec<[AgentPhysState; 6]> = SmallVec::new();
    for _ in 0..roster {
        rev.push(agent_from_code(acc % codes, params));
        acc /= codes;
    }
    rev.reverse();
    GridState {
        ego: agent_from_code(acc, params),
        indicating,
        agents: rev,
        obstacles: SmallVec::new(),
    }
}

/// Ego pose in world coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoWorldPose {
    pub x_m: f64,
    pub lane: LaneId,
    pub v_mps: f64,
    pub indicating: bool,
}

/// One tracked vehicle in world coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldAgent {
    pub id: u32,
    pub x_m: f64,
    pub lane: LaneId,
    pub v_mps: f64,
}

/// Snapshot of the world as visible to the planner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSnapshot {
    pub ego: EgoWorldPose,
    pub agents: Vec<WorldAgent>,
    /// Static occupied positions (e.g. a stalled vehicle).
    pub obstacles: Vec<(f64, LaneId)>,
}

/// Maps a world snapshot onto an ego-centric grid.
///
/// The grid is centered on the ego; longitudinal offsets round to the
/// nearest cell and speeds to the nearest velocity level. Agents and
/// obstacles whose cell falls outside the window are dropped. The returned
/// id map records which world agent produced each grid agent slot, in input
/// order. Lossy by design; never fails.
pub fn map_from_world(snapshot: &WorldSnapshot, params: &GridParams) -> (GridState, Vec<u32>) {
    let center = params.center_cell() as i64;
    let max_cell = params.length_cells as i64 - 1;
    let to_cell = |x: f64| -> i64 { center + ((x - snapshot.ego.x_m) / params.cell_length_m).round() as i64 };

    let mut agents: SmallVec<[AgentPhysState; 6]> = SmallVec::new();
    let mut id_map = Vec::new();
    for agent in &snapshot.agents {
        let cell = to_cell(agent.x_m);
        if (0..=max_cell).contains(&cell) {
            agents.push(AgentPhysState {
                cell: cell as u32,
                lane: agent.lane,
                vel: params.vel_from_world(agent.v_mps),
            });
            id_map.push(agent.id);
        }
    }

    let mut obstacles: SmallVec<[(u32, LaneId); 2]> = SmallVec::new();
    for &(x, lane) in &snapshot.obstacles {
        let cell = to_cell(x);
        if (0..=max_cell).contains(&cell) && !obstacles.contains(&(cell as u32, lane)) {
            obstacles.push((cell as u32, lane));
        }
    }

    let state = GridState {
        ego: AgentPhysState {
            cell: center as u32,
            lane: snapshot.ego.lane,
            vel: params.vel_from_world(snapshot.ego.v_mps),
        },
        indicating: snapshot.ego.indicating,
        agents,
        obstacles,
    };
    (state, id_map)
}

/// Lane the ego effectively occupies from an opponent's point of view: an
/// indicating ego is treated as already entering the target lane, which is
/// how the half-lane nudge reaches the opponents' pre-trained tables.
pub fn effective_ego_lane(ego_lane: LaneId, indicating: bool) -> LaneId {
    if indicating || ego_lane == LaneId::Target {
        LaneId::Target
    } else {
        LaneId::Ego
    }
}

/// Projects a full grid state onto the two-player table domain as seen by
/// the agent in slot `agent_idx`: that agent sits recentered in the ego
/// slot of its own frame and the real ego occupies the single opponent
/// slot (at its effective lane). Everything else is projected out.
///
/// When the real ego falls outside the opponent's window it is replaced by
/// a far placement on the other lane, which the tables value as
/// non-interactive. The same convention is used by scripted opponents, so
/// predicted and actual behavior distributions coincide.
pub fn opponent_view(state: &GridState, agent_idx: usize, params: &GridParams) -> GridState {
    let me = state.agents[agent_idx];
    let center = params.center_cell() as i64;
    let max_cell = params.length_cells as i64 - 1;
    let delta = state.ego.cell as i64 - me.cell as i64;
    let ego_cell = center + delta;
    let other = if (0..=max_cell).contains(&ego_cell) {
        AgentPhysState {
            cell: ego_cell as u32,
            lane: effective_ego_lane(state.ego.lane, state.indicating),
            vel: state.ego.vel,
        }
    } else {
        AgentPhysState {
            cell: if delta > 0 { max_cell as u32 } else { 0 },
            lane: me.lane.other(),
            vel: 0,
        }
    };
    GridState {
        ego: AgentPhysState {
            cell: center as u32,
            lane: me.lane,
            vel: me.vel,
        },
        indicating: state.indicating,
        agents: SmallVec::from_slice(&[other]),
        obstacles: SmallVec::new(),
    }
}
