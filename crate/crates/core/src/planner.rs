//! Online game-theoretic planner.
//!
//! Each decision step maps the world onto an ego-centric grid, picks up to
//! two nearby drivers as game opponents, and runs an anytime Monte Carlo
//! tree search. Rollouts select ego actions by UCT (unsampled actions
//! first), sample opponent actions from belief-weighted quantal mixtures,
//! and expand children by simulating the grid dynamics, updating the
//! per-opponent beliefs, and augmenting the one-step reward with the
//! resulting information gain. After the real action executes, the subtree
//! under the matching child is reused as the next root; otherwise a fresh
//! root is built with the beliefs advanced by one Bayes step.
//!
//! The search tree is single-writer: one search loop mutates it between
//! observations. Q-tables and configuration are immutable and shareable.

use crate::grid::{
    self, AgentPhysState, EgoAction, GridParams, GridState, HumanAction, RewardParams,
    WorldSnapshot, NUM_EGO_ACTIONS,
};
use crate::levelk::QTableSet;
use crate::quantal::{
    self, belief_update, info_gain, predictive_policy, Belief, ProfileSupport,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};
use thiserror::Error;

/// Planner configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    /// Planning horizon in steps.
    pub horizon: u32,
    /// Wall-clock allowance per search, in seconds.
    pub time_allowance_s: Option<f64>,
    /// UCT exploration constant.
    pub exploration_c: f64,
    /// Discount factor; should match the reward discount.
    pub gamma: f64,
    /// Information-gain reward coefficient; 0 disables active learning.
    pub info_gain_phi: f64,
    pub rng_seed: u64,
    /// Deterministic budget substituting for wall clock in tests.
    /// Takes precedence over `time_allowance_s` when set.
    pub rollout_cap: Option<u32>,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            horizon: 4,
            time_allowance_s: None,
            exploration_c: 2.0,
            gamma: 0.95,
            info_gain_phi: 5.0,
            rng_seed: 0,
            rollout_cap: Some(2000),
        }
    }
}

/// Search budget resolved from the configuration.
#[derive(Clone, Copy, Debug)]
pub enum SearchBudget {
    Rollouts(u32),
    WallClock(Duration),
}

impl PlannerConfig {
    pub fn budget(&self) -> Result<SearchBudget, SearchError> {
        if let Some(cap) = self.rollout_cap {
            if cap == 0 {
                return Err(SearchError::BadBudget);
            }
            return Ok(SearchBudget::Rollouts(cap));
        }
        match self.time_allowance_s {
            Some(t) if t > 0.0 => Ok(SearchBudget::WallClock(Duration::from_secs_f64(t))),
            _ => Err(SearchError::BadBudget),
        }
    }
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("no rollouts completed within the allowance")]
    NoRollouts,
    #[error("invalid budget: set rollout_cap or a positive time_allowance_s")]
    BadBudget,
}

#[derive(Debug, Error)]
pub enum PlannerInitError {
    #[error("profile support invalid: {0}")]
    Support(#[from] quantal::QuantalError),
    #[error("support references level {level} but tables stop at {k_max}")]
    SupportLevel { level: u32, k_max: u32 },
    #[error("tables were trained on a different grid than the planner uses")]
    TableGridMismatch,
    #[error("tables contain non-finite values")]
    NonFiniteTables,
}

/// Why the opponent set has its shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionRationale {
    /// Nearest agent only (or fewer than two candidates).
    NearestOnly,
    /// Two nearest agents straddle the ego.
    BothSides,
}

/// Up to two agents treated as game opponents; everyone else is an
/// obstacle-like default-action agent during search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpponentSet {
    /// World agent ids, in selection order.
    pub ids: SmallVec<[u32; 2]>,
    /// Index of each opponent in the grid state's agent list.
    pub slots: SmallVec<[usize; 2]>,
    pub rationale: SelectionRationale,
}

/// Picks the two agents nearest to the ego by absolute longitudinal
/// offset (ties break toward the smaller world id). If both are strictly
/// ahead or strictly behind, only the nearest is kept.
pub fn select_opponents(state: &GridState, id_map: &[u32]) -> OpponentSet {
    debug_assert_eq!(state.agents.len(), id_map.len());
    let ego_cell = state.ego.cell as i64;
    let mut candidates: Vec<(usize, i64, u32)> = state
        .agents
        .iter()
        .enumerate()
        .map(|(slot, a)| (slot, a.cell as i64 - ego_cell, id_map[slot]))
        .collect();
    candidates.sort_by_key(|&(_, off, id)| (off.abs(), id));

    let mut ids = SmallVec::new();
    let mut slots = SmallVec::new();
    let mut rationale = SelectionRationale::NearestOnly;
    match candidates.len() {
        0 => {}
        1 => {
            ids.push(candidates[0].2);
            slots.push(candidates[0].0);
        }
        _ => {
            let (s0, o0, id0) = candidates[0];
            let (s1, o1, id1) = candidates[1];
            ids.push(id0);
            slots.push(s0);
            let same_side = (o0 > 0 && o1 > 0) || (o0 < 0 && o1 < 0);
            if !same_side {
                ids.push(id1);
                slots.push(s1);
                rationale = SelectionRationale::BothSides;
            }
        }
    }
    OpponentSet {
        ids,
        slots,
        rationale,
    }
}

/// Discrete action that best explains an observed agent transition, by
/// nearest predicted `(cell, vel)` under the grid kinematics. Both states
/// must be expressed in the same frame. Ties resolve to Maintain.
pub fn infer_agent_action(
    prev: &AgentPhysState,
    observed: &AgentPhysState,
    params: &GridParams,
) -> HumanAction {
    let mut best = HumanAction::Accelerate;
    let mut best_d = i64::MAX;
    let mut tie_has_maintain = false;
    for a in HumanAction::ALL {
        let vel = grid::human_next_vel(prev.vel, a, params) as i64;
        let cell = prev.cell as i64 + vel;
        let d = (observed.cell as i64 - cell).abs() + (observed.vel as i64 - vel).abs();
        if d < best_d {
            best_d = d;
            best = a;
            tie_has_maintain = a == HumanAction::Maintain;
        } else if d == best_d && a == HumanAction::Maintain {
            tie_has_maintain = true;
        }
    }
    if tie_has_maintain {
        HumanAction::Maintain
    } else {
        best
    }
}

/// Recovers each tracked agent's action between two consecutive grid
/// states in the same frame. Agents missing from either state produce no
/// entry (their beliefs are retained without an update this step).
pub fn infer_opponent_actions(
    prev: &GridState,
    prev_ids: &[u32],
    observed: &GridState,
    observed_ids: &[u32],
    params: &GridParams,
) -> Vec<(u32, HumanAction)> {
    let mut out = Vec::new();
    for (slot, id) in prev_ids.iter().enumerate() {
        if let Some(obs_slot) = observed_ids.iter().position(|o| o == id) {
            let action = infer_agent_action(
                &prev.agents[slot],
                &observed.agents[obs_slot],
                params,
            );
            out.push((*id, action));
        }
    }
    out
}

/// Per-search statistics, retained for logging.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchStats {
    pub rollouts: u32,
    pub root_values: [f64; NUM_EGO_ACTIONS],
    pub root_visits: [u32; NUM_EGO_ACTIONS],
    pub nodes: usize,
    pub root_reused: bool,
}

const ALL_UNSAMPLED: u8 = (1 << NUM_EGO_ACTIONS) - 1;

/// Joint-action key: ego ordinal in the low bits, each opponent action
/// (offset by one; zero means "no opponent in that slot") above it.
fn joint_key(ego: EgoAction, opp: &[HumanAction], present: &[bool]) -> u16 {
    let mut key = ego.ordinal() as u16;
    for (i, (&a, &p)) in opp.iter().zip(present).enumerate() {
        let code = if p { a.ordinal() as u16 + 1 } else { 0 };
        key |= code << (3 + 2 * i);
    }
    key
}

struct SearchNode {
    x: GridState,
    /// World ids aligned with `x.agents`.
    ids: SmallVec<[u32; 6]>,
    /// Beliefs aligned with the tree's opponent set.
    beliefs: SmallVec<[Belief; 2]>,
    /// Slot of each opponent in `x.agents`; `None` once it left the window.
    oppo_slots: SmallVec<[Option<usize>; 2]>,
    depth: u32,
    n: u32,
    n_a: [u32; NUM_EGO_ACTIONS],
    values: [f64; NUM_EGO_ACTIONS],
    unsampled: u8,
    children: Vec<(u16, usize)>,
    /// Augmented one-step reward of the edge into this node.
    r: f64,
    terminal: bool,
}

impl SearchNode {
    fn fresh(
        x: GridState,
        ids: SmallVec<[u32; 6]>,
        beliefs: SmallVec<[Belief; 2]>,
        oppo_slots: SmallVec<[Option<usize>; 2]>,
        depth: u32,
        r: f64,
        terminal: bool,
    ) -> SearchNode {
        SearchNode {
            x,
            ids,
            beliefs,
            oppo_slots,
            depth,
            n: 0,
            n_a: [0; NUM_EGO_ACTIONS],
            values: [0.0; NUM_EGO_ACTIONS],
            unsampled: ALL_UNSAMPLED,
            children: Vec::new(),
            r,
            terminal,
        }
    }

    fn child(&self, key: u16) -> Option<usize> {
        self.children
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, id)| *id)
    }
}

/// Search context shared by all rollouts of one tree.
struct Ctx<'a> {
    params: &'a GridParams,
    rewards: &'a RewardParams,
    tables: &'a QTableSet,
    horizon: u32,
    gamma: f64,
    exploration_c: f64,
    phi: f64,
}

impl<'a> Ctx<'a> {
    fn new(cfg: &PlannerConfig, tables: &'a QTableSet) -> Ctx<'a> {
        Ctx {
            params: &tables.params,
            rewards: &tables.rewards,
            tables,
            horizon: cfg.horizon,
            gamma: cfg.gamma,
            exploration_c: cfg.exploration_c,
            phi: cfg.info_gain_phi,
        }
    }
}

/// One node's statistics and identity in deterministic depth-first order,
/// for invariant checks and tree diffing.
#[derive(Clone, Debug, PartialEq)]
pub struct DfsRow {
    pub depth: u32,
    pub n: u32,
    pub n_a: [u32; NUM_EGO_ACTIONS],
    pub values: [f64; NUM_EGO_ACTIONS],
    pub r: f64,
    pub terminal: bool,
    pub state: GridState,
    pub ids: SmallVec<[u32; 6]>,
    /// Edge that created this node: ego action plus each opponent's action
    /// (None once that opponent had left the window).
    pub edge: Option<(EgoAction, SmallVec<[Option<HumanAction>; 2]>)>,
    /// Index of the parent row, if any.
    pub parent: Option<usize>,
}

/// The search tree for one opponent set.
pub struct SearchTree {
    nodes: Vec<SearchNode>,
    root: usize,
    opponents: OpponentSet,
}

impl SearchTree {
    pub fn new_root(
        x: GridState,
        ids: &[u32],
        opponents: OpponentSet,
        beliefs: SmallVec<[Belief; 2]>,
    ) -> SearchTree {
        let oppo_slots: SmallVec<[Option<usize>; 2]> =
            opponents.slots.iter().map(|&s| Some(s)).collect();
        let root = SearchNode::fresh(
            x,
            SmallVec::from_slice(ids),
            beliefs,
            oppo_slots,
            0,
            0.0,
            false,
        );
        SearchTree {
            nodes: vec![root],
            root: 0,
            opponents,
        }
    }

    pub fn opponents(&self) -> &OpponentSet {
        &self.opponents
    }

    pub fn root_state(&self) -> &GridState {
        &self.nodes[self.root].x
    }

    pub fn root_beliefs(&self) -> &[Belief] {
        &self.nodes[self.root].beliefs
    }

    fn uct_select(&self, id: usize, c: f64) -> EgoAction {
        let node = &self.nodes[id];
        let ln_n = (node.n as f64).ln();
        let mut best = EgoAction::Accelerate;
        let mut best_score = f64::NEG_INFINITY;
        for a in EgoAction::ALL {
            let i = a.ordinal();
            let bonus = c * (ln_n / node.n_a[i] as f64).sqrt();
            let score = node.values[i] + bonus;
            if score > best_score {
                best_score = score;
                best = a;
            }
        }
        best
    }

    fn sample_opponents(
        &self,
        id: usize,
        ctx: &Ctx,
        rng: &mut ChaCha8Rng,
    ) -> (SmallVec<[HumanAction; 2]>, SmallVec<[bool; 2]>) {
        let node = &self.nodes[id];
        let mut actions = SmallVec::new();
        let mut present = SmallVec::new();
        for (i, slot) in node.oppo_slots.iter().enumerate() {
            match slot {
                Some(s) => {
                    let view = grid::opponent_view(&node.x, *s, ctx.params);
                    let idx = grid::state_index(&view, ctx.params, 1);
                    let pd = predictive_policy(&node.beliefs[i], ctx.tables, idx)
                        .expect("support validated against tables");
                    actions.push(pd.sample(rng));
                    present.push(true);
                }
                None => {
                    actions.push(HumanAction::Maintain);
                    present.push(false);
                }
            }
        }
        (actions, present)
    }

    /// Expands the `(ego, opponent-joint)` child of `id`: simulates the
    /// dynamics, advances the per-opponent beliefs on the sampled actions,
    /// and stores the information-gain-augmented edge reward.
    fn expand(
        &mut self,
        id: usize,
        key: u16,
        ego_action: EgoAction,
        opp_actions: &[HumanAction],
        ctx: &Ctx,
    ) -> usize {
        assert!(
            self.nodes[id].child(key).is_none(),
            "child already expanded for this joint action"
        );
        let parent = &self.nodes[id];
        let parent_x = parent.x.clone();
        let parent_ids = parent.ids.clone();
        let parent_beliefs = parent.beliefs.clone();
        let parent_slots = parent.oppo_slots.clone();
        let depth = parent.depth;

        let mut human: SmallVec<[HumanAction; 6]> =
            smallvec::smallvec![HumanAction::Maintain; parent_x.agents.len()];
        for (i, slot) in parent_slots.iter().enumerate() {
            if let Some(s) = slot {
                human[*s] = opp_actions[i];
            }
        }

        let out = grid::step(&parent_x, ego_action, &human, ctx.params, ctx.rewards);

        // Ids of surviving agents (same drop rule as the dynamics).
        let max_cell = ctx.params.length_cells as i64 - 1;
        let mut child_ids: SmallVec<[u32; 6]> = SmallVec::new();
        for ((agent, &action), &wid) in parent_x.agents.iter().zip(&human).zip(&parent_ids) {
            let end = grid::human_next_cell(agent, action, ctx.params);
            if (0..=max_cell).contains(&end) {
                child_ids.push(wid);
            }
        }
        debug_assert_eq!(child_ids.len(), out.next_state.agents.len());

        let mut child_beliefs: SmallVec<[Belief; 2]> = SmallVec::new();
        let mut child_slots: SmallVec<[Option<usize>; 2]> = SmallVec::new();
        for (i, slot) in parent_slots.iter().enumerate() {
            let belief = match slot {
                Some(s) => {
                    let view = grid::opponent_view(&parent_x, *s, ctx.params);
                    let idx = grid::state_index(&view, ctx.params, 1);
                    belief_update(&parent_beliefs[i], idx, opp_actions[i], ctx.tables)
                }
                None => parent_beliefs[i].clone(),
            };
            child_beliefs.push(belief);
            let opp_id = self.opponents.ids[i];
            child_slots.push(child_ids.iter().position(|&wid| wid == opp_id));
        }

        let r = if ctx.phi == 0.0 {
            out.reward
        } else {
            out.reward + ctx.phi * info_gain(&parent_beliefs, &child_beliefs)
        };

        let child = SearchNode::fresh(
            out.next_state,
            child_ids,
            child_beliefs,
            child_slots,
            depth + 1,
            r,
            out.collided,
        );
        let child_id = self.nodes.len();
        self.nodes.push(child);
        self.nodes[id].children.push((key, child_id));
        child_id
    }

    /// One rollout from `id` down to the horizon, updating visit counts and
    /// running means on the way back up.
    fn rollout(&mut self, id: usize, ctx: &Ctx, rng: &mut ChaCha8Rng) -> f64 {
        let node = &self.nodes[id];
        if node.depth >= ctx.horizon || node.terminal {
            return 0.0;
        }

        let ego_action = if node.unsampled != 0 {
            let count = node.unsampled.count_ones();
            let pick = rng.gen_range(0..count);
            let mut seen = 0;
            let mut chosen = EgoAction::Accelerate;
            for a in EgoAction::ALL {
                if node.unsampled & (1 << a.ordinal()) != 0 {
                    if seen == pick {
                        chosen = a;
                        break;
                    }
                    seen += 1;
                }
            }
            chosen
        } else {
            self.uct_select(id, ctx.exploration_c)
        };
        self.nodes[id].unsampled &= !(1 << ego_action.ordinal());

        let (opp_actions, present) = self.sample_opponents(id, ctx, rng);
        let key = joint_key(ego_action, &opp_actions, &present);
        let child = match self.nodes[id].child(key) {
            Some(c) => c,
            None => self.expand(id, key, ego_action, &opp_actions, ctx),
        };

        let ret = self.nodes[child].r + ctx.gamma * self.rollout(child, ctx, rng);

        let node = &mut self.nodes[id];
        node.n += 1;
        let i = ego_action.ordinal();
        node.n_a[i] += 1;
        node.values[i] += (ret - node.values[i]) / node.n_a[i] as f64;
        ret
    }

    /// Runs rollouts until the budget is exhausted and returns the best
    /// root action (deterministic lowest-ordinal tie-break) plus statistics.
    fn search(
        &mut self,
        ctx: &Ctx,
        rng: &mut ChaCha8Rng,
        budget: SearchBudget,
    ) -> Result<(EgoAction, SearchStats), SearchError> {
        let started = Instant::now();
        let mut rollouts = 0u32;
        loop {
            match budget {
                SearchBudget::Rollouts(cap) => {
                    if rollouts >= cap {
                        break;
                    }
                }
                SearchBudget::WallClock(t) => {
                    if started.elapsed() >= t {
                        break;
                    }
                }
            }
            let root = self.root;
            self.rollout(root, ctx, rng);
            rollouts += 1;
        }
        if rollouts == 0 {
            return Err(SearchError::NoRollouts);
        }

        let root = &self.nodes[self.root];
        let mut best = None;
        for a in EgoAction::ALL {
            let i = a.ordinal();
            if root.n_a[i] == 0 {
                continue;
            }
            match best {
                None => best = Some((a, root.values[i])),
                Some((_, v)) if root.values[i] > v => best = Some((a, root.values[i])),
                _ => {}
            }
        }
        let (action, _) = best.ok_or(SearchError::NoRollouts)?;
        let stats = SearchStats {
            rollouts,
            root_values: root.values,
            root_visits: root.n_a,
            nodes: self.nodes.len(),
            root_reused: false,
        };
        Ok((action, stats))
    }

    /// Attempts to reuse the subtree under the root child keyed by the
    /// executed ego action and the inferred opponent actions. Succeeds only
    /// if the child's simulated state, shifted into the new ego-centric
    /// frame, reproduces the observation exactly and the opponent set is
    /// unchanged; node statistics of the retained subtree are preserved.
    #[allow(clippy::too_many_arguments)]
    fn try_adopt(
        &self,
        executed: EgoAction,
        inferred: &[(u32, HumanAction)],
        observation: &GridState,
        observed_ids: &[u32],
        new_opponents: &OpponentSet,
        params: &GridParams,
    ) -> Option<SearchTree> {
        if new_opponents.ids != self.opponents.ids {
            return None;
        }
        let root = &self.nodes[self.root];

        let mut actions: SmallVec<[HumanAction; 2]> = SmallVec::new();
        let mut present: SmallVec<[bool; 2]> = SmallVec::new();
        for (i, id) in self.opponents.ids.iter().enumerate() {
            match inferred.iter().find(|(aid, _)| aid == id) {
                Some((_, a)) => {
                    actions.push(*a);
                    present.push(root.oppo_slots[i].is_some());
                }
                None => return None,
            }
        }

        let key = joint_key(executed, &actions, &present);
        let child_id = root.child(key)?;
        let child = &self.nodes[child_id];

        let shift = params.center_cell() as i64 - child.x.ego.cell as i64;
        let (shifted, shifted_ids) = shift_state(&child.x, &child.ids, shift, params)?;
        if &shifted != observation || shifted_ids.as_slice() != observed_ids {
            return None;
        }

        // Deep-copy the retained subtree into a fresh arena, rebasing
        // depths and applying the frame shift throughout. Branches whose
        // ego leaves the window are dropped.
        let mut tree = SearchTree {
            nodes: Vec::new(),
            root: 0,
            opponents: new_opponents.clone(),
        };
        self.copy_subtree(child_id, shift, params, &mut tree)?;
        Some(tree)
    }

    fn copy_subtree(
        &self,
        src: usize,
        shift: i64,
        params: &GridParams,
        out: &mut SearchTree,
    ) -> Option<usize> {
        let node = &self.nodes[src];
        let (x, ids) = shift_state(&node.x, &node.ids, shift, params)?;
        let opponent_ids = out.opponents.ids.clone();
        let mut oppo_slots: SmallVec<[Option<usize>; 2]> = SmallVec::new();
        for id in &opponent_ids {
            oppo_slots.push(ids.iter().position(|w| w == id));
        }
        let dst = out.nodes.len();
        out.nodes.push(SearchNode {
            x,
            ids,
            beliefs: node.beliefs.clone(),
            oppo_slots,
            depth: node.depth - 1,
            n: node.n,
            n_a: node.n_a,
            values: node.values,
            unsampled: node.unsampled,
            children: Vec::new(),
            r: node.r,
            terminal: node.terminal,
        });
        for &(key, child) in &node.children {
            if let Some(new_child) = self.copy_subtree(child, shift, params, out) {
                out.nodes[dst].children.push((key, new_child));
            }
        }
        Some(dst)
    }
}

/// Shifts a grid state longitudinally by `shift` cells (a pure frame
/// translation). Agents and obstacles that leave the window are dropped;
/// an ego outside the window aborts the shift.
fn shift_state(
    state: &GridState,
    ids: &[u32],
    shift: i64,
    params: &GridParams,
) -> Option<(GridState, SmallVec<[u32; 6]>)> {
    let max_cell = params.length_cells as i64 - 1;
    let ego_cell = state.ego.cell as i64 + shift;
    if !(0..=max_cell).contains(&ego_cell) {
        return None;
    }
    let mut agents: SmallVec<[AgentPhysState; 6]> = SmallVec::new();
    let mut kept_ids: SmallVec<[u32; 6]> = SmallVec::new();
    for (agent, &id) in state.agents.iter().zip(ids) {
        let cell = agent.cell as i64 + shift;
        if (0..=max_cell).contains(&cell) {
            agents.push(AgentPhysState {
                cell: cell as u32,
                ..*agent
            });
            kept_ids.push(id);
        }
    }
    let mut obstacles: SmallVec<[(u32, grid::LaneId); 2]> = SmallVec::new();
    for &(cell, lane) in &state.obstacles {
        let c = cell as i64 + shift;
        if (0..=max_cell).contains(&c) {
            obstacles.push((c as u32, lane));
        }
    }
    Some((
        GridState {
            ego: AgentPhysState {
                cell: ego_cell as u32,
                ..state.ego
            },
            indicating: state.indicating,
            agents,
            obstacles,
        },
        kept_ids,
    ))
}

/// Episode status reported by an environment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EpisodeStatus {
    Running,
    Merged,
    Collision,
    Timeout,
}

/// Anything the planner can drive: a simulator adapter exposing snapshots,
/// action application, and termination status.
pub trait EnvInterface {
    fn snapshot(&self) -> WorldSnapshot;
    fn apply(&mut self, action: EgoAction);
    fn status(&self) -> EpisodeStatus;
    /// Logical episode time in seconds.
    fn time_s(&self) -> f64;
}

/// What `observe` learned from the latest snapshot.
#[derive(Clone, Debug)]
pub struct ObserveInfo {
    /// Actions inferred for the previous transition, by world agent id.
    pub inferred: Vec<(u32, HumanAction)>,
    /// Whether the previous root's subtree was reused.
    pub root_reused: bool,
}

struct PrevStep {
    grid: GridState,
    ids: Vec<u32>,
    ego_x_m: f64,
    executed: EgoAction,
}

/// Stepwise planner: feed it observations, ask it to act.
pub struct Planner {
    cfg: PlannerConfig,
    params: GridParams,
    rewards: RewardParams,
    tables: Arc<QTableSet>,
    support: Arc<ProfileSupport>,
    beliefs: BTreeMap<u32, Belief>,
    tree: Option<SearchTree>,
    rng: ChaCha8Rng,
    prev: Option<PrevStep>,
    /// Ego world position the current frame is centered on.
    frame_x_m: f64,
    pending_reuse: bool,
}

impl Planner {
    pub fn new(
        cfg: PlannerConfig,
        tables: Arc<QTableSet>,
        support: Arc<ProfileSupport>,
    ) -> Result<Planner, PlannerInitError> {
        support.validate()?;
        if support.max_level() > tables.k_max {
            return Err(PlannerInitError::SupportLevel {
                level: support.max_level(),
                k_max: tables.k_max,
            });
        }
        if !tables.all_finite() {
            return Err(PlannerInitError::NonFiniteTables);
        }
        let params = tables.params;
        let rewards = tables.rewards;
        params
            .validate()
            .map_err(|_| PlannerInitError::TableGridMismatch)?;
        Ok(Planner {
            rng: ChaCha8Rng::seed_from_u64(cfg.rng_seed),
            cfg,
            params,
            rewards,
            tables,
            support,
            beliefs: BTreeMap::new(),
            tree: None,
            prev: None,
            frame_x_m: 0.0,
            pending_reuse: false,
        })
    }

    pub fn params(&self) -> &GridParams {
        &self.params
    }

    /// Current belief about one world agent (uniform until observed).
    pub fn belief_for(&mut self, id: u32) -> Belief {
        let support = self.support.clone();
        self.beliefs
            .entry(id)
            .or_insert_with(|| Belief::uniform(support))
            .clone()
    }

    /// All tracked beliefs, sorted by agent id.
    pub fn beliefs(&self) -> Vec<(u32, Belief)> {
        self.beliefs.iter().map(|(k, v)| (*k, v.clone())).collect()
    }

    pub fn tree(&self) -> Option<&SearchTree> {
        self.tree.as_ref()
    }

    /// Ingests a world snapshot: infers the previous step's opponent
    /// actions, advances the stored beliefs, refreshes the opponent set,
    /// and reuses or rebuilds the search tree.
    pub fn observe(&mut self, snapshot: &WorldSnapshot) -> ObserveInfo {
        let (observation, obs_ids) = grid::map_from_world(snapshot, &self.params);
        self.frame_x_m = snapshot.ego.x_m;

        let mut inferred = Vec::new();
        if let Some(prev) = self.prev.take() {
            // Express the new world in the previous frame so grid motions
            // are comparable.
            let reframed = WorldSnapshot {
                ego: grid::EgoWorldPose {
                    x_m: prev.ego_x_m,
                    ..snapshot.ego
                },
                agents: snapshot.agents.clone(),
                obstacles: snapshot.obstacles.clone(),
            };
            let (obs_prev_frame, ids_prev_frame) = grid::map_from_world(&reframed, &self.params);
            inferred = infer_opponent_actions(
                &prev.grid,
                &prev.ids,
                &obs_prev_frame,
                &ids_prev_frame,
                &self.params,
            );
            for (id, action) in &inferred {
                let slot = prev.ids.iter().position(|w| w == id).expect("inferred id");
                let view = grid::opponent_view(&prev.grid, slot, &self.params);
                let idx = grid::state_index(&view, &self.params, 1);
                let support = self.support.clone();
                let belief = self
                    .beliefs
                    .entry(*id)
                    .or_insert_with(|| Belief::uniform(support));
                *belief = belief_update(belief, idx, *action, &self.tables);
            }

            let opponents = select_opponents(&observation, &obs_ids);
            let adopted = self.tree.take().and_then(|tree| {
                tree.try_adopt(
                    prev.executed,
                    &inferred,
                    &observation,
                    &obs_ids,
                    &opponents,
                    &self.params,
                )
            });
            let root_reused = adopted.is_some();
            self.tree = Some(adopted.unwrap_or_else(|| {
                self.fresh_tree(observation.clone(), &obs_ids, opponents)
            }));
            self.pending_reuse = root_reused;
            return ObserveInfo {
                inferred,
                root_reused,
            };
        }

        let opponents = select_opponents(&observation, &obs_ids);
        self.tree = Some(self.fresh_tree(observation, &obs_ids, opponents));
        self.pending_reuse = false;
        ObserveInfo {
            inferred,
            root_reused: false,
        }
    }

    fn fresh_tree(
        &mut self,
        observation: GridState,
        obs_ids: &[u32],
        opponents: OpponentSet,
    ) -> SearchTree {
        let mut beliefs: SmallVec<[Belief; 2]> = SmallVec::new();
        for id in &opponents.ids {
            beliefs.push(self.belief_for(*id));
        }
        SearchTree::new_root(observation, obs_ids, opponents, beliefs)
    }

    /// Runs the search on the current root and commits to the returned
    /// action. `observe` must be called first.
    pub fn act(&mut self) -> Result<(EgoAction, SearchStats), SearchError> {
        let budget = self.cfg.budget()?;
        let tree = self.tree.as_mut().expect("observe before act");
        let ctx = Ctx {
            params: &self.params,
            rewards: &self.rewards,
            tables: &self.tables,
            horizon: self.cfg.horizon,
            gamma: self.cfg.gamma,
            exploration_c: self.cfg.exploration_c,
            phi: self.cfg.info_gain_phi,
        };
        let (action, mut stats) = tree.search(&ctx, &mut self.rng, budget)?;
        stats.root_reused = self.pending_reuse;

        let root = &tree.nodes[tree.root];
        let grid = root.x.clone();
        let ids = root.ids.to_vec();
        self.prev = Some(PrevStep {
            grid,
            ids,
            ego_x_m: self.frame_x_m,
            executed: action,
        });
        Ok((action, stats))
    }
}

/// One logged planner step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u32,
    pub time_s: f64,
    pub snapshot: WorldSnapshot,
    pub grid: GridState,
    pub opponent_ids: Vec<u32>,
    pub ego_action: EgoAction,
    /// Reward of the executed transition under the grid reward model.
    pub reward: f64,
    /// Actions later inferred for this step's opponents (filled in once
    /// the next observation arrives).
    pub inferred_actions: Vec<(u32, HumanAction)>,
    /// Beliefs over every tracked agent after this step's observation.
    pub beliefs: Vec<(u32, Belief)>,
    pub search: SearchStats,
}

/// Full planner-side episode trace.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlanTrace {
    pub steps: Vec<StepRecord>,
    pub outcome: EpisodeStatus,
    pub final_beliefs: Vec<(u32, Belief)>,
}

#[derive(Debug, Error)]
#[error("episode aborted at step {step}: {source}")]
pub struct PlanError {
    pub step: u32,
    pub source: SearchError,
    /// Whatever was logged before the fault.
    pub partial: PlanTrace,
}

/// Drives a full episode: observe, search, execute, repeat until the
/// environment reports a terminal status.
pub fn plan_episode<E: EnvInterface>(
    env: &mut E,
    planner: &mut Planner,
) -> Result<PlanTrace, PlanError> {
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut step = 0u32;
    loop {
        let status = env.status();
        if status != EpisodeStatus::Running {
            let final_beliefs = planner.beliefs();
            return Ok(PlanTrace {
                steps,
                outcome: status,
                final_beliefs,
            });
        }

        let snapshot = env.snapshot();
        let time_s = env.time_s();
        let info = planner.observe(&snapshot);
        if let Some(last) = steps.last_mut() {
            last.inferred_actions = info.inferred.clone();
        }

        let tree = planner.tree().expect("observe builds a tree");
        let grid = tree.root_state().clone();
        let opponent_ids = tree.opponents().ids.to_vec();

        let (action, stats) = match planner.act() {
            Ok(r) => r,
            Err(source) => {
                let final_beliefs = planner.beliefs();
                return Err(PlanError {
                    step,
                    source,
                    partial: PlanTrace {
                        steps,
                        outcome: EpisodeStatus::Running,
                        final_beliefs,
                    },
                });
            }
        };
        env.apply(action);

        let after = env.status();
        let mut reward = 0.0;
        if env.snapshot().ego.lane != grid::LaneId::Target {
            reward += planner.rewards.off_lane_penalty;
        }
        if after == EpisodeStatus::Collision {
            reward += planner.rewards.collision_penalty;
        }

        steps.push(StepRecord {
            step,
            time_s,
            snapshot,
            grid,
            opponent_ids,
            ego_action: action,
            reward,
            inferred_actions: Vec::new(),
            beliefs: planner.beliefs(),
            search: stats,
        });
        step += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::LaneId;

    fn state_with_agents(offsets: &[(i64, LaneId)]) -> (GridState, Vec<u32>) {
        let params = GridParams::default();
        let center = params.center_cell() as i64;
        let mut agents = SmallVec::new();
        let mut ids = Vec::new();
        for (i, &(off, lane)) in offsets.iter().enumerate() {
            agents.push(AgentPhysState {
                cell: (center + off) as u32,
                lane,
                vel: 1,
            });
            ids.push(i as u32 + 10);
        }
        (
            GridState {
                ego: AgentPhysState {
                    cell: center as u32,
                    lane: LaneId::Ego,
                    vel: 1,
                },
                indicating: false,
                agents,
                obstacles: SmallVec::new(),
            },
            ids,
        )
    }

    #[test]
    fn opponents_straddling_are_both_kept() {
        let (state, ids) = state_with_agents(&[(-2, LaneId::Target), (3, LaneId::Target)]);
        let set = select_opponents(&state, &ids);
        assert_eq!(set.ids.as_slice(), &[10, 11]);
        assert_eq!(set.rationale, SelectionRationale::BothSides);
    }

    #[test]
    fn same_side_keeps_only_nearest() {
        let (state, ids) = state_with_agents(&[(2, LaneId::Target), (5, LaneId::Target)]);
        let set = select_opponents(&state, &ids);
        assert_eq!(set.ids.as_slice(), &[10]);
        assert_eq!(set.rationale, SelectionRationale::NearestOnly);
    }

    #[test]
    fn single_agent_is_selected() {
        let (state, ids) = state_with_agents(&[(4, LaneId::Target)]);
        let set = select_opponents(&state, &ids);
        assert_eq!(set.ids.as_slice(), &[10]);
    }

    #[test]
    fn empty_window_gives_empty_set() {
        let (state, ids) = state_with_agents(&[]);
        let set = select_opponents(&state, &ids);
        assert!(set.ids.is_empty());
    }

    #[test]
    fn distance_ties_break_by_smaller_id() {
        let params = GridParams::default();
        let center = params.center_cell() as i64;
        let mut agents: SmallVec<[AgentPhysState; 6]> = SmallVec::new();
        for off in [3i64, -3] {
            agents.push(AgentPhysState {
                cell: (center + off) as u32,
                lane: LaneId::Target,
                vel: 1,
            });
        }
        let state = GridState {
            ego: AgentPhysState {
                cell: center as u32,
                lane: LaneId::Ego,
                vel: 1,
            },
            indicating: false,
            agents,
            obstacles: SmallVec::new(),
        };
        // Give the farther-listed agent the smaller id; tie at |3| resolves
        // toward id order.
        let ids = vec![20, 7];
        let set = select_opponents(&state, &ids);
        assert_eq!(set.ids.as_slice(), &[7, 20]);
    }

    #[test]
    fn inferred_actions_match_exact_transitions() {
        let params = GridParams::default();
        let prev = AgentPhysState {
            cell: 5,
            lane: LaneId::Target,
            vel: 1,
        };
        // Accelerate: vel 2, cell 7.
        let obs = AgentPhysState {
            cell: 7,
            lane: LaneId::Target,
            vel: 2,
        };
        assert_eq!(infer_agent_action(&prev, &obs, &params), HumanAction::Accelerate);
        // Maintain: vel 1, cell 6.
        let obs = AgentPhysState {
            cell: 6,
            lane: LaneId::Target,
            vel: 1,
        };
        assert_eq!(infer_agent_action(&prev, &obs, &params), HumanAction::Maintain);
    }

    #[test]
    fn off_model_half_step_resolves_to_maintain() {
        // World agent accelerated by half a level: the observation rounds
        // to an unchanged velocity, so Maintain is the nearest prediction.
        let params = GridParams::default();
        let prev = AgentPhysState {
            cell: 5,
            lane: LaneId::Target,
            vel: 2,
        };
        let obs = AgentPhysState {
            cell: 7,
            lane: LaneId::Target,
            vel: 2,
        };
        assert_eq!(infer_agent_action(&prev, &obs, &params), HumanAction::Maintain);
    }
}
