//! Multi-phase object-interaction gridworld.
//!
//! Episodes live on a 7x7 grid holding two pickable targets, a receptacle,
//! and three appliances. A task category is drawn per episode:
//!
//! - `pick_place`: register the target with `look`, pick it up, carry it to
//!   the receptacle (delivery is passive on adjacency) — one manipulation;
//! - `look`: walk up to the registered target and inspect it — one
//!   manipulation;
//! - `heat` / `cool` / `clean`: pick the target, run `tool_use` three times
//!   at the task appliance, deliver — four manipulations;
//! - `pick2`: two full pick-then-place cycles through the receptacle with an
//!   explicit `place` each — four manipulations.
//!
//! Objects are rendered in the 3x3 local view whenever nearby, but
//! interactions and global direction features require the target to have
//! been registered by a `look` (that is what ends the oracle Explore phase).
//! Valid pick/place/tool attempts fail with probability `p_fault` and latch
//! a fault that blocks further manipulation until `retry` clears it (the
//! oracle Recover phase). Reward is sparse: +1 on task completion. A debug
//! shaping mode exists for diagnostics only.

use super::{EnvError, Environment, Phase, ResetOut, StepOut, TaskCategory};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const ACTION_COUNT: usize = 9;

pub const A_UP: usize = 0;
pub const A_DOWN: usize = 1;
pub const A_LEFT: usize = 2;
pub const A_RIGHT: usize = 3;
pub const A_LOOK: usize = 4;
pub const A_PICK: usize = 5;
pub const A_PLACE: usize = 6;
pub const A_TOOL: usize = 7;
pub const A_RETRY: usize = 8;

/// Episode-category weights; must be non-negative and sum to 1.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CategoryMix {
    pub pick_place: f64,
    pub look: f64,
    pub heat: f64,
    pub cool: f64,
    pub clean: f64,
    pub pick2: f64,
}

impl Default for CategoryMix {
    fn default() -> Self {
        // 0.6 simple / 0.4 complex.
        CategoryMix { pick_place: 0.35, look: 0.25, heat: 0.1, cool: 0.1, clean: 0.1, pick2: 0.1 }
    }
}

impl CategoryMix {
    pub fn weights(&self) -> [f64; 6] {
        [self.pick_place, self.look, self.heat, self.cool, self.clean, self.pick2]
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let w = self.weights();
        if w.iter().any(|x| *x < 0.0) {
            return Err(EnvError::BadCategoryMix("negative weight".into()));
        }
        let s: f64 = w.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(EnvError::BadCategoryMix(format!("weights sum to {s}, expected 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub grid_size: usize,
    pub max_steps: usize,
    pub p_fault: f64,
    pub category_mix: CategoryMix,
    /// Debug-only dense shaping; acceptance and reported runs keep this off.
    pub shaping: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig { grid_size: 7, max_steps: 50, p_fault: 0.1, category_mix: CategoryMix::default(), shaping: false }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.grid_size < 5 {
            return Err(EnvError::BadCategoryMix(format!("grid_size {} too small (min 5)", self.grid_size)));
        }
        if !(0.0..=1.0).contains(&self.p_fault) {
            return Err(EnvError::BadCategoryMix(format!("p_fault {} outside [0,1]", self.p_fault)));
        }
        self.category_mix.validate()
    }
}

type Pos = (i32, i32);

const N_VIEW_CHANNELS: usize = 5; // oob, target1, target2, receptacle, task appliance
const N_FLAGS: usize = 7;
const GOAL_DIM: usize = 15; // 6 one-hot + simple flag + 8 hash features

#[derive(Debug, Clone)]
struct Layout {
    target: [Pos; 2],
    receptacle: Pos,
    appliance: [Pos; 3], // heat, cool, clean
    agent_start: Pos,
}

pub struct PhasedGridWorld {
    cfg: EnvConfig,
    layout: Layout,
    category: TaskCategory,
    goal: Vec<f64>,
    fault_rng: ChaCha8Rng,

    agent: Pos,
    located: [bool; 2],
    holding: Option<usize>,
    tool_steps: u8,
    delivered_first: bool,
    fault: bool,
    steps: usize,
    done: bool,
    success: bool,
}

impl PhasedGridWorld {
    pub fn new(cfg: EnvConfig) -> Result<Self, EnvError> {
        cfg.validate()?;
        let mut env = PhasedGridWorld {
            cfg,
            layout: Layout { target: [(0, 0); 2], receptacle: (0, 0), appliance: [(0, 0); 3], agent_start: (0, 0) },
            category: TaskCategory::PickPlace,
            goal: vec![0.0; GOAL_DIM],
            fault_rng: ChaCha8Rng::seed_from_u64(0),
            agent: (0, 0),
            located: [false; 2],
            holding: None,
            tool_steps: 0,
            delivered_first: false,
            fault: false,
            steps: 0,
            done: true,
            success: false,
        };
        env.reset_internal(0, 0);
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn category(&self) -> TaskCategory {
        self.category
    }

    pub fn succeeded(&self) -> bool {
        self.success
    }

    fn n(&self) -> i32 {
        self.cfg.grid_size as i32
    }

    fn reset_internal(&mut self, layout_seed: u64, fault_seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(layout_seed);
        let w = self.cfg.category_mix.weights();
        let total: f64 = w.iter().sum();
        let mut draw = rng.gen_range(0.0..total.max(f64::MIN_POSITIVE));
        let mut cat = TaskCategory::Pick2;
        for (i, wi) in w.iter().enumerate() {
            if draw < *wi {
                cat = TaskCategory::ALL[i];
                break;
            }
            draw -= wi;
        }
        self.category = cat;

        // Seven distinct cells: agent, two targets, receptacle, three appliances.
        let n = self.n();
        let mut cells: Vec<Pos> = Vec::with_capacity(7);
        while cells.len() < 7 {
            let c = (rng.gen_range(0..n), rng.gen_range(0..n));
            if !cells.contains(&c) {
                cells.push(c);
            }
        }
        self.layout = Layout {
            agent_start: cells[0],
            target: [cells[1], cells[2]],
            receptacle: cells[3],
            appliance: [cells[4], cells[5], cells[6]],
        };

        self.goal = goal_features(cat);
        self.fault_rng = ChaCha8Rng::seed_from_u64(fault_seed);
        self.agent = self.layout.agent_start;
        self.located = [false; 2];
        self.holding = None;
        self.tool_steps = 0;
        self.delivered_first = false;
        self.fault = false;
        self.steps = 0;
        self.done = false;
        self.success = false;
    }

    /// Index (0/1) of the target the task currently cares about.
    fn current_target(&self) -> usize {
        if self.category == TaskCategory::Pick2 && self.delivered_first {
            1
        } else {
            0
        }
    }

    fn task_appliance(&self) -> Option<Pos> {
        match self.category {
            TaskCategory::Heat => Some(self.layout.appliance[0]),
            TaskCategory::Cool => Some(self.layout.appliance[1]),
            TaskCategory::Clean => Some(self.layout.appliance[2]),
            _ => None,
        }
    }

    fn is_tool_task(&self) -> bool {
        matches!(self.category, TaskCategory::Heat | TaskCategory::Cool | TaskCategory::Clean)
    }

    fn adjacent(&self, p: Pos) -> bool {
        chebyshev(self.agent, p) <= 1
    }

    fn in_view(&self, p: Pos) -> bool {
        chebyshev(self.agent, p) <= 1
    }

    /// Whether the carried object is ready for passive receptacle delivery.
    fn delivery_pending(&self) -> bool {
        match self.holding {
            Some(0) => match self.category {
                TaskCategory::PickPlace => true,
                TaskCategory::Heat | TaskCategory::Cool | TaskCategory::Clean => self.tool_steps >= 3,
                _ => false,
            },
            _ => false,
        }
    }

    /// The interaction the task is waiting for, if the agent stands next to
    /// the right object: (action id, fault roll applies).
    fn pending_interaction(&self) -> Option<(usize, bool)> {
        if self.fault {
            return None;
        }
        let tgt = self.current_target();
        match self.holding {
            None => {
                if self.located[tgt] && self.adjacent(self.layout.target[tgt]) {
                    if self.category == TaskCategory::Look {
                        Some((A_LOOK, false))
                    } else {
                        Some((A_PICK, true))
                    }
                } else {
                    None
                }
            }
            Some(_) => {
                if self.is_tool_task() && self.tool_steps < 3 {
                    if self.adjacent(self.task_appliance().unwrap()) {
                        Some((A_TOOL, true))
                    } else {
                        None
                    }
                } else if self.category == TaskCategory::Pick2 && self.adjacent(self.layout.receptacle) {
                    Some((A_PLACE, true))
                } else {
                    None
                }
            }
        }
    }

    /// Navigation waypoint for the current task stage (requires the target
    /// to be registered when it is the waypoint).
    fn waypoint(&self) -> Option<Pos> {
        let tgt = self.current_target();
        match self.holding {
            None => {
                if self.located[tgt] {
                    Some(self.layout.target[tgt])
                } else {
                    None
                }
            }
            Some(_) => {
                if self.is_tool_task() && self.tool_steps < 3 {
                    Some(self.task_appliance().unwrap())
                } else {
                    Some(self.layout.receptacle)
                }
            }
        }
    }

    fn roll_fault(&mut self) -> bool {
        let u: f64 = self.fault_rng.gen_range(0.0..1.0);
        if u < self.cfg.p_fault {
            self.fault = true;
            true
        } else {
            false
        }
    }

    fn observation(&self) -> Vec<f64> {
        let mut obs = Vec::with_capacity(self.obs_dim());
        let n = self.n();
        let show_t2 = self.category == TaskCategory::Pick2;
        let task_app = self.task_appliance();

        // 3x3 view, 5 channels per cell.
        for dy in -1..=1 {
            for dx in -1..=1 {
                let c = (self.agent.0 + dx, self.agent.1 + dy);
                let oob = c.0 < 0 || c.1 < 0 || c.0 >= n || c.1 >= n;
                obs.push(if oob { 1.0 } else { 0.0 });
                obs.push(if !oob && c == self.layout.target[0] && self.holding != Some(0) && !self.delivered_first {
                    1.0
                } else {
                    0.0
                });
                obs.push(if !oob && show_t2 && c == self.layout.target[1] && self.holding != Some(1) { 1.0 } else { 0.0 });
                obs.push(if !oob && c == self.layout.receptacle { 1.0 } else { 0.0 });
                obs.push(if !oob && task_app == Some(c) { 1.0 } else { 0.0 });
            }
        }

        // Position and registered-object direction features.
        let scale = (n - 1) as f64;
        obs.push(self.agent.0 as f64 / scale);
        obs.push(self.agent.1 as f64 / scale);
        for t in 0..2 {
            let masked = (t == 1 && !show_t2) || (t == 0 && self.delivered_first);
            if !masked && self.located[t] && self.holding != Some(t) {
                obs.push((self.layout.target[t].0 - self.agent.0) as f64 / scale);
                obs.push((self.layout.target[t].1 - self.agent.1) as f64 / scale);
                obs.push(1.0);
            } else {
                obs.extend_from_slice(&[0.0, 0.0, if !masked && self.holding == Some(t) { 1.0 } else { 0.0 }]);
            }
        }
        obs.push((self.layout.receptacle.0 - self.agent.0) as f64 / scale);
        obs.push((self.layout.receptacle.1 - self.agent.1) as f64 / scale);
        match task_app {
            Some(a) => {
                obs.push((a.0 - self.agent.0) as f64 / scale);
                obs.push((a.1 - self.agent.1) as f64 / scale);
            }
            None => obs.extend_from_slice(&[0.0, 0.0]),
        }

        // Progress flags (task-masked).
        obs.push(if self.located[self.current_target()] { 1.0 } else { 0.0 });
        obs.push(if self.holding.is_some() { 1.0 } else { 0.0 });
        obs.push(if self.is_tool_task() { self.tool_steps as f64 / 3.0 } else { 0.0 });
        obs.push(if self.is_tool_task() && self.tool_steps >= 3 { 1.0 } else { 0.0 });
        obs.push(if self.fault { 1.0 } else { 0.0 });
        obs.push(if self.category == TaskCategory::Pick2 && self.delivered_first { 1.0 } else { 0.0 });
        obs.push(self.steps as f64 / self.cfg.max_steps as f64);
        obs
    }
}

impl Environment for PhasedGridWorld {
    fn obs_dim(&self) -> usize {
        9 * N_VIEW_CHANNELS + 2 + 10 + N_FLAGS
    }

    fn obs_groups(&self) -> Vec<usize> {
        vec![9 * N_VIEW_CHANNELS, 2 + 10, N_FLAGS]
    }

    fn goal_dim(&self) -> usize {
        GOAL_DIM
    }

    fn action_count(&self) -> usize {
        ACTION_COUNT
    }

    fn max_steps(&self) -> usize {
        self.cfg.max_steps
    }

    fn reset(&mut self, layout_seed: u64, fault_seed: u64) -> ResetOut {
        self.reset_internal(layout_seed, fault_seed);
        ResetOut { observation: self.observation(), goal: self.goal.clone(), category: self.category }
    }

    fn step(&mut self, action: usize) -> Result<StepOut, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeFinished);
        }
        if action >= ACTION_COUNT {
            return Err(EnvError::InvalidAction(action));
        }

        let mut shaped = 0.0;
        let tgt = self.current_target();
        match action {
            A_UP | A_DOWN | A_LEFT | A_RIGHT => {
                let (dx, dy) = match action {
                    A_UP => (0, -1),
                    A_DOWN => (0, 1),
                    A_LEFT => (-1, 0),
                    _ => (1, 0),
                };
                let next = (self.agent.0 + dx, self.agent.1 + dy);
                if next.0 >= 0 && next.1 >= 0 && next.0 < self.n() && next.1 < self.n() {
                    self.agent = next;
                }
            }
            A_LOOK => {
                let was_located = self.located[tgt];
                for t in 0..2 {
                    if !self.located[t] && self.in_view(self.layout.target[t]) {
                        self.located[t] = true;
                        if t == tgt {
                            shaped += 0.25;
                        }
                    }
                }
                if self.category == TaskCategory::Look && was_located && self.adjacent(self.layout.target[tgt]) {
                    self.success = true;
                }
            }
            A_PICK => {
                if !self.fault && self.holding.is_none() && self.located[tgt] && self.adjacent(self.layout.target[tgt]) {
                    if !self.roll_fault() {
                        self.holding = Some(tgt);
                        shaped += 0.25;
                    }
                }
            }
            A_PLACE => {
                if !self.fault
                    && self.category == TaskCategory::Pick2
                    && self.holding.is_some()
                    && self.adjacent(self.layout.receptacle)
                {
                    if !self.roll_fault() {
                        let placed = self.holding.take().unwrap();
                        shaped += 0.25;
                        if placed == 0 {
                            self.delivered_first = true;
                        }
                        if placed == 1 {
                            self.success = true;
                        }
                    }
                }
            }
            A_TOOL => {
                if !self.fault
                    && self.holding == Some(0)
                    && self.is_tool_task()
                    && self.tool_steps < 3
                    && self.adjacent(self.task_appliance().unwrap())
                {
                    if !self.roll_fault() {
                        self.tool_steps += 1;
                        shaped += 0.25;
                    }
                }
            }
            A_RETRY => {
                if self.fault {
                    self.fault = false;
                }
            }
            _ => unreachable!(),
        }

        // Passive delivery: carrying a ready object next to the receptacle
        // completes the task.
        if !self.success && self.delivery_pending() && self.adjacent(self.layout.receptacle) {
            self.success = true;
        }

        self.steps += 1;
        if self.success || self.steps >= self.cfg.max_steps {
            self.done = true;
        }
        let mut reward = if self.success { 1.0 } else { 0.0 };
        if self.cfg.shaping {
            reward += shaped - 0.01;
        }
        Ok(StepOut { observation: self.observation(), reward, done: self.done, success: self.success })
    }

    fn oracle_phase(&self) -> Phase {
        if self.fault {
            return Phase::Recover;
        }
        let tgt = self.current_target();
        match self.holding {
            None => {
                if !self.located[tgt] {
                    Phase::Explore
                } else if self.adjacent(self.layout.target[tgt]) {
                    Phase::Manipulate
                } else {
                    Phase::Navigate
                }
            }
            Some(_) => {
                if self.is_tool_task() && self.tool_steps < 3 {
                    if self.adjacent(self.task_appliance().unwrap()) {
                        Phase::Manipulate
                    } else {
                        Phase::Navigate
                    }
                } else if self.category == TaskCategory::Pick2 && self.adjacent(self.layout.receptacle) {
                    Phase::Manipulate
                } else {
                    Phase::Navigate
                }
            }
        }
    }

    fn state_fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut mix = |v: u64| {
            h ^= v.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
            h = h.wrapping_mul(0x100000001b3);
        };
        mix(self.agent.0 as u64);
        mix(self.agent.1 as u64);
        mix(self.located[0] as u64 | (self.located[1] as u64) << 1);
        mix(self.holding.map(|t| t as u64 + 1).unwrap_or(0));
        mix(self.tool_steps as u64);
        mix(self.delivered_first as u64);
        mix(self.fault as u64);
        mix(self.category.index() as u64);
        h
    }

    fn scripted_distribution(&self) -> Vec<f64> {
        let mut p = vec![0.0; ACTION_COUNT];
        match self.oracle_phase() {
            Phase::Recover => {
                p[A_RETRY] = 0.40;
                p[A_LOOK] = 0.20;
                for a in [A_UP, A_DOWN, A_LEFT, A_RIGHT] {
                    p[a] = 0.10;
                }
            }
            Phase::Explore => {
                p[A_LOOK] = 0.28;
                for a in [A_UP, A_DOWN, A_LEFT, A_RIGHT] {
                    p[a] = 0.18;
                }
            }
            Phase::Navigate => {
                let wp = self.waypoint().expect("navigate phase implies a waypoint");
                let dist0 = manhattan(self.agent, wp);
                let mut weights = [0.0; 4];
                for (i, a) in [A_UP, A_DOWN, A_LEFT, A_RIGHT].iter().enumerate() {
                    let (dx, dy) = match *a {
                        A_UP => (0, -1),
                        A_DOWN => (0, 1),
                        A_LEFT => (-1, 0),
                        _ => (1, 0),
                    };
                    let next = (self.agent.0 + dx, self.agent.1 + dy);
                    let blocked = next.0 < 0 || next.1 < 0 || next.0 >= self.n() || next.1 >= self.n();
                    let d = if blocked { dist0 + 1 } else { manhattan(next, wp) };
                    weights[i] = if d < dist0 {
                        8.0
                    } else if d == dist0 {
                        2.0
                    } else {
                        0.5
                    };
                }
                let wsum: f64 = weights.iter().sum();
                for (i, a) in [A_UP, A_DOWN, A_LEFT, A_RIGHT].iter().enumerate() {
                    p[*a] = 0.91 * weights[i] / wsum;
                }
                p[A_LOOK] = 0.04;
                p[A_PICK] = 0.015;
                p[A_PLACE] = 0.015;
                p[A_TOOL] = 0.015;
                p[A_RETRY] = 0.005;
            }
            Phase::Manipulate => {
                let (action, _) = self.pending_interaction().expect("manipulate phase implies a pending interaction");
                let q = match action {
                    A_PICK => 0.85,
                    A_TOOL => 0.35,
                    A_PLACE => 0.60,
                    A_LOOK => 0.80,
                    _ => unreachable!("unexpected pending interaction"),
                };
                for v in p.iter_mut() {
                    *v = (1.0 - q) / (ACTION_COUNT as f64 - 1.0);
                }
                p[action] = q;
            }
        }
        p
    }
}

fn chebyshev(a: Pos, b: Pos) -> i32 {
    (a.0 - b.0).abs().max((a.1 - b.1).abs())
}

fn manhattan(a: Pos, b: Pos) -> i32 {
    (a.0 - b.0).abs() + (a.1 - b.1).abs()
}

fn goal_features(cat: TaskCategory) -> Vec<f64> {
    let mut g = vec![0.0; GOAL_DIM];
    g[cat.index()] = 1.0;
    g[6] = if cat.is_simple() { 1.0 } else { 0.0 };
    let mut z = (cat.index() as u64 + 1).wrapping_mul(0x9e3779b97f4a7c15);
    for i in 0..8 {
        z = z.wrapping_add(0x9e3779b97f4a7c15);
        let mut v = z;
        v = (v ^ (v >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        v = (v ^ (v >> 27)).wrapping_mul(0x94d049bb133111eb);
        v ^= v >> 31;
        g[7 + i] = (v as f64 / u64::MAX as f64) * 2.0 - 1.0;
    }
    g
}
