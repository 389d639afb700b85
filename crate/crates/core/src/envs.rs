//! Built-in parametric task families and train/weak/strong task splits.
//!
//! Cartpole: a cart with a point mass on a massless rod of length `η_l`,
//! swing-up style, `θ = 0` upright. The applied force is `η_a·F_max·a`
//! and the reward is `-(η_x - x_tip)²` with `x_tip = x + η_l·sin θ`.
//!
//! Point robot: a planar double integrator with linear drag driven by four
//! thrusters pointing at 0°, 90°, 180° and 270°. One thruster is crippled,
//! the reward is the velocity component along the goal direction and the
//! episode ends when the robot leaves the arena.
//!
//! Hidden parameters never appear in observations.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::Rng;

use crate::error::{Error, Result};

pub mod cartpole {
    pub const CART_MASS: f64 = 1.0;
    pub const POLE_MASS: f64 = 0.1;
    pub const GRAVITY: f64 = 9.81;
    pub const MAX_FORCE: f64 = 10.0;
    /// Control interval.
    pub const DT: f64 = 0.05;
    /// Semi-implicit Euler substeps per control interval.
    pub const SUBSTEPS: usize = 40;
    pub const EPISODE_LEN: usize = 200;
    pub const OBS_DIM: usize = 5;
    pub const ACTION_DIM: usize = 1;
}

pub mod pointrobot {
    pub const MASS: f64 = 1.0;
    pub const DRAG: f64 = 0.1;
    pub const DT: f64 = 0.1;
    pub const EPISODE_LEN: usize = 100;
    pub const ARENA_RADIUS: f64 = 10.0;
    pub const OBS_DIM: usize = 4;
    pub const ACTION_DIM: usize = 4;
    pub const LEGS: usize = 4;
    pub const DIRECTIONS: usize = 8;
    /// Default held-out goal direction, in degrees.
    pub const HOLDOUT_DEG: u32 = 45;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Family {
    Cartpole,
    PointRobot,
}

impl Family {
    pub fn obs_dim(self) -> usize {
        match self {
            Family::Cartpole => cartpole::OBS_DIM,
            Family::PointRobot => pointrobot::OBS_DIM,
        }
    }

    pub fn action_dim(self) -> usize {
        match self {
            Family::Cartpole => cartpole::ACTION_DIM,
            Family::PointRobot => pointrobot::ACTION_DIM,
        }
    }

    pub fn episode_len(self) -> usize {
        match self {
            Family::Cartpole => cartpole::EPISODE_LEN,
            Family::PointRobot => pointrobot::EPISODE_LEN,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Cartpole => "cartpole",
            Family::PointRobot => "pointrobot",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cartpole" => Ok(Family::Cartpole),
            "pointrobot" => Ok(Family::PointRobot),
            _ => Err(Error::unknown("family", s)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Weak,
    Strong,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Weak => "weak",
            Split::Strong => "strong",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "weak" => Ok(Split::Weak),
            "strong" => Ok(Split::Strong),
            _ => Err(Error::unknown("split", s)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CartpoleParams {
    /// Action scale.
    pub eta_a: f64,
    /// Pole length in meters.
    pub eta_l: f64,
    /// Goal x-position of the pole tip in meters.
    pub eta_x: f64,
}

impl CartpoleParams {
    pub fn new(eta_a: f64, eta_l: f64, eta_x: f64) -> Result<Self> {
        if !(eta_a > 0.0 && eta_l > 0.0 && eta_x.is_finite()) {
            return Err(Error::Invalid(format!("cartpole parameters ({eta_a}, {eta_l}, {eta_x}) need positive scale and length")));
        }
        Ok(Self { eta_a, eta_l, eta_x })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PointRobotParams {
    /// Index of the thruster that ignores its command.
    pub crippled: Option<usize>,
    /// Goal direction as an index on the 8-point compass, `k·45°`.
    pub direction: usize,
}

impl PointRobotParams {
    pub fn new(crippled: Option<usize>, direction: usize) -> Result<Self> {
        if crippled.is_some_and(|c| c >= pointrobot::LEGS) || direction >= pointrobot::DIRECTIONS {
            return Err(Error::Invalid(format!("point robot parameters {crippled:?}, direction {direction}")));
        }
        Ok(Self { crippled, direction })
    }

    pub fn direction_deg(&self) -> u32 {
        self.direction as u32 * 45
    }

    pub fn goal_unit(&self) -> [f64; 2] {
        let a = (self.direction as f64 * 45.0).to_radians();
        [a.cos(), a.sin()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HiddenParams {
    Cartpole(CartpoleParams),
    PointRobot(PointRobotParams),
}

/// A hidden parameter value.
#[derive(Clone, Debug, PartialEq)]
pub enum Eta {
    Real(f64),
    Category(String),
}

impl fmt::Display for Eta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Eta::Real(v) => write!(f, "{v}"),
            Eta::Category(c) => f.write_str(c),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDescriptor {
    /// Stable id, unique within a family.
    pub id: usize,
    pub params: HiddenParams,
    pub split: Split,
}

impl TaskDescriptor {
    pub fn family(&self) -> Family {
        match self.params {
            HiddenParams::Cartpole(_) => Family::Cartpole,
            HiddenParams::PointRobot(_) => Family::PointRobot,
        }
    }

    /// Hidden parameters by name.
    pub fn eta(&self) -> Vec<(&'static str, Eta)> {
        match self.params {
            HiddenParams::Cartpole(p) => {
                vec![("eta_a", Eta::Real(p.eta_a)), ("eta_l", Eta::Real(p.eta_l)), ("eta_x", Eta::Real(p.eta_x))]
            }
            HiddenParams::PointRobot(p) => vec![
                ("crippled", Eta::Category(p.crippled.map_or("none".into(), |c| c.to_string()))),
                ("direction", Eta::Category(p.direction_deg().to_string())),
            ],
        }
    }

    fn describe(&self) -> String {
        self.eta().iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
    }
}

/// Internal cartpole state; `θ = 0` is upright.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CartpoleState {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
}

impl CartpoleState {
    /// Pole hanging down at rest at the origin.
    pub fn hanging() -> Self {
        Self { x: 0.0, x_dot: 0.0, theta: std::f64::consts::PI, theta_dot: 0.0 }
    }

    pub fn observe(&self) -> Vec<f64> {
        vec![self.x, self.x_dot, self.theta.cos(), self.theta.sin(), self.theta_dot]
    }

    pub fn tip_x(&self, eta_l: f64) -> f64 {
        self.x + eta_l * self.theta.sin()
    }

    /// Kinetic plus potential energy, zero when hanging at rest.
    pub fn energy(&self, eta_l: f64) -> f64 {
        use cartpole::*;
        let (m, mp, l) = (CART_MASS + POLE_MASS, POLE_MASS, eta_l);
        0.5 * m * self.x_dot.powi(2)
            + mp * l * self.x_dot * self.theta_dot * self.theta.cos()
            + 0.5 * mp * l * l * self.theta_dot.powi(2)
            + mp * GRAVITY * l * (1.0 + self.theta.cos())
    }
}

/// Cart and pole accelerations for force `force`.
pub fn cartpole_accel(cos: f64, sin: f64, theta_dot: f64, force: f64, eta_l: f64) -> (f64, f64) {
    use cartpole::*;
    let x_acc = (force + POLE_MASS * sin * (eta_l * theta_dot * theta_dot - GRAVITY * cos)) / (CART_MASS + POLE_MASS * sin * sin);
    let th_acc = (GRAVITY * sin - cos * x_acc) / eta_l;
    (x_acc, th_acc)
}

/// One control interval of semi-implicit Euler substeps under a constant
/// force. Returns the next state and the reward of the next state's tip
/// position. Never terminates.
pub fn cartpole_step(state: &CartpoleState, action: f64, p: &CartpoleParams) -> (CartpoleState, f64, bool) {
    use cartpole::*;
    let a = action.clamp(-1.0, 1.0);
    let force = p.eta_a * MAX_FORCE * a;
    let h = DT / SUBSTEPS as f64;
    let mut next = *state;
    for _ in 0..SUBSTEPS {
        let (xa, ta) = cartpole_accel(next.theta.cos(), next.theta.sin(), next.theta_dot, force, p.eta_l);
        next.x_dot += h * xa;
        next.theta_dot += h * ta;
        next.x += h * next.x_dot;
        next.theta += h * next.theta_dot;
    }
    let reward = -(p.eta_x - next.tip_x(p.eta_l)).powi(2);
    (next, reward, false)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointRobotState {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
}

impl PointRobotState {
    pub fn origin() -> Self {
        Self { pos: [0.0; 2], vel: [0.0; 2] }
    }

    pub fn observe(&self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.vel[0], self.vel[1]]
    }

    pub fn from_obs(obs: &[f64]) -> Self {
        Self { pos: [obs[0], obs[1]], vel: [obs[2], obs[3]] }
    }
}

const THRUSTER_DIRS: [[f64; 2]; 4] = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]];

/// Leaving the arena ends an episode.
pub fn pointrobot_terminal(obs: &[f64]) -> bool {
    obs[0].hypot(obs[1]) > pointrobot::ARENA_RADIUS
}

pub fn pointrobot_step(state: &PointRobotState, action: &[f64], p: &PointRobotParams) -> (PointRobotState, f64, bool) {
    use pointrobot::*;
    let mut force = [0.0; 2];
    for (i, dir) in THRUSTER_DIRS.iter().enumerate() {
        if p.crippled == Some(i) {
            continue;
        }
        let a = action[i].clamp(-1.0, 1.0);
        force[0] += a * dir[0];
        force[1] += a * dir[1];
    }
    let mut next = *state;
    for k in 0..2 {
        next.vel[k] = state.vel[k] + DT * (force[k] / MASS - DRAG * state.vel[k]);
        next.pos[k] = state.pos[k] + DT * next.vel[k];
    }
    let u = p.goal_unit();
    let reward = next.vel[0] * u[0] + next.vel[1] * u[1];
    let done = pointrobot_terminal(&next.observe());
    (next, reward, done)
}

/// Early-termination predicate of a family on an observation.
pub fn early_termination(family: Family, obs: &[f64]) -> bool {
    match family {
        Family::Cartpole => false,
        Family::PointRobot => pointrobot_terminal(obs),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum EnvState {
    Cartpole(CartpoleState),
    PointRobot(PointRobotState),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub obs: Vec<f64>,
    pub reward: f64,
    /// Early termination.
    pub done: bool,
    /// Episode length reached.
    pub truncated: bool,
}

/// One live episode of a task.
#[derive(Clone, Debug)]
pub struct EnvInstance {
    task: TaskDescriptor,
    state: EnvState,
    t: usize,
    episode_len: usize,
    finished: bool,
}

impl EnvInstance {
    pub fn new(task: TaskDescriptor) -> Self {
        let episode_len = task.family().episode_len();
        let state = Self::initial(&task);
        Self { task, state, t: 0, episode_len, finished: false }
    }

    pub fn with_episode_len(mut self, len: usize) -> Self {
        self.episode_len = len;
        self
    }

    fn initial(task: &TaskDescriptor) -> EnvState {
        match task.params {
            HiddenParams::Cartpole(_) => EnvState::Cartpole(CartpoleState::hanging()),
            HiddenParams::PointRobot(_) => EnvState::PointRobot(PointRobotState::origin()),
        }
    }

    pub fn task(&self) -> &TaskDescriptor {
        &self.task
    }

    /// Changes the hidden parameters mid-run; the state is kept.
    pub fn set_params(&mut self, params: HiddenParams) -> Result<()> {
        if std::mem::discriminant(&params) != std::mem::discriminant(&self.task.params) {
            return Err(Error::Invalid("cannot switch an environment to another family".into()));
        }
        self.task.params = params;
        Ok(())
    }

    pub fn family(&self) -> Family {
        self.task.family()
    }

    pub fn steps(&self) -> usize {
        self.t
    }

    pub fn episode_len(&self) -> usize {
        self.episode_len
    }

    pub fn reset(&mut self) -> Vec<f64> {
        self.state = Self::initial(&self.task);
        self.t = 0;
        self.finished = false;
        self.observe()
    }

    pub fn observe(&self) -> Vec<f64> {
        match &self.state {
            EnvState::Cartpole(s) => s.observe(),
            EnvState::PointRobot(s) => s.observe(),
        }
    }

    pub fn cartpole_state(&self) -> Option<CartpoleState> {
        match self.state {
            EnvState::Cartpole(s) => Some(s),
            _ => None,
        }
    }

    pub fn step(&mut self, action: &[f64]) -> Result<Step> {
        if self.finished {
            return Err(Error::Invalid("step called on a finished episode".into()));
        }
        let ad = self.family().action_dim();
        if action.len() != ad {
            return Err(Error::shape("env_step", format!("action of length {}, expected {ad}", action.len())));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite { context: "action".into() });
        }
        let (reward, done) = match (&mut self.state, &self.task.params) {
            (EnvState::Cartpole(s), HiddenParams::Cartpole(p)) => {
                let (n, r, d) = cartpole_step(s, action[0], p);
                *s = n;
                (r, d)
            }
            (EnvState::PointRobot(s), HiddenParams::PointRobot(p)) => {
                let (n, r, d) = pointrobot_step(s, action, p);
                *s = n;
                (r, d)
            }
            _ => unreachable!("state and parameters share a family"),
        };
        self.t += 1;
        let truncated = self.t >= self.episode_len;
        self.finished = done || truncated;
        Ok(Step { obs: self.observe(), reward, done, truncated })
    }
}

/// The two cartpole tasks of the inference demo.
pub fn toy_cartpole_tasks() -> Vec<TaskDescriptor> {
    [(0, 1.0, 0.5, 1.0), (1, 0.8, 0.7, 1.5)]
        .into_iter()
        .map(|(id, a, l, x)| TaskDescriptor {
            id,
            params: HiddenParams::Cartpole(CartpoleParams { eta_a: a, eta_l: l, eta_x: x }),
            split: Split::Train,
        })
        .collect()
}

/// Train, weak and strong task sets of one family.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSplit {
    pub family: Family,
    pub seed: u64,
    pub train: Vec<TaskDescriptor>,
    pub weak: Vec<TaskDescriptor>,
    pub strong: Vec<TaskDescriptor>,
}

pub const MANIFEST_VERSION: u32 = 1;
const MANIFEST_MAGIC: &str = "ghp-task-split";
const SPLIT_RETRIES: usize = 1000;

impl TaskSplit {
    pub fn tasks(&self, split: Split) -> &[TaskDescriptor] {
        match split {
            Split::Train => &self.train,
            Split::Weak => &self.weak,
            Split::Strong => &self.strong,
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &TaskDescriptor> {
        self.train.iter().chain(&self.weak).chain(&self.strong)
    }

    pub fn find(&self, id: usize) -> Option<&TaskDescriptor> {
        self.all().find(|t| t.id == id)
    }

    /// Uniform draw from a split.
    pub fn sample<R: Rng + ?Sized>(&self, split: Split, rng: &mut R) -> Result<&TaskDescriptor> {
        let set = self.tasks(split);
        if set.is_empty() {
            return Err(Error::Exhausted(format!("{} split of {} has no tasks", split, self.family)));
        }
        Ok(&set[rng.random_range(0..set.len())])
    }

    /// Versioned plain-text manifest, one task per line.
    pub fn to_manifest(&self) -> String {
        let mut out = format!("{MANIFEST_MAGIC} v{MANIFEST_VERSION}\nfamily {}\nseed {}\n", self.family, self.seed);
        for t in self.all() {
            out.push_str(&format!("{} {} {}\n", t.split, t.id, t.describe()));
        }
        out
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Format(format!("task manifest: {m}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let version = header
            .strip_prefix(MANIFEST_MAGIC)
            .and_then(|v| v.trim().strip_prefix('v'))
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| bad(format!("bad header `{header}`")))?;
        if version != MANIFEST_VERSION {
            return Err(bad(format!("version {version}, this build reads {MANIFEST_VERSION}")));
        }
        let field = |line: Option<&str>, key: &str| -> Result<String> {
            line.and_then(|l| l.strip_prefix(key)).map(|v| v.trim().to_string()).ok_or_else(|| bad(format!("missing `{key}`")))
        };
        let family: Family = field(lines.next(), "family")?.parse()?;
        let seed: u64 = field(lines.next(), "seed")?.parse().map_err(|_| bad("seed is not an integer".into()))?;
        let mut split = TaskSplit { family, seed, train: vec![], weak: vec![], strong: vec![] };
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let mut parts = line.split_whitespace();
            let which: Split = parts.next().ok_or_else(|| bad("blank task".into()))?.parse()?;
            let id: usize = parts.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad(format!("bad task id in `{line}`")))?;
            let kv: Vec<(&str, &str)> = parts.filter_map(|p| p.split_once('=')).collect();
            let get = |k: &str| kv.iter().find(|(a, _)| *a == k).map(|(_, v)| *v).ok_or_else(|| bad(format!("missing `{k}` in `{line}`")));
            let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(format!("`{k}` is not a number in `{line}`"))) };
            let params = match family {
                Family::Cartpole => HiddenParams::Cartpole(CartpoleParams::new(num("eta_a")?, num("eta_l")?, num("eta_x")?)?),
                Family::PointRobot => {
                    let crippled = match get("crippled")? {
                        "none" => None,
                        c => Some(c.parse().map_err(|_| bad(format!("bad leg in `{line}`")))?),
                    };
                    let deg: u32 = get("direction")?.parse().map_err(|_| bad(format!("bad direction in `{line}`")))?;
                    if deg % 45 != 0 {
                        return Err(bad(format!("direction {deg} is not on the compass")));
                    }
                    HiddenParams::PointRobot(PointRobotParams::new(crippled, (deg / 45) as usize)?)
                }
            };
            let t = TaskDescriptor { id, params, split: which };
            match which {
                Split::Train => split.train.push(t),
                Split::Weak => split.weak.push(t),
                Split::Strong => split.strong.push(t),
            }
        }
        Ok(split)
    }
}

/// Point-robot task id of `(leg, direction)`.
pub fn pointrobot_task_id(leg: usize, direction: usize) -> usize {
    leg * pointrobot::DIRECTIONS + direction
}

fn point_task(leg: usize, direction: usize, split: Split) -> TaskDescriptor {
    TaskDescriptor {
        id: pointrobot_task_id(leg, direction),
        params: HiddenParams::PointRobot(PointRobotParams { crippled: Some(leg), direction }),
        split,
    }
}

/// Draws a task split for `family` from `seed`.
///
/// Point robot: 12 training pairs out of the 28 non-holdout (leg, direction)
/// pairs covering every leg and every non-holdout direction, 5 weak pairs
/// from the remaining 16, and the 4 holdout-direction pairs as strong.
/// Cartpole: a fixed grid of action scales, pole lengths and goals, with two
/// unseen combinations as weak and an unseen pole length as strong.
pub fn make_task_split(family: Family, seed: u64, holdout_deg: u32) -> Result<TaskSplit> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    match family {
        Family::PointRobot => {
            if holdout_deg % 45 != 0 || holdout_deg >= 360 {
                return Err(Error::Invalid(format!("holdout direction {holdout_deg} is not on the 8-point compass")));
            }
            let holdout = (holdout_deg / 45) as usize;
            let pool: Vec<(usize, usize)> = (0..pointrobot::LEGS)
                .flat_map(|leg| (0..pointrobot::DIRECTIONS).filter(move |&d| d != holdout).map(move |d| (leg, d)))
                .collect();
            let dirs: BTreeSet<usize> = pool.iter().map(|p| p.1).collect();
            for _ in 0..SPLIT_RETRIES {
                let pick = sample_indices(&mut rng, pool.len(), 12).into_vec();
                let chosen: BTreeSet<usize> = pick.iter().copied().collect();
                let legs: BTreeSet<usize> = pick.iter().map(|&i| pool[i].0).collect();
                let seen: BTreeSet<usize> = pick.iter().map(|&i| pool[i].1).collect();
                if legs.len() < pointrobot::LEGS || seen != dirs {
                    continue;
                }
                let mut train_idx: Vec<usize> = chosen.iter().copied().collect();
                train_idx.sort_unstable();
                let rest: Vec<usize> = (0..pool.len()).filter(|i| !chosen.contains(i)).collect();
                let mut weak_idx: Vec<usize> = sample_indices(&mut rng, rest.len(), 5).into_iter().map(|i| rest[i]).collect();
                weak_idx.sort_unstable();
                let train = train_idx.iter().map(|&i| point_task(pool[i].0, pool[i].1, Split::Train)).collect();
                let weak = weak_idx.iter().map(|&i| point_task(pool[i].0, pool[i].1, Split::Weak)).collect();
                let strong = (0..pointrobot::LEGS).map(|leg| point_task(leg, holdout, Split::Strong)).collect();
                return Ok(TaskSplit { family, seed, train, weak, strong });
            }
            Err(Error::Exhausted(format!("no covering training split after {SPLIT_RETRIES} draws")))
        }
        Family::Cartpole => {
            let mk = |id, a, l, x, split| TaskDescriptor {
                id,
                params: HiddenParams::Cartpole(CartpoleParams { eta_a: a, eta_l: l, eta_x: x }),
                split,
            };
            let mut grid = Vec::new();
            for (i, &(a, l, x)) in [
                (0.8, 0.5, 1.0),
                (1.2, 0.5, -1.0),
                (0.8, 0.7, -1.0),
                (1.2, 0.7, 1.0),
                (0.8, 0.5, -1.0),
                (1.2, 0.7, -1.0),
            ]
            .iter()
            .enumerate()
            {
                grid.push((i, a, l, x));
            }
            // Which two grid points are held out as weak is seeded.
            let weak_pick: BTreeSet<usize> = sample_indices(&mut rng, grid.len(), 2).into_iter().collect();
            let mut split = TaskSplit { family, seed, train: vec![], weak: vec![], strong: vec![] };
            for &(i, a, l, x) in &grid {
                if weak_pick.contains(&i) {
                    split.weak.push(mk(i, a, l, x, Split::Weak));
                } else {
                    split.train.push(mk(i, a, l, x, Split::Train));
                }
            }
            split.strong = vec![mk(6, 1.0, 0.9, 1.0, Split::Strong), mk(7, 1.0, 0.9, -1.0, Split::Strong)];
            Ok(split)
        }
    }
}
