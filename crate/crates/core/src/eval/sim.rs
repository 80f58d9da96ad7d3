//! Receding-horizon closed-loop kinematic simulator.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ActionSequence, ACTION_STEPS};
use crate::pipeline::{
    actions_to_trajectory, Engine, InferenceRequest, Pose, PoseHistory, Trajectory, UnicycleState, DT,
};

pub const EGO_RADIUS: f64 = 1.0;
pub const LATERAL_DEVIATION_LIMIT: f64 = 4.0;
pub const DEFAULT_REPLAN_PERIOD: usize = 5;
pub const DEFAULT_INITIAL_SPEED: f64 = 5.0;
pub const DEFAULT_MAX_STEPS: usize = 10_000;

pub type PlanError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("invalid world: {0}")]
    InvalidWorld(String),
    #[error("policy failed at step {step}: {source}")]
    Policy {
        step: usize,
        source: PlanError,
        trace: Vec<TraceStep>,
    },
    #[error("policy returned an unusable plan at step {step}: {reason}")]
    BadPlan {
        step: usize,
        reason: String,
        trace: Vec<TraceStep>,
    },
}

/// Moving disc; serialized as `[x, y, r]` or `[x, y, r, vx, vy]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Obstacle {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    pub vx: f64,
    pub vy: f64,
}

impl Obstacle {
    pub fn at(&self, t: f64) -> (f64, f64) {
        (self.x + self.vx * t, self.y + self.vy * t)
    }
}

impl TryFrom<Vec<f64>> for Obstacle {
    type Error = String;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        match v[..] {
            [x, y, radius] => Ok(Self {
                x,
                y,
                radius,
                vx: 0.0,
                vy: 0.0,
            }),
            [x, y, radius, vx, vy] => Ok(Self { x, y, radius, vx, vy }),
            _ => Err(format!("obstacle needs 3 or 5 numbers, got {}", v.len())),
        }
    }
}

impl From<Obstacle> for Vec<f64> {
    fn from(o: Obstacle) -> Self {
        vec![o.x, o.y, o.radius, o.vx, o.vy]
    }
}

fn default_replan() -> usize {
    DEFAULT_REPLAN_PERIOD
}

fn default_speed() -> f64 {
    DEFAULT_INITIAL_SPEED
}

fn default_max_steps() -> usize {
    DEFAULT_MAX_STEPS
}

/// A corridor around a polyline centerline, which doubles as the reference path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClosedLoopWorld {
    pub centerline: Vec<[f64; 2]>,
    pub halfwidth: f64,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    pub max_distance: f64,
    #[serde(default = "default_replan")]
    pub replan_period: usize,
    /// Ego speed at the first centerline point, heading along the first segment.
    #[serde(default = "default_speed")]
    pub initial_speed: f64,
    /// Simulation stops without a failure after this many steps.
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
}

impl ClosedLoopWorld {
    pub fn straight(length: f64, halfwidth: f64, max_distance: f64) -> Self {
        Self {
            centerline: vec![[0.0, 0.0], [length, 0.0]],
            halfwidth,
            obstacles: Vec::new(),
            max_distance,
            replan_period: DEFAULT_REPLAN_PERIOD,
            initial_speed: DEFAULT_INITIAL_SPEED,
            max_steps: DEFAULT_MAX_STEPS,
        }
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = fs::read_to_string(path).map_err(|source| SimError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let world: Self = serde_json::from_str(&text).map_err(|source| SimError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        world.validate()?;
        Ok(world)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidWorld(m));
        if self.centerline.len() < 2 {
            return bad(format!(
                "centerline has {} points, needs at least 2",
                self.centerline.len()
            ));
        }
        if self.centerline.iter().flatten().any(|v| !v.is_finite()) {
            return bad("centerline has a non-finite coordinate".into());
        }
        let (a, b) = (self.centerline[0], self.centerline[1]);
        if a == b {
            return bad("first centerline segment has zero length".into());
        }
        if !(self.halfwidth.is_finite() && self.halfwidth > 0.0) {
            return bad(format!("halfwidth must be positive, got {}", self.halfwidth));
        }
        if !(self.max_distance.is_finite() && self.max_distance > 0.0) {
            return bad(format!("max_distance must be positive, got {}", self.max_distance));
        }
        if !(1..=ACTION_STEPS).contains(&self.replan_period) {
            return bad(format!(
                "replan_period must be in 1..={ACTION_STEPS}, got {}",
                self.replan_period
            ));
        }
        if !(self.initial_speed.is_finite() && self.initial_speed >= 0.0) {
            return bad(format!(
                "initial_speed must be non-negative, got {}",
                self.initial_speed
            ));
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1".into());
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            let finite = [o.x, o.y, o.radius, o.vx, o.vy].iter().all(|v| v.is_finite());
            if !finite || o.radius < 0.0 {
                return bad(format!("obstacle {i} is malformed: {o:?}"));
            }
        }
        Ok(())
    }

    pub fn start_state(&self) -> UnicycleState {
        let (a, b) = (self.centerline[0], self.centerline[1]);
        UnicycleState {
            x: a[0],
            y: a[1],
            yaw: (b[1] - a[1]).atan2(b[0] - a[0]),
            speed: self.initial_speed,
        }
    }

    /// Distance from `(x, y)` to the centerline.
    pub fn lateral_offset(&self, x: f64, y: f64) -> f64 {
        project(&self.centerline, x, y).distance
    }
}

/// Nearest point on a polyline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub distance: f64,
    pub segment: usize,
    /// Arc length along the polyline to the projected point.
    pub arc_length: f64,
}

/// Projects onto every segment and keeps the nearest; ties keep the smaller index.
pub fn project(line: &[[f64; 2]], x: f64, y: f64) -> Projection {
    let mut best = Projection {
        distance: f64::INFINITY,
        segment: 0,
        arc_length: 0.0,
    };
    let mut start = 0.0;
    for (i, seg) in line.windows(2).enumerate() {
        let (a, b) = (seg[0], seg[1]);
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((x - a[0]) * dx + (y - a[1]) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (px, py) = (a[0] + t * dx, a[1] + t * dy);
        let d = (x - px).hypot(y - py);
        let len = len2.sqrt();
        if d < best.distance {
            best = Projection {
                distance: d,
                segment: i,
                arc_length: start + t * len,
            };
        }
        start += len;
    }
    best
}

/// Point at arc length `s`, extrapolating past either end.
pub fn point_at(line: &[[f64; 2]], s: f64) -> [f64; 2] {
    let mut start = 0.0;
    let last = line.len() - 2;
    for (i, seg) in line.windows(2).enumerate() {
        let (a, b) = (seg[0], seg[1]);
        let len = (b[0] - a[0]).hypot(b[1] - a[1]);
        if len == 0.0 {
            continue;
        }
        if s <= start + len || i == last {
            let t = (s - start) / len;
            return [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
        }
        start += len;
    }
    line[line.len() - 1]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Collision,
    OffDrivable,
    LateralDeviation,
    None,
}

impl FailureKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Collision => "collision",
            Self::OffDrivable => "off_drivable",
            Self::LateralDeviation => "lateral_deviation",
            Self::None => "none",
        }
    }
}

impl fmt::Display for FailureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureEvent {
    pub kind: FailureKind,
    pub arc_length: f64,
    /// Index of the failing step.
    pub step: Option<usize>,
}

/// Failure at one ego position and time, checked in precedence order.
pub fn classify(world: &ClosedLoopWorld, x: f64, y: f64, t: f64) -> FailureKind {
    let hit = world.obstacles.iter().any(|o| {
        let (ox, oy) = o.at(t);
        (x - ox).hypot(y - oy) < EGO_RADIUS + o.radius
    });
    if hit {
        return FailureKind::Collision;
    }
    let lateral = world.lateral_offset(x, y);
    if lateral > world.halfwidth {
        FailureKind::OffDrivable
    } else if lateral > LATERAL_DEVIATION_LIMIT {
        FailureKind::LateralDeviation
    } else {
        FailureKind::None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub speed: f64,
    pub lateral: f64,
    pub traveled: f64,
}

/// What a planner sees at a replanning point.
#[derive(Debug, Clone)]
pub struct Observation<'a> {
    pub step: usize,
    pub state: UnicycleState,
    /// The last 16 poses in the current ego frame.
    pub history: PoseHistory,
    pub world: &'a ClosedLoopWorld,
}

/// N candidate plans in the ego frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub actions: Vec<ActionSequence>,
    pub trajectories: Vec<Trajectory>,
}

pub trait Planner {
    fn plan(&mut self, obs: &Observation<'_>) -> Result<Plan, PlanError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selector {
    #[default]
    Lane0,
    MinLateral,
}

impl FromStr for Selector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lane0" => Ok(Self::Lane0),
            "min-lateral" => Ok(Self::MinLateral),
            _ => Err(format!("unknown selector `{s}` (expected lane0 or min-lateral)")),
        }
    }
}

impl Selector {
    fn select(&self, plan: &Plan, state: &UnicycleState, world: &ClosedLoopWorld) -> usize {
        match self {
            Self::Lane0 => 0,
            Self::MinLateral => {
                let mut best = (0, f64::INFINITY);
                for (i, t) in plan.trajectories.iter().enumerate() {
                    let end = t.poses()[ACTION_STEPS - 1];
                    let (x, y) = to_world(state, end);
                    let d = world.lateral_offset(x, y);
                    if d < best.1 {
                        best = (i, d);
                    }
                }
                best.0
            }
        }
    }
}

fn to_world(state: &UnicycleState, p: Pose) -> (f64, f64) {
    let (s, c) = state.yaw.sin_cos();
    (state.x + c * p.x - s * p.y, state.y + s * p.x + c * p.y)
}

fn wrap_angle(a: f64) -> f64 {
    let w = (a + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI;
    if w == -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        w
    }
}

fn ego_history(past: &[UnicycleState], now: &UnicycleState) -> PoseHistory {
    let (s, c) = now.yaw.sin_cos();
    let poses = past
        .iter()
        .map(|p| {
            let (dx, dy) = (p.x - now.x, p.y - now.y);
            Pose::new(c * dx + s * dy, -s * dx + c * dy, wrap_angle(p.yaw - now.yaw))
        })
        .collect();
    PoseHistory::new(poses).expect("history is built from 16 finite states ending at the ego pose")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimOutcome {
    pub dtf: f64,
    pub failure: FailureEvent,
    pub trace: Vec<TraceStep>,
    pub replans: usize,
    /// True when `max_steps` ran out before a failure or `max_distance`.
    pub budget_exhausted: bool,
}

/// Runs the receding-horizon loop until the first failure, `max_distance`
/// or the step budget.
pub fn simulate_closed_loop(
    world: &ClosedLoopWorld,
    policy: &mut dyn Planner,
    selector: Selector,
) -> Result<SimOutcome, SimError> {
    world.validate()?;
    let mut state = world.start_state();
    // Constant-velocity past along the initial heading.
    let mut past: Vec<UnicycleState> = (0..16)
        .map(|i| {
            let back = (15 - i) as f64 * state.speed * DT;
            UnicycleState {
                x: state.x - back * state.yaw.cos(),
                y: state.y - back * state.yaw.sin(),
                ..state
            }
        })
        .collect();
    past[15] = state;

    let mut trace = vec![TraceStep {
        step: 0,
        x: state.x,
        y: state.y,
        yaw: state.yaw,
        speed: state.speed,
        lateral: world.lateral_offset(state.x, state.y),
        traveled: 0.0,
    }];
    let mut traveled = 0.0;
    let mut replans = 0;
    let mut current: Option<ActionSequence> = None;

    for step in 0..world.max_steps {
        let k = step % world.replan_period;
        if k == 0 {
            let obs = Observation {
                step,
                state,
                history: ego_history(&past, &state),
                world,
            };
            let plan = policy.plan(&obs).map_err(|source| SimError::Policy {
                step,
                source,
                trace: trace.clone(),
            })?;
            let bad = |reason: String| SimError::BadPlan {
                step,
                reason,
                trace: trace.clone(),
            };
            if plan.actions.is_empty() {
                return Err(bad("no samples".into()));
            }
            if plan.selector_needs_trajectories(selector) {
                return Err(bad(format!(
                    "{} action samples but {} trajectories",
                    plan.actions.len(),
                    plan.trajectories.len()
                )));
            }
            current = Some(plan.actions[selector.select(&plan, &state, world)].clone());
            replans += 1;
        }
        let action = current.as_ref().expect("plan requested at step 0").steps[k];
        let mut next = state.step(action.accel as f64, action.curvature as f64, DT);
        // The ego brakes to a stop but never reverses.
        next.speed = next.speed.max(0.0);
        if ![next.x, next.y, next.yaw, next.speed].iter().all(|v| v.is_finite()) {
            return Err(SimError::BadPlan {
                step,
                reason: format!("state became non-finite: {next:?}"),
                trace,
            });
        }
        let travel = (next.x - state.x).hypot(next.y - state.y);
        let kind = classify(world, next.x, next.y, (step + 1) as f64 * DT);
        trace.push(TraceStep {
            step: step + 1,
            x: next.x,
            y: next.y,
            yaw: next.yaw,
            speed: next.speed,
            lateral: world.lateral_offset(next.x, next.y),
            traveled: traveled + travel,
        });
        if kind != FailureKind::None {
            return Ok(SimOutcome {
                dtf: traveled,
                failure: FailureEvent {
                    kind,
                    arc_length: traveled,
                    step: Some(step),
                },
                trace,
                replans,
                budget_exhausted: false,
            });
        }
        traveled += travel;
        if traveled >= world.max_distance {
            return Ok(finish(world.max_distance, trace, replans, false));
        }
        past.remove(0);
        past.push(next);
        state = next;
    }
    log::warn!(
        "closed-loop step budget of {} exhausted at {traveled:.2} m",
        world.max_steps
    );
    Ok(finish(traveled, trace, replans, true))
}

fn finish(dtf: f64, trace: Vec<TraceStep>, replans: usize, budget_exhausted: bool) -> SimOutcome {
    SimOutcome {
        dtf,
        failure: FailureEvent {
            kind: FailureKind::None,
            arc_length: dtf,
            step: None,
        },
        trace,
        replans,
        budget_exhausted,
    }
}

impl Plan {
    fn selector_needs_trajectories(&self, selector: Selector) -> bool {
        selector == Selector::MinLateral && self.trajectories.len() != self.actions.len()
    }

    /// Integrates each action sequence from the current speed.
    pub fn from_actions(actions: Vec<ActionSequence>, speed: f64) -> Result<Self, PlanError> {
        let trajectories = actions
            .iter()
            .map(|a| actions_to_trajectory(a, speed))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { actions, trajectories })
    }
}

/// Holds the same acceleration and curvature forever.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantPolicy {
    pub accel: f32,
    pub curvature: f32,
}

impl ConstantPolicy {
    pub fn straight() -> Self {
        Self {
            accel: 0.0,
            curvature: 0.0,
        }
    }

    pub fn curvature(k: f32) -> Self {
        Self {
            accel: 0.0,
            curvature: k,
        }
    }
}

impl Planner for ConstantPolicy {
    fn plan(&mut self, obs: &Observation<'_>) -> Result<Plan, PlanError> {
        Plan::from_actions(
            vec![ActionSequence::constant(self.accel, self.curvature)],
            obs.state.speed,
        )
    }
}

/// Pure-pursuit tracker of the centerline at constant speed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterlinePolicy {
    pub lookahead: f64,
}

impl Default for CenterlinePolicy {
    fn default() -> Self {
        Self { lookahead: 6.0 }
    }
}

impl Planner for CenterlinePolicy {
    fn plan(&mut self, obs: &Observation<'_>) -> Result<Plan, PlanError> {
        let line = &obs.world.centerline;
        let mut s = obs.state;
        let mut actions = ActionSequence::constant(0.0, 0.0);
        for step in actions.steps.iter_mut() {
            let proj = project(line, s.x, s.y);
            let [tx, ty] = point_at(line, proj.arc_length + self.lookahead);
            let (dx, dy) = (tx - s.x, ty - s.y);
            let dist = dx.hypot(dy).max(1e-6);
            let alpha = wrap_angle(dy.atan2(dx) - s.yaw);
            step.curvature = (2.0 * alpha.sin() / dist) as f32;
            s = s.step(0.0, step.curvature as f64, DT);
        }
        Plan::from_actions(vec![actions], obs.state.speed)
    }
}

/// Runs the full pipeline at every replanning point.
pub struct EnginePlanner {
    pub engine: Engine,
    /// Settings for each request; frames, prompts and sample count are kept,
    /// the pose history is replaced by the observation's.
    pub template: InferenceRequest,
}

impl Planner for EnginePlanner {
    fn plan(&mut self, obs: &Observation<'_>) -> Result<Plan, PlanError> {
        let mut req = self.template.clone();
        req.pose_history = obs.history.clone();
        let out = self.engine.infer(&req)?;
        Ok(Plan {
            actions: out.actions,
            trajectories: out.trajectories,
        })
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    /// Arc length at which a unicycle integrated with `substeps` Euler
    /// steps per tick first leaves `|y| <= limit`.
    fn fine_exit_distance(k: f64, v: f64, limit: f64, substeps: usize) -> f64 {
        let mut s = UnicycleState {
            speed: v,
            ..Default::default()
        };
        let h = DT / substeps as f64;
        let mut traveled = 0.0;
        for _ in 0..1_000_000 {
            let n = s.step(0.0, k, h);
            if n.y.abs() > limit {
                return traveled;
            }
            traveled += (n.x - s.x).hypot(n.y - s.y);
            s = n;
        }
        panic!("never left the corridor");
    }

    #[test]
    fn straight_policy_reaches_max_distance() {
        let world = ClosedLoopWorld::straight(500.0, 2.0, 100.0);
        let out = simulate_closed_loop(&world, &mut ConstantPolicy::straight(), Selector::Lane0).unwrap();
        assert_eq!(out.failure.kind, FailureKind::None);
        assert_eq!(out.dtf, 100.0);
        assert!(!out.budget_exhausted);
        assert_eq!(out.replans, 40);
    }

    #[test]
    fn constant_curvature_leaves_corridor() {
        let world = ClosedLoopWorld::straight(500.0, 2.0, 100.0);
        let out = simulate_closed_loop(&world, &mut ConstantPolicy::curvature(0.05), Selector::Lane0).unwrap();
        assert_eq!(out.failure.kind, FailureKind::OffDrivable);
        let oracle = fine_exit_distance(0.05f32 as f64, 5.0, 2.0, 1000);
        // Circle of radius 20 reaches y = 2 after 20 acos(0.9) metres.
        assert!((oracle - 20.0 * 0.9f64.acos()).abs() < 0.01);
        assert!((out.dtf - oracle).abs() <= 5.0 * DT, "{} vs {oracle}", out.dtf);
    }

    #[test]
    fn obstacle_ahead_collides() {
        let mut world = ClosedLoopWorld::straight(500.0, 2.0, 100.0);
        world.obstacles.push(Obstacle {
            x: 10.0,
            y: 0.0,
            radius: 0.5,
            vx: 0.0,
            vy: 0.0,
        });
        let out = simulate_closed_loop(&world, &mut ConstantPolicy::straight(), Selector::Lane0).unwrap();
        assert_eq!(out.failure.kind, FailureKind::Collision);
        assert!((out.dtf - (10.0 - 1.5)).abs() <= 5.0 * DT);
    }

    #[test]
    fn moving_obstacle_is_advanced_in_time() {
        let o = Obstacle {
            x: 30.0,
            y: 0.0,
            radius: 0.5,
            vx: -5.0,
            vy: 0.0,
        };
        assert_eq!(o.at(2.0), (20.0, 0.0));
        let mut world = ClosedLoopWorld::straight(500.0, 2.0, 100.0);
        world.obstacles.push(o);
        let out = simulate_closed_loop(&world, &mut ConstantPolicy::straight(), Selector::Lane0).unwrap();
        assert_eq!(out.failure.kind, FailureKind::Collision);
        // Closing speed 10 m/s over 28.5 m of gap: contact near 14.25 m.
        assert!((out.dtf - 14.25).abs() <= 5.0 * DT);
    }

    #[test]
    fn failure_precedence() {
        let mut world = ClosedLoopWorld::straight(100.0, 2.0, 50.0);
        world.obstacles.push(Obstacle {
            x: 10.0,
            y: 5.0,
            radius: 1.0,
            vx: 0.0,
            vy: 0.0,
        });
        assert_eq!(classify(&world, 10.0, 5.0, 0.0), FailureKind::Collision);
        assert_eq!(classify(&world, 30.0, 5.0, 0.0), FailureKind::OffDrivable);
        world.halfwidth = 6.0;
        assert_eq!(classify(&world, 30.0, 5.0, 0.0), FailureKind::LateralDeviation);
        assert_eq!(classify(&world, 30.0, 1.0, 0.0), FailureKind::None);
    }

    #[test]
    fn projection_ties_take_smaller_segment() {
        let line = [[0.0, 0.0], [10.0, 0.0], [10.0, 10.0]];
        // Equidistant from both segments through the shared vertex.
        let p = project(&line, 11.0, -1.0);
        assert_eq!(p.segment, 0);
        assert!((p.distance - 2f64.sqrt()).abs() < 1e-12);
        let q = project(&line, 12.0, 5.0);
        assert_eq!(q.segment, 1);
        assert!((q.arc_length - 15.0).abs() < 1e-12);
        assert_eq!(point_at(&line, 15.0), [10.0, 5.0]);
        assert_eq!(point_at(&line, 25.0), [10.0, 15.0]);
    }

    #[test]
    fn centerline_policy_follows_a_bend() {
        let world = ClosedLoopWorld {
            centerline: vec![[0.0, 0.0], [40.0, 0.0], [80.0, 20.0], [120.0, 20.0]],
            ..ClosedLoopWorld::straight(0.0, 2.0, 110.0)
        };
        let out = simulate_closed_loop(&world, &mut CenterlinePolicy::default(), Selector::Lane0).unwrap();
        assert_eq!(out.failure.kind, FailureKind::None, "{:?}", out.trace.last());
        assert_eq!(out.dtf, 110.0);
    }

    #[test]
    fn history_is_in_ego_frame() {
        struct Probe(Vec<PoseHistory>);
        impl Planner for Probe {
            fn plan(&mut self, obs: &Observation<'_>) -> Result<Plan, PlanError> {
                self.0.push(obs.history.clone());
                Plan::from_actions(vec![ActionSequence::constant(0.0, 0.1)], obs.state.speed)
            }
        }
        let world = ClosedLoopWorld::straight(500.0, 50.0, 20.0);
        let mut probe = Probe(Vec::new());
        simulate_closed_loop(&world, &mut probe, Selector::Lane0).unwrap();
        assert!((probe.0[0].current_speed() - 5.0).abs() < 1e-12);
        for h in &probe.0 {
            assert!((h.current_speed() - 5.0).abs() < 1e-9);
            // On a left arc the past stays behind and on the centre side.
            assert!(h.poses()[0].x < 0.0);
        }
        assert!(probe.0[3].poses()[0].y > 0.0);
    }

    #[test]
    fn min_lateral_selector_picks_centered_plan() {
        struct Two;
        impl Planner for Two {
            fn plan(&mut self, obs: &Observation<'_>) -> Result<Plan, PlanError> {
                let actions = vec![ActionSequence::constant(0.0, 0.05), ActionSequence::constant(0.0, 0.0)];
                Plan::from_actions(actions, obs.state.speed)
            }
        }
        let world = ClosedLoopWorld::straight(500.0, 2.0, 60.0);
        let lane0 = simulate_closed_loop(&world, &mut Two, Selector::Lane0).unwrap();
        assert_eq!(lane0.failure.kind, FailureKind::OffDrivable);
        let best = simulate_closed_loop(&world, &mut Two, Selector::MinLateral).unwrap();
        assert_eq!(best.failure.kind, FailureKind::None);
        assert_eq!("min-lateral".parse::<Selector>().unwrap(), Selector::MinLateral);
    }

    #[test]
    fn policy_errors_carry_trace() {
        struct Failing(usize);
        impl Planner for Failing {
            fn plan(&mut self, obs: &Observation<'_>) -> Result<Plan, PlanError> {
                self.0 += 1;
                if self.0 > 2 {
                    return Err("planner gave up".into());
                }
                Plan::from_actions(vec![ActionSequence::constant(0.0, 0.0)], obs.state.speed)
            }
        }
        let world = ClosedLoopWorld::straight(500.0, 2.0, 100.0);
        match simulate_closed_loop(&world, &mut Failing(0), Selector::Lane0) {
            Err(SimError::Policy { step, trace, .. }) => {
                assert_eq!(step, 10);
                assert_eq!(trace.len(), 11);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn step_budget_stops_stationary_ego() {
        let mut world = ClosedLoopWorld::straight(500.0, 2.0, 100.0);
        world.initial_speed = 0.0;
        world.max_steps = 50;
        let out = simulate_closed_loop(&world, &mut ConstantPolicy::straight(), Selector::Lane0).unwrap();
        assert!(out.budget_exhausted);
        assert_eq!((out.dtf, out.failure.kind), (0.0, FailureKind::None));
    }

    #[test]
    fn world_json_and_validation() {
        let w: ClosedLoopWorld = serde_json::from_str(
            r#"{"centerline": [[0, 0], [50, 0]], "halfwidth": 2, "obstacles": [[10, 0, 0.5, 0, 0], [20, 1, 1]], "max_distance": 40}"#,
        )
        .unwrap();
        assert_eq!(w.replan_period, 5);
        assert_eq!(w.initial_speed, 5.0);
        assert_eq!(w.obstacles[1].vx, 0.0);
        w.validate().unwrap();
        let mut bad = w.clone();
        bad.centerline.truncate(1);
        assert!(bad.validate().is_err());
        let mut bad = w.clone();
        bad.halfwidth = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = w;
        bad.replan_period = 0;
        assert!(bad.validate().is_err());
        assert!(serde_json::from_str::<Obstacle>("[1, 2]").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn wider_corridor_never_shortens_dtf(
            k in -0.1f32..0.1,
            accel in -0.5f32..1.0,
            h1 in 0.5f64..6.0,
            extra in 0.0f64..4.0,
            obstacle_y in -8.0f64..8.0,
        ) {
            let mut narrow = ClosedLoopWorld::straight(300.0, h1, 80.0);
            narrow.obstacles.push(Obstacle { x: 40.0, y: obstacle_y, radius: 1.0, vx: 0.0, vy: 0.0 });
            let wide = ClosedLoopWorld { halfwidth: h1 + extra, ..narrow.clone() };
            let mut policy = ConstantPolicy { accel, curvature: k };
            let a = simulate_closed_loop(&narrow, &mut policy, Selector::Lane0).unwrap();
            let b = simulate_closed_loop(&wide, &mut policy, Selector::Lane0).unwrap();
            prop_assert!(b.dtf >= a.dtf);
            prop_assert!(a.failure.arc_length <= narrow.max_distance);
        }

        #[test]
        fn reproducible(k in -0.1f32..0.1) {
            let world = ClosedLoopWorld::straight(300.0, 3.0, 60.0);
            let a = simulate_closed_loop(&world, &mut ConstantPolicy::curvature(k), Selector::Lane0).unwrap();
            let b = simulate_closed_loop(&world, &mut ConstantPolicy::curvature(k), Selector::Lane0).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
