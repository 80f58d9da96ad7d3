use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ActionSequence, ACTION_STEPS};

/// Seconds per pose and per action step.
pub const DT: f64 = 0.1;
pub const HISTORY_LEN: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum TrajectoryError {
    #[error("expected {expected} poses, got {got}")]
    Length { expected: usize, got: usize },
    #[error("final history pose must be the origin with zero yaw, got {0:?}")]
    NotEgoFrame(Pose),
    #[error("non-finite value at step {0}")]
    NonFinite(usize),
    #[error("initial speed must be finite and non-negative, got {0}")]
    BadSpeed(f64),
}

/// Planar pose in the ego frame; serialized as `[x, y, yaw]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.yaw.is_finite()
    }
}

impl From<[f64; 3]> for Pose {
    fn from(v: [f64; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

impl From<Pose> for [f64; 3] {
    fn from(p: Pose) -> Self {
        [p.x, p.y, p.yaw]
    }
}

/// The 16 most recent poses at 10 Hz, oldest first, ending at the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Pose>", into = "Vec<Pose>")]
pub struct PoseHistory {
    poses: Vec<Pose>,
}

impl PoseHistory {
    pub fn new(poses: Vec<Pose>) -> Result<Self, TrajectoryError> {
        if poses.len() != HISTORY_LEN {
            return Err(TrajectoryError::Length {
                expected: HISTORY_LEN,
                got: poses.len(),
            });
        }
        if let Some(i) = poses.iter().position(|p| !p.is_finite()) {
            return Err(TrajectoryError::NonFinite(i));
        }
        let last = poses[HISTORY_LEN - 1];
        if last != Pose::default() {
            return Err(TrajectoryError::NotEgoFrame(last));
        }
        Ok(Self { poses })
    }

    /// Standing still at the origin.
    pub fn stationary() -> Self {
        Self {
            poses: vec![Pose::default(); HISTORY_LEN],
        }
    }

    /// Driving straight along +x at `speed`.
    pub fn straight(speed: f64) -> Self {
        Self {
            poses: (0..HISTORY_LEN)
                .map(|i| Pose::new(-((HISTORY_LEN - 1 - i) as f64) * speed * DT, 0.0, 0.0))
                .collect(),
        }
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    /// `‖p16 − p15‖ / dt`.
    pub fn current_speed(&self) -> f64 {
        let a = self.poses[HISTORY_LEN - 2];
        let b = self.poses[HISTORY_LEN - 1];
        (b.x - a.x).hypot(b.y - a.y) / DT
    }
}

impl TryFrom<Vec<Pose>> for PoseHistory {
    type Error = TrajectoryError;

    fn try_from(poses: Vec<Pose>) -> Result<Self, Self::Error> {
        Self::new(poses)
    }
}

impl From<PoseHistory> for Vec<Pose> {
    fn from(h: PoseHistory) -> Self {
        h.poses
    }
}

/// 64 future poses at 10 Hz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Pose>", into = "Vec<Pose>")]
pub struct Trajectory {
    poses: Vec<Pose>,
}

impl Trajectory {
    pub fn new(poses: Vec<Pose>) -> Result<Self, TrajectoryError> {
        if poses.len() != ACTION_STEPS {
            return Err(TrajectoryError::Length {
                expected: ACTION_STEPS,
                got: poses.len(),
            });
        }
        if let Some(i) = poses.iter().position(|p| !p.is_finite()) {
            return Err(TrajectoryError::NonFinite(i));
        }
        Ok(Self { poses })
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    /// Translates every pose by `(dx, dy)`.
    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            poses: self
                .poses
                .iter()
                .map(|p| Pose::new(p.x + dx, p.y + dy, p.yaw))
                .collect(),
        }
    }
}

impl TryFrom<Vec<Pose>> for Trajectory {
    type Error = TrajectoryError;

    fn try_from(poses: Vec<Pose>) -> Result<Self, Self::Error> {
        Self::new(poses)
    }
}

impl From<Trajectory> for Vec<Pose> {
    fn from(t: Trajectory) -> Self {
        t.poses
    }
}

/// Unicycle state: planar pose plus forward speed.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UnicycleState {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub speed: f64,
}

impl UnicycleState {
    /// One explicit-Euler step of length `dt`.
    pub fn step(&self, accel: f64, curvature: f64, dt: f64) -> Self {
        Self {
            x: self.x + self.speed * self.yaw.cos() * dt,
            y: self.y + self.speed * self.yaw.sin() * dt,
            yaw: self.yaw + curvature * self.speed * dt,
            speed: self.speed + accel * dt,
        }
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.x, self.y, self.yaw)
    }
}

/// Integrates the actions from the origin at `initial_speed`; pose `i`
/// is the state after step `i + 1`.
pub fn actions_to_trajectory(actions: &ActionSequence, initial_speed: f64) -> Result<Trajectory, TrajectoryError> {
    if !(initial_speed.is_finite() && initial_speed >= 0.0) {
        return Err(TrajectoryError::BadSpeed(initial_speed));
    }
    if let Some(i) = actions
        .steps
        .iter()
        .position(|s| !(s.accel.is_finite() && s.curvature.is_finite()))
    {
        return Err(TrajectoryError::NonFinite(i));
    }
    let mut state = UnicycleState {
        speed: initial_speed,
        ..Default::default()
    };
    let poses = actions
        .steps
        .iter()
        .map(|s| {
            state = state.step(s.accel as f64, s.curvature as f64, DT);
            state.pose()
        })
        .collect();
    Trajectory::new(poses)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Same dynamics with `substeps` smaller Euler steps per action step.
    fn fine_reference(accel: f64, curvature: f64, v0: f64, substeps: usize) -> Vec<Pose> {
        let mut s = UnicycleState {
            speed: v0,
            ..Default::default()
        };
        let h = DT / substeps as f64;
        (0..ACTION_STEPS)
            .map(|_| {
                for _ in 0..substeps {
                    s = s.step(accel, curvature, h);
                }
                s.pose()
            })
            .collect()
    }

    #[test]
    fn straight_line() {
        let t = actions_to_trajectory(&ActionSequence::constant(0.0, 0.0), 1.0).unwrap();
        for (i, p) in t.poses().iter().enumerate() {
            assert!((p.x - 0.1 * (i + 1) as f64).abs() < 1e-12);
            assert_eq!((p.y, p.yaw), (0.0, 0.0));
        }
    }

    #[test]
    fn constant_acceleration_sum() {
        let t = actions_to_trajectory(&ActionSequence::constant(1.0, 0.0), 0.0).unwrap();
        assert!((t.poses()[2].x - 0.03).abs() < 1e-12);
        // Euler lags the exact solution by a * t * dt / 2.
        let fine = fine_reference(1.0, 0.0, 0.0, 1000);
        for (i, (p, r)) in t.poses().iter().zip(&fine).enumerate() {
            let time = (i + 1) as f64 * DT;
            assert!((p.x - r.x).abs() <= time * DT / 2.0 + 1e-9);
        }
    }

    #[test]
    fn circle_within_euler_bound() {
        let (k, v) = (0.1f64, 1.0f64);
        let t = actions_to_trajectory(&ActionSequence::constant(0.0, k as f32), v).unwrap();
        let fine = fine_reference(0.0, k as f32 as f64, v, 1000);
        for (i, (p, r)) in t.poses().iter().zip(&fine).enumerate() {
            let n = (i + 1) as f64;
            let bound = n * v * v * k * DT * DT / 2.0 + 1e-6;
            assert!((p.x - r.x).hypot(p.y - r.y) <= bound, "step {i}");
            // Fine reference hugs the radius-10 circle centred at (0, 10).
            assert!((r.x.hypot(r.y - 10.0) - 10.0).abs() < 1e-3);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut a = ActionSequence::constant(0.0, 0.0);
        a.steps[3].accel = f32::NAN;
        assert_eq!(actions_to_trajectory(&a, 1.0), Err(TrajectoryError::NonFinite(3)));
        assert!(actions_to_trajectory(&ActionSequence::constant(0.0, 0.0), -1.0).is_err());
        assert!(PoseHistory::new(vec![Pose::default(); 15]).is_err());
        let mut off = vec![Pose::default(); 16];
        off[15].x = 1.0;
        assert!(matches!(PoseHistory::new(off), Err(TrajectoryError::NotEgoFrame(_))));
    }

    #[test]
    fn speed_from_last_two_poses() {
        assert!((PoseHistory::straight(5.0).current_speed() - 5.0).abs() < 1e-12);
        assert_eq!(PoseHistory::stationary().current_speed(), 0.0);
    }

    #[test]
    fn serde_uses_triples() {
        let h = PoseHistory::straight(1.0);
        let json = serde_json::to_string(&h).unwrap();
        assert!(json.starts_with("[[-1.5"));
        assert_eq!(serde_json::from_str::<PoseHistory>(&json).unwrap(), h);
        assert!(serde_json::from_str::<PoseHistory>("[[0,0,0]]").is_err());
    }
}
