//! Goal-conditioned parking lot with unicycle kinematics.

use super::{Action, EnvError, StepResult};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParkingSpec {
    pub spot_poses: Vec<Pose>,
    pub agent_start: (f64, f64),
    pub dt: f64,
    /// Velocity at full throttle, units per second.
    pub speed_scale: f64,
    /// Angular velocity at full turn, radians per second.
    pub turn_scale: f64,
    pub step_cap: usize,
    pub position_tolerance: f64,
    pub heading_tolerance: f64,
    /// Per-step penalty per unit of distance to the goal.
    pub distance_cost: f64,
}

impl ParkingSpec {
    fn with_spots(spot_poses: Vec<Pose>) -> Self {
        Self {
            spot_poses,
            agent_start: (0.0, 0.0),
            dt: 0.1,
            speed_scale: 5.0,
            turn_scale: 2.0,
            step_cap: 100,
            position_tolerance: 0.5,
            heading_tolerance: 0.26,
            distance_cost: 1.0,
        }
    }

    /// Two facing rows of 15 spots, 8 units above and below the start.
    pub fn target() -> Self {
        Self::with_spots(two_rows(15, 2.0, 8.0))
    }

    /// Two rows of 4 spots at half the distance.
    pub fn simple() -> Self {
        Self::with_spots(two_rows(4, 2.0, 4.0))
    }

    pub fn n_spots(&self) -> usize {
        self.spot_poses.len()
    }
}

fn two_rows(per_row: usize, spacing: f64, offset: f64) -> Vec<Pose> {
    let half = (per_row as f64 - 1.0) * spacing / 2.0;
    let mut spots = Vec::with_capacity(per_row * 2);
    for (row_y, heading) in [(offset, FRAC_PI_2), (-offset, -FRAC_PI_2)] {
        for i in 0..per_row {
            spots.push(Pose {
                x: -half + i as f64 * spacing,
                y: row_y,
                heading,
            });
        }
    }
    spots
}

pub fn wrap_angle(a: f64) -> f64 {
    let mut a = (a + PI).rem_euclid(2.0 * PI) - PI;
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParkingState {
    pub pose: Pose,
    pub speed: f64,
    pub angular_velocity: f64,
    pub goal: usize,
    pub step_index: usize,
}

#[derive(Debug, Clone)]
pub struct ParkingEnv {
    spec: ParkingSpec,
    start: Option<ParkingState>,
    state: ParkingState,
    done: bool,
}

impl ParkingEnv {
    pub fn new(spec: ParkingSpec) -> Self {
        let state = ParkingState {
            pose: Pose {
                x: spec.agent_start.0,
                y: spec.agent_start.1,
                heading: 0.0,
            },
            speed: 0.0,
            angular_velocity: 0.0,
            goal: 0,
            step_index: 0,
        };
        Self {
            spec,
            start: None,
            state,
            done: false,
        }
    }

    pub fn spec(&self) -> &ParkingSpec {
        &self.spec
    }

    pub fn state(&self) -> &ParkingState {
        &self.state
    }

    pub fn start_state(&self) -> Option<&ParkingState> {
        self.start.as_ref()
    }

    pub fn set_start(&mut self, start: Option<ParkingState>) -> Result<(), EnvError> {
        if let Some(s) = &start {
            self.check_start(s)?;
        }
        self.start = start;
        Ok(())
    }

    pub fn goal_distance(&self, s: &ParkingState) -> f64 {
        let g = self.spec.spot_poses[s.goal];
        (s.pose.x - g.x).hypot(s.pose.y - g.y)
    }

    pub fn is_terminal(&self, s: &ParkingState) -> bool {
        let g = self.spec.spot_poses[s.goal];
        self.goal_distance(s) <= self.spec.position_tolerance
            && wrap_angle(s.pose.heading - g.heading).abs() <= self.spec.heading_tolerance
    }

    pub fn check_start(&self, s: &ParkingState) -> Result<(), EnvError> {
        let finite = [
            s.pose.x,
            s.pose.y,
            s.pose.heading,
            s.speed,
            s.angular_velocity,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(EnvError::InvalidStart("non-finite pose".into()));
        }
        if s.goal >= self.spec.n_spots() {
            return Err(EnvError::InvalidStart(format!("no parking spot {}", s.goal)));
        }
        if self.is_terminal(s) {
            return Err(EnvError::InvalidStart("start is already parked".into()));
        }
        Ok(())
    }

    /// Default episode start: fixed position, uniform heading and goal spot.
    pub fn sample_default<R: Rng + ?Sized>(&self, rng: &mut R) -> ParkingState {
        let heading = rng.random_range(-PI..PI);
        let goal = rng.random_range(0..self.spec.n_spots());
        ParkingState {
            pose: Pose {
                x: self.spec.agent_start.0,
                y: self.spec.agent_start.1,
                heading,
            },
            speed: 0.0,
            angular_velocity: 0.0,
            goal,
            step_index: 0,
        }
    }

    pub fn reset<R: Rng + ?Sized>(
        &mut self,
        start: Option<&ParkingState>,
        rng: &mut R,
    ) -> Result<Vec<f64>, EnvError> {
        let mut s = match start.or(self.start.as_ref()) {
            Some(s) => {
                self.check_start(s)?;
                s.clone()
            }
            None => self.sample_default(rng),
        };
        s.step_index = 0;
        self.state = s;
        self.done = false;
        Ok(self.encode(&self.state))
    }

    pub fn transition(&self, s: &ParkingState, action: &[f64]) -> (ParkingState, f64, bool) {
        let spec = &self.spec;
        let throttle = action[0].clamp(-1.0, 1.0);
        let turn = action[1].clamp(-1.0, 1.0);
        let mut next = s.clone();
        next.speed = throttle * spec.speed_scale;
        next.angular_velocity = turn * spec.turn_scale;
        next.pose.heading = wrap_angle(s.pose.heading + next.angular_velocity * spec.dt);
        next.pose.x += next.speed * spec.dt * next.pose.heading.cos();
        next.pose.y += next.speed * spec.dt * next.pose.heading.sin();
        next.step_index += 1;
        let reward = -spec.distance_cost * self.goal_distance(&next);
        let terminal = self.is_terminal(&next);
        (next, reward, terminal)
    }

    pub fn step(&mut self, action: &Action) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        let a = match action {
            Action::Continuous(a) if a.len() == 2 && a.iter().all(|v| v.is_finite()) => a,
            _ => return Err(EnvError::BadAction),
        };
        let (next, reward, terminal) = self.transition(&self.state, a);
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

    pub const OBSERVATION_DIM: usize = 9;

    /// Agent `(x, y, vx, vy, heading, angular velocity)` then goal `(x, y, heading)`.
    pub fn encode(&self, s: &ParkingState) -> Vec<f64> {
        let g = self.spec.spot_poses[s.goal];
        vec![
            s.pose.x,
            s.pose.y,
            s.speed * s.pose.heading.cos(),
            s.speed * s.pose.heading.sin(),
            s.pose.heading,
            s.angular_velocity,
            g.x,
            g.y,
            g.heading,
        ]
    }

    /// One parked state per spot.
    pub fn positive_terminals(&self) -> Vec<ParkingState> {
        self.spec
            .spot_poses
            .iter()
            .enumerate()
            .map(|(goal, &pose)| ParkingState {
                pose,
                speed: 0.0,
                angular_velocity: 0.0,
                goal,
                step_index: 0,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(x: f64, y: f64, heading: f64, goal: usize) -> ParkingState {
        ParkingState {
            pose: Pose { x, y, heading },
            speed: 0.0,
            angular_velocity: 0.0,
            goal,
            step_index: 0,
        }
    }

    #[test]
    fn layouts() {
        assert_eq!(ParkingSpec::target().n_spots(), 30);
        assert_eq!(ParkingSpec::simple().n_spots(), 8);
        let t = ParkingSpec::target();
        assert_eq!(t.spot_poses[0].x, -14.0);
        assert_eq!(t.spot_poses[14].x, 14.0);
        assert_eq!(t.spot_poses[15].y, -8.0);
    }

    #[test]
    fn straight_drive_integrates() {
        let env = ParkingEnv::new(ParkingSpec::target());
        let s = state(0.0, 0.0, 0.0, 0);
        let (n, r, done) = env.transition(&s, &[1.0, 0.0]);
        assert!((n.pose.x - 0.5).abs() < 1e-12);
        assert_eq!(n.pose.y, 0.0);
        assert!(!done);
        let g = env.spec().spot_poses[0];
        assert!((r + (0.5 - g.x).hypot(g.y)).abs() < 1e-12);
        // actions outside the box are clamped
        let (m, _, _) = env.transition(&s, &[7.0, 0.0]);
        assert_eq!(m.pose, n.pose);
    }

    #[test]
    fn parking_terminates() {
        let env = ParkingEnv::new(ParkingSpec::simple());
        let g = env.spec().spot_poses[2];
        let s = state(g.x, g.y - 0.5, g.heading, 2);
        let (_, _, done) = env.transition(&s, &[0.6, 0.0]);
        assert!(done);
        assert!(env.check_start(&state(g.x, g.y, g.heading, 2)).is_err());
        assert!(env.check_start(&state(0.0, 0.0, 0.0, 99)).is_err());
    }

    #[test]
    fn cap_and_action_checks() {
        let mut env = ParkingEnv::new(ParkingSpec::simple());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let obs = env.reset(None, &mut rng).unwrap();
        assert_eq!(obs.len(), ParkingEnv::OBSERVATION_DIM);
        assert_eq!(env.step(&Action::Discrete(0)), Err(EnvError::BadAction));
        let mut last = None;
        for _ in 0..100 {
            last = Some(env.step(&Action::Continuous(vec![0.0, 0.0])).unwrap());
        }
        assert!(last.unwrap().truncated);
        assert!(env.step(&Action::Continuous(vec![0.0, 0.0])).is_err());
    }

    #[test]
    fn wrap_stays_in_range() {
        for k in -20..20 {
            let a = wrap_angle(k as f64 * 0.7);
            assert!(a > -PI && a <= PI);
        }
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
    }
}
