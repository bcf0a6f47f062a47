use std::f64::consts::PI;

use super::SimError;
use crate::diffcore::RngStream;

pub const HINGE_RANGE: (f64, f64) = (-0.1, 0.1);
pub const WIDTH_RANGE: (f64, f64) = (0.6, 1.1);
/// Handle radius as a fraction of door width.
pub const HANDLE_FRACTION_RANGE: (f64, f64) = (0.8, 0.95);

pub const CANDIDATE_HINGE_RANGE: (f64, f64) = (-0.15, 0.15);
pub const CANDIDATE_RADIUS_RANGE: (f64, f64) = (0.45, 1.15);
pub const GOAL_ANGLE_RANGE: (f64, f64) = (PI / 6.0, PI);
pub const MAX_RADIUS_GUESS: f64 = 2.0;

/// Hidden ground truth of one revolute door, in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DoorKinematics {
    pub hinge: [f64; 2],
    /// `+1` opens counter-clockwise (towards +y), `-1` clockwise.
    pub open_sign: i8,
    pub width: f64,
    pub handle_radius: f64,
}

impl DoorKinematics {
    pub fn new(hinge: [f64; 2], open_sign: i8, width: f64, handle_radius: f64) -> Result<Self, SimError> {
        if open_sign != 1 && open_sign != -1 {
            return Err(SimError::InvalidDoor(format!("open sign {open_sign}")));
        }
        if !(handle_radius > 0.0 && handle_radius < width) || !hinge.iter().all(|h| h.is_finite()) {
            return Err(SimError::InvalidDoor(format!(
                "handle radius {handle_radius} must lie in (0, width = {width})"
            )));
        }
        Ok(Self {
            hinge,
            open_sign,
            width,
            handle_radius,
        })
    }

    /// Handle position when the door is closed.
    pub fn closed_handle(&self) -> [f64; 2] {
        [self.hinge[0] + self.handle_radius, self.hinge[1]]
    }

    pub fn sign(&self) -> f64 {
        f64::from(self.open_sign)
    }
}

/// Draw door parameters uniformly from the generator ranges.
pub fn sample_door(rng: &mut RngStream) -> DoorKinematics {
    let hinge = [
        rng.uniform_range(HINGE_RANGE.0, HINGE_RANGE.1),
        rng.uniform_range(HINGE_RANGE.0, HINGE_RANGE.1),
    ];
    let open_sign = rng.sign();
    let width = rng.uniform_range(WIDTH_RANGE.0, WIDTH_RANGE.1);
    let eta = rng.uniform_range(HANDLE_FRACTION_RANGE.0, HANDLE_FRACTION_RANGE.1);
    DoorKinematics {
        hinge,
        open_sign,
        width,
        handle_radius: eta * width,
    }
}

/// A parameterized opening trajectory: rotate the gripper about
/// `hinge_guess` at radius `radius_guess` through `goal_angle` radians
/// (sign gives the commanded direction).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Action {
    pub hinge_guess: [f64; 2],
    pub radius_guess: f64,
    pub goal_angle: f64,
}

impl Action {
    pub fn new(hinge_guess: [f64; 2], radius_guess: f64, goal_angle: f64) -> Result<Self, SimError> {
        let a = Self {
            hinge_guess,
            radius_guess,
            goal_angle,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.radius_guess > 0.0 && self.radius_guess <= MAX_RADIUS_GUESS) {
            return Err(SimError::InvalidAction(format!(
                "radius guess {} outside (0, {MAX_RADIUS_GUESS}]",
                self.radius_guess
            )));
        }
        let mag = self.goal_angle.abs();
        if !(GOAL_ANGLE_RANGE.0 - 1e-12..=GOAL_ANGLE_RANGE.1 + 1e-12).contains(&mag) {
            return Err(SimError::InvalidAction(format!(
                "goal angle {} outside ±[π/6, π]",
                self.goal_angle
            )));
        }
        if !self.hinge_guess.iter().all(|h| h.is_finite()) {
            return Err(SimError::InvalidAction("non-finite hinge guess".into()));
        }
        Ok(())
    }

    /// The action that exactly follows the door's handle circle.
    pub fn matched(door: &DoorKinematics, goal_magnitude: f64) -> Self {
        Self {
            hinge_guess: door.hinge,
            radius_guess: door.handle_radius,
            goal_angle: door.sign() * goal_magnitude,
        }
    }

    /// As a 4-vector `(p_x, p_y, radius, goal_angle)`.
    pub fn to_array(&self) -> [f64; 4] {
        [
            self.hinge_guess[0],
            self.hinge_guess[1],
            self.radius_guess,
            self.goal_angle,
        ]
    }
}

/// Random candidate actions for selection and for dataset labels.
pub fn sample_candidate_actions(rng: &mut RngStream, count: usize) -> Vec<Action> {
    (0..count)
        .map(|_| {
            let hinge_guess = [
                rng.uniform_range(CANDIDATE_HINGE_RANGE.0, CANDIDATE_HINGE_RANGE.1),
                rng.uniform_range(CANDIDATE_HINGE_RANGE.0, CANDIDATE_HINGE_RANGE.1),
            ];
            let radius_guess = rng.uniform_range(CANDIDATE_RADIUS_RANGE.0, CANDIDATE_RADIUS_RANGE.1);
            let mag = rng.uniform_range(GOAL_ANGLE_RANGE.0, GOAL_ANGLE_RANGE.1);
            let goal_angle = f64::from(rng.sign()) * mag;
            Action {
                hinge_guess,
                radius_guess,
                goal_angle,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_door_is_deterministic() {
        let a = sample_door(&mut RngStream::new(7));
        let b = sample_door(&mut RngStream::new(7));
        assert_eq!(a, b);
    }

    #[test]
    fn sampled_doors_satisfy_invariants() {
        let mut rng = RngStream::new(1);
        let mut positive = 0;
        let n = 10_000;
        for _ in 0..n {
            let d = sample_door(&mut rng);
            assert!(d.hinge.iter().all(|h| (-0.1..=0.1).contains(h)));
            assert!((0.6..=1.1).contains(&d.width));
            assert!(d.handle_radius > 0.0 && d.handle_radius < d.width);
            let eta = d.handle_radius / d.width;
            assert!((0.8 - 1e-12..=0.95 + 1e-12).contains(&eta));
            assert!(DoorKinematics::new(d.hinge, d.open_sign, d.width, d.handle_radius).is_ok());
            if d.open_sign == 1 {
                positive += 1;
            }
        }
        let freq = positive as f64 / n as f64;
        assert!((0.47..=0.53).contains(&freq), "{freq}");
    }

    #[test]
    fn candidates_satisfy_invariants_and_repeat() {
        let a = sample_candidate_actions(&mut RngStream::new(3), 500);
        let b = sample_candidate_actions(&mut RngStream::new(3), 500);
        assert_eq!(a, b);
        for act in &a {
            act.validate().unwrap();
            assert!(act.hinge_guess.iter().all(|h| (-0.15..=0.15).contains(h)));
            assert!((0.45..=1.15).contains(&act.radius_guess));
            assert!(act.goal_angle != 0.0);
        }
    }

    #[test]
    fn invalid_actions_rejected() {
        assert!(Action::new([0.0, 0.0], 0.0, 1.0).is_err());
        assert!(Action::new([0.0, 0.0], 2.5, 1.0).is_err());
        assert!(Action::new([0.0, 0.0], 1.0, 0.0).is_err());
        assert!(Action::new([0.0, 0.0], 1.0, 4.0).is_err());
        assert!(DoorKinematics::new([0.0, 0.0], 0, 1.0, 0.8).is_err());
        assert!(DoorKinematics::new([0.0, 0.0], 1, 1.0, 1.2).is_err());
    }
}
