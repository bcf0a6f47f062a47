//! Step-simulated grip model for opening a revolute door.

use std::f64::consts::PI;

use super::{Action, DoorKinematics};

/// Commanded gripper angle increment per simulation step.
pub const STEP_ANGLE: f64 = PI / 360.0;
/// Maximum gripper-to-handle deviation before the grasp fails.
pub const GRIP_TOLERANCE: f64 = 0.05;
/// Largest door-angle increase accepted in one step.
pub const MAX_CATCH_UP: f64 = 4.0 * STEP_ANGLE;

fn unit(angle: f64) -> [f64; 2] {
    [angle.cos(), angle.sin()]
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Wrap an angle into `(-π, π]`.
fn wrap(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    } else if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

/// Arc length travelled by the handle when `action` is executed on `door`.
///
/// The gripper starts on the commanded circle at the bearing of the closed
/// handle. If it is not within [`GRIP_TOLERANCE`] of the handle's circle the
/// grasp fails. Otherwise the door angle follows the gripper's bearing about
/// the true hinge while that bearing advances by at most [`MAX_CATCH_UP`] per
/// step and the gripper stays near the handle radius; the episode ends when
/// the gripper drifts more than the tolerance from the handle. The door angle
/// never decreases and stops at `min(|goal_angle|, π)`.
pub fn execute_action(door: &DoorKinematics, action: &Action) -> f64 {
    let rho = door.handle_radius;
    let center = action.hinge_guess;
    let handle0 = door.closed_handle();
    let offset = [handle0[0] - center[0], handle0[1] - center[1]];
    if ((offset[0].hypot(offset[1])) - action.radius_guess).abs() > GRIP_TOLERANCE {
        return 0.0;
    }
    let start_bearing = offset[1].atan2(offset[0]);
    let turn = action.goal_angle.signum();
    let total = action.goal_angle.abs();
    let limit = total.min(PI);
    let steps = (total / STEP_ANGLE).ceil() as usize;
    let open = door.sign();

    let mut phi = 0.0_f64;
    for k in 1..=steps {
        let theta = (k as f64 * STEP_ANGLE).min(total);
        let u = unit(start_bearing + turn * theta);
        let gripper = [
            center[0] + action.radius_guess * u[0],
            center[1] + action.radius_guess * u[1],
        ];
        let rel = [gripper[0] - door.hinge[0], gripper[1] - door.hinge[1]];
        let radial_err = (rel[0].hypot(rel[1]) - rho).abs();
        let bearing = open * rel[1].atan2(rel[0]);
        let candidate = phi + wrap(bearing - phi);
        if candidate >= phi && candidate <= phi + MAX_CATCH_UP && radial_err <= GRIP_TOLERANCE {
            phi = candidate.min(limit);
        }
        let hu = unit(open * phi);
        let handle = [door.hinge[0] + rho * hu[0], door.hinge[1] + rho * hu[1]];
        if dist(gripper, handle) > GRIP_TOLERANCE {
            break;
        }
    }
    rho * phi
}

/// Best achievable reward: the full half-turn along the true handle circle.
pub fn optimal_reward(door: &DoorKinematics) -> f64 {
    door.handle_radius * PI
}


#[cfg(test)]
mod sweep_tests {
    use super::*;
    use crate::diffcore::RngStream;
    use crate::doorsim::{sample_candidate_actions, sample_door};

    #[test]
    fn optimum_dominates_random_actions() {
        let mut rng = RngStream::new(21);
        for _ in 0..5 {
            let d = sample_door(&mut rng);
            let best = sample_candidate_actions(&mut rng, 10_000)
                .iter()
                .map(|a| execute_action(&d, a))
                .fold(0.0, f64::max);
            assert!(best <= optimal_reward(&d));
        }
    }

    #[test]
    fn best_of_hundred_candidates_is_informative() {
        let mut rng = RngStream::new(22);
        let mut frac = 0.0;
        for _ in 0..100 {
            let d = sample_door(&mut rng);
            let rewards: Vec<f64> = sample_candidate_actions(&mut rng, 100)
                .iter()
                .map(|a| execute_action(&d, a))
                .collect();
            frac += rewards.iter().copied().fold(0.0, f64::max) / optimal_reward(&d);
        }
        assert!(frac / 100.0 > 0.3, "{}", frac / 100.0);
    }
}
