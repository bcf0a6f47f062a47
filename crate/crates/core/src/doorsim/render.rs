//! Top-down schematic renderer for doors.

use std::f64::consts::PI;

use super::{DoorKinematics, SimError};
use crate::diffcore::Array;

/// Half-extent of the world window at unit zoom, meters.
pub const WORLD_HALF_EXTENT: f64 = 1.5;
pub const CAMERA_DISTANCE_RANGE: (f64, f64) = (0.20, 0.40);
/// Camera distance giving unit zoom.
pub const REFERENCE_DISTANCE: f64 = 0.30;

/// Map world coordinates to continuous pixel coordinates `(col, row)`.
struct View {
    zoom: f64,
    w: usize,
    h: usize,
}

impl View {
    fn to_pixel(&self, p: [f64; 2]) -> [f64; 2] {
        let span = 2.0 * WORLD_HALF_EXTENT;
        [
            (self.zoom * p[0] + WORLD_HALF_EXTENT) / span * self.w as f64,
            (WORLD_HALF_EXTENT - self.zoom * p[1]) / span * self.h as f64,
        ]
    }
}

struct Canvas {
    w: usize,
    h: usize,
    data: Vec<f64>,
}

impl Canvas {
    fn set(&mut self, col: isize, row: isize) {
        if col >= 0 && row >= 0 && (col as usize) < self.w && (row as usize) < self.h {
            self.data[row as usize * self.w + col as usize] = 1.0;
        }
    }

    /// Clip a segment to the canvas rectangle (Liang–Barsky).
    fn clip(&self, a: [f64; 2], b: [f64; 2]) -> Option<([f64; 2], [f64; 2])> {
        let d = [b[0] - a[0], b[1] - a[1]];
        let (mut t0, mut t1) = (0.0_f64, 1.0_f64);
        let checks = [
            (-d[0], a[0]),
            (d[0], self.w as f64 - a[0]),
            (-d[1], a[1]),
            (d[1], self.h as f64 - a[1]),
        ];
        for (p, q) in checks {
            if p == 0.0 {
                if q < 0.0 {
                    return None;
                }
            } else {
                let t = q / p;
                if p < 0.0 {
                    t0 = t0.max(t);
                } else {
                    t1 = t1.min(t);
                }
            }
        }
        if t0 > t1 {
            return None;
        }
        Some((
            [a[0] + t0 * d[0], a[1] + t0 * d[1]],
            [a[0] + t1 * d[0], a[1] + t1 * d[1]],
        ))
    }

    /// Mark every pixel the segment passes through (corner crossings mark
    /// both neighbours).
    fn supercover(&mut self, a: [f64; 2], b: [f64; 2]) {
        let Some((a, b)) = self.clip(a, b) else { return };
        let max_col = self.w as isize - 1;
        let max_row = self.h as isize - 1;
        let cell = |p: [f64; 2]| {
            (
                (p[0].floor() as isize).clamp(0, max_col),
                (p[1].floor() as isize).clamp(0, max_row),
            )
        };
        let (mut cx, mut cy) = cell(a);
        let (ex, ey) = cell(b);
        let dx = b[0] - a[0];
        let dy = b[1] - a[1];
        let step_x: isize = if dx > 0.0 { 1 } else { -1 };
        let step_y: isize = if dy > 0.0 { 1 } else { -1 };
        let t_delta_x = if dx != 0.0 { 1.0 / dx.abs() } else { f64::INFINITY };
        let t_delta_y = if dy != 0.0 { 1.0 / dy.abs() } else { f64::INFINITY };
        let mut t_max_x = if dx > 0.0 {
            (cx as f64 + 1.0 - a[0]) * t_delta_x
        } else if dx < 0.0 {
            (a[0] - cx as f64) * t_delta_x
        } else {
            f64::INFINITY
        };
        let mut t_max_y = if dy > 0.0 {
            (cy as f64 + 1.0 - a[1]) * t_delta_y
        } else if dy < 0.0 {
            (a[1] - cy as f64) * t_delta_y
        } else {
            f64::INFINITY
        };
        let budget = (ex - cx).abs() + (ey - cy).abs() + 2;
        self.set(cx, cy);
        for _ in 0..budget {
            if (cx, cy) == (ex, ey) {
                break;
            }
            let t_next = t_max_x.min(t_max_y);
            if t_next > 1.0 {
                break;
            }
            if (t_max_x - t_max_y).abs() < 1e-12 {
                self.set(cx + step_x, cy);
                self.set(cx, cy + step_y);
                cx += step_x;
                cy += step_y;
                t_max_x += t_delta_x;
                t_max_y += t_delta_y;
            } else if t_max_x < t_max_y {
                cx += step_x;
                t_max_x += t_delta_x;
            } else {
                cy += step_y;
                t_max_y += t_delta_y;
            }
            self.set(cx, cy);
        }
    }

    /// 2x2 block whose centre is nearest to `p`.
    fn blob(&mut self, p: [f64; 2]) {
        let c = (p[0] - 0.5).floor() as isize;
        let r = (p[1] - 0.5).floor() as isize;
        for (dc, dr) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            self.set(c + dc, r + dr);
        }
    }
}

/// Render a `height x width` binary image of `door` opened to `angle`
/// radians, seen from `distance` meters.
///
/// The wall runs along the x axis through the hinge with a doorway gap of
/// the door's width; the door is a segment from the hinge at angle
/// `open_sign * angle` from the wall, and the handle a 2x2 blob on it.
pub fn render(
    door: &DoorKinematics,
    angle: f64,
    distance: f64,
    height: usize,
    width: usize,
) -> Result<Array, SimError> {
    if !(0.0..=PI).contains(&angle) {
        return Err(SimError::OutOfRange {
            what: "opening angle",
            value: angle,
        });
    }
    if !(CAMERA_DISTANCE_RANGE.0..=CAMERA_DISTANCE_RANGE.1).contains(&distance) {
        return Err(SimError::OutOfRange {
            what: "camera distance",
            value: distance,
        });
    }
    if height == 0 || width == 0 {
        return Err(SimError::InvalidConfig("image size must be positive".into()));
    }
    let view = View {
        zoom: REFERENCE_DISTANCE / distance,
        w: width,
        h: height,
    };
    let mut canvas = Canvas {
        w: width,
        h: height,
        data: vec![0.0; width * height],
    };
    let [hx, hy] = door.hinge;
    // Far enough to leave the window at any zoom.
    let far = 2.0 * WORLD_HALF_EXTENT / (REFERENCE_DISTANCE / CAMERA_DISTANCE_RANGE.1);
    canvas.supercover(view.to_pixel([-far, hy]), view.to_pixel([hx, hy]));
    canvas.supercover(view.to_pixel([hx + door.width, hy]), view.to_pixel([far, hy]));

    let dir = [(door.sign() * angle).cos(), (door.sign() * angle).sin()];
    let tip = [hx + door.width * dir[0], hy + door.width * dir[1]];
    canvas.supercover(view.to_pixel(door.hinge), view.to_pixel(tip));
    let handle = [hx + door.handle_radius * dir[0], hy + door.handle_radius * dir[1]];
    canvas.blob(view.to_pixel(handle));

    Ok(Array::new(vec![height, width], canvas.data).expect("canvas size"))
}
