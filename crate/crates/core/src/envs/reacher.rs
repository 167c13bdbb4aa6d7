use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::render::Canvas;
use super::{two_link, Joint, Task};

const LINKS: (f64, f64) = (0.12, 0.12);
const FINGER_RADIUS: f64 = 0.01;
const DT: f64 = 0.02;
const GAIN: f64 = 20.0;
const DAMPING: f64 = 5.0;
const MAX_VELOCITY: f64 = 10.0;

/// Half width of the square region targets are drawn from.
pub const ARENA_HALF: f64 = 0.16;
const VIEW_HALF: f64 = 0.26;

/// Two-link planar arm that must place its fingertip on a target disc.
#[derive(Clone, Debug)]
pub struct Reacher {
    target_size: f64,
    joints: [Joint; 2],
    target: (f64, f64),
}

impl Reacher {
    pub fn easy() -> Self {
        Self::with_target_size(0.05)
    }

    pub fn hard() -> Self {
        Self::with_target_size(0.015)
    }

    fn with_target_size(target_size: f64) -> Self {
        Self {
            target_size,
            joints: [Joint::default(); 2],
            target: (0.0, 0.0),
        }
    }

    /// Fingertip-to-target distance that counts as success.
    pub fn success_radius(&self) -> f64 {
        self.target_size + FINGER_RADIUS
    }

    pub fn set_state(&mut self, angles: [f64; 2], velocities: [f64; 2], target: (f64, f64)) {
        for (j, (a, v)) in self.joints.iter_mut().zip(angles.into_iter().zip(velocities)) {
            j.angle = a;
            j.velocity = v;
        }
        self.target = target;
    }

    pub fn angles(&self) -> [f64; 2] {
        [self.joints[0].angle, self.joints[1].angle]
    }

    pub fn target(&self) -> (f64, f64) {
        self.target
    }

    pub fn fingertip(&self) -> (f64, f64) {
        two_link((0.0, 0.0), LINKS, (self.joints[0].angle, self.joints[1].angle)).1
    }

    fn reward(&self) -> f64 {
        let (x, y) = self.fingertip();
        let d = ((x - self.target.0).powi(2) + (y - self.target.1).powi(2)).sqrt();
        if d <= self.success_radius() {
            1.0
        } else {
            0.0
        }
    }
}

impl Task for Reacher {
    fn reset(&mut self, rng: &mut ChaCha8Rng) {
        for j in &mut self.joints {
            j.angle = rng.random_range(-PI..PI);
            j.velocity = 0.0;
        }
        self.target = (
            rng.random_range(-ARENA_HALF..ARENA_HALF),
            rng.random_range(-ARENA_HALF..ARENA_HALF),
        );
    }

    fn advance(&mut self, action: &[f64]) -> f64 {
        for (j, &a) in self.joints.iter_mut().zip(action) {
            let accel = GAIN * a - DAMPING * j.velocity;
            j.advance(accel, DT, MAX_VELOCITY);
        }
        self.reward()
    }

    fn draw(&self, size: usize) -> Canvas {
        let mut c = Canvas::new(size, (0.0, 0.0), VIEW_HALF);
        c.disc(self.target, self.target_size, 1.0);
        let (elbow, tip) = two_link((0.0, 0.0), LINKS, (self.joints[0].angle, self.joints[1].angle));
        c.segment((0.0, 0.0), elbow, 0.012, 0.5);
        c.segment(elbow, tip, 0.012, 0.5);
        c.disc(tip, FINGER_RADIUS, 0.75);
        c
    }

    fn state(&self) -> Vec<f64> {
        vec![
            self.joints[0].angle,
            self.joints[1].angle,
            self.joints[0].velocity,
            self.joints[1].velocity,
            self.target.0,
            self.target.1,
        ]
    }

    fn box_clone(&self) -> Box<dyn Task> {
        Box::new(self.clone())
    }
}
