use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::render::Canvas;
use super::{two_link, wrap_angle, Joint, Task};

const BASE: (f64, f64) = (-0.18, 0.0);
const LINKS: (f64, f64) = (0.1, 0.1);
const BAR: f64 = 0.1;
const CONTACT: f64 = 0.02;
const DT: f64 = 0.02;
const GAIN: f64 = 20.0;
const DAMPING: f64 = 5.0;
const MAX_VELOCITY: f64 = 10.0;
const COUPLING: f64 = 25.0;
const SPIN_TARGET: f64 = 8.0;
const TURN_TOLERANCE: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FingerMode {
    /// Dense reward for spinning the body quickly (counter-clockwise).
    Spin,
    /// Sparse reward for aligning the body's tip with a random target angle.
    Turn,
}

/// Two-link finger that flicks a free hinged bar by frictional contact.
#[derive(Clone, Debug)]
pub struct Finger {
    mode: FingerMode,
    joints: [Joint; 2],
    hinge: Joint,
    target_angle: f64,
}

impl Finger {
    pub fn new(mode: FingerMode) -> Self {
        Self {
            mode,
            joints: [Joint::default(); 2],
            hinge: Joint::default(),
            target_angle: 0.0,
        }
    }

    pub fn turn_tolerance(&self) -> f64 {
        TURN_TOLERANCE
    }

    fn friction(&self) -> f64 {
        match self.mode {
            FingerMode::Spin => 0.5,
            FingerMode::Turn => 4.0,
        }
    }

    pub fn set_state(&mut self, finger: [f64; 2], finger_vel: [f64; 2], hinge: f64, hinge_vel: f64, target: f64) {
        for (j, (a, v)) in self.joints.iter_mut().zip(finger.into_iter().zip(finger_vel)) {
            j.angle = a;
            j.velocity = v;
        }
        self.hinge.angle = hinge;
        self.hinge.velocity = hinge_vel;
        self.target_angle = target;
    }

    pub fn hinge_velocity(&self) -> f64 {
        self.hinge.velocity
    }

    fn tip_and_velocity(&self) -> ((f64, f64), (f64, f64)) {
        let (q1, q2) = (self.joints[0].angle, self.joints[1].angle);
        let (w1, w2) = (self.joints[0].velocity, self.joints[1].velocity);
        let (_, tip) = two_link(BASE, LINKS, (q1, q2));
        let (s1, c1) = q1.sin_cos();
        let (s12, c12) = (q1 + q2).sin_cos();
        let vx = -LINKS.0 * s1 * w1 - LINKS.1 * s12 * (w1 + w2);
        let vy = LINKS.0 * c1 * w1 + LINKS.1 * c12 * (w1 + w2);
        (tip, (vx, vy))
    }

    fn reward(&self) -> f64 {
        match self.mode {
            FingerMode::Spin => (self.hinge.velocity / SPIN_TARGET).clamp(0.0, 1.0),
            FingerMode::Turn => {
                if wrap_angle(self.hinge.angle - self.target_angle).abs() < TURN_TOLERANCE {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl Task for Finger {
    fn reset(&mut self, rng: &mut ChaCha8Rng) {
        for j in &mut self.joints {
            j.angle = rng.random_range(-PI..PI);
            j.velocity = 0.0;
        }
        self.hinge.angle = rng.random_range(-PI..PI);
        self.hinge.velocity = 0.0;
        self.target_angle = rng.random_range(-PI..PI);
    }

    fn advance(&mut self, action: &[f64]) -> f64 {
        for (j, &a) in self.joints.iter_mut().zip(action) {
            let accel = GAIN * a - DAMPING * j.velocity;
            j.advance(accel, DT, MAX_VELOCITY);
        }
        let (tip, v) = self.tip_and_velocity();
        let dir = (self.hinge.angle.cos(), self.hinge.angle.sin());
        let along = (tip.0 * dir.0 + tip.1 * dir.1).clamp(0.0, BAR);
        let closest = (along * dir.0, along * dir.1);
        let gap = ((tip.0 - closest.0).powi(2) + (tip.1 - closest.1).powi(2)).sqrt();
        let mut accel = -self.friction() * self.hinge.velocity;
        if gap < CONTACT {
            let r = along.max(CONTACT);
            let tangential = -v.0 * dir.1 + v.1 * dir.0;
            accel += COUPLING * (tangential / r - self.hinge.velocity);
        }
        self.hinge.advance(accel, DT, 50.0);
        self.reward()
    }

    fn draw(&self, size: usize) -> Canvas {
        let mut c = Canvas::new(size, (-0.05, 0.0), 0.28);
        if self.mode == FingerMode::Turn {
            let t = (BAR * self.target_angle.cos(), BAR * self.target_angle.sin());
            c.disc(t, 0.025, 0.3);
        }
        let bar_tip = (BAR * self.hinge.angle.cos(), BAR * self.hinge.angle.sin());
        c.segment((0.0, 0.0), bar_tip, 0.012, 0.7);
        c.disc(bar_tip, 0.02, 1.0);
        let (elbow, tip) = two_link(BASE, LINKS, (self.joints[0].angle, self.joints[1].angle));
        c.segment(BASE, elbow, 0.012, 0.45);
        c.segment(elbow, tip, 0.012, 0.45);
        c.disc(tip, 0.012, 0.8);
        c
    }

    fn state(&self) -> Vec<f64> {
        vec![
            self.joints[0].angle,
            self.joints[1].angle,
            self.joints[0].velocity,
            self.joints[1].velocity,
            self.hinge.angle,
            self.hinge.velocity,
            self.target_angle,
        ]
    }

    fn box_clone(&self) -> Box<dyn Task> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contact_drags_the_hinge() {
        let mut f = Finger::new(FingerMode::Spin);
        // place the fingertip on the bar and sweep it
        f.set_state([0.0, 0.0], [0.0, 0.0], 0.0, 0.0, 0.0);
        let mut spun = false;
        for _ in 0..50 {
            f.advance(&[1.0, 0.0]);
            spun |= f.hinge_velocity() > 0.1;
        }
        assert!(spun);
    }

    #[test]
    fn free_hinge_decays() {
        let mut f = Finger::new(FingerMode::Spin);
        f.set_state([PI, 0.0], [0.0, 0.0], 0.0, 5.0, 0.0);
        let r0 = f.advance(&[0.0, 0.0]);
        for _ in 0..200 {
            f.advance(&[0.0, 0.0]);
        }
        assert!(r0 > 0.5);
        assert!(f.hinge_velocity() < 5.0 * (-0.5f64 * 4.0).exp() + 0.1);
    }

    #[test]
    fn turn_reward_is_sparse() {
        let mut f = Finger::new(FingerMode::Turn);
        f.set_state([PI, 0.0], [0.0, 0.0], 1.0, 0.0, 1.1);
        assert_eq!(f.advance(&[0.0, 0.0]), 1.0);
        f.set_state([PI, 0.0], [0.0, 0.0], 1.0, 0.0, -1.0);
        assert_eq!(f.advance(&[0.0, 0.0]), 0.0);
    }
}
