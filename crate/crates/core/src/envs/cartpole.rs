use std::f64::consts::PI;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::render::Canvas;
use super::{wrap_angle, Task};

const GRAVITY: f64 = 9.81;
const CART_MASS: f64 = 1.0;
const POLE_MASS: f64 = 0.1;
const HALF_POLE: f64 = 0.5;
const FORCE: f64 = 10.0;
const DT: f64 = 0.01;
const RAIL: f64 = 1.8;

/// Cart on a rail with a hinged pole that starts hanging down.
///
/// The pole angle is measured from upright.
#[derive(Clone, Debug, Default)]
pub struct Cartpole {
    x: f64,
    x_dot: f64,
    theta: f64,
    theta_dot: f64,
    pub pole_damping: f64,
}

impl Cartpole {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_state(&mut self, x: f64, x_dot: f64, theta: f64, theta_dot: f64) {
        self.x = x;
        self.x_dot = x_dot;
        self.theta = wrap_angle(theta);
        self.theta_dot = theta_dot;
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    fn reward(&self) -> f64 {
        let upright = (self.theta.cos() + 1.0) / 2.0;
        let centered = (1.0 + (-(self.x / 1.0).powi(2)).exp()) / 2.0;
        let slow = (1.0 + (-(self.theta_dot / 5.0).powi(2)).exp()) / 2.0;
        upright * centered * slow
    }
}

impl Task for Cartpole {
    fn reset(&mut self, rng: &mut ChaCha8Rng) {
        let noise = Normal::new(0.0, 0.01).expect("valid std");
        self.x = noise.sample(rng);
        self.x_dot = noise.sample(rng);
        self.theta = wrap_angle(PI + noise.sample(rng));
        self.theta_dot = noise.sample(rng);
    }

    fn advance(&mut self, action: &[f64]) -> f64 {
        let force = FORCE * action[0];
        let (s, c) = self.theta.sin_cos();
        let total = CART_MASS + POLE_MASS;
        let temp = (force + POLE_MASS * HALF_POLE * self.theta_dot.powi(2) * s) / total;
        let theta_acc = (GRAVITY * s - c * temp)
            / (HALF_POLE * (4.0 / 3.0 - POLE_MASS * c * c / total))
            - self.pole_damping * self.theta_dot;
        let x_acc = temp - POLE_MASS * HALF_POLE * theta_acc * c / total;
        self.x_dot += DT * x_acc;
        self.theta_dot += DT * theta_acc;
        self.x += DT * self.x_dot;
        self.theta = wrap_angle(self.theta + DT * self.theta_dot);
        if self.x.abs() > RAIL {
            self.x = self.x.clamp(-RAIL, RAIL);
            self.x_dot = 0.0;
        }
        self.reward()
    }

    fn draw(&self, size: usize) -> Canvas {
        let mut c = Canvas::new(size, (0.0, 0.0), 2.0);
        c.segment((-2.0, 0.0), (2.0, 0.0), 0.02, 0.2);
        c.segment((self.x - 0.2, 0.0), (self.x + 0.2, 0.0), 0.1, 0.6);
        let tip = (
            self.x + 2.0 * HALF_POLE * self.theta.sin(),
            2.0 * HALF_POLE * self.theta.cos(),
        );
        c.segment((self.x, 0.0), tip, 0.05, 1.0);
        c
    }

    fn state(&self) -> Vec<f64> {
        vec![self.x, self.x_dot, self.theta, self.theta_dot]
    }

    fn box_clone(&self) -> Box<dyn Task> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_is_unit_bounded() {
        let mut cp = Cartpole::new();
        for k in 0..50 {
            cp.set_state(-1.8 + 0.07 * k as f64, 0.0, 0.13 * k as f64, -3.0 + 0.1 * k as f64);
            let r = cp.advance(&[if k % 2 == 0 { 1.0 } else { -1.0 }]);
            assert!((0.0..=1.0).contains(&r), "{r}");
        }
        cp.set_state(0.0, 0.0, 0.0, 0.0);
        assert!(cp.reward() > 0.99);
    }

    #[test]
    fn undamped_pole_swings_and_frames_change() {
        let mut cp = Cartpole::new();
        cp.set_state(0.0, 0.0, PI - 0.5, 0.0);
        let mut frames = vec![cp.draw(36).to_u8()];
        let mut min_theta_dist = f64::MAX;
        let mut max_theta_dist: f64 = 0.0;
        for step in 1..=400 {
            cp.advance(&[0.0]);
            let d = wrap_angle(cp.theta() - PI).abs();
            min_theta_dist = min_theta_dist.min(d);
            max_theta_dist = max_theta_dist.max(d);
            if step % 10 == 0 {
                frames.push(cp.draw(36).to_u8());
            }
        }
        // pole oscillates about the bottom: it passes near it and returns near the start amplitude
        assert!(min_theta_dist < 0.1, "{min_theta_dist}");
        assert!(max_theta_dist > 0.45, "{max_theta_dist}");
        let changed = frames.windows(2).filter(|w| w[0] != w[1]).count();
        assert!(changed >= frames.len() / 2, "{changed} of {}", frames.len() - 1);
    }
}
