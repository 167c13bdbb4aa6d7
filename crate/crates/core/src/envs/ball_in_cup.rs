use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::render::Canvas;
use super::Task;

const DT: f64 = 0.02;
const GRAVITY: f64 = 9.81;
const CUP_GAIN: f64 = 30.0;
const CUP_DAMPING: f64 = 6.0;
const CUP_RANGE: f64 = 0.35;
const STRING: f64 = 0.3;
const CUP_HALF_WIDTH: f64 = 0.06;
const CUP_DEPTH: f64 = 0.08;
const BALL_RADIUS: f64 = 0.025;

/// Actuated cup with a ball on a string; the ball is caught once it falls
/// into the cup opening, after which it rides with the cup.
#[derive(Clone, Debug, Default)]
pub struct BallInCup {
    cup: (f64, f64),
    cup_vel: (f64, f64),
    ball: (f64, f64),
    ball_vel: (f64, f64),
    caught: bool,
}

impl BallInCup {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cup_half_width(&self) -> f64 {
        CUP_HALF_WIDTH
    }

    pub fn caught(&self) -> bool {
        self.caught
    }

    pub fn set_state(&mut self, cup: (f64, f64), ball: (f64, f64), ball_vel: (f64, f64)) {
        self.cup = cup;
        self.cup_vel = (0.0, 0.0);
        self.ball = ball;
        self.ball_vel = ball_vel;
        self.caught = false;
    }

    fn in_cup(&self) -> bool {
        let dx = self.ball.0 - self.cup.0;
        let dy = self.ball.1 - self.cup.1;
        dx.abs() < CUP_HALF_WIDTH && dy > 0.0 && dy < CUP_DEPTH
    }
}

impl Task for BallInCup {
    fn reset(&mut self, rng: &mut ChaCha8Rng) {
        self.cup = (0.0, 0.0);
        self.cup_vel = (0.0, 0.0);
        let angle = rng.random_range(-1.2..1.2);
        let r = rng.random_range(0.5 * STRING..STRING);
        self.ball = (r * f64::sin(angle), -r * f64::cos(angle));
        self.ball_vel = (0.0, 0.0);
        self.caught = false;
    }

    fn advance(&mut self, action: &[f64]) -> f64 {
        let ax = CUP_GAIN * action[0] - CUP_DAMPING * self.cup_vel.0;
        let ay = CUP_GAIN * action[1] - CUP_DAMPING * self.cup_vel.1;
        self.cup_vel.0 += DT * ax;
        self.cup_vel.1 += DT * ay;
        for (pos, vel) in [
            (&mut self.cup.0, &mut self.cup_vel.0),
            (&mut self.cup.1, &mut self.cup_vel.1),
        ] {
            let next = *pos + DT * *vel;
            if next.abs() > CUP_RANGE {
                *pos = next.clamp(-CUP_RANGE, CUP_RANGE);
                *vel = 0.0;
            } else {
                *pos = next;
            }
        }

        if self.caught {
            self.ball = (self.cup.0, self.cup.1 + 0.5 * CUP_DEPTH);
            self.ball_vel = self.cup_vel;
            return 1.0;
        }

        self.ball_vel.1 -= DT * GRAVITY;
        self.ball.0 += DT * self.ball_vel.0;
        self.ball.1 += DT * self.ball_vel.1;
        // inextensible string: project back onto the sphere and drop the outward velocity
        let (dx, dy) = (self.ball.0 - self.cup.0, self.ball.1 - self.cup.1);
        let dist = (dx * dx + dy * dy).sqrt();
        if dist > STRING {
            let (nx, ny) = (dx / dist, dy / dist);
            self.ball = (self.cup.0 + nx * STRING, self.cup.1 + ny * STRING);
            let rel = (self.ball_vel.0 - self.cup_vel.0, self.ball_vel.1 - self.cup_vel.1);
            let radial = rel.0 * nx + rel.1 * ny;
            if radial > 0.0 {
                self.ball_vel.0 -= radial * nx;
                self.ball_vel.1 -= radial * ny;
            }
        }
        if self.in_cup() && self.ball_vel.1 - self.cup_vel.1 <= 0.0 {
            self.caught = true;
        }
        if self.caught {
            1.0
        } else {
            0.0
        }
    }

    fn draw(&self, size: usize) -> Canvas {
        let mut c = Canvas::new(size, (0.0, 0.0), 0.7);
        let (cx, cy) = self.cup;
        let w = CUP_HALF_WIDTH + BALL_RADIUS;
        c.segment((cx, cy), self.ball, 0.004, 0.25);
        c.segment((cx - w, cy), (cx + w, cy), 0.015, 0.6);
        c.segment((cx - w, cy), (cx - w, cy + CUP_DEPTH), 0.015, 0.6);
        c.segment((cx + w, cy), (cx + w, cy + CUP_DEPTH), 0.015, 0.6);
        c.disc(self.ball, BALL_RADIUS, 1.0);
        c
    }

    fn state(&self) -> Vec<f64> {
        vec![
            self.cup.0,
            self.cup.1,
            self.cup_vel.0,
            self.cup_vel.1,
            self.ball.0,
            self.ball.1,
            self.ball_vel.0,
            self.ball_vel.1,
            f64::from(u8::from(self.caught)),
        ]
    }

    fn box_clone(&self) -> Box<dyn Task> {
        Box::new(self.clone())
    }
}
