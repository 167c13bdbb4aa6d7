//! Pixel-rendered continuous-control micro-environments.
//!
//! Each task is a small deterministic simulator drawn top-down or side-on
//! into a grayscale frame. [`Env`] adds action repeat, a fixed horizon and
//! frame stacking on top of a task.

mod ball_in_cup;
mod cartpole;
mod finger;
pub mod render;
mod reacher;

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;
use render::Canvas;

pub use ball_in_cup::BallInCup;
pub use cartpole::Cartpole;
pub use finger::{Finger, FingerMode};
pub use reacher::{Reacher, ARENA_HALF as REACHER_ARENA_HALF};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskName {
    ReacherEasy,
    ReacherHard,
    CartpoleSwingup,
    BallInCup,
    FingerSpinLite,
    FingerTurnLite,
}

impl TaskName {
    pub const ALL: [TaskName; 6] = [
        TaskName::ReacherEasy,
        TaskName::ReacherHard,
        TaskName::CartpoleSwingup,
        TaskName::BallInCup,
        TaskName::FingerSpinLite,
        TaskName::FingerTurnLite,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskName::ReacherEasy => "reacher_easy",
            TaskName::ReacherHard => "reacher_hard",
            TaskName::CartpoleSwingup => "cartpole_swingup",
            TaskName::BallInCup => "ball_in_cup",
            TaskName::FingerSpinLite => "finger_spin_lite",
            TaskName::FingerTurnLite => "finger_turn_lite",
        }
    }

    /// Default action repeat per task.
    pub fn default_action_repeat(self) -> usize {
        match self {
            TaskName::FingerSpinLite | TaskName::FingerTurnLite => 2,
            _ => 4,
        }
    }
}

impl fmt::Display for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskName::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::UnknownTask {
                name: s.to_string(),
                valid: TaskName::ALL.iter().map(|t| t.as_str()).collect(),
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Dense,
    Sparse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub task: TaskName,
    pub action_dim: usize,
    /// Inclusive bounds shared by every action dimension.
    pub action_bounds: (f64, f64),
    pub render_size: usize,
    pub frames: usize,
    pub action_repeat: usize,
    /// Episode length in simulator steps.
    pub horizon: usize,
    pub reward: RewardKind,
    /// Success radius for sparse tasks, in world units (radians for dials).
    pub sparse_radius: f64,
}

impl EnvSpec {
    /// Agent interactions per episode.
    pub fn episode_len(&self) -> usize {
        self.horizon / self.action_repeat
    }

    pub fn obs_shape(&self) -> [usize; 3] {
        [self.frames, self.render_size, self.render_size]
    }
}

/// Optional overrides applied by [`make_task`].
#[derive(Clone, Debug, Default)]
pub struct SpecOverrides {
    pub render_size: Option<usize>,
    pub frames: Option<usize>,
    pub action_repeat: Option<usize>,
    pub horizon: Option<usize>,
}

/// Stack of `S` quantized grayscale frames, oldest first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Observation {
    frames: usize,
    size: usize,
    pixels: Vec<u8>,
}

impl Observation {
    pub fn from_pixels(frames: usize, size: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != frames * size * size {
            return Err(Error::Shape {
                what: "observation",
                expected: vec![frames, size, size],
                got: vec![pixels.len()],
            });
        }
        Ok(Self {
            frames,
            size,
            pixels,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.frames, self.size, self.size]
    }

    /// Raw 8-bit pixels in `S × H × W` order.
    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn frame(&self, i: usize) -> &[u8] {
        let n = self.size * self.size;
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Pixel value in `[0, 1]`.
    pub fn value(&self, i: usize) -> f32 {
        pixel_value(self.pixels[i])
    }
}

pub fn pixel_value(p: u8) -> f32 {
    p as f32 / 255.0
}

/// Task state snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub values: Vec<f64>,
    pub step: usize,
    pub horizon: usize,
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
}

pub(crate) trait Task: Send + fmt::Debug {
    fn reset(&mut self, rng: &mut ChaCha8Rng);
    /// One simulator step; returns the step reward in `[0, 1]`.
    fn advance(&mut self, action: &[f64]) -> f64;
    fn draw(&self, canvas_size: usize) -> Canvas;
    fn state(&self) -> Vec<f64>;
    fn box_clone(&self) -> Box<dyn Task>;
}

impl Clone for Box<dyn Task> {
    fn clone(&self) -> Self {
        self.box_clone()
    }
}

/// Wraps an angle to `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    if (-PI..PI).contains(&a) {
        return a;
    }
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        -PI
    } else {
        w
    }
}

#[derive(Clone, Debug)]
pub struct Env {
    spec: EnvSpec,
    task: Box<dyn Task>,
    rng: ChaCha8Rng,
    stack: VecDeque<Vec<u8>>,
    inner_steps: usize,
    active: bool,
    dump: Option<FrameDump>,
}

#[derive(Clone, Debug)]
struct FrameDump {
    dir: PathBuf,
    episode: usize,
    frame: usize,
}

/// Builds a task by name with its default spec, then applies overrides.
pub fn make_task(name: &str, overrides: &SpecOverrides, rng: ChaCha8Rng) -> Result<Env> {
    let task: TaskName = name.parse()?;
    Env::new(task, overrides, rng)
}

impl Env {
    pub fn new(task: TaskName, overrides: &SpecOverrides, rng: ChaCha8Rng) -> Result<Self> {
        let (sim, action_dim, reward, radius): (Box<dyn Task>, usize, RewardKind, f64) = match task {
            TaskName::ReacherEasy => {
                let r = Reacher::easy();
                let radius = r.success_radius();
                (Box::new(r), 2, RewardKind::Sparse, radius)
            }
            TaskName::ReacherHard => {
                let r = Reacher::hard();
                let radius = r.success_radius();
                (Box::new(r), 2, RewardKind::Sparse, radius)
            }
            TaskName::CartpoleSwingup => (Box::new(Cartpole::new()), 1, RewardKind::Dense, 0.0),
            TaskName::BallInCup => {
                let b = BallInCup::new();
                let radius = b.cup_half_width();
                (Box::new(b), 2, RewardKind::Sparse, radius)
            }
            TaskName::FingerSpinLite => (Box::new(Finger::new(FingerMode::Spin)), 2, RewardKind::Dense, 0.0),
            TaskName::FingerTurnLite => {
                let f = Finger::new(FingerMode::Turn);
                let radius = f.turn_tolerance();
                (Box::new(f), 2, RewardKind::Sparse, radius)
            }
        };
        let spec = EnvSpec {
            task,
            action_dim,
            action_bounds: (-1.0, 1.0),
            render_size: overrides.render_size.unwrap_or(36),
            frames: overrides.frames.unwrap_or(3),
            action_repeat: overrides
                .action_repeat
                .unwrap_or_else(|| task.default_action_repeat()),
            horizon: overrides.horizon.unwrap_or(1000),
            reward,
            sparse_radius: radius,
        };
        if spec.action_repeat < 1 {
            return Err(Error::Config("action repeat must be at least 1".into()));
        }
        if spec.render_size < 16 {
            return Err(Error::Config(format!(
                "render size must be at least 16, got {}",
                spec.render_size
            )));
        }
        if spec.frames < 1 {
            return Err(Error::Config("at least one frame must be stacked".into()));
        }
        if spec.horizon == 0 || spec.horizon % spec.action_repeat != 0 {
            return Err(Error::Config(format!(
                "horizon {} must be a positive multiple of action repeat {}",
                spec.horizon, spec.action_repeat
            )));
        }
        Ok(Self {
            spec,
            task: sim,
            rng,
            stack: VecDeque::new(),
            inner_steps: 0,
            active: false,
            dump: None,
        })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    /// Writes every observed frame as a PGM image under `dir`.
    pub fn enable_frame_dump(&mut self, dir: impl Into<PathBuf>) -> Result<()> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        self.dump = Some(FrameDump {
            dir,
            episode: 0,
            frame: 0,
        });
        Ok(())
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    pub fn set_rng_state(&mut self, state: &RngState) {
        self.rng = state.restore();
    }

    pub fn reset(&mut self) -> Result<Observation> {
        self.task.reset(&mut self.rng);
        self.inner_steps = 0;
        self.active = true;
        let frame = self.render();
        self.stack.clear();
        for _ in 0..self.spec.frames {
            self.stack.push_back(frame.clone());
        }
        if let Some(d) = &mut self.dump {
            d.episode += 1;
            d.frame = 0;
        }
        self.dump_frame(&frame)?;
        Ok(self.observation())
    }

    pub fn step(&mut self, action: &[f32]) -> Result<StepOutcome> {
        if action.len() != self.spec.action_dim {
            return Err(Error::InvalidAction(format!(
                "expected {} dimensions, got {}",
                self.spec.action_dim,
                action.len()
            )));
        }
        if action.iter().any(|a| a.is_nan()) {
            return Err(Error::InvalidAction("NaN component".into()));
        }
        if !self.active {
            return Err(Error::InvalidAction(
                "step called before reset or after the episode ended".into(),
            ));
        }
        let (lo, hi) = self.spec.action_bounds;
        let clipped: Vec<f64> = action.iter().map(|&a| (a as f64).clamp(lo, hi)).collect();
        let mut reward = 0.0;
        for _ in 0..self.spec.action_repeat {
            reward += self.task.advance(&clipped);
            self.inner_steps += 1;
        }
        let done = self.inner_steps >= self.spec.horizon;
        if done {
            self.active = false;
        }
        let frame = self.render();
        self.stack.pop_front();
        self.stack.push_back(frame.clone());
        self.dump_frame(&frame)?;
        Ok(StepOutcome {
            obs: self.observation(),
            reward,
            done,
        })
    }

    /// Current frame as 8-bit grayscale.
    pub fn render(&self) -> Vec<u8> {
        self.task.draw(self.spec.render_size).to_u8()
    }

    pub fn state(&self) -> EnvState {
        EnvState {
            values: self.task.state(),
            step: self.inner_steps,
            horizon: self.spec.horizon,
        }
    }

    fn observation(&self) -> Observation {
        let mut pixels = Vec::with_capacity(self.spec.frames * self.spec.render_size.pow(2));
        for f in &self.stack {
            pixels.extend_from_slice(f);
        }
        Observation {
            frames: self.spec.frames,
            size: self.spec.render_size,
            pixels,
        }
    }

    fn dump_frame(&mut self, frame: &[u8]) -> Result<()> {
        let size = self.spec.render_size;
        if let Some(d) = &mut self.dump {
            let path = d.dir.join(format!("ep{:04}_f{:04}.pgm", d.episode, d.frame));
            std::fs::write(path, render::encode_pgm(frame, size))?;
            d.frame += 1;
        }
        Ok(())
    }
}

/// Forward kinematics of a planar two-link arm: (elbow, tip).
pub(crate) fn two_link(base: (f64, f64), lengths: (f64, f64), q: (f64, f64)) -> ((f64, f64), (f64, f64)) {
    let elbow = (base.0 + lengths.0 * q.0.cos(), base.1 + lengths.0 * q.0.sin());
    let tip = (
        elbow.0 + lengths.1 * (q.0 + q.1).cos(),
        elbow.1 + lengths.1 * (q.0 + q.1).sin(),
    );
    (elbow, tip)
}

/// Velocity-damped torque-driven joint, integrated with semi-implicit Euler.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub(crate) struct Joint {
    pub angle: f64,
    pub velocity: f64,
}

impl Joint {
    pub fn advance(&mut self, accel: f64, dt: f64, max_velocity: f64) {
        self.velocity = (self.velocity + dt * accel).clamp(-max_velocity, max_velocity);
        self.angle = wrap_angle(self.angle + dt * self.velocity);
    }
}
