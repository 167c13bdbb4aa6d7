use cure_autodiff::{conv_out_len, ParamSet, Real, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

pub const STRIDES: [usize; 4] = [2, 1, 1, 1];

/// Uniform `±1/√fan_in` weights.
pub fn fan_in_uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Geometry shared by the encoder and its mirrored decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderSpec {
    pub frames: usize,
    /// Side of the square input crop.
    pub crop: usize,
    pub filters: usize,
    pub z_dim: usize,
}

impl EncoderSpec {
    pub fn new(frames: usize, crop: usize, filters: usize, z_dim: usize) -> Result<Self> {
        let spec = Self {
            frames,
            crop,
            filters,
            z_dim,
        };
        if frames == 0 || filters == 0 || z_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        spec.conv_sizes()?;
        Ok(spec)
    }

    /// Output side after each conv layer.
    pub fn conv_sizes(&self) -> Result<[usize; 4]> {
        let mut side = self.crop;
        let mut out = [0; 4];
        for (i, &s) in STRIDES.iter().enumerate() {
            side = conv_out_len(side, s).ok_or_else(|| {
                Error::Config(format!("crop size {} is too small for the encoder", self.crop))
            })?;
            out[i] = side;
        }
        Ok(out)
    }

    /// Side of the final conv feature map.
    pub fn feature_side(&self) -> usize {
        self.conv_sizes().expect("validated at construction")[3]
    }

    pub fn feature_len(&self) -> usize {
        self.filters * self.feature_side().pow(2)
    }

    pub fn input_shape(&self, batch: usize) -> [usize; 4] {
        [batch, self.frames, self.crop, self.crop]
    }

    pub fn init_encoder<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet<T> {
        let mut p = ParamSet::new();
        let mut cin = self.frames;
        for i in 0..STRIDES.len() {
            p.add(
                format!("conv{i}.w"),
                fan_in_uniform(&[self.filters, cin, 3, 3], cin * 9, rng),
            );
            p.add(format!("conv{i}.b"), Tensor::zeros(&[self.filters]));
            cin = self.filters;
        }
        let flat = self.feature_len();
        p.add("fc.w", fan_in_uniform(&[flat, self.z_dim], flat, rng));
        p.add("fc.b", Tensor::zeros(&[self.z_dim]));
        p.add("ln.g", Tensor::ones(&[self.z_dim]));
        p.add("ln.b", Tensor::zeros(&[self.z_dim]));
        p
    }

    pub fn init_decoder<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet<T> {
        let mut p = ParamSet::new();
        let flat = self.feature_len();
        p.add("fc.w", fan_in_uniform(&[self.z_dim, flat], self.z_dim, rng));
        p.add("fc.b", Tensor::zeros(&[flat]));
        for i in 0..STRIDES.len() {
            let cout = if i + 1 == STRIDES.len() {
                self.frames
            } else {
                self.filters
            };
            p.add(
                format!("deconv{i}.w"),
                fan_in_uniform(&[self.filters, cout, 3, 3], self.filters * 9, rng),
            );
            p.add(format!("deconv{i}.b"), Tensor::zeros(&[cout]));
        }
        p
    }

    fn check_input<T: Real>(&self, tape: &Tape<T>, x: Var) -> Result<usize> {
        let s = tape.shape(x);
        if s.len() != 4 || s[1..] != [self.frames, self.crop, self.crop] {
            return Err(Error::Shape {
                what: "encoder input",
                expected: vec![self.frames, self.crop, self.crop],
                got: s.to_vec(),
            });
        }
        Ok(s[0])
    }

    /// `x[B, S, C, C]` to `z[B, z_dim]` with values in `(−1, 1)`.
    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, enc: &[Var], x: Var) -> Result<Var> {
        let b = self.check_input(tape, x)?;
        let mut h = x;
        for (i, &s) in STRIDES.iter().enumerate() {
            h = tape.conv2d(h, enc[2 * i], s)?;
            h = tape.add_bias(h, enc[2 * i + 1])?;
            h = tape.relu(h);
        }
        let h = tape.reshape(h, &[b, self.feature_len()])?;
        let h = tape.dense(h, enc[8], enc[9])?;
        let h = tape.layer_norm(h, enc[10], enc[11])?;
        Ok(tape.tanh(h))
    }

    /// `z[B, z_dim]` back to `[B, S, C, C]`; no activation on the last layer.
    pub fn decode<T: Real>(&self, tape: &mut Tape<T>, dec: &[Var], z: Var) -> Result<Var> {
        let b = tape.shape(z)[0];
        let m = self.feature_side();
        let h = tape.dense(z, dec[0], dec[1])?;
        let h = tape.relu(h);
        let mut h = tape.reshape(h, &[b, self.filters, m, m])?;
        let first = self.conv_sizes()?[0];
        let last = STRIDES.len() - 1;
        for i in 0..STRIDES.len() {
            let (stride, pad) = if i == last {
                (2, self.crop - 2 * first - 1)
            } else {
                (1, 0)
            };
            h = tape.conv_transpose2d(h, dec[2 + 2 * i], stride, pad)?;
            h = tape.add_bias(h, dec[3 + 2 * i])?;
            if i != last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}
