//! Central finite-difference oracle for the backward pass.

use crate::error::{AutodiffError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Base step; the actual step for coordinate `x_i` is `h · max(1, |x_i|)`.
    pub h: f64,
    /// Check at most this many coordinates per input, evenly strided.
    pub max_coords: Option<usize>,
    /// Denominator floor for the relative error.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-3,
            max_coords: None,
            floor: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error per input.
    pub per_input: Vec<f64>,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.numel() != 1 {
        return Err(AutodiffError::InvalidArgument {
            op: "grad_check",
            msg: format!("function must be scalar, got shape {:?}", value.shape()),
        });
    }
    Ok(value.item())
}

/// Compares the backward pass of the scalar function `f` against central
/// differences in 64-bit arithmetic, over every input tensor.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(AutodiffError::InvalidArgument {
            op: "grad_check",
            msg: format!("function must be scalar, got shape {:?}", tape.shape(out)),
        });
    }
    let mut grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut work = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut checked = 0;
    for (which, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let stride = opts.max_coords.map_or(1, |m| n.div_ceil(m.max(1)));
        let mut worst: f64 = 0.0;
        for i in (0..n).step_by(stride) {
            let x0 = input.data()[i];
            let h = opts.h * x0.abs().max(1.0);
            work[which].data_mut()[i] = x0 + h;
            let plus = eval(&f, &work)?;
            work[which].data_mut()[i] = x0 - h;
            let minus = eval(&f, &work)?;
            work[which].data_mut()[i] = x0;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic[which].data()[i], numeric, opts.floor));
            checked += 1;
        }
        per_input.push(worst);
    }
    Ok(GradCheckReport {
        per_input,
        coords_checked: checked,
    })
}
