//! Central finite-difference oracle for adjoint rules.
//!
//! Compares the directional derivative `∇f·d` obtained from `backward()`
//! against `(f(x + h·d) − f(x − h·d)) / 2h` for a random direction `d`.
//!
//! Components of `d` have magnitudes uniform in `[0.5, 1]` and take the sign
//! of the analytic gradient (a random sign where it is zero). In `f32` a
//! sign-random direction lets the probed derivative cancel down to the
//! rounding noise of the forward pass; sign alignment keeps it at the scale
//! of `‖∇f‖₁`, while a wrong or missing adjoint entry still shows up as a
//! mismatch.

use crate::{no_grad, Result, SeededRng, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    pub h: f32,
    pub rel_tol: f64,
    /// Lower bound on the relative-error denominator, for directions along
    /// which the derivative is (nearly) zero.
    pub floor: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            h: 1e-3,
            rel_tol: 1e-3,
            floor: 1e-2,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Trial {
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

impl Trial {
    pub fn passes(&self, tol: &Tolerance) -> bool {
        self.rel_err.is_finite() && self.rel_err <= tol.rel_tol
    }
}

/// One directional check of `loss` with respect to `inputs`, which must be
/// leaves that require grad.
pub fn directional(
    inputs: &[Tensor],
    loss: impl Fn() -> Result<Tensor>,
    tol: &Tolerance,
    rng: &mut SeededRng,
) -> Result<Trial> {
    check(inputs, &loss, |t| t.item() as f64, tol, rng)
}

/// Directional check of the scalar `sum(weights ⊙ f())`. The finite
/// differences reduce the projection in f64 from the raw `f32` outputs, so
/// the only rounding left on the numeric side is that of the outputs.
pub fn directional_projected(
    inputs: &[Tensor],
    f: impl Fn() -> Result<Tensor>,
    weights: &Tensor,
    tol: &Tolerance,
    rng: &mut SeededRng,
) -> Result<Trial> {
    let w = weights.to_vec();
    let loss = || f()?.mul(weights).map(|t| t.sum());
    let value = |out: &Tensor| {
        out.data()
            .iter()
            .zip(&w)
            .map(|(&o, &w)| o as f64 * w as f64)
            .sum::<f64>()
    };
    check_with(inputs, &loss, &f, value, tol, rng)
}

fn check(
    inputs: &[Tensor],
    loss: impl Fn() -> Result<Tensor>,
    value: impl Fn(&Tensor) -> f64,
    tol: &Tolerance,
    rng: &mut SeededRng,
) -> Result<Trial> {
    check_with(inputs, &loss, &loss, value, tol, rng)
}

fn check_with(
    inputs: &[Tensor],
    loss: impl Fn() -> Result<Tensor>,
    forward: impl Fn() -> Result<Tensor>,
    value: impl Fn(&Tensor) -> f64,
    tol: &Tolerance,
    rng: &mut SeededRng,
) -> Result<Trial> {
    for x in inputs {
        x.zero_grad();
    }
    loss()?.backward()?;
    let dirs: Vec<Vec<f32>> = inputs
        .iter()
        .map(|x| {
            let g = x.grad().unwrap_or_else(|| vec![0.0; x.numel()]);
            g.iter()
                .map(|&gv| {
                    let mag = rng.uniform(0.5, 1.0);
                    let flip = rng.uniform(0.0, 1.0) < 0.5;
                    if gv > 0.0 || (gv == 0.0 && flip) {
                        mag
                    } else {
                        -mag
                    }
                })
                .collect()
        })
        .collect();
    let analytic: f64 = inputs
        .iter()
        .zip(&dirs)
        .map(|(x, d)| {
            let g = x.grad().unwrap_or_else(|| vec![0.0; x.numel()]);
            g.iter()
                .zip(d)
                .map(|(&g, &d)| g as f64 * d as f64)
                .sum::<f64>()
        })
        .sum();

    let originals: Vec<Vec<f32>> = inputs.iter().map(|x| x.to_vec()).collect();
    let eval_at = |step: f32| -> Result<f64> {
        for ((x, d), orig) in inputs.iter().zip(&dirs).zip(&originals) {
            let mut data = x.data_mut();
            for ((v, &o), &dv) in data.iter_mut().zip(orig).zip(d) {
                *v = o + step * dv;
            }
        }
        let value = no_grad(|| forward().map(|out| value(&out)));
        for (x, orig) in inputs.iter().zip(&originals) {
            x.data_mut().copy_from_slice(orig);
        }
        value
    };
    let plus = eval_at(tol.h)?;
    let minus = eval_at(-tol.h)?;
    let numeric = (plus - minus) / (2.0 * tol.h as f64);
    let denom = analytic.abs().max(numeric.abs()).max(tol.floor);
    for x in inputs {
        x.zero_grad();
    }
    Ok(Trial {
        analytic,
        numeric,
        rel_err: (analytic - numeric).abs() / denom,
    })
}

/// Runs `trials` directional checks and returns every trial.
pub fn run(
    inputs: &[Tensor],
    loss: impl Fn() -> Result<Tensor>,
    tol: &Tolerance,
    rng: &mut SeededRng,
    trials: usize,
) -> Result<Vec<Trial>> {
    (0..trials)
        .map(|_| directional(inputs, &loss, tol, rng))
        .collect()
}

/// Fixed random weights `r` so that `sum(r ⊙ y)` turns any output into a
/// well-conditioned scalar.
pub fn projection(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, rng)
}
