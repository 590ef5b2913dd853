//! Central finite-difference checks of reverse-mode gradients.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{mul, sum};
use super::tensor::{ParamId, Tensor};
use crate::error::Result;

pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Largest |analytic - numeric| / max(|analytic|, |numeric|, floor).
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Relative error with a small floor so that entries that are zero in both
/// gradients do not divide by zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares the gradient of `sum(f(inputs) * R)` (R a fixed random
/// projection) with central differences of step `STEP` in every input entry.
pub fn check(
    inputs: &[(Vec<usize>, Vec<f64>)],
    seed: u64,
    f: impl Fn(&[Tensor]) -> Result<Tensor>,
) -> Result<GradCheckReport> {
    let all: Vec<usize> = (0..inputs.len()).collect();
    check_wrt(inputs, &all, seed, f)
}

/// Like [`check`], but only inputs listed in `wrt` are differentiated and
/// perturbed; the others are held fixed (labels, masks).
pub fn check_wrt(
    inputs: &[(Vec<usize>, Vec<f64>)],
    wrt: &[usize],
    seed: u64,
    f: impl Fn(&[Tensor]) -> Result<Tensor>,
) -> Result<GradCheckReport> {
    let vars: Vec<Tensor> = inputs
        .iter()
        .enumerate()
        .map(|(i, (s, d))| {
            if wrt.contains(&i) {
                Tensor::variable(ParamId(i), s, Arc::new(d.clone()))
            } else {
                Tensor::new(s, d.clone())
            }
        })
        .collect::<Result<_>>()?;
    let out = f(&vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj: Vec<f64> = (0..out.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss = sum(&mul(&out, &Tensor::new(out.shape(), proj.clone())?)?);
    let grads = loss.backward()?;

    let objective = |xs: &[Tensor]| -> Result<f64> {
        let y = f(xs)?;
        Ok(y.data().iter().zip(&proj).map(|(a, b)| a * b).sum())
    };
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let mut consts: Vec<Tensor> = inputs
        .iter()
        .map(|(s, d)| Tensor::new(s, d.clone()))
        .collect::<Result<_>>()?;
    for &i in wrt {
        let (shape, data) = &inputs[i];
        let zeros = vec![0.0; data.len()];
        let analytic = grads.get(ParamId(i)).unwrap_or(&zeros);
        for j in 0..data.len() {
            let mut probe = data.clone();
            probe[j] = data[j] + STEP;
            consts[i] = Tensor::new(shape, probe.clone())?;
            let up = objective(&consts)?;
            probe[j] = data[j] - STEP;
            consts[i] = Tensor::new(shape, probe)?;
            let down = objective(&consts)?;
            let numeric = (up - down) / (2.0 * STEP);
            report.max_rel_err = report.max_rel_err.max(rel_err(analytic[j], numeric));
            report.max_abs_err = report.max_abs_err.max((analytic[j] - numeric).abs());
            report.checked += 1;
        }
        consts[i] = Tensor::new(shape, data.clone())?;
    }
    Ok(report)
}
