//! Central finite-difference gradient checking.
//!
//! Compares tape gradients of a deterministic scalar function against
//! `(f(θ+h) − f(θ−h)) / 2h`, element by element (optionally subsampled per
//! tensor to keep large checks affordable), and reports the worst relative
//! error per parameter tensor.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub type ParamMap = BTreeMap<String, Tensor>;
pub type GradMap = BTreeMap<String, Vec<f64>>;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Maximum admissible relative error.
    pub tol: f64,
    /// Elements probed per tensor; 0 checks every element.
    pub samples_per_tensor: usize,
    /// Seed for choosing probed elements.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tol: 1e-4,
            samples_per_tensor: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_diff: f64,
    pub checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_tensor: Vec<TensorCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&TensorCheck> {
        self.per_tensor
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6)
}

/// Run the check. `value_fn` evaluates the scalar objective at arbitrary
/// parameter values; `grad_fn` evaluates the tape gradient at the base
/// point. Both must be deterministic.
pub fn finite_diff_check(
    params: &ParamMap,
    value_fn: impl Fn(&ParamMap) -> Result<f64>,
    grad_fn: impl Fn(&ParamMap) -> Result<GradMap>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let base = value_fn(params)?;
    if !base.is_finite() {
        return Err(Error::numeric(format!(
            "objective is non-finite at the base point: {base}"
        )));
    }
    let grads = grad_fn(params)?;
    let mut rng = Rng::new(opts.seed);
    let mut per_tensor = Vec::new();
    let mut worst = 0.0f64;
    for (name, tensor) in params {
        let analytic = match grads.get(name) {
            Some(g) => g.clone(),
            None => vec![0.0; tensor.numel()],
        };
        if analytic.len() != tensor.numel() {
            return Err(Error::shape(format!(
                "gradient for {name} has {} elements, tensor has {}",
                analytic.len(),
                tensor.numel()
            )));
        }
        let n = tensor.numel();
        let indices: Vec<usize> = if opts.samples_per_tensor == 0 || opts.samples_per_tensor >= n
        {
            (0..n).collect()
        } else {
            let mut picked = std::collections::BTreeSet::new();
            while picked.len() < opts.samples_per_tensor {
                picked.insert(rng.below_usize(n));
            }
            picked.into_iter().collect()
        };
        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        for &i in &indices {
            let mut plus = tensor.data().to_vec();
            let mut minus = plus.clone();
            plus[i] += opts.step;
            minus[i] -= opts.step;
            let mut p_plus = params.clone();
            p_plus.insert(name.clone(), Tensor::from_vec(tensor.shape().to_vec(), plus)?);
            let mut p_minus = params.clone();
            p_minus.insert(
                name.clone(),
                Tensor::from_vec(tensor.shape().to_vec(), minus)?,
            );
            let f_plus = value_fn(&p_plus)?;
            let f_minus = value_fn(&p_minus)?;
            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::numeric(format!(
                    "objective non-finite while probing {name}[{i}]"
                )));
            }
            let fd = (f_plus - f_minus) / (2.0 * opts.step);
            max_rel = max_rel.max(rel_err(analytic[i], fd));
            max_abs = max_abs.max((analytic[i] - fd).abs());
        }
        worst = worst.max(max_rel);
        per_tensor.push(TensorCheck {
            name: name.clone(),
            max_rel_err: max_rel,
            max_abs_diff: max_abs,
            checked: indices.len(),
        });
    }
    Ok(GradCheckReport {
        per_tensor,
        max_rel_err: worst,
        tol: opts.tol,
        pass: worst <= opts.tol,
    })
}
