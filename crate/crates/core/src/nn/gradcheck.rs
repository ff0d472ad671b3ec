//! Analytic-vs-numeric gradient comparison.

use crate::error::Result;
use crate::nn::param::Parameter;
use crate::nn::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Check at most this many evenly spaced elements per parameter.
    pub max_elements: Option<usize>,
    /// Denominator floor for the relative error, so that parameters whose
    /// gradient is numerically zero do not report roundoff as error.
    pub abs_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_elements: None,
            abs_floor: 1e-7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub elements_checked: usize,
    /// `max|analytic - numeric| / max(max|analytic|, max|numeric|, floor)`
    /// over the checked elements.
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub entries: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn failures(&self) -> Vec<&ParamCheck> {
        self.entries.iter().filter(|e| !e.passed).collect()
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "{:<48} n={:<6} rel_err={:.3e} {}",
                e.name,
                e.elements_checked,
                e.max_rel_err,
                if e.passed { "ok" } else { "FAIL" }
            )?;
        }
        write!(f, "worst={:.3e} tol={:.1e}", self.worst(), self.tol)
    }
}

pub fn grad_check<F>(model_fn: F, params: &[Parameter], tol: f64) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor>,
{
    grad_check_with(model_fn, params, tol, GradCheckOptions::default())
}

/// Compares backpropagated gradients of the scalar `model_fn()` with central
/// finite differences, parameter by parameter. Parameter values are restored
/// afterwards; their gradients are cleared.
pub fn grad_check_with<F>(
    model_fn: F,
    params: &[Parameter],
    tol: f64,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor>,
{
    params.iter().for_each(Parameter::zero_grad);
    model_fn()?.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut entries = Vec::with_capacity(params.len());
    for (p, an) in params.iter().zip(&analytic) {
        let base = p.values();
        let n = base.len();
        let idx: Vec<usize> = match opts.max_elements {
            Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
            _ => (0..n).collect(),
        };
        let mut max_diff: f64 = 0.0;
        let mut max_an: f64 = 0.0;
        let mut max_nu: f64 = 0.0;
        for &i in &idx {
            let mut w = base.clone();
            w[i] = base[i] + opts.h;
            p.set_values(w.clone())?;
            let fp = model_fn()?.item()?;
            w[i] = base[i] - opts.h;
            p.set_values(w)?;
            let fm = model_fn()?.item()?;
            let numeric = (fp - fm) / (2.0 * opts.h);
            max_diff = max_diff.max((an[i] - numeric).abs());
            max_an = max_an.max(an[i].abs());
            max_nu = max_nu.max(numeric.abs());
        }
        p.set_values(base)?;
        let rel = max_diff / max_an.max(max_nu).max(opts.abs_floor);
        entries.push(ParamCheck {
            name: p.name().to_string(),
            elements_checked: idx.len(),
            max_rel_err: rel,
            passed: rel <= tol,
        });
    }
    Ok(GradCheckReport { tol, entries })
}
