//! Central-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{contract, invalid, Error, Result};
use crate::loss::{LossOptions, Normalization};
use crate::model::{build_model, ModelConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Check every coordinate when the parameter count is at most this,
    /// otherwise a seeded random subset of this size (minimum 100).
    pub max_coords: usize,
    pub seed: u64,
    /// Upper bound on the share of coordinates [`grad_check_piecewise`] may
    /// exclude as kink crossings.
    pub max_excluded_fraction: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            tol: 1e-4,
            max_coords: usize::MAX,
            seed: 0,
            max_excluded_fraction: 0.25,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    pub coords_excluded: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` against `(f(p + h e_i) − f(p − h e_i)) / 2h`.
///
/// `f` must be deterministic: it is evaluated twice at `params` and any
/// difference in the result is reported as [`Error::CheckInvalid`].
pub fn grad_check<F>(params: &[f64], analytic: &[f64], mut f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    grad_check_piecewise(
        params,
        analytic,
        |p| Evaluation {
            value: f(p),
            residual: 0.0,
            pattern: Vec::new(),
        },
        opts,
    )
}

/// One evaluation of a piecewise-smooth function for [`grad_check_piecewise`].
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    /// Low-order part: the exact result is `value + residual`. Zero when the
    /// function has no extra precision to offer.
    pub residual: f64,
    /// Branch taken at each non-smooth operation.
    pub pattern: Vec<bool>,
}

/// Like [`grad_check`] for piecewise-smooth functions. `f` also returns the
/// branch pattern of its non-smooth operations (ReLU signs, clamps). A
/// coordinate whose `±h` stencil changes the pattern straddles a kink, where
/// the central difference does not estimate the derivative; it is excluded
/// and counted in `coords_excluded`. More than `max_excluded_fraction` of the
/// checked coordinates excluded makes the check invalid.
pub fn grad_check_piecewise<F>(params: &[f64], analytic: &[f64], mut f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Evaluation,
{
    if !(1e-7..=1e-3).contains(&opts.h) {
        return Err(invalid(format!("step h = {} outside [1e-7, 1e-3]", opts.h)));
    }
    if params.len() != analytic.len() {
        return Err(contract(format!(
            "{} parameters but {} analytic gradient entries",
            params.len(),
            analytic.len()
        )));
    }
    let e0 = f(params);
    let e1 = f(params);
    if e0.value.to_bits() != e1.value.to_bits() || e0.residual.to_bits() != e1.residual.to_bits() || e0.pattern != e1.pattern {
        return Err(Error::CheckInvalid(format!(
            "function is not deterministic: {} vs {}",
            e0.value, e1.value
        )));
    }
    let pattern = e0.pattern;

    let n = params.len();
    let coords: Vec<usize> = if n <= opts.max_coords {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut idx = sample(&mut rng, n, opts.max_coords.max(100).min(n)).into_vec();
        idx.sort_unstable();
        idx
    };

    let mut p = params.to_vec();
    let mut report = GradCheckReport {
        coords_checked: 0,
        coords_excluded: 0,
        max_rel_error: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        tol: opts.tol,
        passed: true,
    };
    for &i in &coords {
        let orig = p[i];
        p[i] = orig + opts.h;
        let fp = f(&p);
        p[i] = orig - opts.h;
        let fm = f(&p);
        p[i] = orig;
        if fp.pattern != pattern || fm.pattern != pattern {
            report.coords_excluded += 1;
            continue;
        }
        report.coords_checked += 1;
        let numeric = ((fp.value - fm.value) + (fp.residual - fm.residual)) / (2.0 * opts.h);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = err;
            report.worst_index = i;
            report.worst_analytic = analytic[i];
            report.worst_numeric = numeric;
        }
    }
    let allowed = (opts.max_excluded_fraction * coords.len() as f64).floor() as usize;
    if report.coords_excluded > allowed {
        return Err(Error::CheckInvalid(format!(
            "{} of {} coordinates straddle a kink (at most {allowed} allowed)",
            report.coords_excluded,
            coords.len()
        )));
    }
    report.passed = report.max_rel_error < opts.tol;
    Ok(report)
}

/// A seeded labelled sequence for checking: piecewise-constant labels with
/// runs of 8–40 samples and class-dependent channel offsets plus noise.
pub fn synthetic_slice(t_len: usize, channels: usize, classes: usize, seed: u64) -> (Tensor, Vec<usize>) {
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = Vec::with_capacity(t_len);
    while labels.len() < t_len {
        let class = rng.random_range(0..classes);
        let run = rng.random_range(8..=40);
        labels.extend(std::iter::repeat_n(class, run));
    }
    labels.truncate(t_len);
    let mut data = Vec::with_capacity(t_len * channels);
    for &y in &labels {
        for ch in 0..channels {
            let offset = ((y * 7 + ch * 3) % 5) as f64 * 0.5 - 1.0;
            let noise: f64 = StandardNormal.sample(&mut rng);
            data.push(offset + 0.3 * noise);
        }
    }
    (Tensor::new(vec![t_len, channels], data).expect("consistent shape"), labels)
}

/// Checks the analytic gradient of the summed multi-stage loss of a freshly
/// built network on a synthetic slice.
///
/// The smoothing term is differentiated without detaching `probs[t−1]`:
/// with detaching, the analytic gradient is not the derivative of the loss.
pub fn check_model_gradients(config: &ModelConfig, slice_samples: usize, seed: u64, ce_norm: Normalization, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let mut net = build_model(config, seed)?;
    let (x, labels) = synthetic_slice(slice_samples, config.in_channels, config.num_classes, seed.wrapping_add(1));
    let loss_opts = LossOptions {
        detach_prev: false,
        ..config.loss_options(ce_norm, false)
    };
    net.zero_grad();
    net.accumulate_gradients(&x, &labels, &loss_opts, 1.0)?;
    let analytic = net.flat_grads();
    let params = net.flat_values();
    let mut probe = net.clone();
    grad_check_piecewise(
        &params,
        &analytic,
        |p| {
            probe.set_flat_values(p).expect("same parameter count");
            let caches = probe.forward_cached(&x).expect("shapes fixed");
            let mut pattern: Vec<bool> = caches.iter().flat_map(|c| c.relu_pattern()).collect();
            for c in &caches {
                pattern.extend(crate::loss::branch_pattern(&c.probs, loss_opts.tau));
            }
            let refs: Vec<&Tensor> = caches.iter().map(|c| &c.probs).collect();
            let (value, residual) = crate::loss::total_loss_extended(&refs, &labels, &loss_opts).unwrap_or((f64::NAN, 0.0));
            Evaluation { value, residual, pattern }
        },
        opts,
    )
}
