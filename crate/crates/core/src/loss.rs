//! Per-stage cross-entropy plus truncated MSE smoothing loss, summed over
//! stages.
//!
//! Both terms are normalised by `T·C` by default ([`Normalization::Elementwise`]).
//! [`Normalization::Conventional`] divides cross-entropy by `T` and the
//! smoothing term by `(T−1)·C`, i.e. plain means.
//!
//! Gradients are returned with respect to the stage probabilities; the model
//! carries them through the softmax.

use serde::{Deserialize, Serialize};

use crate::error::{contract, invalid, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped here before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    #[default]
    Elementwise,
    Conventional,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossOptions {
    pub lambda: f64,
    pub tau: f64,
    pub ce_norm: Normalization,
    /// Treat `probs[t−1]` as a constant in each smoothing term.
    pub detach_prev: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            lambda: 0.15,
            tau: 4.0,
            ce_norm: Normalization::Elementwise,
            detach_prev: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLoss {
    pub ce: f64,
    pub tmse: f64,
    pub combined: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub per_stage: Vec<StageLoss>,
    pub total: f64,
}

#[inline]
fn clamped_log(p: f64) -> (f64, f64) {
    if p > LOG_CLAMP {
        (p.ln(), 1.0 / p)
    } else {
        (LOG_CLAMP.ln(), 0.0)
    }
}

/// Neumaier-compensated running sum. Plain accumulation loses about one ulp
/// of the partial sum per term, which swamps finite-difference checks of
/// small gradients.
#[derive(Default)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
    }

    /// Adds `x · k`, keeping the rounding error of the leading product.
    fn add_scaled(&mut self, x: &CompensatedSum, k: f64) {
        let p = x.sum * k;
        self.add(p);
        self.add(x.sum.mul_add(k, -p));
        self.add(x.carry * k);
    }

    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

fn check_labels(probs: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let (t, c) = probs.expect_matrix("loss probabilities")?;
    if labels.len() != t {
        return Err(contract(format!("{} labels for {t} samples", labels.len())));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
        return Err(invalid(format!("label {l} at sample {i} outside [0, {c})")));
    }
    Ok((t, c))
}

/// `(1/(T·C)) Σ_t −log p[t, y_t]` (elementwise normalisation) and its gradient.
pub fn cross_entropy_with_grad(probs: &Tensor, labels: &[usize], norm: Normalization) -> Result<(f64, Tensor)> {
    let (sum, scale, grad) = cross_entropy_parts(probs, labels, norm)?;
    Ok((sum.value() * scale, grad))
}

fn cross_entropy_parts(probs: &Tensor, labels: &[usize], norm: Normalization) -> Result<(CompensatedSum, f64, Tensor)> {
    let (t_len, c) = check_labels(probs, labels)?;
    let scale = match norm {
        Normalization::Elementwise => 1.0 / (t_len * c) as f64,
        Normalization::Conventional => 1.0 / t_len as f64,
    };
    let mut grad = Tensor::zeros(&[t_len, c]);
    let mut sum = CompensatedSum::default();
    for (t, &y) in labels.iter().enumerate() {
        let (lp, dlp) = clamped_log(probs.at(t, y));
        sum.add(-lp);
        grad.row_mut(t)[y] = -scale * dlp;
    }
    Ok((sum, scale, grad))
}

pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    cross_entropy_with_grad(probs, labels, Normalization::Elementwise).map(|(v, _)| v)
}

/// Truncated MSE over adjacent log-probabilities and its gradient.
///
/// `Δ[t,c] = |log p[t,c] − log p[t−1,c]|`, truncated at `tau`; the value is
/// `Σ min(Δ, τ)² / (T·C)`. Terms beyond `tau` carry no gradient.
pub fn tmse_with_grad(probs: &Tensor, tau: f64, norm: Normalization, detach_prev: bool) -> Result<(f64, Tensor)> {
    let (sum, scale, grad) = tmse_parts(probs, tau, norm, detach_prev)?;
    Ok((sum.value() * scale, grad))
}

fn tmse_parts(probs: &Tensor, tau: f64, norm: Normalization, detach_prev: bool) -> Result<(CompensatedSum, f64, Tensor)> {
    let (t_len, c) = probs.expect_matrix("tmse probabilities")?;
    if t_len < 2 {
        return Err(invalid("tmse needs at least 2 samples"));
    }
    if !(tau > 0.0) {
        return Err(invalid(format!("tau must be > 0, got {tau}")));
    }
    let scale = match norm {
        Normalization::Elementwise => 1.0 / (t_len * c) as f64,
        Normalization::Conventional => 1.0 / ((t_len - 1) * c) as f64,
    };
    let mut grad = Tensor::zeros(&[t_len, c]);
    let mut sum = CompensatedSum::default();
    let g = grad.data_mut();
    let p = probs.data();
    for t in 1..t_len {
        for j in 0..c {
            let (lp_cur, d_cur) = clamped_log(p[t * c + j]);
            let (lp_prev, d_prev) = clamped_log(p[(t - 1) * c + j]);
            let diff = lp_cur - lp_prev;
            if diff.abs() <= tau {
                sum.add(diff * diff);
                let dd = 2.0 * diff * scale;
                g[t * c + j] += dd * d_cur;
                if !detach_prev {
                    g[(t - 1) * c + j] -= dd * d_prev;
                }
            } else {
                sum.add(tau * tau);
            }
        }
    }
    Ok((sum, scale, grad))
}

/// The branch taken at each non-smooth point of the loss: whether each
/// probability is above the log clamp, and whether each adjacent log
/// difference is within `tau`. The loss is smooth wherever this is constant.
pub fn branch_pattern(probs: &Tensor, tau: f64) -> Vec<bool> {
    let c = probs.cols();
    let p = probs.data();
    let mut out: Vec<bool> = p.iter().map(|&v| v > LOG_CLAMP).collect();
    for i in c..p.len() {
        let diff = clamped_log(p[i]).0 - clamped_log(p[i - c]).0;
        out.push(diff.abs() <= tau);
    }
    out
}

pub fn tmse(probs: &Tensor, tau: f64) -> Result<f64> {
    tmse_with_grad(probs, tau, Normalization::Elementwise, true).map(|(v, _)| v)
}

/// `ce + λ·tmse` for one stage, with the gradient w.r.t. its probabilities.
pub fn stage_loss_with_grad(probs: &Tensor, labels: &[usize], opts: &LossOptions) -> Result<(StageLoss, Tensor)> {
    if !(opts.lambda >= 0.0) {
        return Err(invalid(format!("lambda must be >= 0, got {}", opts.lambda)));
    }
    let (ce, mut grad) = cross_entropy_with_grad(probs, labels, opts.ce_norm)?;
    let (tm, gt) = tmse_with_grad(probs, opts.tau, opts.ce_norm, opts.detach_prev)?;
    for (a, b) in grad.data_mut().iter_mut().zip(gt.data()) {
        *a += opts.lambda * b;
    }
    Ok((
        StageLoss {
            ce,
            tmse: tm,
            combined: ce + opts.lambda * tm,
        },
        grad,
    ))
}

pub fn stage_loss(probs: &Tensor, labels: &[usize], opts: &LossOptions) -> Result<StageLoss> {
    stage_loss_with_grad(probs, labels, opts).map(|(l, _)| l)
}

/// Sum of per-stage losses, plus the gradient for each stage's probabilities.
pub fn total_loss_with_grads(stage_probs: &[&Tensor], labels: &[usize], opts: &LossOptions) -> Result<(LossBreakdown, Vec<Tensor>)> {
    if stage_probs.is_empty() {
        return Err(invalid("total loss needs at least one stage"));
    }
    let t_len = stage_probs[0].rows();
    let mut per_stage = Vec::with_capacity(stage_probs.len());
    let mut grads = Vec::with_capacity(stage_probs.len());
    for probs in stage_probs {
        if probs.rows() != t_len {
            return Err(contract("stage outputs differ in length"));
        }
        let (l, g) = stage_loss_with_grad(probs, labels, opts)?;
        per_stage.push(l);
        grads.push(g);
    }
    let mut total = CompensatedSum::default();
    for s in &per_stage {
        total.add(s.combined);
    }
    let total = total.value();
    Ok((LossBreakdown { per_stage, total }, grads))
}

/// The total loss as an unevaluated sum `hi + lo`, where `hi` is the
/// rounded total and `lo` the part lost to rounding. Differences of nearby
/// totals computed as `(hi₁ − hi₂) + (lo₁ − lo₂)` keep bits that a single
/// `f64` drops; finite-difference checks rely on this.
pub fn total_loss_extended(stage_probs: &[&Tensor], labels: &[usize], opts: &LossOptions) -> Result<(f64, f64)> {
    if stage_probs.is_empty() {
        return Err(invalid("total loss needs at least one stage"));
    }
    let mut acc = CompensatedSum::default();
    for probs in stage_probs {
        if probs.rows() != stage_probs[0].rows() {
            return Err(contract("stage outputs differ in length"));
        }
        let (ce, ce_scale, _) = cross_entropy_parts(probs, labels, opts.ce_norm)?;
        let (tm, tm_scale, _) = tmse_parts(probs, opts.tau, opts.ce_norm, opts.detach_prev)?;
        acc.add_scaled(&ce, ce_scale);
        acc.add_scaled(&tm, opts.lambda * tm_scale);
    }
    let hi = acc.value();
    Ok((hi, (acc.sum - hi) + acc.carry))
}

pub fn total_loss(stage_probs: &[&Tensor], labels: &[usize], opts: &LossOptions) -> Result<LossBreakdown> {
    total_loss_with_grads(stage_probs, labels, opts).map(|(b, _)| b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(t: usize, c: usize) -> Tensor {
        Tensor::full(&[t, c], 1.0 / c as f64)
    }

    #[test]
    fn ce_examples() {
        let onehot = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(cross_entropy(&onehot, &[0, 1]).unwrap(), 0.0);

        let v = cross_entropy(&uniform(37, 4), &vec![2; 37]).unwrap();
        assert!((v - 4f64.ln() / 4.0).abs() < 1e-12);
        assert!((v - 0.346574).abs() < 1e-6);

        let e1 = (-1f64).exp();
        let row = vec![e1, (1.0 - e1) / 4.0, (1.0 - e1) / 4.0, (1.0 - e1) / 4.0, (1.0 - e1) / 4.0];
        let probs = Tensor::from_rows(&vec![row; 6]).unwrap();
        assert!((cross_entropy(&probs, &[0; 6]).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn ce_rejects_out_of_range_label() {
        assert!(matches!(cross_entropy(&uniform(3, 2), &[0, 2, 1]), Err(crate::Error::InvalidArgument(_))));
    }

    #[test]
    fn tmse_constant_is_zero() {
        let p = Tensor::from_rows(&vec![vec![0.3, 0.7]; 8]).unwrap();
        assert_eq!(tmse(&p, 4.0).unwrap(), 0.0);
    }

    #[test]
    fn tmse_clamped_pair() {
        // log p0 drops by 9 between rows 4 and 5; class 1 stays constant
        // because the rows are left unnormalised, which tmse allows.
        let hi = 0.5;
        let lo = 0.5 * (-9f64).exp();
        let rows: Vec<Vec<f64>> = (0..10).map(|t| vec![if t < 5 { hi } else { lo }, 0.5]).collect();
        let p = Tensor::from_rows(&rows).unwrap();
        let v = tmse(&p, 4.0).unwrap();
        assert!((v - 0.8).abs() < 1e-12, "{v}");
    }

    #[test]
    fn tmse_unit_step_below_tau() {
        let e = std::f64::consts::E;
        let p = Tensor::from_rows(&[vec![1.0 / e, 1.0 - 1.0 / e], vec![1.0 / (e * e), 1.0 - 1.0 / (e * e)]]).unwrap();
        let d1 = ((1.0 - 1.0 / (e * e)).ln() - (1.0 - 1.0 / e).ln()).abs();
        let v = tmse(&p, 4.0).unwrap();
        assert!((v - (1.0 + d1 * d1) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn tmse_needs_two_samples() {
        assert!(tmse(&uniform(1, 3), 4.0).is_err());
    }

    #[test]
    fn stage_combination() {
        let p = uniform(10, 4);
        let labels = vec![1; 10];
        let opts = LossOptions { lambda: 0.0, ..Default::default() };
        let l = stage_loss(&p, &labels, &opts).unwrap();
        assert_eq!(l.combined, l.ce);

        let eps = 1e-9;
        let near = Tensor::from_rows(&vec![vec![1.0 - eps, eps]; 10]).unwrap();
        let l = stage_loss(&near, &[0; 10], &LossOptions::default()).unwrap();
        assert!(l.combined < 1e-8);

        let l = StageLoss { ce: 0.2, tmse: 0.8, combined: 0.2 + 0.15 * 0.8 };
        assert!((l.combined - 0.32).abs() < 1e-15);
    }

    #[test]
    fn total_sums_stages() {
        let p = Tensor::from_rows(&[vec![0.2, 0.8], vec![0.6, 0.4], vec![0.5, 0.5]]).unwrap();
        let labels = [1, 0, 1];
        let opts = LossOptions::default();
        let single = stage_loss(&p, &labels, &opts).unwrap();
        let one = total_loss(&[&p], &labels, &opts).unwrap();
        assert_eq!(one.total, single.combined);
        let three = total_loss(&[&p, &p, &p], &labels, &opts).unwrap();
        assert!((three.total - 3.0 * single.combined).abs() < 1e-15);
        assert!(total_loss(&[], &labels, &opts).is_err());
    }

    #[test]
    fn detached_previous_row_gets_no_gradient() {
        let a = Tensor::from_rows(&[vec![0.3, 0.7], vec![0.6, 0.4]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.1, 0.9], vec![0.6, 0.4]]).unwrap();
        let (va, ga) = tmse_with_grad(&a, 4.0, Normalization::Elementwise, true).unwrap();
        let (vb, gb) = tmse_with_grad(&b, 4.0, Normalization::Elementwise, true).unwrap();
        assert_ne!(va, vb);
        assert_eq!(ga.row(0), &[0.0, 0.0]);
        assert_eq!(gb.row(0), &[0.0, 0.0]);
        let (_, full) = tmse_with_grad(&a, 4.0, Normalization::Elementwise, false).unwrap();
        assert!(full.row(0).iter().all(|&g| g != 0.0));
    }
}
