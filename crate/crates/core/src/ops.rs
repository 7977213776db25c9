//! Forward and backward kernels for every layer the network uses.
//!
//! Sequences are `T × C` matrices (time-major). Each backward function takes
//! the values cached by the forward pass plus the upstream gradient and
//! returns exact analytic gradients.

use crate::error::{contract, invalid, Result};
use crate::tensor::Tensor;

/// Gradients of a convolution with respect to its input, weight and bias.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

fn check_conv(x: &Tensor, w: &Tensor, b: &Tensor, dilation: usize) -> Result<(usize, usize, usize, usize)> {
    let (t, cin) = x.expect_matrix("conv1d input")?;
    if w.shape().len() != 3 {
        return Err(contract(format!("conv1d weight must be K×Cin×Cout, got {:?}", w.shape())));
    }
    let (k, wcin, cout) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if wcin != cin {
        return Err(contract(format!("conv1d weight expects {wcin} input channels, input has {cin}")));
    }
    if b.shape() != [cout] {
        return Err(contract(format!("conv1d bias shape {:?} != [{cout}]", b.shape())));
    }
    if dilation < 1 {
        return Err(invalid("dilation must be >= 1"));
    }
    if k % 2 == 0 {
        return Err(invalid(format!("kernel size must be odd, got {k}")));
    }
    Ok((t, cin, k, cout))
}

/// Centered (acausal) dilated convolution with zero padding of
/// `dilation * (K - 1) / 2` on both sides, so the output keeps length `T`.
///
/// `y[t, o] = b[o] + Σ_{k,i} w[k, i, o] · x[t + (k - (K-1)/2)·dilation, i]`
pub fn conv1d_dilated(x: &Tensor, w: &Tensor, b: &Tensor, dilation: usize) -> Result<Tensor> {
    let (t_len, cin, k_len, cout) = check_conv(x, w, b, dilation)?;
    let half = (k_len - 1) / 2;
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![0.0; t_len * cout];
    for (t, y) in out.chunks_exact_mut(cout).enumerate() {
        y.copy_from_slice(b.data());
        for k in 0..k_len {
            let Some(src) = tap(t, k, half, dilation, t_len) else {
                continue;
            };
            let xrow = &xd[src * cin..(src + 1) * cin];
            let wk = &wd[k * cin * cout..(k + 1) * cin * cout];
            for (i, &xi) in xrow.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let wrow = &wk[i * cout..(i + 1) * cout];
                for (yo, &wo) in y.iter_mut().zip(wrow) {
                    *yo += xi * wo;
                }
            }
        }
    }
    Tensor::new(vec![t_len, cout], out)
}

#[inline]
fn tap(t: usize, k: usize, half: usize, dilation: usize, t_len: usize) -> Option<usize> {
    let src = (t + k * dilation).checked_sub(half * dilation)?;
    (src < t_len).then_some(src)
}

pub fn conv1d_dilated_backward(
    x: &Tensor,
    w: &Tensor,
    dilation: usize,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    let zeros_b = Tensor::zeros(&[*w.shape().last().unwrap_or(&1)]);
    let (t_len, cin, k_len, cout) = check_conv(x, w, &zeros_b, dilation)?;
    if grad_out.shape() != [t_len, cout] {
        return Err(contract(format!(
            "conv1d upstream gradient shape {:?} != [{t_len}, {cout}]",
            grad_out.shape()
        )));
    }
    let half = (k_len - 1) / 2;
    let (xd, wd, gd) = (x.data(), w.data(), grad_out.data());
    let mut gx = vec![0.0; t_len * cin];
    let mut gw = vec![0.0; k_len * cin * cout];
    let mut gb = vec![0.0; cout];
    for t in 0..t_len {
        let grow = &gd[t * cout..(t + 1) * cout];
        for (acc, &g) in gb.iter_mut().zip(grow) {
            *acc += g;
        }
        for k in 0..k_len {
            let Some(src) = tap(t, k, half, dilation, t_len) else {
                continue;
            };
            let base = k * cin * cout;
            for i in 0..cin {
                let xi = xd[src * cin + i];
                let off = base + i * cout;
                let wrow = &wd[off..off + cout];
                let gwrow = &mut gw[off..off + cout];
                let mut dot = 0.0;
                for o in 0..cout {
                    gwrow[o] += xi * grow[o];
                    dot += wrow[o] * grow[o];
                }
                gx[src * cin + i] += dot;
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(vec![t_len, cin], gx)?,
        weight: Tensor::new(w.shape().to_vec(), gw)?,
        bias: Tensor::new(vec![cout], gb)?,
    })
}

fn check_pointwise(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    let (t, cin) = x.expect_matrix("pointwise input")?;
    let (wcin, cout) = w.expect_matrix("pointwise weight")?;
    if wcin != cin {
        return Err(contract(format!("pointwise weight expects {wcin} input channels, input has {cin}")));
    }
    if b.shape() != [cout] {
        return Err(contract(format!("pointwise bias shape {:?} != [{cout}]", b.shape())));
    }
    Ok((t, cin, cout))
}

/// Per-sample affine map (a 1×1 convolution): `y[t] = x[t] · W + b`.
pub fn pointwise_conv(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (t_len, cin, cout) = check_pointwise(x, w, b)?;
    let wd = w.data();
    let mut out = vec![0.0; t_len * cout];
    for (xrow, y) in x.data().chunks_exact(cin).zip(out.chunks_exact_mut(cout)) {
        y.copy_from_slice(b.data());
        for (i, &xi) in xrow.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (yo, &wo) in y.iter_mut().zip(&wd[i * cout..(i + 1) * cout]) {
                *yo += xi * wo;
            }
        }
    }
    Tensor::new(vec![t_len, cout], out)
}

pub fn pointwise_conv_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
    let cout = w.shape().last().copied().unwrap_or(0);
    let (t_len, cin, cout) = check_pointwise(x, w, &Tensor::zeros(&[cout.max(1)]))?;
    if grad_out.shape() != [t_len, cout] {
        return Err(contract(format!(
            "pointwise upstream gradient shape {:?} != [{t_len}, {cout}]",
            grad_out.shape()
        )));
    }
    let wd = w.data();
    let mut gx = vec![0.0; t_len * cin];
    let mut gw = vec![0.0; cin * cout];
    let mut gb = vec![0.0; cout];
    for ((xrow, grow), gxrow) in x
        .data()
        .chunks_exact(cin)
        .zip(grad_out.data().chunks_exact(cout))
        .zip(gx.chunks_exact_mut(cin))
    {
        for (acc, &g) in gb.iter_mut().zip(grow) {
            *acc += g;
        }
        for i in 0..cin {
            let xi = xrow[i];
            let wrow = &wd[i * cout..(i + 1) * cout];
            let gwrow = &mut gw[i * cout..(i + 1) * cout];
            let mut dot = 0.0;
            for o in 0..cout {
                gwrow[o] += xi * grow[o];
                dot += wrow[o] * grow[o];
            }
            gxrow[i] = dot;
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(vec![t_len, cin], gx)?,
        weight: Tensor::new(w.shape().to_vec(), gw)?,
        bias: Tensor::new(vec![cout], gb)?,
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

/// Passes the upstream gradient where the forward input was strictly
/// positive. The subgradient at exactly zero is taken as 0.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    same_shape(x, grad_out, "relu backward")?;
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Row-wise softmax over the class axis, stabilised by subtracting the row max.
pub fn softmax_over_classes(x: &Tensor) -> Result<Tensor> {
    let (_, c) = x.expect_matrix("softmax input")?;
    if c < 2 {
        return Err(invalid("softmax needs at least 2 classes"));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Backward through softmax given its output `probs`:
/// `dx = p ⊙ (g − ⟨p, g⟩)` row by row.
pub fn softmax_backward(probs: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    same_shape(probs, grad_out, "softmax backward")?;
    let c = probs.cols();
    let mut out = vec![0.0; probs.len()];
    for ((p, g), dx) in probs
        .data()
        .chunks_exact(c)
        .zip(grad_out.data().chunks_exact(c))
        .zip(out.chunks_exact_mut(c))
    {
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for j in 0..c {
            dx[j] = p[j] * (g[j] - dot);
        }
    }
    Tensor::new(probs.shape().to_vec(), out)
}

pub fn residual_add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "residual add")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// The sum rule: both summands receive the upstream gradient unchanged.
pub fn residual_add_backward(grad_out: &Tensor) -> (Tensor, Tensor) {
    (grad_out.clone(), grad_out.clone())
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(contract(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}
