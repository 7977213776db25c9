//! Every op's backward pass against central differences of a random linear
//! projection of its output.

use mstcn::gradcheck::{grad_check, GradCheckOptions};
use mstcn::ops;
use mstcn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn project(y: &Tensor, r: &Tensor) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn with(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn opts() -> GradCheckOptions {
    GradCheckOptions::default()
}

#[test]
fn dilated_conv_all_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for dilation in [1, 2, 4, 8] {
        let x = random(&[23, 3], &mut rng);
        let w = random(&[3, 3, 4], &mut rng);
        let b = random(&[4], &mut rng);
        let r = random(&[23, 4], &mut rng);
        let g = ops::conv1d_dilated_backward(&x, &w, dilation, &r).unwrap();

        let rx = grad_check(x.data(), g.input.data(), |p| {
            project(&ops::conv1d_dilated(&with(x.shape(), p), &w, &b, dilation).unwrap(), &r)
        }, opts())
        .unwrap();
        let rw = grad_check(w.data(), g.weight.data(), |p| {
            project(&ops::conv1d_dilated(&x, &with(w.shape(), p), &b, dilation).unwrap(), &r)
        }, opts())
        .unwrap();
        let rb = grad_check(b.data(), g.bias.data(), |p| {
            project(&ops::conv1d_dilated(&x, &w, &with(b.shape(), p), dilation).unwrap(), &r)
        }, opts())
        .unwrap();
        for rep in [rx, rw, rb] {
            assert!(rep.max_rel_error < 1e-6, "dilation {dilation}: {rep:?}");
        }
    }
}

#[test]
fn wide_kernel_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[17, 2], &mut rng);
    let w = random(&[5, 2, 3], &mut rng);
    let b = random(&[3], &mut rng);
    let r = random(&[17, 3], &mut rng);
    let g = ops::conv1d_dilated_backward(&x, &w, 3, &r).unwrap();
    let rep = grad_check(w.data(), g.weight.data(), |p| {
        project(&ops::conv1d_dilated(&x, &with(w.shape(), p), &b, 3).unwrap(), &r)
    }, opts())
    .unwrap();
    assert!(rep.passed, "{rep:?}");
}

#[test]
fn pointwise_all_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[11, 4], &mut rng);
    let w = random(&[4, 5], &mut rng);
    let b = random(&[5], &mut rng);
    let r = random(&[11, 5], &mut rng);
    let g = ops::pointwise_conv_backward(&x, &w, &r).unwrap();
    let rx = grad_check(x.data(), g.input.data(), |p| project(&ops::pointwise_conv(&with(x.shape(), p), &w, &b).unwrap(), &r), opts()).unwrap();
    let rw = grad_check(w.data(), g.weight.data(), |p| project(&ops::pointwise_conv(&x, &with(w.shape(), p), &b).unwrap(), &r), opts()).unwrap();
    let rb = grad_check(b.data(), g.bias.data(), |p| project(&ops::pointwise_conv(&x, &w, &with(b.shape(), p)).unwrap(), &r), opts()).unwrap();
    for rep in [rx, rw, rb] {
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");
    }
}

#[test]
fn relu_away_from_kink() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // Keep every entry at least 0.1 from zero so the stencil never straddles it.
    let data: Vec<f64> = (0..40)
        .map(|_| {
            let v: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) { v } else { -v }
        })
        .collect();
    let x = with(&[10, 4], &data);
    let r = random(&[10, 4], &mut rng);
    let g = ops::relu_backward(&x, &r).unwrap();
    let rep = grad_check(x.data(), g.data(), |p| project(&ops::relu(&with(x.shape(), p)), &r), opts()).unwrap();
    assert!(rep.max_rel_error < 1e-9, "{rep:?}");
}

#[test]
fn softmax_backward_matches() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[9, 6], &mut rng);
    let r = random(&[9, 6], &mut rng);
    let p = ops::softmax_over_classes(&x).unwrap();
    let g = ops::softmax_backward(&p, &r).unwrap();
    let rep = grad_check(x.data(), g.data(), |q| project(&ops::softmax_over_classes(&with(x.shape(), q)).unwrap(), &r), opts()).unwrap();
    assert!(rep.max_rel_error < 1e-6, "{rep:?}");
}

#[test]
fn residual_add_backward_matches() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random(&[7, 3], &mut rng);
    let b = random(&[7, 3], &mut rng);
    let r = random(&[7, 3], &mut rng);
    let (ga, gb) = ops::residual_add_backward(&r);
    let ra = grad_check(a.data(), ga.data(), |p| project(&ops::residual_add(&with(a.shape(), p), &b).unwrap(), &r), opts()).unwrap();
    let rb = grad_check(b.data(), gb.data(), |p| project(&ops::residual_add(&a, &with(b.shape(), p)).unwrap(), &r), opts()).unwrap();
    assert!(ra.max_rel_error < 1e-8 && rb.max_rel_error < 1e-8, "{ra:?} {rb:?}");
}
