mod common;

use candle_core::{Device, Tensor, Var, D};
use candle_nn::ops::softmax;
use common::{max_gradient_error, max_gradient_error_scaled, toy_matrix};
use skinfair::models::losses::{confusion_loss, gradient_reversal, kl_standard_normal, supervised_contrastive};

const TOL: f64 = 1e-4;

fn input() -> Tensor {
    toy_matrix(6, 4, 1)
}

#[test]
fn reversal_scales_upstream_gradients() {
    // Three layers; the reversal sits between the second and the third.
    let params = [toy_matrix(4, 5, 2), toy_matrix(5, 5, 3), toy_matrix(5, 2, 4)];
    let lambda = 0.5;
    let x = input();
    let net = |ps: &[Tensor], rev: bool| {
        let h = x.matmul(&ps[0]).unwrap().tanh().unwrap();
        let h = h.matmul(&ps[1]).unwrap().tanh().unwrap();
        let h = if rev { gradient_reversal(&h, lambda).unwrap() } else { h };
        h.matmul(&ps[2]).unwrap().sqr().unwrap().sum_all().unwrap()
    };
    let err = max_gradient_error_scaled(&params, &[-lambda, -lambda, 1.0], |ps| net(ps, true));
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn reversal_unit_gradient() {
    let x = Var::from_tensor(&Tensor::new(&[2.0f64, -3.0], &Device::Cpu).unwrap()).unwrap();
    let y = gradient_reversal(x.as_tensor(), 1.0).unwrap().sum_all().unwrap();
    let g: Vec<f64> = y.backward().unwrap().get(x.as_tensor()).unwrap().to_vec1().unwrap();
    assert_eq!(g, vec![-1.0, -1.0]);
}

#[test]
fn confusion_loss_gradient() {
    let params = [toy_matrix(4, 5, 5), toy_matrix(5, 6, 6)];
    let x = input();
    let err = max_gradient_error(&params, |ps| {
        let logits = x.matmul(&ps[0]).unwrap().tanh().unwrap().matmul(&ps[1]).unwrap();
        confusion_loss(&softmax(&logits, D::Minus1).unwrap()).unwrap()
    });
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn contrastive_gradient() {
    let params = [toy_matrix(4, 5, 7), toy_matrix(5, 3, 8)];
    let x = input();
    let labels = [0u32, 1, 0, 1, 1, 0];
    let err = max_gradient_error(&params, |ps| {
        let z = x.matmul(&ps[0]).unwrap().tanh().unwrap().matmul(&ps[1]).unwrap();
        supervised_contrastive(&z, &labels, 0.5).unwrap().unwrap()
    });
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn kl_gradient() {
    let params = [toy_matrix(4, 5, 9), toy_matrix(5, 3, 10), toy_matrix(5, 3, 11)];
    let x = input();
    let err = max_gradient_error(&params, |ps| {
        let h = x.matmul(&ps[0]).unwrap().tanh().unwrap();
        let mean = h.matmul(&ps[1]).unwrap();
        let logvar = h.matmul(&ps[2]).unwrap();
        kl_standard_normal(&mean, &logvar).unwrap()
    });
    assert!(err < TOL, "relative error {err}");
}
