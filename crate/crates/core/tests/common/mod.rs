#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64, dtype: DType) -> Tensor {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

pub fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    flat(a).iter().zip(flat(b)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest relative error between the autodiff gradient of
/// `sum(f(x) * probe)` and central finite differences, over every element
/// of `x`. Double precision throughout.
pub fn gradcheck(x: &Tensor, f: impl Fn(&Tensor) -> Tensor, seed: u64) -> f64 {
    let x = x.to_dtype(DType::F64).unwrap();
    let out_shape = f(&x).dims().to_vec();
    let probe = randn(&out_shape, seed, DType::F64);
    let objective = |t: &Tensor| (f(t) * &probe).unwrap().sum_all().unwrap();

    let var = Var::from_tensor(&x).unwrap();
    let grads = objective(var.as_tensor()).backward().unwrap();
    let analytic = flat(grads.get(var.as_tensor()).expect("input receives a gradient"));

    let base = flat(&x);
    let eps = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let eval = |delta: f64| {
            let mut v = base.clone();
            v[i] += delta;
            let t = Tensor::from_vec(v, x.dims(), &Device::Cpu).unwrap();
            objective(&t).to_scalar::<f64>().unwrap()
        };
        let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-3);
        worst = worst.max(err);
    }
    worst
}
