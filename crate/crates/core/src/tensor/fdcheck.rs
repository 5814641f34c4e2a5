//! Finite-difference gradient verification. Runs at f64 where central
//! differences with h = 1e-5 are accurate to ~1e-10, so a 1e-4 relative
//! tolerance cleanly separates correct from broken backward passes.

use super::{grad, Scalar, Tensor, TensorError};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a dead zone: when both values are below 1e-7 they are
/// treated as equal zeros rather than amplified by a tiny denominator.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let m = a.abs().max(b.abs());
    if m < 1e-7 {
        0.0
    } else {
        (a - b).abs() / m
    }
}

fn snapshot(params: &[Tensor<f64>]) -> Vec<Vec<f64>> {
    params.iter().map(Tensor::to_vec).collect()
}

fn restore(params: &[Tensor<f64>], values: &[Vec<f64>]) {
    for (p, v) in params.iter().zip(values) {
        p.set_data(v.clone()).expect("snapshot length matches");
    }
}

/// Checks the full gradient along one random ±1 direction: compares
/// Σᵢ⟨∇ᵢL, dᵢ⟩ against (L(x+h·d) − L(x−h·d)) / 2h. Every coordinate
/// participates, so any wrong backward rule shifts the result. Parameter
/// data is restored before returning.
pub fn directional_check<R: Rng, E: From<TensorError>>(
    params: &[Tensor<f64>],
    mut loss_fn: impl FnMut() -> Result<Tensor<f64>, E>,
    rng: &mut R,
    h: f64,
) -> Result<f64, E> {
    let loss = loss_fn()?;
    let grads = grad(&loss, params)?;
    let dirs: Vec<Vec<f64>> = params
        .iter()
        .map(|p| {
            (0..p.len())
                .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                .collect()
        })
        .collect();
    let analytic: f64 = params
        .iter()
        .zip(&dirs)
        .map(|(p, d)| {
            let g = grads.get(p).expect("grad map covers params");
            g.iter().zip(d).map(|(&gv, &dv)| gv * dv).sum::<f64>()
        })
        .sum();

    let base = snapshot(params);
    for ((p, b), d) in params.iter().zip(&base).zip(&dirs) {
        p.set_data(b.iter().zip(d).map(|(&x, &dv)| x + h * dv).collect())?;
    }
    let lp = loss_fn()?.item()?;
    for ((p, b), d) in params.iter().zip(&base).zip(&dirs) {
        p.set_data(b.iter().zip(d).map(|(&x, &dv)| x - h * dv).collect())?;
    }
    let lm = loss_fn()?.item()?;
    restore(params, &base);

    let fd = (lp - lm) / (2.0 * h);
    Ok(rel_err(analytic, fd))
}

/// Checks individual coordinates sampled at random; returns the worst
/// relative error. Complements the directional check, which can in principle
/// hide sign errors that cancel.
pub fn coordinate_check<R: Rng, E: From<TensorError>>(
    params: &[Tensor<f64>],
    mut loss_fn: impl FnMut() -> Result<Tensor<f64>, E>,
    samples: usize,
    rng: &mut R,
    h: f64,
) -> Result<f64, E> {
    let loss = loss_fn()?;
    let grads = grad(&loss, params)?;
    let base = snapshot(params);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let pi = rng.random_range(0..params.len());
        if params[pi].is_empty() {
            continue;
        }
        let ci = rng.random_range(0..params[pi].len());
        let analytic = grads.get(&params[pi]).expect("grad map covers params")[ci];

        let mut plus = base[pi].clone();
        plus[ci] += h;
        params[pi].set_data(plus)?;
        let lp = loss_fn()?.item()?;
        let mut minus = base[pi].clone();
        minus[ci] -= h;
        params[pi].set_data(minus)?;
        let lm = loss_fn()?.item()?;
        params[pi].set_data(base[pi].clone())?;

        let fd = (lp - lm) / (2.0 * h);
        worst = worst.max(rel_err(analytic, fd));
    }
    Ok(worst)
}

/// Gaussian leaf with values scaled to keep activations O(1) in tests.
pub fn random_param<T: Scalar, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| {
            // Box-Muller keeps this independent of distribution crates.
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random::<f64>();
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            T::of_f64(z * std)
        })
        .collect();
    Tensor::param(shape, data).expect("length matches shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn passes_on_a_correct_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a: Tensor<f64> = random_param(&[3, 4], 0.5, &mut rng);
        let b: Tensor<f64> = random_param(&[4, 2], 0.5, &mut rng);
        let params = [a.clone(), b.clone()];
        let loss_fn = || {
            a.matmul(&b)?
                .relu()?
                .row_softmax()?
                .mul(&a.matmul(&b)?)?
                .sum_all()
        };
        let err = directional_check(&params, loss_fn, &mut rng, FD_STEP).unwrap();
        assert!(err < 1e-6, "directional rel err {err}");
        let err = coordinate_check(&params, loss_fn, 20, &mut rng, FD_STEP).unwrap();
        assert!(err < 1e-6, "coordinate rel err {err}");
    }

    #[test]
    fn catches_a_wrong_backward() {
        // A deliberately broken op: forward x², backward pretends d/dx = x.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Tensor<f64> = random_param(&[4], 1.0, &mut rng);
        let params = [x.clone()];
        let loss_fn = || {
            let sq = Tensor::from_op(
                vec![4],
                x.data().iter().map(|&v| v * v).collect(),
                vec![x.clone()],
                |ctx| {
                    let v = ctx.parent_data(0);
                    let bad: Vec<f64> = ctx.out_grad.iter().zip(v.iter()).map(|(&g, &x)| g * x).collect();
                    ctx.add_grad(0, &bad);
                },
            )?;
            sq.sum_all()
        };
        let err = directional_check(&params, loss_fn, &mut rng, FD_STEP).unwrap();
        assert!(err > 1e-2, "broken backward must be flagged, got {err}");
    }

    #[test]
    fn restores_parameter_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Tensor<f64> = random_param(&[5], 1.0, &mut rng);
        let before = x.to_vec();
        let params = [x.clone()];
        directional_check(&params, || x.mul(&x)?.sum_all(), &mut rng, FD_STEP).unwrap();
        coordinate_check(&params, || x.mul(&x)?.sum_all(), 5, &mut rng, FD_STEP).unwrap();
        assert_eq!(x.to_vec(), before);
    }
}
