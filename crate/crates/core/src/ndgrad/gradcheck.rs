//! Central finite-difference oracle for reverse-mode gradients.
//!
//! Independent of the backward pass by construction: it only re-evaluates
//! the forward closure at perturbed points.

use crate::error::Result;
use crate::ndgrad::Tensor;

/// Default step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Default tolerance on [`relative_error`].
pub const FD_TOL: f64 = 1e-4;

/// max_i |analytic_i - numeric_i| / max(1, |analytic_i|)
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Checks d(loss)/d(x) for a scalar-valued builder against central finite
/// differences. Returns the worst relative error over all elements.
///
/// `build` receives a leaf tensor and must return a scalar loss; it is
/// re-invoked ~2n times at perturbed points, so keep n small.
pub fn check_grad<F>(build: F, shape: &[usize], x0: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let x = Tensor::var(shape, x0.to_vec())?;
    let loss = build(&x)?;
    loss.backward()?;
    let analytic = x.grad().expect("loss must depend on x");

    let mut numeric = vec![0.0; x0.len()];
    for i in 0..x0.len() {
        let mut plus = x0.to_vec();
        plus[i] += step;
        let mut minus = x0.to_vec();
        minus[i] -= step;
        let lp = build(&Tensor::var(shape, plus)?)?.item();
        let lm = build(&Tensor::var(shape, minus)?)?.item();
        numeric[i] = (lp - lm) / (2.0 * step);
    }
    Ok(relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedRng;

    fn random_point(rng: &mut SeedRng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.uniform_in(-2.0, 2.0)).collect()
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = SeedRng::new(11);
        for _ in 0..5 {
            let x0 = random_point(&mut rng, 6);
            let err = check_grad(
                |x| {
                    let r = x.relu();
                    let t = x.tanh();
                    r.mul(&t)?.add(x)?.mul(x).map(|m| m.mean())
                },
                &[2, 3],
                &x0,
                FD_STEP,
            )
            .unwrap();
            assert!(err < FD_TOL, "err {}", err);
        }
    }

    #[test]
    fn matmul_softmax_chain_matches() {
        let mut rng = SeedRng::new(12);
        let w0 = random_point(&mut rng, 9);
        let err = check_grad(
            |w| {
                let x = Tensor::from_vec(&[2, 3], vec![0.3, -0.8, 1.2, 0.1, 0.5, -0.4])?;
                let h = x.matmul(w)?.softmax()?;
                Ok(h.mul(&h)?.mean())
            },
            &[3, 3],
            &w0,
            FD_STEP,
        )
        .unwrap();
        assert!(err < FD_TOL, "err {}", err);
    }

    #[test]
    fn conv_chain_matches() {
        let mut rng = SeedRng::new(13);
        let w0 = random_point(&mut rng, 2 * 2 * 9);
        let err = check_grad(
            |w| {
                let x = Tensor::from_vec(
                    &[1, 2, 4, 4],
                    (0..32).map(|i| ((i as f64) * 0.37).sin()).collect(),
                )?;
                Ok(x.conv2d(w, &Tensor::zeros(&[2]), 2)?.relu().mean())
            },
            &[2, 2, 3, 3],
            &w0,
            FD_STEP,
        )
        .unwrap();
        assert!(err < FD_TOL, "err {}", err);
    }
}
