//! Small dense linear algebra, log-domain reductions, the AdamW optimizer,
//! the warmup/hold/decay learning-rate schedule and seeded randomness.
//!
//! Everything on the training path is `f64`.

mod matrix;
mod optim;
mod rng;
mod schedule;

pub use matrix::{Matrix, ParamSet};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use rng::{SeededRng, RNG_ALGORITHM};
pub use schedule::LrSchedule;

use crate::error::{domain, Error, Result};

/// Log of zero. Lattice code uses a true negative infinity and guards every
/// place where two such values could be subtracted.
pub const LOG_ZERO: f64 = f64::NEG_INFINITY;

/// `log(Σ exp(v))` with max shifting.
pub fn logsumexp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(domain("logsumexp of an empty list"));
    }
    let mut max = f64::NEG_INFINITY;
    for &v in values {
        if v.is_nan() || v == f64::INFINITY {
            return Err(domain(format!("logsumexp input {v} is not allowed")));
        }
        if v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Two-term `log(exp(a) + exp(b))`.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a > b {
        a + (b - a).exp().ln_1p()
    } else {
        b + (a - b).exp().ln_1p()
    }
}

/// In-place log-softmax.
pub fn log_softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    let norm = max + sum.ln();
    for l in logits.iter_mut() {
        *l -= norm;
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Central-difference gradient of `loss_fn` at `params`, one matrix per
/// parameter group in [`ParamSet`] order.
pub fn finite_diff_grad<P, F>(mut loss_fn: F, params: &P, step: f64) -> Result<Vec<Matrix>>
where
    P: ParamSet + Clone,
    F: FnMut(&P) -> f64,
{
    if !(step > 0.0) {
        return Err(domain("finite-difference step must be positive"));
    }
    let names = params.names();
    let mut probe = params.clone();
    let mut out: Vec<Matrix> = params
        .tensors()
        .iter()
        .map(|m| Matrix::zeros(m.rows(), m.cols()))
        .collect();
    for (g, grad) in out.iter_mut().enumerate() {
        for i in 0..grad.len() {
            let orig = probe.tensors()[g].data()[i];
            probe.tensors_mut()[g].data_mut()[i] = orig + step;
            let plus = loss_fn(&probe);
            probe.tensors_mut()[g].data_mut()[i] = orig - step;
            let minus = loss_fn(&probe);
            probe.tensors_mut()[g].data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::OracleFailure {
                    group: names[g].clone(),
                    index: i,
                });
            }
            grad.data_mut()[i] = (plus - minus) / (2.0 * step);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Neumaier-compensated sum of `exp(v)`, then `ln`.
    fn compensated_logsumexp(values: &[f64]) -> f64 {
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        for &v in values {
            let x = v.exp();
            let t = sum + x;
            if sum.abs() >= x.abs() {
                comp += (sum - t) + x;
            } else {
                comp += (x - t) + sum;
            }
            sum = t;
        }
        (sum + comp).ln()
    }

    #[test]
    fn logsumexp_examples() {
        assert_eq!(logsumexp(&[5.0]).unwrap(), 5.0);
        assert!((logsumexp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(logsumexp(&[LOG_ZERO, LOG_ZERO]).unwrap(), f64::NEG_INFINITY);
        assert_eq!(logsumexp(&[LOG_ZERO, 1.5]).unwrap(), 1.5);
        assert!(logsumexp(&[]).is_err());
        assert!(logsumexp(&[f64::NAN]).is_err());
        assert!(logsumexp(&[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn logsumexp_matches_compensated_sum() {
        let mut rng = SeededRng::new(11);
        for _ in 0..200 {
            let v: Vec<f64> = (0..16).map(|_| rng.uniform(-10.0, 10.0)).collect();
            let got = logsumexp(&v).unwrap();
            let want = compensated_logsumexp(&v);
            assert!(((got - want) / want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn log_add_agrees_with_logsumexp() {
        for &(a, b) in &[(0.0, 0.0), (-3.0, 2.5), (LOG_ZERO, -1.0), (-700.0, -701.0)] {
            let want = logsumexp(&[a, b]).unwrap();
            assert!((log_add(a, b) - want).abs() < 1e-14);
        }
        assert_eq!(log_add(LOG_ZERO, LOG_ZERO), LOG_ZERO);
    }

    #[test]
    fn finite_diff_examples() {
        let theta = vec![Matrix::from_vec(1, 1, vec![3.0]).unwrap()];
        let g = finite_diff_grad(|p: &Vec<Matrix>| p[0].data()[0].powi(2), &theta, 1e-4).unwrap();
        assert!((g[0].data()[0] - 6.0).abs() < 1e-8);

        let theta = vec![Matrix::from_vec(2, 2, vec![1.0, -2.0, 0.5, 4.0]).unwrap()];
        let g = finite_diff_grad(|_: &Vec<Matrix>| 7.25, &theta, 1e-4).unwrap();
        assert!(g[0].data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn finite_diff_reports_non_finite_probe() {
        let theta = vec![Matrix::from_vec(1, 3, vec![1.0, 0.0, 2.0]).unwrap()];
        let err = finite_diff_grad(
            |p: &Vec<Matrix>| {
                let x = p[0].data()[1];
                if x > 0.0 {
                    f64::NAN
                } else {
                    x
                }
            },
            &theta,
            1e-4,
        )
        .unwrap_err();
        match err {
            Error::OracleFailure { group, index } => {
                assert_eq!(group, "0");
                assert_eq!(index, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn logsumexp_bounds(v in proptest::collection::vec(-50.0f64..50.0, 1..20)) {
            let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let l = logsumexp(&v).unwrap();
            prop_assert!(l >= max - 1e-12);
            prop_assert!(l <= max + (v.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn log_softmax_is_normalized(v in proptest::collection::vec(-30.0f64..30.0, 1..12)) {
            let mut l = v.clone();
            log_softmax_in_place(&mut l);
            let s: f64 = l.iter().map(|x| x.exp()).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
