//! Paired t-test, Pearson correlation and the sign test.

use statrs::distribution::{Binomial, DiscreteCDF};
use statrs::function::beta::beta_reg;

use super::EvalError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
    /// Two-sided p-value.
    pub p: f64,
}

/// Two-sided p-value of Student's t with `df` degrees of freedom.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    beta_reg(df / 2.0, 0.5, df / (df + t * t))
}

pub fn paired_t_test(x: &[f64], y: &[f64]) -> Result<TTest, EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::Stats(format!("lengths differ: {} vs {}", x.len(), y.len())));
    }
    let n = x.len();
    if n < 2 {
        return Err(EvalError::Stats("need at least two pairs".into()));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::Stats("non-finite values".into()));
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Err(EvalError::ZeroVariance);
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let df = n - 1;
    Ok(TTest {
        t,
        df,
        p: t_two_sided_p(t, df as f64),
    })
}

/// Sample correlation coefficient. Affine data gives exactly ±1.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::Stats(format!("lengths differ: {} vs {}", x.len(), y.len())));
    }
    let n = x.len();
    if n < 2 {
        return Err(EvalError::Stats("need at least two pairs".into()));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::ZeroVariance);
    }
    let r = sxy / (sxx * syy).sqrt();
    // within summation rounding of a perfect fit, report the fit exactly
    if 1.0 - r.abs() <= 4.0 * n as f64 * f64::EPSILON {
        return Ok(r.signum());
    }
    Ok(r.clamp(-1.0, 1.0))
}

/// Two-sided sign test over nonzero values; returns (positives, negatives, p).
pub fn sign_test(values: &[f64]) -> (usize, usize, f64) {
    let pos = values.iter().filter(|v| **v > 0.0).count();
    let neg = values.iter().filter(|v| **v < 0.0).count();
    let n = pos + neg;
    if n == 0 {
        return (0, 0, 1.0);
    }
    let b = Binomial::new(0.5, n as u64).expect("valid binomial");
    let k = pos.min(neg) as u64;
    (pos, neg, (2.0 * b.cdf(k)).min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_test_all_positive() {
        let (p, n, pv) = sign_test(&[1.0; 10]);
        assert_eq!((p, n), (10, 0));
        assert!((pv - 2.0 / 1024.0).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch() {
        assert!(paired_t_test(&[1.0, 2.0], &[1.0]).is_err());
        assert!(pearson_r(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }
}
