//! Pearson correlation with a two-sided Student-t p-value.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub r: f64,
    pub r_squared: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Two-sided tail probability `P(|T| >= |t|)` for Student's t with `df`
/// degrees of freedom, via `I_{df/(df+t²)}(df/2, 1/2)`.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    beta_reg(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<CorrelationResult> {
    if x.len() != y.len() {
        return Err(Error::Validation(format!(
            "pearson: length mismatch {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::UndefinedCorrelation(format!("{n} samples, need at least 3")));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Validation("pearson: non-finite sample".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let one_minus = 1.0 - r * r;
    let p_value = if one_minus <= 0.0 {
        0.0
    } else {
        student_t_two_sided(r * (df / one_minus).sqrt(), df)
    };
    Ok(CorrelationResult {
        r,
        r_squared: r * r,
        p_value,
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_fixture() {
        let c = pearson(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 1.0, 4.0, 3.0, 5.0]).unwrap();
        assert!((c.r - 0.8).abs() < 1e-12);
        assert_eq!(c.r_squared, c.r * c.r);
        assert_eq!(c.n, 5);
    }

    #[test]
    fn perfect_line() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let c = pearson(&x, &y).unwrap();
        assert!((c.r - 1.0).abs() < 1e-12);
        assert!(c.p_value < 1e-12);
    }

    #[test]
    fn zero_correlation_has_unit_p() {
        let c = pearson(&[-1.0, 0.0, 1.0, 0.0], &[1.0, -2.0, 1.0, 0.0]).unwrap();
        assert_eq!(c.r, 0.0);
        assert!((c.p_value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn undefined_cases() {
        assert!(matches!(
            pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(pearson(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn known_t_tail() {
        // t = 2.228 is the 97.5% quantile at 10 degrees of freedom
        assert!((student_t_two_sided(2.228_138_851_986_274, 10.0) - 0.05).abs() < 1e-9);
        // one degree of freedom is Cauchy: P(|T| >= 1) = 1/2
        assert!((student_t_two_sided(1.0, 1.0) - 0.5).abs() < 1e-12);
    }
}
