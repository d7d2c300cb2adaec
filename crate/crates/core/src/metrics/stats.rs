use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::MetricError;

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
pub fn sample_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt()
}

/// Pearson product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::Precondition(format!(
            "vectors differ in length ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(MetricError::Precondition("need at least 2 observations".into()));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::DegenerateVariance(
            if sxx == 0.0 { "first vector is constant" } else { "second vector is constant" }.into(),
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    /// Two-sided.
    pub p: f64,
    pub df: usize,
}

/// Paired-samples t-test on `x - y`.
pub fn paired_t_test(x: &[f64], y: &[f64]) -> Result<TTest, MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::Precondition(format!(
            "vectors differ in length ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(MetricError::Precondition("need at least 2 pairs".into()));
    }
    let diffs: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let sd = sample_std(&diffs);
    if sd == 0.0 {
        return Err(MetricError::DegenerateVariance("paired differences are constant".into()));
    }
    let n = diffs.len();
    let df = n - 1;
    let t = mean(&diffs) / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("df >= 1");
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest { t, p, df })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn pearson_known_values() {
        let x = [1.0, 2.0, 3.0, 5.0];
        assert_abs_diff_eq!(pearson(&x, &x).unwrap(), 1.0, epsilon = 1e-15);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_abs_diff_eq!(pearson(&x, &neg).unwrap(), -1.0, epsilon = 1e-15);
        // Sxy = 5, Sxx = 2, Syy = 38/3 -> 5 / sqrt(76/3)
        let r = pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 7.0]).unwrap();
        assert_abs_diff_eq!(r, 5.0 / (76.0f64 / 3.0).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(r, 0.99340, epsilon = 1e-4);
    }

    #[test]
    fn pearson_errors() {
        assert!(matches!(
            pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(MetricError::DegenerateVariance(_))
        ));
        assert!(matches!(pearson(&[1.0], &[2.0]), Err(MetricError::Precondition(_))));
        assert!(matches!(pearson(&[1.0, 2.0], &[2.0]), Err(MetricError::Precondition(_))));
    }

    #[test]
    fn t_test_identical_inputs_are_degenerate() {
        let x = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        assert!(matches!(paired_t_test(&x, &x), Err(MetricError::DegenerateVariance(_))));
    }

    #[test]
    fn t_test_df_and_sign() {
        let x = [2.0, 3.0, 4.0, 5.0, 6.0, 8.0];
        let y = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let res = paired_t_test(&x, &y).unwrap();
        assert_eq!(res.df, 5);
        assert!(res.t > 0.0);
        let rev = paired_t_test(&y, &x).unwrap();
        assert_abs_diff_eq!(rev.t, -res.t, epsilon = 1e-12);
        assert_abs_diff_eq!(rev.p, res.p, epsilon = 1e-15);
    }
}
