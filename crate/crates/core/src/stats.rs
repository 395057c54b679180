//! Monte Carlo summaries.

use serde::{Deserialize, Serialize};

/// A Monte Carlo mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    pub fn new(value: f64, se: f64) -> Self {
        Estimate { value, se }
    }

    /// `|a - b| <= k * sqrt(se_a^2 + se_b^2)`.
    pub fn agrees(&self, other: &Estimate, k: f64) -> bool {
        (self.value - other.value).abs() <= k * self.se.hypot(other.se)
    }

    pub fn minus(&self, other: &Estimate) -> Estimate {
        Estimate::new(self.value - other.value, self.se.hypot(other.se))
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample mean and its standard error.
pub fn mean_se(xs: &[f64]) -> Estimate {
    let n = xs.len();
    let m = mean(xs);
    if n < 2 {
        return Estimate::new(m, f64::NAN);
    }
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    Estimate::new(m, (v / n as f64).sqrt())
}

/// Unbiased sample variance with a large-sample standard error `sqrt((m4 - s^4) / n)`.
pub fn variance_se(xs: &[f64]) -> Estimate {
    let n = xs.len();
    if n < 2 {
        return Estimate::new(f64::NAN, f64::NAN);
    }
    let m = mean(xs);
    let nf = n as f64;
    let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / nf;
    let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / nf;
    let s2 = m2 * nf / (nf - 1.0);
    Estimate::new(s2, ((m4 - m2 * m2).max(0.0) / nf).sqrt())
}

/// Mean of squares with its standard error.
pub fn second_moment_se(xs: &[f64]) -> Estimate {
    let sq: Vec<f64> = xs.iter().map(|x| x * x).collect();
    mean_se(&sq)
}

/// Least-squares line `y = a + b x`; returns `(b, a, se_b)`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = mean(x);
    let my = mean(y);
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let se = if x.len() > 2 {
        let rss: f64 = x.iter().zip(y).map(|(u, v)| (v - a - b * u).powi(2)).sum();
        (rss / (n - 2.0) / sxx).sqrt()
    } else {
        f64::NAN
    };
    (b, a, se)
}

/// Weighted least squares with weights `1/sigma^2`; returns `(b, a, se_b)`.
pub fn wls_slope(x: &[f64], y: &[f64], sigma: &[f64]) -> (f64, f64, f64) {
    let w: Vec<f64> = sigma.iter().map(|s| 1.0 / (s * s)).collect();
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(&w).map(|(a, w)| a * w).sum::<f64>() / sw;
    let my = y.iter().zip(&w).map(|(a, w)| a * w).sum::<f64>() / sw;
    let sxx: f64 = x.iter().zip(&w).map(|(a, w)| w * (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).zip(&w).map(|((a, b), w)| w * (a - mx) * (b - my)).sum();
    let b = sxy / sxx;
    (b, my - b * mx, (1.0 / sxx).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_a_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.5 * v).collect();
        let (b, a, se) = ols_slope(&x, &y);
        assert!((b + 0.5).abs() < 1e-14 && (a - 2.0).abs() < 1e-14 && se < 1e-12);
        let (bw, _, _) = wls_slope(&x, &y, &[1.0, 2.0, 1.0, 3.0]);
        assert!((bw + 0.5).abs() < 1e-14);
    }

    #[test]
    fn moments() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mean(&xs), 2.5);
        assert!((variance_se(&xs).value - 5.0 / 3.0).abs() < 1e-14);
        assert!((second_moment_se(&xs).value - 7.5).abs() < 1e-14);
        let e = mean_se(&xs);
        assert!((e.se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-14);
    }
}
