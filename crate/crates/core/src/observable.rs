//! Analytic test functions and densities.
//!
//! Every function is written in reference coordinates, where both boxes are `[0,1]^d` and the
//! interface is `x_d = 0`. A point `(y', y_d)` of `D-` has reference coordinates `(y', -y_d)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::Species;
use crate::quadrature::composite_gauss;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TestFunction {
    Zero,
    Constant { value: f64 },
    /// `amp * prod_a cos(k_a pi x_a)`; satisfies the Neumann condition on every face.
    Cos { k: Vec<usize>, amp: f64 },
    /// `constant + sum_a coeffs[a] x_a`.
    Linear { constant: f64, coeffs: Vec<f64> },
    /// `amp * exp(sum_a rate[a] x_a)`.
    Exp { rate: Vec<f64>, amp: f64 },
    /// `amp * exp(-|x - center|^2 / (2 width^2))`.
    Gaussian { center: Vec<f64>, width: f64, amp: f64 },
    Sum { terms: Vec<TestFunction> },
}

impl TestFunction {
    pub fn constant(value: f64) -> Self {
        TestFunction::Constant { value }
    }

    pub fn cos(k: &[usize], amp: f64) -> Self {
        TestFunction::Cos { k: k.to_vec(), amp }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let check = |v: &Vec<_>, what: &str| {
            if v.len() != d {
                Err(invalid(format!("{what} has length {} but d = {d}", v.len())))
            } else {
                Ok(())
            }
        };
        match self {
            TestFunction::Zero | TestFunction::Constant { .. } => Ok(()),
            TestFunction::Cos { k, .. } => check(&k.iter().map(|&v| v as f64).collect(), "cos wavevector"),
            TestFunction::Linear { coeffs, .. } => check(coeffs, "linear coefficients"),
            TestFunction::Exp { rate, .. } => check(rate, "exponential rates"),
            TestFunction::Gaussian { center, width, .. } => {
                check(center, "gaussian centre")?;
                if !(*width > 0.0) {
                    return Err(invalid("gaussian width must be positive"));
                }
                Ok(())
            }
            TestFunction::Sum { terms } => terms.iter().try_for_each(|t| t.validate(d)),
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            TestFunction::Zero => 0.0,
            TestFunction::Constant { value } => *value,
            TestFunction::Cos { k, amp } => {
                amp * k.iter().zip(x).map(|(&k, &u)| (PI * k as f64 * u).cos()).product::<f64>()
            }
            TestFunction::Linear { constant, coeffs } => {
                constant + coeffs.iter().zip(x).map(|(c, u)| c * u).sum::<f64>()
            }
            TestFunction::Exp { rate, amp } => amp * rate.iter().zip(x).map(|(r, u)| r * u).sum::<f64>().exp(),
            TestFunction::Gaussian { center, width, amp } => {
                let r2: f64 = center.iter().zip(x).map(|(c, u)| (u - c) * (u - c)).sum();
                amp * (-r2 / (2.0 * width * width)).exp()
            }
            TestFunction::Sum { terms } => terms.iter().map(|t| t.value(x)).sum(),
        }
    }

    /// Gradient in reference coordinates, accumulated into `out`.
    pub fn add_gradient(&self, x: &[f64], out: &mut [f64]) {
        match self {
            TestFunction::Zero | TestFunction::Constant { .. } => {}
            TestFunction::Cos { k, amp } => {
                for a in 0..x.len() {
                    let mut g = *amp;
                    for (b, (&kb, &u)) in k.iter().zip(x).enumerate() {
                        let w = PI * kb as f64;
                        g *= if a == b { -w * (w * u).sin() } else { (w * u).cos() };
                    }
                    out[a] += g;
                }
            }
            TestFunction::Linear { coeffs, .. } => {
                for (o, c) in out.iter_mut().zip(coeffs) {
                    *o += c;
                }
            }
            TestFunction::Exp { rate, .. } => {
                let v = self.value(x);
                for (o, r) in out.iter_mut().zip(rate) {
                    *o += r * v;
                }
            }
            TestFunction::Gaussian { center, width, .. } => {
                let v = self.value(x);
                for ((o, c), u) in out.iter_mut().zip(center).zip(x) {
                    *o -= (u - c) / (width * width) * v;
                }
            }
            TestFunction::Sum { terms } => terms.iter().for_each(|t| t.add_gradient(x, out)),
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        self.add_gradient(x, &mut g);
        g
    }

    pub fn laplacian(&self, x: &[f64]) -> f64 {
        match self {
            TestFunction::Zero | TestFunction::Constant { .. } | TestFunction::Linear { .. } => 0.0,
            TestFunction::Cos { k, .. } => {
                -PI * PI * k.iter().map(|&k| (k * k) as f64).sum::<f64>() * self.value(x)
            }
            TestFunction::Exp { rate, .. } => rate.iter().map(|r| r * r).sum::<f64>() * self.value(x),
            TestFunction::Gaussian { center, width, .. } => {
                let w2 = width * width;
                let r2: f64 = center.iter().zip(x).map(|(c, u)| (u - c) * (u - c)).sum();
                (r2 / (w2 * w2) - x.len() as f64 / w2) * self.value(x)
            }
            TestFunction::Sum { terms } => terms.iter().map(|t| t.laplacian(x)).sum(),
        }
    }

    /// `(value, laplacian)`, with the gradient accumulated into `grad`.
    pub fn jet(&self, x: &[f64], grad: &mut [f64]) -> (f64, f64) {
        match self {
            TestFunction::Zero => (0.0, 0.0),
            TestFunction::Constant { value } => (*value, 0.0),
            TestFunction::Cos { k, amp } if x.len() <= 8 => {
                let mut sc = [(0.0, 1.0); 8];
                let mut v = *amp;
                let mut k2 = 0.0;
                for (a, (&ka, &u)) in k.iter().zip(x).enumerate() {
                    let w = PI * ka as f64;
                    sc[a] = (w * u).sin_cos();
                    v *= sc[a].1;
                    k2 += w * w;
                }
                for a in 0..x.len() {
                    let mut g = -amp * PI * k[a] as f64 * sc[a].0;
                    for (b, p) in sc.iter().enumerate().take(x.len()) {
                        if b != a {
                            g *= p.1;
                        }
                    }
                    grad[a] += g;
                }
                (v, -k2 * v)
            }
            TestFunction::Sum { terms } => terms.iter().fold((0.0, 0.0), |acc, t| {
                let (v, l) = t.jet(x, grad);
                (acc.0 + v, acc.1 + l)
            }),
            _ => {
                self.add_gradient(x, grad);
                (self.value(x), self.laplacian(x))
            }
        }
    }

    /// Largest normal derivative on the faces of the unit box, sampled on a grid.
    pub fn neumann_defect(&self, d: usize) -> f64 {
        let n: usize = 9;
        let mut worst: f64 = 0.0;
        let mut x = vec![0.0; d];
        let cells = n.pow(d as u32 - 1);
        for a in 0..d {
            for side in [0.0, 1.0] {
                for idx in 0..cells {
                    let mut r = idx;
                    for b in (0..d).filter(|&b| b != a) {
                        x[b] = (r % n) as f64 / (n - 1) as f64;
                        r /= n;
                    }
                    x[a] = side;
                    worst = worst.max(self.gradient(&x)[a].abs());
                }
            }
        }
        worst
    }

    /// Value in physical coordinates on the given species' box.
    pub fn value_physical(&self, s: Species, x: &[f64]) -> f64 {
        match s {
            Species::Plus => self.value(x),
            Species::Minus => {
                let r = crate::geometry::mirror(x);
                self.value(&r)
            }
        }
    }
}

/// Test-function pair `(phi_+, phi_-)`, each in reference coordinates of its box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservablePair {
    pub plus: TestFunction,
    pub minus: TestFunction,
}

impl ObservablePair {
    pub fn new(plus: TestFunction, minus: TestFunction) -> Self {
        ObservablePair { plus, minus }
    }

    pub fn of(&self, s: Species) -> &TestFunction {
        match s {
            Species::Plus => &self.plus,
            Species::Minus => &self.minus,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        self.plus.validate(d)?;
        self.minus.validate(d)
    }

    pub fn scaled(&self, c: f64) -> Self {
        ObservablePair { plus: self.plus.clone().times(c), minus: self.minus.clone().times(c) }
    }
}

impl TestFunction {
    pub fn times(self, c: f64) -> TestFunction {
        match self {
            TestFunction::Zero => TestFunction::Zero,
            TestFunction::Constant { value } => TestFunction::Constant { value: c * value },
            TestFunction::Cos { k, amp } => TestFunction::Cos { k, amp: c * amp },
            TestFunction::Linear { constant, coeffs } => TestFunction::Linear {
                constant: c * constant,
                coeffs: coeffs.into_iter().map(|v| c * v).collect(),
            },
            TestFunction::Exp { rate, amp } => TestFunction::Exp { rate, amp: c * amp },
            TestFunction::Gaussian { center, width, amp } => TestFunction::Gaussian { center, width, amp: c * amp },
            TestFunction::Sum { terms } => TestFunction::Sum { terms: terms.into_iter().map(|t| t.times(c)).collect() },
        }
    }
}

/// Probability density on the unit reference box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Density {
    pub profile: TestFunction,
}

impl Density {
    pub fn uniform() -> Self {
        Density { profile: TestFunction::constant(1.0) }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.profile.value(x)
    }

    /// Integral by tensor Gauss quadrature.
    pub fn mass(&self, d: usize) -> f64 {
        tensor_integral(d, 16, &|x| self.profile.value(x))
    }

    /// `(minimum, maximum)` sampled on a fine grid.
    pub fn range(&self, d: usize) -> (f64, f64) {
        let n: usize = match d {
            1 => 4097,
            2 => 257,
            3 => 41,
            _ => 11,
        };
        let mut x = vec![0.0; d];
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for idx in 0..n.pow(d as u32) {
            let mut r = idx;
            for a in (0..d).rev() {
                x[a] = (r % n) as f64 / (n - 1) as f64;
                r /= n;
            }
            let v = self.value(&x);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        self.profile.validate(d)?;
        let m = self.mass(d);
        if (m - 1.0).abs() > 1e-8 {
            return Err(invalid(format!("density integrates to {m}, not 1")));
        }
        let (lo, _) = self.range(d);
        if lo < 0.0 {
            return Err(invalid(format!("density takes the negative value {lo}")));
        }
        Ok(())
    }
}

/// `∫_{[0,1]^d} f` with `panels` panels of 8 Gauss nodes per axis.
pub fn tensor_integral(d: usize, panels: usize, f: &dyn Fn(&[f64]) -> f64) -> f64 {
    let (nodes, weights) = composite_gauss(panels, 8, 0.0, 1.0);
    let q = nodes.len();
    let mut x = vec![0.0; d];
    let mut total = 0.0;
    for idx in 0..q.pow(d as u32) {
        let mut r = idx;
        let mut w = 1.0;
        for a in (0..d).rev() {
            let j = r % q;
            r /= q;
            x[a] = nodes[j];
            w *= weights[j];
        }
        total += w * f(&x);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jet_matches_separate_evaluations() {
        let f = TestFunction::Sum {
            terms: vec![
                TestFunction::cos(&[2, 1], 0.7),
                TestFunction::Gaussian { center: vec![0.3, 0.6], width: 0.4, amp: 1.5 },
                TestFunction::constant(0.2),
            ],
        };
        let x = [0.37, 0.81];
        let mut g = [0.0; 2];
        let (v, l) = f.jet(&x, &mut g);
        assert!((v - f.value(&x)).abs() < 1e-14);
        assert!((l - f.laplacian(&x)).abs() < 1e-12);
        let g2 = f.gradient(&x);
        assert!((g[0] - g2[0]).abs() < 1e-13 && (g[1] - g2[1]).abs() < 1e-13);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let f = TestFunction::Sum {
            terms: vec![
                TestFunction::cos(&[1, 2], 0.7),
                TestFunction::Exp { rate: vec![0.3, -0.5], amp: 1.1 },
                TestFunction::Gaussian { center: vec![0.4, 0.6], width: 0.3, amp: 0.9 },
                TestFunction::Linear { constant: 0.2, coeffs: vec![1.0, -2.0] },
            ],
        };
        let x = [0.37, 0.81];
        let h = 1e-5;
        let g = f.gradient(&x);
        let mut lap = 0.0;
        for a in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[a] += h;
            xm[a] -= h;
            let fd = (f.value(&xp) - f.value(&xm)) / (2.0 * h);
            assert!((fd - g[a]).abs() < 1e-8);
            lap += (f.value(&xp) - 2.0 * f.value(&x) + f.value(&xm)) / (h * h);
        }
        assert!((lap - f.laplacian(&x)).abs() < 1e-4);
    }

    #[test]
    fn cos_modes_are_neumann() {
        assert!(TestFunction::cos(&[3, 1], 1.0).neumann_defect(2) < 1e-12);
        assert!(TestFunction::Exp { rate: vec![1.0], amp: 1.0 }.neumann_defect(1) > 0.5);
    }

    #[test]
    fn density_checks() {
        assert!(Density::uniform().validate(2).is_ok());
        let ramp = Density { profile: TestFunction::Linear { constant: 0.0, coeffs: vec![2.0] } };
        assert!(ramp.validate(1).is_ok());
        let bad = Density { profile: TestFunction::constant(2.0) };
        assert!(bad.validate(1).is_err());
    }

    #[test]
    fn scaling_negates() {
        let p = ObservablePair::new(TestFunction::cos(&[1], 1.0), TestFunction::constant(2.0));
        let q = p.scaled(-1.0);
        assert_eq!(q.plus.value(&[0.3]), -p.plus.value(&[0.3]));
        assert_eq!(q.minus.value(&[0.3]), -2.0);
    }
}
