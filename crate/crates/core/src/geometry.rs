//! Adjacent unit boxes `D+ = (0,1)^d`, `D- = (0,1)^{d-1} x (-1,0)` and their shared facet.
//!
//! Many routines work in *reference coordinates*: a minus point `(y', y_d)` is mapped to
//! `(y', -y_d)`, so both species live on `[0,1]^d` and the interface is `{x_d = 0}`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Interface intensity, fixed by the model.
pub const LAMBDA: f64 = 1.0;
/// Symmetrizing density, fixed by the model.
pub const RHO: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Species {
    Plus,
    Minus,
}

impl Species {
    pub const BOTH: [Species; 2] = [Species::Plus, Species::Minus];

    pub fn index(self) -> usize {
        match self {
            Species::Plus => 0,
            Species::Minus => 1,
        }
    }

    pub fn other(self) -> Species {
        match self {
            Species::Plus => Species::Minus,
            Species::Minus => Species::Plus,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Species::Plus => "plus",
            Species::Minus => "minus",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const UNIT: Interval = Interval { lo: 0.0, hi: 1.0 };

    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(invalid(format!("interval needs lo < hi, got [{lo}, {hi}]")));
        }
        Ok(Interval { lo, hi })
    }

    pub fn len(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainPair {
    d: usize,
}

impl DomainPair {
    pub fn new(d: usize) -> Result<Self> {
        Self::with_constants(d, LAMBDA, RHO)
    }

    /// Only `lambda = rho = 1` is supported; anything else is rejected.
    pub fn with_constants(d: usize, lambda: f64, rho: f64) -> Result<Self> {
        if d == 0 {
            return Err(invalid("dimension must be at least 1"));
        }
        if lambda != LAMBDA || rho != RHO {
            return Err(invalid(format!(
                "only lambda = 1 and rho = 1 are supported (got lambda = {lambda}, rho = {rho})"
            )));
        }
        Ok(DomainPair { d })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn lambda(&self) -> f64 {
        LAMBDA
    }

    pub fn rho(&self) -> f64 {
        RHO
    }

    pub fn box_of(&self, s: Species) -> Vec<Interval> {
        let mut b = vec![Interval::UNIT; self.d];
        if s == Species::Minus {
            b[self.d - 1] = Interval { lo: -1.0, hi: 0.0 };
        }
        b
    }

    /// Closed-box containment.
    pub fn contains(&self, s: Species, x: &[f64]) -> bool {
        x.len() == self.d
            && self
                .box_of(s)
                .iter()
                .zip(x)
                .all(|(iv, &v)| v.is_finite() && iv.contains(v))
    }

    /// `H^{d-1}(I)`; the counting measure of `{0}` when `d = 1`.
    pub fn interface_measure(&self) -> f64 {
        1.0
    }

    fn check(&self, s: Species, x: &[f64]) -> Result<()> {
        if self.contains(s, x) {
            Ok(())
        } else {
            Err(Error::OutOfDomain { species: s.name(), point: x.to_vec() })
        }
    }

    pub fn interface_dist_sq(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.check(Species::Plus, x)?;
        self.check(Species::Minus, y)?;
        Ok(interface_dist_sq_unchecked(x, y))
    }

    pub fn in_interaction_zone(&self, x: &[f64], y: &[f64], delta: f64) -> Result<bool> {
        if !(delta > 0.0) {
            return Err(invalid("delta must be positive"));
        }
        Ok(self.interface_dist_sq(x, y)? < delta * delta)
    }
}

/// Triangular folding of `coord` into `[lo, hi]` with period `2 (hi - lo)`.
pub fn fold_reflect(coord: f64, lo: f64, hi: f64) -> Result<f64> {
    if !coord.is_finite() {
        return Err(invalid(format!("cannot fold non-finite coordinate {coord}")));
    }
    if !(hi > lo) {
        return Err(invalid(format!("fold needs lo < hi, got [{lo}, {hi}]")));
    }
    Ok(fold_unchecked(coord, lo, hi))
}

#[inline]
pub fn fold_unchecked(coord: f64, lo: f64, hi: f64) -> f64 {
    if coord >= lo && coord <= hi {
        return coord;
    }
    let len = hi - lo;
    let r = (coord - lo).rem_euclid(2.0 * len);
    let r = if r > len { 2.0 * len - r } else { r };
    lo + r
}

/// Folding into `[0, 1]`, the hot path of the simulator.
#[inline]
pub fn fold_unit(c: f64) -> f64 {
    if (0.0..=1.0).contains(&c) {
        c
    } else if c < 0.0 && c >= -1.0 {
        -c
    } else if c > 1.0 && c <= 2.0 {
        2.0 - c
    } else {
        fold_unchecked(c, 0.0, 1.0)
    }
}

/// The swap map `(x', x_d) -> (x', -x_d)` exchanging the two boxes.
pub fn mirror(x: &[f64]) -> Vec<f64> {
    let mut m = x.to_vec();
    if let Some(last) = m.last_mut() {
        *last = -*last;
    }
    m
}

/// Map a physical point of species `s` to reference coordinates on `[0,1]^d`.
pub fn to_reference(s: Species, x: &[f64]) -> Vec<f64> {
    match s {
        Species::Plus => x.to_vec(),
        Species::Minus => mirror(x),
    }
}

/// `min_z |x - z|^2 + |y - z|^2` over the closed interface, via the clamped midpoint.
pub fn interface_dist_sq_unchecked(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len();
    let mut s = x[d - 1] * x[d - 1] + y[d - 1] * y[d - 1];
    for i in 0..d - 1 {
        let m = (0.5 * (x[i] + y[i])).clamp(0.0, 1.0);
        s += (x[i] - m) * (x[i] - m) + (y[i] - m) * (y[i] - m);
    }
    s
}

/// Same quantity for two points given in reference coordinates.
#[inline]
pub fn reference_dist_sq(a: &[f64], b: &[f64]) -> f64 {
    let d = a.len();
    let mut s = a[d - 1] * a[d - 1] + b[d - 1] * b[d - 1];
    for i in 0..d - 1 {
        let m = (0.5 * (a[i] + b[i])).clamp(0.0, 1.0);
        s += (a[i] - m) * (a[i] - m) + (b[i] - m) * (b[i] - m);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fold_examples() {
        assert_eq!(fold_reflect(0.5, 0.0, 1.0).unwrap(), 0.5);
        assert!((fold_reflect(1.2, 0.0, 1.0).unwrap() - 0.8).abs() < 1e-15);
        assert!((fold_reflect(-0.3, 0.0, 1.0).unwrap() - 0.3).abs() < 1e-15);
        assert!((fold_reflect(2.5, 0.0, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(fold_reflect(f64::NAN, 0.0, 1.0).is_err());
        assert!(fold_reflect(0.1, 1.0, 1.0).is_err());
    }

    #[test]
    fn fold_unit_matches_general_fold() {
        for i in -400..400 {
            let c = i as f64 * 0.0137;
            assert!((fold_unit(c) - fold_unchecked(c, 0.0, 1.0)).abs() < 1e-14);
        }
    }

    #[test]
    fn distance_examples() {
        let g1 = DomainPair::new(1).unwrap();
        assert!((g1.interface_dist_sq(&[0.1], &[-0.2]).unwrap() - 0.05).abs() < 1e-15);
        let g2 = DomainPair::new(2).unwrap();
        let v = g2.interface_dist_sq(&[0.5, 0.1], &[0.5, -0.1]).unwrap();
        assert!((v - 0.02).abs() < 1e-15);
        let v = g2.interface_dist_sq(&[0.2, 0.3], &[0.6, -0.4]).unwrap();
        assert!((v - 0.33).abs() < 1e-12);
        assert!(g2.interface_dist_sq(&[0.2, -0.3], &[0.6, -0.4]).is_err());
    }

    #[test]
    fn zone_examples() {
        let g1 = DomainPair::new(1).unwrap();
        assert!(g1.in_interaction_zone(&[0.05], &[-0.05], 0.1).unwrap());
        assert!(!g1.in_interaction_zone(&[0.5], &[-0.5], 0.1).unwrap());
        let g2 = DomainPair::new(2).unwrap();
        assert!(g2.in_interaction_zone(&[0.2, 0.3], &[0.6, -0.4], 0.575).unwrap());
        assert!(!g2.in_interaction_zone(&[0.2, 0.3], &[0.6, -0.4], 0.574).unwrap());
    }

    #[test]
    fn constants_are_fixed() {
        assert!(DomainPair::with_constants(1, 2.0, 1.0).is_err());
        assert!(DomainPair::with_constants(1, 1.0, 0.5).is_err());
        assert!(DomainPair::new(0).is_err());
        let g = DomainPair::new(3).unwrap();
        assert_eq!(g.box_of(Species::Minus)[2], Interval { lo: -1.0, hi: 0.0 });
        assert!(g.contains(Species::Minus, &[0.0, 1.0, -1.0]));
        assert!(!g.contains(Species::Plus, &[0.0, 1.0, -1e-9]));
    }
}
