//! Discrete mass grid, the reference mass measure and its convolution constants.
//!
//! Masses live on a uniform grid: bin index `b` (0-based) carries mass
//! `(b + 1) * unit`, so the sum of two bin masses is again a bin mass. The
//! reference measure assigns a strictly positive weight to every bin, and the
//! convolution constant `C` is certified by exact rational arithmetic over the
//! truncated range.

use std::ops::{Add, Mul};

use num_rational::BigRational;
use num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact;
use crate::scalar::Real;

/// Weights below this are rejected: densities are obtained by dividing by them.
pub const MIN_WEIGHT: f64 = 1e-300;

/// Highest convolution order accepted by [`BaseMeasure::certify_convolution_constant`].
pub const DEFAULT_ORDER_CAP: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MassGrid<T> {
    pub n_mass: usize,
    pub unit: T,
}

impl<T: Real> MassGrid<T> {
    pub fn new(n_mass: usize, unit: T) -> Result<Self> {
        if n_mass == 0 {
            return Err(Error::Config("mass grid needs at least one bin".into()));
        }
        if !(unit > T::zero()) || !unit.is_finite() {
            return Err(Error::Config(format!("mass unit must be positive, got {unit}")));
        }
        Ok(Self { n_mass, unit })
    }

    /// Mass carried by 0-based bin `b`.
    #[inline]
    pub fn mass(&self, b: usize) -> T {
        T::from_usize_lossy(b + 1) * self.unit
    }
}

/// How a convolution treats sums that fall beyond the last bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RangePolicy {
    /// Keep bins `1..=n_mass`.
    Truncate,
    /// Keep bins `1..=2 n_mass` (bin 1 is always zero).
    Extend,
}

/// Discrete convolution on the integer mass grid.
///
/// `out[r]` holds the mass-number `r + 1` entry, i.e. `sum_{i+j=r+1} a_i b_j`
/// with 1-based mass numbers.
pub fn convolve<S>(a: &[S], b: &[S], policy: RangePolicy) -> Result<Vec<S>>
where
    S: Clone + Zero + Add<Output = S> + for<'x> Mul<&'x S, Output = S>,
{
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "convolution operands have {} and {} bins",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    let len = match policy {
        RangePolicy::Truncate => n,
        RangePolicy::Extend => 2 * n,
    };
    Ok(convolve_into_len(a, b, len))
}

/// Convolution of operands with possibly different lengths, output truncated to `len` bins.
pub(crate) fn convolve_into_len<S>(a: &[S], b: &[S], len: usize) -> Vec<S>
where
    S: Clone + Zero + Add<Output = S> + for<'x> Mul<&'x S, Output = S>,
{
    let mut out = vec![S::zero(); len];
    for (r, slot) in out.iter_mut().enumerate() {
        // mass numbers i + j = r + 1  <=>  bin indices bi + bj = r - 1
        if r == 0 {
            continue;
        }
        let target = r - 1;
        let lo = target.saturating_sub(b.len().saturating_sub(1));
        let hi = target.min(a.len().saturating_sub(1));
        let mut acc = S::zero();
        if a.is_empty() || b.is_empty() {
            continue;
        }
        for bi in lo..=hi {
            let bj = target - bi;
            acc = acc + a[bi].clone() * &b[bj];
        }
        *slot = acc;
    }
    out
}

/// Exact ratio `max_k (w^{*order})_k / w_k` over the truncated range, with its arg-max bin.
pub fn convolution_ratio<T: Real>(weights: &[T], order: usize) -> Result<(BigRational, Option<usize>)> {
    if order < 2 {
        return Err(Error::Config(format!("convolution order must be >= 2, got {order}")));
    }
    for (b, &w) in weights.iter().enumerate() {
        if !(w > T::zero()) {
            return Err(Error::Positivity { bin: b, value: w.as_f64() });
        }
    }
    let w = exact::to_rationals(weights)?;
    let mut power = w.clone();
    for _ in 1..order {
        power = convolve_into_len(&power, &w, w.len());
    }
    let mut best = exact::zero();
    let mut arg = None;
    for (b, (p, wb)) in power.iter().zip(&w).enumerate() {
        let r = p / wb;
        if arg.is_none() || r > best {
            best = r;
            arg = Some(b);
        }
    }
    Ok((best, arg))
}

/// Result of certifying `w^{*n} <= C^{n-1} w` (and the `C^n` majorant) on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvolutionCertificate<T> {
    pub order: usize,
    /// `R_n = max_k (w^{*n})_k / w_k`, rounded to nearest.
    pub ratio: T,
    pub ratio_exact: BigRational,
    pub arg_max_bin: Option<usize>,
    /// The certified binary constant `C` the check was made against.
    pub constant: T,
    /// `R_n <= C^{n-1}`, decided exactly.
    pub holds_power_n_minus_1: bool,
    /// `R_n <= C^n`, decided exactly.
    pub holds_power_n: bool,
}

/// The reference mass measure with its cached total mass and certified constant.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseMeasure<T> {
    grid: MassGrid<T>,
    weights: Vec<T>,
    total_mass: T,
    conv_constant: Option<T>,
    conv_ratio: Option<T>,
}

impl<T: Real> BaseMeasure<T> {
    /// Builds an uncertified measure; every weight must be finite and `>= MIN_WEIGHT`.
    pub fn new(grid: MassGrid<T>, weights: Vec<T>) -> Result<Self> {
        if weights.len() != grid.n_mass {
            return Err(Error::Shape(format!(
                "{} weights for {} mass bins",
                weights.len(),
                grid.n_mass
            )));
        }
        for (b, &w) in weights.iter().enumerate() {
            if !w.is_finite() || !(w.as_f64() >= MIN_WEIGHT) {
                return Err(Error::Positivity { bin: b, value: w.as_f64() });
            }
        }
        let total_mass = weights.iter().copied().sum();
        Ok(Self { grid, weights, total_mass, conv_constant: None, conv_ratio: None })
    }

    /// Computes `R_2` exactly and records the smallest scalar `C >= R_2` as the constant.
    pub fn certify(mut self) -> Result<Self> {
        let (r2, _) = convolution_ratio(&self.weights, 2)?;
        let c: T = exact::round_up(&r2)?;
        self.conv_ratio = Some(exact::to_real(&r2));
        self.conv_constant = Some(c);
        Ok(self)
    }

    /// Records a user-declared constant after checking it exactly; the returned flag is the verdict.
    pub fn with_declared_constant(mut self, c: T) -> Result<(Self, bool)> {
        let (r2, _) = convolution_ratio(&self.weights, 2)?;
        let ok = c >= T::zero() && exact::to_rational(c)? >= r2;
        self.conv_ratio = Some(exact::to_real(&r2));
        self.conv_constant = Some(c);
        Ok((self, ok))
    }

    pub fn grid(&self) -> &MassGrid<T> {
        &self.grid
    }

    pub fn n_mass(&self) -> usize {
        self.grid.n_mass
    }

    pub fn unit(&self) -> T {
        self.grid.unit
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    /// `m`, the total mass of the reference measure.
    pub fn total_mass(&self) -> T {
        self.total_mass
    }

    pub fn conv_constant(&self) -> Option<T> {
        self.conv_constant
    }

    /// `R_2` as computed during certification.
    pub fn conv_ratio(&self) -> Option<T> {
        self.conv_ratio
    }

    /// The certified constant, or an error if certification never ran.
    pub fn require_constant(&self) -> Result<T> {
        self.conv_constant
            .ok_or_else(|| Error::Precondition("base measure has no certified convolution constant".into()))
    }

    /// Exact re-check of `(w*w)_k <= C w_k` for every `k <= n_mass`.
    pub fn check_constant(&self, c: T) -> Result<bool> {
        let (r2, _) = convolution_ratio(&self.weights, 2)?;
        Ok(c >= T::zero() && exact::to_rational(c)? >= r2)
    }

    /// `R_n` for `2 <= order <= cap`, checked against `C^{n-1}` and `C^n`.
    pub fn certify_convolution_constant(&self, order: usize, cap: usize) -> Result<ConvolutionCertificate<T>> {
        if order > cap {
            return Err(Error::Config(format!("convolution order {order} exceeds cap {cap}")));
        }
        let (rn, arg) = convolution_ratio(&self.weights, order)?;
        let c = match self.conv_constant {
            Some(c) => c,
            None => exact::round_up(&convolution_ratio(&self.weights, 2)?.0)?,
        };
        let cq = exact::to_rational(c)?;
        let mut pow = BigRational::from_integer(1.into());
        for _ in 1..order {
            pow *= &cq;
        }
        let holds_power_n_minus_1 = rn <= pow;
        let holds_power_n = rn <= pow * &cq;
        Ok(ConvolutionCertificate {
            order,
            ratio: exact::to_real(&rn),
            ratio_exact: rn,
            arg_max_bin: arg,
            constant: c,
            holds_power_n_minus_1,
            holds_power_n,
        })
    }

    pub fn to_spec(&self) -> BaseMeasureSpec<T> {
        BaseMeasureSpec {
            n_mass: self.grid.n_mass,
            unit: self.grid.unit,
            weights: Some(self.weights.clone()),
            family: None,
            exponent: None,
            rate: None,
            conv_constant: None,
        }
    }
}

/// `w_k = k^{-p}` on `n_mass` bins of unit mass, certified eagerly.
pub fn make_power_law_base<T: Real>(n_mass: usize, exponent: T) -> Result<BaseMeasure<T>> {
    if !(exponent >= T::zero()) {
        return Err(Error::Config(format!("power-law exponent must be >= 0, got {exponent}")));
    }
    let grid = MassGrid::new(n_mass, T::one())?;
    let weights = (1..=n_mass).map(|k| T::from_usize_lossy(k).powf(-exponent)).collect();
    BaseMeasure::new(grid, weights)?.certify()
}

/// Samples `g(y) = e^{-rate y} (1 + y)^{-2}` at the bin masses, `w_k = g(k unit) unit`.
///
/// In the continuum this `g` satisfies `g * g <= C g`; on the grid the constant is
/// re-certified and reported, so a poorly resolved grid shows up as a large `R_2`.
pub fn make_laplace_base<T: Real>(n_mass: usize, unit: T, rate: T) -> Result<BaseMeasure<T>> {
    if !(rate >= T::zero()) {
        return Err(Error::Config(format!("Laplace rate must be >= 0, got {rate}")));
    }
    let grid = MassGrid::new(n_mass, unit)?;
    let weights = (0..n_mass)
        .map(|b| {
            let y = grid.mass(b);
            (-rate * y).exp() / ((T::one() + y) * (T::one() + y)) * unit
        })
        .collect();
    BaseMeasure::new(grid, weights)?.certify()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseFamily {
    PowerLaw,
    Laplace,
}

/// JSON form: `{"n_mass", "unit", "weights"}` or `{"n_mass", "unit", "family", ...}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseMeasureSpec<T> {
    pub n_mass: usize,
    pub unit: T,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<T>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<BaseFamily>,
    /// Power-law exponent `p`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exponent: Option<T>,
    /// Laplace rate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<T>,
    /// Optional declared constant; certification then checks it instead of computing one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv_constant: Option<T>,
}

impl<T: Real> BaseMeasureSpec<T> {
    /// Builds the measure. The flag is `false` when a declared constant fails its exact check.
    pub fn build(&self) -> Result<(BaseMeasure<T>, bool)> {
        let base = match (&self.weights, self.family) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("base measure: give either \"weights\" or \"family\", not both".into()))
            }
            (Some(w), None) => BaseMeasure::new(MassGrid::new(self.n_mass, self.unit)?, w.clone())?,
            (None, Some(BaseFamily::PowerLaw)) => {
                let p = self
                    .exponent
                    .ok_or_else(|| Error::Config("power_law base needs \"exponent\"".into()))?;
                let base = make_power_law_base(self.n_mass, p)?;
                if self.unit != T::one() {
                    let grid = MassGrid::new(self.n_mass, self.unit)?;
                    BaseMeasure::new(grid, base.weights)?
                } else {
                    base
                }
            }
            (None, Some(BaseFamily::Laplace)) => {
                let rate = self
                    .rate
                    .ok_or_else(|| Error::Config("laplace base needs \"rate\"".into()))?;
                make_laplace_base(self.n_mass, self.unit, rate)?
            }
            (None, None) => return Err(Error::Config("base measure needs \"weights\" or \"family\"".into())),
        };
        match self.conv_constant {
            Some(c) => base.with_declared_constant(c),
            None => Ok((base.certify()?, true)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_traits::ToPrimitive;

    #[test]
    fn delta_convolution_lands_on_bin_two() {
        let a = [1.0f64, 0.0, 0.0, 0.0];
        let out = convolve(&a, &a, RangePolicy::Extend).unwrap();
        assert_eq!(out, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn two_point_convolution_extend() {
        let a = [1.0f64, 1.0, 0.0, 0.0];
        let out = convolve(&a, &a, RangePolicy::Extend).unwrap();
        assert_eq!(out, vec![0.0, 1.0, 2.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn convolution_rejects_grid_mismatch() {
        let err = convolve(&[1.0f64, 2.0], &[1.0], RangePolicy::Truncate).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn zero_weight_fails_positivity() {
        let err = convolution_ratio(&[1.0f64, 0.0, 0.0], 2).unwrap_err();
        assert!(matches!(err, Error::Positivity { bin: 1, .. }));
        let grid = MassGrid::new(2, 1.0f64).unwrap();
        assert!(BaseMeasure::new(grid, vec![1.0, 1e-301]).is_err());
    }

    #[test]
    fn uniform_weights_ratio_is_three() {
        let w = [1.0f64; 4];
        let trunc = convolve(&w, &w, RangePolicy::Truncate).unwrap();
        assert_eq!(trunc, vec![0.0, 1.0, 2.0, 3.0]);
        let (r2, arg) = convolution_ratio(&w, 2).unwrap();
        assert_eq!(r2.to_f64().unwrap(), 3.0);
        assert_eq!(arg, Some(3));
    }

    #[test]
    fn power_law_constructors() {
        let flat = make_power_law_base::<f64>(4, 0.0).unwrap();
        assert_eq!(flat.weights(), &[1.0; 4]);
        assert_eq!(flat.total_mass(), 4.0);
        assert_eq!(flat.conv_constant(), Some(3.0));

        let single = make_power_law_base::<f64>(1, 2.0).unwrap();
        assert_eq!(single.conv_constant(), Some(0.0));
        assert!(single.check_constant(0.0).unwrap());

        let base = make_power_law_base::<f64>(64, 2.0).unwrap();
        let direct: f64 = (1..=64).map(|k| 1.0 / (k as f64 * k as f64)).sum();
        assert!((base.total_mass() - direct).abs() <= 1e-12 * 64.0);
    }

    #[test]
    fn laplace_single_bin() {
        let base = make_laplace_base::<f64>(1, 1.0, 0.0).unwrap();
        assert_eq!(base.weights(), &[0.25]);
    }

    #[test]
    fn declared_constant_below_ratio_fails() {
        let grid = MassGrid::new(4, 1.0f64).unwrap();
        let base = BaseMeasure::new(grid, vec![1.0; 4]).unwrap();
        let (_, ok) = base.clone().with_declared_constant(2.9).unwrap();
        assert!(!ok);
        let (_, ok) = base.with_declared_constant(3.0).unwrap();
        assert!(ok);
    }

    #[test]
    fn order_cap_enforced() {
        let base = make_power_law_base::<f64>(8, 2.0).unwrap();
        assert!(base.certify_convolution_constant(7, DEFAULT_ORDER_CAP).is_err());
        assert!(base.certify_convolution_constant(1, DEFAULT_ORDER_CAP).is_err());
        let cert = base.certify_convolution_constant(3, DEFAULT_ORDER_CAP).unwrap();
        assert!(cert.holds_power_n_minus_1);
    }

    #[test]
    fn spec_json_families() {
        let spec: BaseMeasureSpec<f64> =
            serde_json::from_str(r#"{"n_mass": 4, "unit": 1.0, "family": "power_law", "exponent": 0.0}"#).unwrap();
        let (base, ok) = spec.build().unwrap();
        assert!(ok);
        assert_eq!(base.weights(), &[1.0; 4]);
        let text = serde_json::to_string(&base.to_spec()).unwrap();
        assert_eq!(text, r#"{"n_mass":4,"unit":1.0,"weights":[1.0,1.0,1.0,1.0]}"#);
        let bad = serde_json::from_str::<BaseMeasureSpec<f64>>(r#"{"n_mass": 4, "unit": 1.0, "wieghts": []}"#);
        assert!(bad.is_err());
    }

    #[test]
    fn works_in_single_precision() {
        let base = make_power_law_base::<f32>(16, 2.0).unwrap();
        let c = base.conv_constant().unwrap();
        assert!(base.check_constant(c).unwrap());
    }
}
