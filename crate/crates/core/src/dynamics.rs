//! Particle transport: `dx = sigma(x, y) dB + b(x, y) dt`, `dy = 0`.
//!
//! Coefficients come from a small catalogue of parameterized families so
//! that scenarios stay declarative and every model can be certified
//! against the ellipticity window and the divergence floor.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::kernel_field::SpatialGrid;
use crate::mass_measure::BaseMeasure;
use crate::rng::NormalSource;
use crate::scalar::Real;

/// Tolerance for the pointwise certifications.
pub const CERT_TOL: f64 = 1e-9;

type Vector<T> = SmallVec<[T; 3]>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    tag = "family",
    rename_all = "snake_case",
    deny_unknown_fields,
    bound(deserialize = "T: Deserialize<'de> + Default")
)]
pub enum SigmaFamily<T> {
    Zero,
    /// `sigma = scale * I`.
    Isotropic { scale: T },
    /// Constant matrix, row-major rows.
    Constant { matrix: Vec<Vec<T>> },
    /// `sigma_aa = (base_a + amplitude sin(frequency x_a)) * y^(-mass_power)`.
    Diagonal {
        base: Vec<T>,
        #[serde(default)]
        amplitude: T,
        #[serde(default)]
        frequency: T,
        #[serde(default)]
        mass_power: T,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftFamily<T> {
    Zero,
    Constant { c: Vec<T> },
    /// `b = A x + c`.
    Linear { a: Vec<Vec<T>>, c: Vec<T> },
    /// `b = eps (x - center) / n`, so `div b = eps`.
    Radial { eps: T, center: Vec<T> },
    /// Radial part plus `rate * (x_2 - center_2)` on the first axis (divergence-free shear).
    Shear { rate: T, eps: T, center: Vec<T> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DivQuadrature {
    #[default]
    Left,
    Trapezoid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsModel<T> {
    pub dim: usize,
    pub sigma: SigmaFamily<T>,
    pub drift: DriftFamily<T>,
    pub eps_floor: T,
    pub ellipticity: (T, T),
    pub quadrature: DivQuadrature,
    /// Set once the divergence floor has been certified; enables the debug-mode weight assertion.
    pub divergence_certified: bool,
}

fn check_len<T>(what: &str, v: &[T], dim: usize) -> Result<()> {
    if v.len() == dim {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} has length {}, expected {dim}", v.len())))
    }
}

fn check_square<T>(what: &str, m: &[Vec<T>], dim: usize) -> Result<()> {
    check_len(what, m, dim)?;
    m.iter().try_for_each(|row| check_len(what, row, dim))
}

impl<T: Real> DynamicsModel<T> {
    pub fn new(dim: usize, sigma: SigmaFamily<T>, drift: DriftFamily<T>, eps_floor: T, ellipticity: (T, T)) -> Result<Self> {
        match &sigma {
            SigmaFamily::Zero | SigmaFamily::Isotropic { .. } => {}
            SigmaFamily::Constant { matrix } => check_square("sigma matrix", matrix, dim)?,
            SigmaFamily::Diagonal { base, .. } => check_len("sigma base", base, dim)?,
        }
        match &drift {
            DriftFamily::Zero => {}
            DriftFamily::Constant { c } => check_len("drift c", c, dim)?,
            DriftFamily::Linear { a, c } => {
                check_square("drift A", a, dim)?;
                check_len("drift c", c, dim)?;
            }
            DriftFamily::Radial { center, .. } => check_len("drift center", center, dim)?,
            DriftFamily::Shear { center, .. } => check_len("drift center", center, dim)?,
        }
        if ellipticity.0 > ellipticity.1 {
            return Err(Error::Config("ellipticity window must satisfy alpha <= beta".into()));
        }
        Ok(Self { dim, sigma, drift, eps_floor, ellipticity, quadrature: DivQuadrature::Left, divergence_certified: false })
    }

    pub fn with_quadrature(mut self, q: DivQuadrature) -> Self {
        self.quadrature = q;
        self
    }

    /// True when `sigma` vanishes identically.
    pub fn is_deterministic(&self) -> bool {
        match &self.sigma {
            SigmaFamily::Zero => true,
            SigmaFamily::Isotropic { scale } => *scale == T::zero(),
            SigmaFamily::Constant { matrix } => matrix.iter().flatten().all(|&v| v == T::zero()),
            SigmaFamily::Diagonal { base, amplitude, .. } => {
                *amplitude == T::zero() && base.iter().all(|&v| v == T::zero())
            }
        }
    }

    /// `sigma(x, y)` written row-major into `out` (length `dim^2`).
    pub fn sigma_at(&self, x: &[T], y: T, out: &mut [T]) {
        let n = self.dim;
        out.iter_mut().for_each(|v| *v = T::zero());
        match &self.sigma {
            SigmaFamily::Zero => {}
            SigmaFamily::Isotropic { scale } => (0..n).for_each(|a| out[a * n + a] = *scale),
            SigmaFamily::Constant { matrix } => {
                for (a, row) in matrix.iter().enumerate() {
                    out[a * n..(a + 1) * n].copy_from_slice(row);
                }
            }
            SigmaFamily::Diagonal { base, amplitude, frequency, mass_power } => {
                let mass_factor = y.powf(-*mass_power);
                for a in 0..n {
                    out[a * n + a] = (base[a] + *amplitude * (*frequency * x[a]).sin()) * mass_factor;
                }
            }
        }
    }

    pub fn drift_at(&self, x: &[T], _y: T, out: &mut [T]) {
        let n = self.dim;
        match &self.drift {
            DriftFamily::Zero => out.iter_mut().for_each(|v| *v = T::zero()),
            DriftFamily::Constant { c } => out.copy_from_slice(c),
            DriftFamily::Linear { a, c } => {
                for i in 0..n {
                    out[i] = a[i].iter().zip(x).fold(c[i], |acc, (&aij, &xj)| acc + aij * xj);
                }
            }
            DriftFamily::Radial { eps, center } => {
                let k = *eps / T::from_usize_lossy(n);
                for i in 0..n {
                    out[i] = k * (x[i] - center[i]);
                }
            }
            DriftFamily::Shear { rate, eps, center } => {
                let k = *eps / T::from_usize_lossy(n);
                for i in 0..n {
                    out[i] = k * (x[i] - center[i]);
                }
                if n >= 2 {
                    out[0] += *rate * (x[1] - center[1]);
                }
            }
        }
    }

    /// `div_x b(x, y)`.
    pub fn div_at(&self, _x: &[T], _y: T) -> T {
        match &self.drift {
            DriftFamily::Zero | DriftFamily::Constant { .. } => T::zero(),
            DriftFamily::Linear { a, .. } => (0..self.dim).map(|i| a[i][i]).sum(),
            DriftFamily::Radial { eps, .. } | DriftFamily::Shear { eps, .. } => *eps,
        }
    }

    /// `(A, c, sigma)` when the model is in the linear-drift, constant-sigma family.
    pub fn linear_constant_parts(&self) -> Option<(Vec<Vec<T>>, Vec<T>, Vec<Vec<T>>)> {
        let n = self.dim;
        let sigma = match &self.sigma {
            SigmaFamily::Zero => vec![vec![T::zero(); n]; n],
            SigmaFamily::Isotropic { scale } => {
                (0..n).map(|a| (0..n).map(|b| if a == b { *scale } else { T::zero() }).collect()).collect()
            }
            SigmaFamily::Constant { matrix } => matrix.clone(),
            SigmaFamily::Diagonal { base, amplitude, mass_power, .. }
                if *amplitude == T::zero() && *mass_power == T::zero() =>
            {
                (0..n).map(|a| (0..n).map(|b| if a == b { base[a] } else { T::zero() }).collect()).collect()
            }
            SigmaFamily::Diagonal { .. } => return None,
        };
        let (a, c) = match &self.drift {
            DriftFamily::Zero => (vec![vec![T::zero(); n]; n], vec![T::zero(); n]),
            DriftFamily::Constant { c } => (vec![vec![T::zero(); n]; n], c.clone()),
            DriftFamily::Linear { a, c } => (a.clone(), c.clone()),
            DriftFamily::Radial { eps, center } | DriftFamily::Shear { eps, center, .. } => {
                let k = *eps / T::from_usize_lossy(n);
                let mut a = vec![vec![T::zero(); n]; n];
                let mut c = vec![T::zero(); n];
                for i in 0..n {
                    a[i][i] = k;
                    c[i] = -k * center[i];
                }
                if let DriftFamily::Shear { rate, center, .. } = &self.drift {
                    if n >= 2 {
                        a[0][1] += *rate;
                        c[0] -= *rate * center[1];
                    }
                }
                (a, c)
            }
        };
        Some((a, c, sigma))
    }
}

/// Endpoint and Feynman-Kac weight of one simulated path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample<T> {
    pub endpoint: Vec<T>,
    pub div_integral: T,
    pub weight: T,
}

/// Number of full steps and the trailing partial step for horizon `t`.
pub fn step_schedule<T: Real>(t: T, dt: T) -> (usize, T) {
    if t <= T::zero() {
        return (0, T::zero());
    }
    let q = t / dt;
    let n = (q + T::lit(1e-9)).floor();
    let rem = t - n * dt;
    let rem = if rem <= T::lit(1e-12) * t.max(dt) { T::zero() } else { rem };
    (n.to_usize().unwrap_or(0), rem)
}

struct EulerState<'m, T: Real> {
    model: &'m DynamicsModel<T>,
    y: T,
    x: Vector<T>,
    div_integral: T,
    steps: usize,
    sigma: Vec<T>,
    drift: Vector<T>,
    noise: Vector<T>,
    deterministic: bool,
}

impl<'m, T: Real> EulerState<'m, T> {
    fn new(model: &'m DynamicsModel<T>, x0: &[T], y: T) -> Self {
        let n = model.dim;
        Self {
            model,
            y,
            x: x0.iter().copied().collect(),
            div_integral: T::zero(),
            steps: 0,
            sigma: vec![T::zero(); n * n],
            drift: SmallVec::from_elem(T::zero(), n),
            noise: SmallVec::from_elem(T::zero(), n),
            deterministic: model.is_deterministic(),
        }
    }

    fn step<N: NormalSource>(&mut self, h: T, normals: &mut N) -> Result<()> {
        let n = self.model.dim;
        let div_left = self.model.div_at(&self.x, self.y);
        self.model.drift_at(&self.x, self.y, &mut self.drift);
        if !self.deterministic {
            self.model.sigma_at(&self.x, self.y, &mut self.sigma);
            let sq = h.sqrt();
            for z in self.noise.iter_mut() {
                *z = T::lit(normals.next_normal()) * sq;
            }
        }
        for i in 0..n {
            let mut dx = self.drift[i] * h;
            if !self.deterministic {
                for j in 0..n {
                    dx += self.sigma[i * n + j] * self.noise[j];
                }
            }
            self.x[i] += dx;
        }
        self.div_integral += match self.model.quadrature {
            DivQuadrature::Left => div_left * h,
            DivQuadrature::Trapezoid => T::lit(0.5) * (div_left + self.model.div_at(&self.x, self.y)) * h,
        };
        self.steps += 1;
        if self.x.iter().any(|v| !v.is_finite()) || !self.div_integral.is_finite() {
            return Err(Error::PathDivergence { step: self.steps, context: String::new() });
        }
        Ok(())
    }

    fn advance<N: NormalSource>(&mut self, t: T, dt: T, normals: &mut N) -> Result<()> {
        let (n_full, rem) = step_schedule(t, dt);
        for _ in 0..n_full {
            self.step(dt, normals)?;
        }
        if rem > T::zero() {
            self.step(rem, normals)?;
        }
        Ok(())
    }

    fn sample(&self) -> PathSample<T> {
        PathSample {
            endpoint: self.x.to_vec(),
            div_integral: self.div_integral,
            weight: (-self.div_integral).exp(),
        }
    }
}

fn check_step<T: Real>(t: T, dt: T) -> Result<()> {
    if !(t >= T::zero()) || !t.is_finite() {
        return Err(Error::Config(format!("path horizon must be finite and >= 0, got {t}")));
    }
    if t > T::zero() && !(dt > T::zero()) {
        return Err(Error::Config(format!("path step must be positive, got {dt}")));
    }
    Ok(())
}

/// Euler-Maruyama path to horizon `t` with left-point (or trapezoid) quadrature of `div b`.
pub fn simulate_path<T: Real, N: NormalSource>(
    model: &DynamicsModel<T>,
    x0: &[T],
    y: T,
    t: T,
    dt: T,
    normals: &mut N,
) -> Result<PathSample<T>> {
    check_step(t, dt)?;
    if x0.len() != model.dim {
        return Err(Error::Shape(format!("start point of dimension {} for a {}-d model", x0.len(), model.dim)));
    }
    let mut state = EulerState::new(model, x0, y);
    state.advance(t, dt, normals)?;
    Ok(state.sample())
}

/// One path observed at increasing checkpoint times; `observe(k, sample)` fires at each.
///
/// When every gap between checkpoints is a whole number of steps the sample at
/// `checkpoints[k]` equals `simulate_path` to that horizon bit for bit.
pub fn simulate_path_checkpoints<T: Real, N: NormalSource>(
    model: &DynamicsModel<T>,
    x0: &[T],
    y: T,
    checkpoints: &[T],
    dt: T,
    normals: &mut N,
    mut observe: impl FnMut(usize, &PathSample<T>),
) -> Result<()> {
    let mut state = EulerState::new(model, x0, y);
    let mut now = T::zero();
    for (k, &t) in checkpoints.iter().enumerate() {
        if t < now {
            return Err(Error::Config("checkpoint times must be non-decreasing".into()));
        }
        check_step(t - now, dt)?;
        state.advance(t - now, dt, normals)?;
        now = t;
        observe(k, &state.sample());
    }
    Ok(())
}

/// Classic RK4 on `x' = b(x)`, `I' = div b(x)`; the pure-convection oracle.
pub fn deterministic_flow<T: Real>(model: &DynamicsModel<T>, x0: &[T], y: T, t: T, dt: T) -> Result<PathSample<T>> {
    if !model.is_deterministic() {
        return Err(Error::Misuse("deterministic_flow requires sigma identically zero".into()));
    }
    check_step(t, dt)?;
    let n = model.dim;
    let rhs = |x: &[T], out: &mut [T]| -> T {
        model.drift_at(x, y, out);
        model.div_at(x, y)
    };
    let mut x: Vec<T> = x0.to_vec();
    let mut integral = T::zero();
    let (n_full, rem) = step_schedule(t, dt);
    let mut k = [vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]];
    let mut tmp = vec![T::zero(); n];
    let half = T::lit(0.5);
    let sixth = T::one() / T::lit(6.0);
    let mut steps = 0usize;
    let mut rk4 = |x: &mut Vec<T>, integral: &mut T, h: T| -> Result<()> {
        let d1 = rhs(x, &mut k[0]);
        for i in 0..n {
            tmp[i] = x[i] + half * h * k[0][i];
        }
        let d2 = rhs(&tmp, &mut k[1]);
        for i in 0..n {
            tmp[i] = x[i] + half * h * k[1][i];
        }
        let d3 = rhs(&tmp, &mut k[2]);
        for i in 0..n {
            tmp[i] = x[i] + h * k[2][i];
        }
        let d4 = rhs(&tmp, &mut k[3]);
        for i in 0..n {
            x[i] += h * sixth * (k[0][i] + T::lit(2.0) * (k[1][i] + k[2][i]) + k[3][i]);
        }
        *integral += h * sixth * (d1 + T::lit(2.0) * (d2 + d3) + d4);
        steps += 1;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::PathDivergence { step: steps, context: " (deterministic flow)".into() });
        }
        Ok(())
    };
    for _ in 0..n_full {
        rk4(&mut x, &mut integral, dt)?;
    }
    if rem > T::zero() {
        rk4(&mut x, &mut integral, rem)?;
    }
    Ok(PathSample { endpoint: x, div_integral: integral, weight: (-integral).exp() })
}

/// Sample points `(x, y)` used by the certifications.
pub type SamplePoints<T> = Vec<(Vec<T>, T)>;

/// Grid nodes times mass bins taken at stride `max(1, n_mass / 8)`.
pub fn default_samples<T: Real>(grid: &SpatialGrid<T>, base: &BaseMeasure<T>) -> SamplePoints<T> {
    let stride = (base.n_mass() / 8).max(1);
    let mut bins: Vec<usize> = (0..base.n_mass()).step_by(stride).collect();
    if bins.last() != Some(&(base.n_mass() - 1)) {
        bins.push(base.n_mass() - 1);
    }
    let mut out = Vec::with_capacity(grid.n_sites() * bins.len());
    for site in 0..grid.n_sites() {
        let x = grid.coords(site);
        for &b in &bins {
            out.push((x.clone(), base.grid().mass(b)));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceReport<T> {
    pub min_div: T,
    pub arg_min: (Vec<T>, T),
    pub eps_floor: T,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EllipticityReport<T> {
    pub min_eig: T,
    pub max_eig: T,
    pub alpha: T,
    pub beta: T,
    pub pass: bool,
}

pub fn certify_divergence_bound<T: Real>(model: &DynamicsModel<T>, samples: &[(Vec<T>, T)]) -> Result<DivergenceReport<T>> {
    let mut best: Option<(T, usize)> = None;
    for (i, (x, y)) in samples.iter().enumerate() {
        let d = model.div_at(x, *y);
        if best.is_none_or(|(b, _)| d < b) {
            best = Some((d, i));
        }
    }
    let (min_div, i) = best.ok_or_else(|| Error::Precondition("empty certification sample set".into()))?;
    let pass = model.eps_floor > T::zero() && min_div >= model.eps_floor - T::lit(CERT_TOL);
    Ok(DivergenceReport { min_div, arg_min: samples[i].clone(), eps_floor: model.eps_floor, pass })
}

/// Eigenvalues of `a = sigma sigma^T` over the samples, checked against `[alpha, beta]`.
pub fn certify_ellipticity<T: Real>(model: &DynamicsModel<T>, samples: &[(Vec<T>, T)]) -> Result<EllipticityReport<T>> {
    if samples.is_empty() {
        return Err(Error::Precondition("empty certification sample set".into()));
    }
    let n = model.dim;
    let mut sigma = vec![T::zero(); n * n];
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (x, y) in samples {
        model.sigma_at(x, *y, &mut sigma);
        let s = DMatrix::from_row_iterator(n, n, sigma.iter().map(|v| v.as_f64()));
        let a = &s * s.transpose();
        let eig = SymmetricEigen::new(a).eigenvalues;
        for &e in eig.iter() {
            lo = lo.min(e);
            hi = hi.max(e);
        }
    }
    let (alpha, beta) = model.ellipticity;
    let tol = CERT_TOL;
    let pass = alpha > T::zero() && lo >= alpha.as_f64() - tol && hi <= beta.as_f64() + tol;
    Ok(EllipticityReport { min_eig: T::lit(lo), max_eig: T::lit(hi), alpha, beta, pass })
}

/// JSON form of a dynamics model; the dimension comes from the spatial grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound(deserialize = "T: Deserialize<'de> + Default"))]
pub struct DynamicsSpec<T> {
    pub sigma: SigmaFamily<T>,
    pub drift: DriftFamily<T>,
    pub eps_floor: T,
    pub ellipticity: [T; 2],
    #[serde(default)]
    pub quadrature: DivQuadrature,
}

impl<T: Real> DynamicsSpec<T> {
    pub fn build(&self, dim: usize) -> Result<DynamicsModel<T>> {
        Ok(DynamicsModel::new(
            dim,
            self.sigma.clone(),
            self.drift.clone(),
            self.eps_floor,
            (self.ellipticity[0], self.ellipticity[1]),
        )?
        .with_quadrature(self.quadrature))
    }
}
