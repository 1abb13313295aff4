//! Monte Carlo estimation of the weighted transport semigroup
//!
//! `(P_t f)(x; y) = E[ exp(-int_0^t div b(phi_s(x, y), y) ds) f(phi_t(x, y); y) ]`
//!
//! acting on densities, plus a Gaussian quadrature adapter for linear drift
//! with constant diffusion that serves as an independent oracle.
//!
//! Each `(site, mass, path)` triple owns a counter-keyed random stream and
//! every (site, mass) average is accumulated in path order, so outputs are
//! bit-identical for any thread count.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{simulate_path, simulate_path_checkpoints, DynamicsModel, PathSample, CERT_TOL};
use crate::error::{Error, Result};
use crate::kernel_field::{KernelField, SpatialGrid};
use crate::mass_measure::BaseMeasure;
use crate::rng::{path_stream, GaussianStream, NoNoise};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig<T> {
    pub n_paths: usize,
    pub dt: T,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub antithetic: bool,
}

impl<T: Real> McConfig<T> {
    pub fn new(n_paths: usize, dt: T, seed: u64) -> Self {
        Self { n_paths, dt, seed, antithetic: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_paths == 0 {
            return Err(Error::Config("n_paths must be >= 1".into()));
        }
        if !(self.dt > T::zero()) {
            return Err(Error::Config(format!("path step dt must be positive, got {}", self.dt)));
        }
        if self.antithetic && !self.n_paths.is_multiple_of(2) {
            return Err(Error::Config("antithetic sampling needs an even n_paths".into()));
        }
        Ok(())
    }

    /// Paths actually simulated per (site, mass): one when the dynamics carry no noise.
    pub fn effective_paths(&self, model: &DynamicsModel<T>) -> usize {
        if model.is_deterministic() {
            1
        } else {
            self.n_paths
        }
    }
}

fn with_context(e: Error, site: usize, mass: usize) -> Error {
    match e {
        Error::PathDivergence { step, .. } => {
            Error::PathDivergence { step, context: format!(" (site {site}, mass bin {mass})") }
        }
        other => other,
    }
}

/// Runs path `p` of a (site, mass) pair, honouring antithetic pairing.
fn run_path<T: Real>(
    model: &DynamicsModel<T>,
    x0: &[T],
    y: T,
    t: T,
    cfg: &McConfig<T>,
    site: usize,
    mass: usize,
    p: usize,
) -> Result<PathSample<T>> {
    if model.is_deterministic() {
        return simulate_path(model, x0, y, t, cfg.dt, &mut NoNoise);
    }
    let (unit, negate) = if cfg.antithetic { (p / 2, p % 2 == 1) } else { (p, false) };
    let rng = path_stream(cfg.seed, site, mass, unit);
    let mut normals = if negate { GaussianStream::antithetic(rng) } else { GaussianStream::new(rng) };
    simulate_path(model, x0, y, t, cfg.dt, &mut normals)
}

/// Per-node mean, standard error and the largest Feynman-Kac weight seen.
#[derive(Debug, Clone, PartialEq)]
pub struct SemigroupEstimate<T> {
    pub field: KernelField<T>,
    pub std_err: Vec<T>,
    pub max_weight: T,
}

impl<T: Real> SemigroupEstimate<T> {
    pub fn std_err_at(&self, site: usize, mass: usize) -> T {
        self.std_err[site * self.field.n_mass() + mass]
    }
}

fn mean_and_se<T: Real>(values: &[T], antithetic: bool) -> (T, T) {
    let units: Vec<T> = if antithetic {
        values.chunks(2).map(|c| c.iter().copied().sum::<T>() / T::from_usize_lossy(c.len())).collect()
    } else {
        values.to_vec()
    };
    let n = T::from_usize_lossy(values.len());
    let mean = values.iter().copied().sum::<T>() / n;
    if units.len() < 2 {
        return (mean, T::zero());
    }
    let k = T::from_usize_lossy(units.len());
    let unit_mean = units.iter().copied().sum::<T>() / k;
    let var = units.iter().map(|&v| (v - unit_mean) * (v - unit_mean)).sum::<T>() / (k - T::one());
    (mean, (var / k).sqrt())
}

/// Estimator for a single (site, mass) node.
pub fn estimate_node<T: Real>(
    model: &DynamicsModel<T>,
    field: &KernelField<T>,
    t: T,
    cfg: &McConfig<T>,
    site: usize,
    mass: usize,
) -> Result<(T, T, T)> {
    let grid = field.grid();
    let x0 = grid.coords(site);
    let y = field.base().grid().mass(mass);
    let n = cfg.effective_paths(model);
    let mut values = Vec::with_capacity(n);
    let mut max_weight = T::zero();
    for p in 0..n {
        let s = run_path(model, &x0, y, t, cfg, site, mass, p).map_err(|e| with_context(e, site, mass))?;
        let stencil = grid.stencil(&s.endpoint)?;
        values.push(s.weight * field.eval_stencil(&stencil, mass));
        max_weight = max_weight.max(s.weight);
    }
    let (mean, se) = mean_and_se(&values, cfg.antithetic && n > 1);
    Ok((mean, se, max_weight))
}

fn check_model<T: Real>(model: &DynamicsModel<T>, field: &KernelField<T>, t: T, cfg: &McConfig<T>) -> Result<()> {
    cfg.validate()?;
    if model.dim != field.grid().dim {
        return Err(Error::Shape(format!("{}-d model on a {}-d field", model.dim, field.grid().dim)));
    }
    if !(t >= T::zero()) || !t.is_finite() {
        return Err(Error::Config(format!("semigroup time must be >= 0, got {t}")));
    }
    Ok(())
}

/// Monte Carlo estimate of `P_t field` with per-node standard errors.
pub fn apply_semigroup_with_stats<T: Real>(
    model: &DynamicsModel<T>,
    field: &KernelField<T>,
    t: T,
    cfg: &McConfig<T>,
) -> Result<SemigroupEstimate<T>> {
    check_model(model, field, t, cfg)?;
    if t == T::zero() {
        return Ok(SemigroupEstimate {
            field: field.clone(),
            std_err: vec![T::zero(); field.values().len()],
            max_weight: T::one(),
        });
    }
    let n_mass = field.n_mass();
    let rows: Vec<Vec<(T, T, T)>> = (0..field.n_sites())
        .into_par_iter()
        .map(|site| (0..n_mass).map(|m| estimate_node(model, field, t, cfg, site, m)).collect())
        .collect::<Result<_>>()?;
    let mut values = Vec::with_capacity(field.values().len());
    let mut std_err = Vec::with_capacity(field.values().len());
    let mut max_weight = T::zero();
    for (mean, se, w) in rows.into_iter().flatten() {
        values.push(mean);
        std_err.push(se);
        max_weight = max_weight.max(w);
    }
    if cfg!(debug_assertions) && model.divergence_certified {
        let bound = (-(model.eps_floor - T::lit(CERT_TOL)) * t).exp() * T::lit(1.0 + 1e-12);
        debug_assert!(max_weight <= bound, "path weight {max_weight} exceeds exp(-eps t) = {bound}");
    }
    let field = KernelField::from_values(field.grid().clone(), field.base().clone(), values)?;
    Ok(SemigroupEstimate { field, std_err, max_weight })
}

/// Monte Carlo estimate of `P_t field`; `t = 0` returns the field unchanged.
pub fn apply_semigroup<T: Real>(model: &DynamicsModel<T>, field: &KernelField<T>, t: T, cfg: &McConfig<T>) -> Result<KernelField<T>> {
    Ok(apply_semigroup_with_stats(model, field, t, cfg)?.field)
}

/// `P_t` frozen into a sparse linear map under a fixed random-number schedule.
///
/// Row `(site, mass)` lists `(source site, coefficient)` pairs so that
/// `(P_t f)(site, mass) = sum coefficient * f(source site, mass)`.
#[derive(Debug, Clone)]
pub struct TransportOperator<T> {
    duration: T,
    n_sites: usize,
    n_mass: usize,
    row_start: Vec<usize>,
    cols: Vec<u32>,
    coefs: Vec<T>,
}

impl<T: Real> TransportOperator<T> {
    pub fn duration(&self) -> T {
        self.duration
    }

    pub fn n_entries(&self) -> usize {
        self.coefs.len()
    }

    fn row_sum(&self, row: usize, values: &[T], mass: usize) -> T {
        let mut acc = T::zero();
        for e in self.row_start[row]..self.row_start[row + 1] {
            acc += self.coefs[e] * values[self.cols[e] as usize * self.n_mass + mass];
        }
        acc
    }

    /// `out += alpha * P f`.
    pub fn apply_add(&self, f: &KernelField<T>, alpha: T, out: &mut KernelField<T>) -> Result<()> {
        if f.n_sites() != self.n_sites || f.n_mass() != self.n_mass || !f.same_shape(out) {
            return Err(Error::Shape("transport operator applied to a field of the wrong shape".into()));
        }
        let values = f.values();
        let n_mass = self.n_mass;
        out.values_mut()
            .par_chunks_mut(n_mass)
            .enumerate()
            .for_each(|(site, slot)| {
                for (m, v) in slot.iter_mut().enumerate() {
                    *v += alpha * self.row_sum(site * n_mass + m, values, m);
                }
            });
        Ok(())
    }

    pub fn apply(&self, f: &KernelField<T>) -> Result<KernelField<T>> {
        let mut out = KernelField::zeros(f.grid().clone(), f.base().clone());
        if f.n_sites() != self.n_sites || f.n_mass() != self.n_mass {
            return Err(Error::Shape("transport operator applied to a field of the wrong shape".into()));
        }
        let values = f.values();
        let n_mass = self.n_mass;
        out.values_mut()
            .par_chunks_mut(n_mass)
            .enumerate()
            .for_each(|(site, slot)| {
                for (m, v) in slot.iter_mut().enumerate() {
                    *v = self.row_sum(site * n_mass + m, values, m);
                }
            });
        Ok(out)
    }
}

/// Transport operators for durations `k * step`, `k = 1..=n_steps`.
///
/// One path per (site, mass, path) is simulated to the last checkpoint and
/// observed at every multiple of `step`, so all durations share the same
/// Brownian increments. When `step` is a whole number of `cfg.dt` steps each
/// operator reproduces [`apply_semigroup`] up to summation order.
#[derive(Debug, Clone)]
pub struct TransportCache<T> {
    step: T,
    operators: Vec<TransportOperator<T>>,
}

impl<T: Real> TransportCache<T> {
    pub fn build(
        model: &DynamicsModel<T>,
        grid: &Arc<SpatialGrid<T>>,
        base: &Arc<BaseMeasure<T>>,
        step: T,
        n_steps: usize,
        cfg: &McConfig<T>,
    ) -> Result<Self> {
        cfg.validate()?;
        if model.dim != grid.dim {
            return Err(Error::Shape(format!("{}-d model on a {}-d grid", model.dim, grid.dim)));
        }
        if !(step > T::zero()) {
            return Err(Error::Config(format!("transport step must be positive, got {step}")));
        }
        let n_mass = base.n_mass();
        let n_sites = grid.n_sites();
        let checkpoints: Vec<T> = (1..=n_steps).map(|k| T::from_usize_lossy(k) * step).collect();
        let n_paths = cfg.effective_paths(model);
        let inv_n = T::one() / T::from_usize_lossy(n_paths);

        // rows[site][mass][k] = merged (col, coef) list
        let rows: Vec<Vec<Vec<Vec<(u32, T)>>>> = (0..n_sites)
            .into_par_iter()
            .map(|site| -> Result<Vec<Vec<Vec<(u32, T)>>>> {
                let x0 = grid.coords(site);
                let mut per_mass = Vec::with_capacity(n_mass);
                for m in 0..n_mass {
                    let y = base.grid().mass(m);
                    let mut raw: Vec<Vec<(u32, T)>> = vec![Vec::new(); n_steps];
                    let mut failure = None;
                    for p in 0..n_paths {
                        let mut observe = |k: usize, s: &PathSample<T>| match grid.stencil(&s.endpoint) {
                            Ok(st) => {
                                for (c, w) in st {
                                    if w != T::zero() {
                                        raw[k].push((c as u32, s.weight * w * inv_n));
                                    }
                                }
                            }
                            Err(e) => failure = Some(e),
                        };
                        let res = if model.is_deterministic() {
                            simulate_path_checkpoints(model, &x0, y, &checkpoints, cfg.dt, &mut NoNoise, &mut observe)
                        } else {
                            let (unit, negate) = if cfg.antithetic { (p / 2, p % 2 == 1) } else { (p, false) };
                            let rng = path_stream(cfg.seed, site, m, unit);
                            let mut normals =
                                if negate { GaussianStream::antithetic(rng) } else { GaussianStream::new(rng) };
                            simulate_path_checkpoints(model, &x0, y, &checkpoints, cfg.dt, &mut normals, &mut observe)
                        };
                        res.map_err(|e| with_context(e, site, m))?;
                        if let Some(e) = failure.take() {
                            return Err(e);
                        }
                    }
                    per_mass.push(raw.into_iter().map(merge_entries).collect());
                }
                Ok(per_mass)
            })
            .collect::<Result<_>>()?;

        let mut operators = Vec::with_capacity(n_steps);
        for k in 0..n_steps {
            let mut row_start = Vec::with_capacity(n_sites * n_mass + 1);
            let mut cols = Vec::new();
            let mut coefs = Vec::new();
            row_start.push(0);
            for site_rows in &rows {
                for mass_rows in site_rows {
                    for &(c, w) in &mass_rows[k] {
                        cols.push(c);
                        coefs.push(w);
                    }
                    row_start.push(cols.len());
                }
            }
            operators.push(TransportOperator { duration: checkpoints[k], n_sites, n_mass, row_start, cols, coefs });
        }
        Ok(Self { step, operators })
    }

    pub fn step(&self) -> T {
        self.step
    }

    pub fn len(&self) -> usize {
        self.operators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.operators.is_empty()
    }

    /// Operator for duration `k * step`, `k >= 1`.
    pub fn operator(&self, k: usize) -> Result<&TransportOperator<T>> {
        k.checked_sub(1)
            .and_then(|i| self.operators.get(i))
            .ok_or_else(|| Error::Config(format!("no cached transport operator for {k} steps")))
    }
}

/// Sorts by source site and sums duplicates in that order.
fn merge_entries<T: Real>(mut raw: Vec<(u32, T)>) -> Vec<(u32, T)> {
    raw.sort_by_key(|&(c, _)| c);
    let mut out: Vec<(u32, T)> = Vec::with_capacity(raw.len().min(64));
    for (c, w) in raw {
        match out.last_mut() {
            Some((last, acc)) if *last == c => *acc += w,
            _ => out.push((c, w)),
        }
    }
    out
}

/// Physicists' Gauss-Hermite nodes and weights (Golub-Welsch).
pub fn gauss_hermite(order: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jacobi = DMatrix::<f64>::zeros(order, order);
    for k in 1..order {
        let off = (k as f64 / 2.0).sqrt();
        jacobi[(k - 1, k)] = off;
        jacobi[(k, k - 1)] = off;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..order)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], std::f64::consts::PI.sqrt() * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Mean map `x -> e^{At} x + v_t` and covariance of `X_t` for `dX = (AX + c) dt + sigma dB`.
pub fn linear_gaussian_law(a: &DMatrix<f64>, c: &DVector<f64>, sigma: &DMatrix<f64>, t: f64) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut aug = DMatrix::<f64>::zeros(n + 1, n + 1);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a * t));
    aug.view_mut((0, n), (n, 1)).copy_from(&(c * t));
    let e = aug.exp();
    let propagator = e.view((0, 0), (n, n)).into_owned();
    let shift = e.view((0, n), (n, 1)).column(0).into_owned();

    let q = sigma * sigma.transpose();
    let mut van_loan = DMatrix::<f64>::zeros(2 * n, 2 * n);
    van_loan.view_mut((0, 0), (n, n)).copy_from(&(-a * t));
    van_loan.view_mut((0, n), (n, n)).copy_from(&(&q * t));
    van_loan.view_mut((n, n), (n, n)).copy_from(&(a.transpose() * t));
    let ev = van_loan.exp();
    let e12 = ev.view((0, n), (n, n)).into_owned();
    let e22 = ev.view((n, n), (n, n)).into_owned();
    let cov = e22.transpose() * e12;
    let cov = (&cov + cov.transpose()) * 0.5;
    (propagator, shift, cov)
}

/// Exact-law adapter for linear drift and constant sigma, by tensor Gauss-Hermite quadrature.
pub fn analytic_semigroup_linear<T: Real>(
    model: &DynamicsModel<T>,
    field: &KernelField<T>,
    t: T,
    quadrature_order: usize,
) -> Result<KernelField<T>> {
    let (a, c, sigma) = model
        .linear_constant_parts()
        .ok_or_else(|| Error::Misuse("analytic adapter needs linear drift and constant sigma".into()))?;
    if model.dim != field.grid().dim {
        return Err(Error::Shape(format!("{}-d model on a {}-d field", model.dim, field.grid().dim)));
    }
    if quadrature_order == 0 {
        return Err(Error::Config("quadrature order must be >= 1".into()));
    }
    if t == T::zero() {
        return Ok(field.clone());
    }
    let n = model.dim;
    let a = DMatrix::from_fn(n, n, |i, j| a[i][j].as_f64());
    let c = DVector::from_fn(n, |i, _| c[i].as_f64());
    let sigma = DMatrix::from_fn(n, n, |i, j| sigma[i][j].as_f64());
    let tf = t.as_f64();
    let (propagator, shift, cov) = linear_gaussian_law(&a, &c, &sigma, tf);
    let eig = SymmetricEigen::new(cov);
    let mut root = eig.eigenvectors.clone();
    for j in 0..n {
        let s = eig.eigenvalues[j].max(0.0).sqrt();
        for i in 0..n {
            root[(i, j)] *= s;
        }
    }
    let weight = (-tf * a.trace()).exp();
    let (nodes, weights) = gauss_hermite(quadrature_order);
    let norm = std::f64::consts::PI.powf(-(n as f64) / 2.0);
    let total = quadrature_order.pow(n as u32);

    let grid = field.grid().clone();
    let n_mass = field.n_mass();
    let rows: Vec<Vec<T>> = (0..grid.n_sites())
        .into_par_iter()
        .map(|site| -> Result<Vec<T>> {
            let x = grid.coords(site);
            let x = DVector::from_fn(n, |i, _| x[i].as_f64());
            let mean = &propagator * x + &shift;
            let mut acc = vec![0.0f64; n_mass];
            let mut point = vec![T::zero(); n];
            for code in 0..total {
                let mut rest = code;
                let mut z = DVector::<f64>::zeros(n);
                let mut w = norm;
                for i in 0..n {
                    let k = rest % quadrature_order;
                    rest /= quadrature_order;
                    z[i] = std::f64::consts::SQRT_2 * nodes[k];
                    w *= weights[k];
                }
                let p = &mean + &root * z;
                for i in 0..n {
                    point[i] = T::lit(p[i]);
                }
                let stencil = grid.stencil(&point)?;
                for (m, slot) in acc.iter_mut().enumerate() {
                    *slot += w * field.eval_stencil(&stencil, m).as_f64();
                }
            }
            Ok(acc.into_iter().map(|v| T::lit(weight * v)).collect())
        })
        .collect::<Result<_>>()?;
    KernelField::from_values(grid, field.base().clone(), rows.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecayReport<T> {
    /// `||P_t f||`.
    pub lhs: T,
    /// `e^{-eps t} ||f||`.
    pub rhs: T,
    pub margin: T,
    /// Standard error of the estimate at the arg-max node.
    pub std_err: T,
    /// Relative allowance `3 * std_err / rhs`.
    pub tol_mc: T,
    pub max_weight: T,
    pub pass: bool,
}

/// Checks `||P_t f|| <= e^{-eps t} ||f||` allowing three standard errors at the arg-max node.
pub fn decay_check<T: Real>(model: &DynamicsModel<T>, field: &KernelField<T>, t: T, cfg: &McConfig<T>) -> Result<DecayReport<T>> {
    let rhs = (-model.eps_floor * t).exp() * field.norm();
    if field.norm() == T::zero() {
        return Ok(DecayReport {
            lhs: T::zero(),
            rhs,
            margin: T::zero(),
            std_err: T::zero(),
            tol_mc: T::zero(),
            max_weight: T::zero(),
            pass: true,
        });
    }
    let est = apply_semigroup_with_stats(model, field, t, cfg)?;
    let lhs = est.field.norm();
    let (site, mass) = est.field.arg_max();
    let std_err = est.std_err_at(site, mass);
    let tol_mc = T::lit(3.0) * std_err / rhs;
    let allowed = rhs * (T::one() + tol_mc + T::lit(1e-12));
    Ok(DecayReport { lhs, rhs, margin: allowed - lhs, std_err, tol_mc, max_weight: est.max_weight, pass: lhs <= allowed })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuityRow<T> {
    pub t: T,
    pub diff: T,
    pub envelope: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuityReport<T> {
    pub rows: Vec<ContinuityRow<T>>,
    /// Intercept of the dominating envelope `a + b sqrt(t)`.
    pub intercept: T,
    pub slope: T,
    pub pass: bool,
}

/// `||P_t f - f||` along a decreasing time sequence, with an envelope `a + b sqrt(t)` that
/// dominates every point. Passes when the envelope's intercept is negligible
/// (`<= 0.1 max diff + 1e-12`) and its slope is non-negative, i.e. the differences
/// vanish as `t -> 0` no slower than the diffusive scale.
pub fn continuity_check<T: Real>(
    model: &DynamicsModel<T>,
    field: &KernelField<T>,
    times: &[T],
    cfg: &McConfig<T>,
) -> Result<ContinuityReport<T>> {
    if times.is_empty() {
        return Err(Error::Precondition("continuity check needs at least one time".into()));
    }
    if times.windows(2).any(|w| w[1] > w[0]) || times.iter().any(|&t| t < T::zero()) {
        return Err(Error::Precondition("continuity times must be non-negative and decreasing".into()));
    }
    let mut diffs = Vec::with_capacity(times.len());
    for &t in times {
        let out = apply_semigroup(model, field, t, cfg)?;
        diffs.push(out.distance(field)?);
    }
    let s: Vec<f64> = times.iter().map(|t| t.as_f64().sqrt()).collect();
    let d: Vec<f64> = diffs.iter().map(|v| v.as_f64()).collect();
    let k = s.len() as f64;
    let (ms, md) = (s.iter().sum::<f64>() / k, d.iter().sum::<f64>() / k);
    let sxx: f64 = s.iter().map(|v| (v - ms) * (v - ms)).sum();
    let sxy: f64 = s.iter().zip(&d).map(|(a, b)| (a - ms) * (b - md)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let mut intercept = md - slope * ms;
    let lift = s.iter().zip(&d).map(|(a, b)| b - (intercept + slope * a)).fold(0.0f64, f64::max);
    intercept += lift;
    let dmax = d.iter().copied().fold(0.0f64, f64::max);
    let pass = slope >= 0.0 && intercept <= 0.1 * dmax + 1e-12;
    let rows = times
        .iter()
        .zip(&diffs)
        .zip(&s)
        .map(|((&t, &diff), &st)| ContinuityRow { t, diff, envelope: T::lit(intercept + slope * st) })
        .collect();
    Ok(ContinuityReport { rows, intercept: T::lit(intercept), slope: T::lit(slope), pass })
}
