//! Mild-equation solvers, comparison curves and the homogeneous reference integrator.
//!
//! The mild equation `mu_t = P_t mu_0 + int_0^t P_{t-s} R(mu_s) ds` is discretized on a
//! uniform grid `t_j = j * dt_quad` with left-rectangle quadrature. All transport
//! operators `P_{k dt_quad}` come from one [`TransportCache`], so every sweep sees
//! the same random numbers and sweep-to-sweep differences measure the map itself.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::DynamicsModel;
use crate::error::{Error, Result};
use crate::feynman_kac::{apply_semigroup_with_stats, McConfig, TransportCache};
use crate::kernel_field::KernelField;
use crate::mass_measure::BaseMeasure;
use crate::reaction::Reaction;
use crate::scalar::Real;

/// Largest number of horizon halvings before giving up.
pub const MAX_CONTINUATION_DEPTH: usize = 8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMode {
    #[default]
    GlobalPicard,
    StepwiseMild,
}

fn default_tol<T: Real>() -> T {
    T::lit(1e-10)
}

fn default_sweeps() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound(deserialize = "T: Deserialize<'de> + Real"))]
pub struct SolverConfig<T> {
    #[serde(default)]
    pub mode: SolverMode,
    /// Step of the time grid and of the s-quadrature.
    pub dt_quad: T,
    #[serde(default = "default_tol")]
    pub picard_tol: T,
    #[serde(default = "default_sweeps")]
    pub max_sweeps: usize,
    pub mc: McConfig<T>,
    /// Damping rate of the positivity-preserving scheme; derived from the bound curve when unset.
    #[serde(default)]
    pub positivity_alpha: Option<T>,
    /// Forces the continuation segment length (in steps) instead of the contraction estimate.
    #[serde(default)]
    pub segment_steps: Option<usize>,
}

impl<T: Real> SolverConfig<T> {
    pub fn new(dt_quad: T, mc: McConfig<T>) -> Self {
        Self {
            mode: SolverMode::GlobalPicard,
            dt_quad,
            picard_tol: default_tol(),
            max_sweeps: default_sweeps(),
            mc,
            positivity_alpha: None,
            segment_steps: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt_quad > T::zero()) {
            return Err(Error::Config(format!("dt_quad must be positive, got {}", self.dt_quad)));
        }
        if !(self.picard_tol > T::zero()) {
            return Err(Error::Config(format!("picard_tol must be positive, got {}", self.picard_tol)));
        }
        if self.max_sweeps == 0 {
            return Err(Error::Config("max_sweeps must be >= 1".into()));
        }
        if self.segment_steps == Some(0) {
            return Err(Error::Config("segment_steps must be >= 1".into()));
        }
        if let Some(a) = self.positivity_alpha {
            if !(a >= T::zero()) || !a.is_finite() {
                return Err(Error::Config(format!("positivity_alpha must be finite and >= 0, got {a}")));
            }
        }
        self.mc.validate()
    }

    /// Number of steps covering `horizon`, which must be a whole multiple of `dt_quad`.
    pub fn n_steps(&self, horizon: T) -> Result<usize> {
        let ratio = horizon / self.dt_quad;
        let n = ratio.round();
        if !(horizon >= T::zero()) || (ratio - n).abs() > T::lit(1e-9) * n.max(T::one()) {
            return Err(Error::Config(format!("horizon {horizon} is not a multiple of dt_quad {}", self.dt_quad)));
        }
        Ok(n.to_usize().unwrap_or(0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub times: Vec<T>,
    pub fields: Vec<KernelField<T>>,
}

impl<T: Real> Trajectory<T> {
    pub fn new(times: Vec<T>, fields: Vec<KernelField<T>>) -> Result<Self> {
        if times.len() != fields.len() || times.is_empty() {
            return Err(Error::Shape("trajectory needs one field per time, and at least one".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Shape("trajectory times must increase strictly".into()));
        }
        if fields.iter().any(|f| !f.same_shape(&fields[0])) {
            return Err(Error::Shape("trajectory fields must share grid and base measure".into()));
        }
        Ok(Self { times, fields })
    }

    /// Zero fields on `t_j = t0 + j * dt`, `j = 0..=n`.
    pub fn zeros_like(f: &KernelField<T>, t0: T, dt: T, n: usize) -> Self {
        let times = (0..=n).map(|j| t0 + T::from_usize_lossy(j) * dt).collect();
        let zero = KernelField::zeros(f.grid().clone(), f.base().clone());
        Self { times, fields: vec![zero; n + 1] }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn norms(&self) -> Vec<T> {
        self.fields.iter().map(|f| f.norm()).collect()
    }

    pub fn min_entry(&self) -> T {
        self.fields.iter().map(|f| f.min_entry()).fold(T::infinity(), |a, b| a.min(b))
    }

    pub fn last(&self) -> &KernelField<T> {
        self.fields.last().expect("trajectory is never empty")
    }

    /// `sup_j ||a_j - b_j||`.
    pub fn distance(&self, other: &Self) -> Result<T> {
        if self.len() != other.len() {
            return Err(Error::Shape("trajectories of different lengths".into()));
        }
        let mut d = T::zero();
        for (a, b) in self.fields.iter().zip(&other.fields) {
            d = d.max(a.distance(b)?);
        }
        Ok(d)
    }
}

/// Damping `alpha` used by the positivity-preserving scheme; zero gives the plain map.
#[derive(Debug, Clone, Copy)]
struct Damping<T> {
    alpha: T,
}

impl<T: Real> Damping<T> {
    fn decay(&self, t: T) -> T {
        if self.alpha == T::zero() {
            T::one()
        } else {
            (-self.alpha * t).exp()
        }
    }
}

/// `R(nu) + alpha nu`, checked nonnegative when damping is active.
fn bracket<T: Real>(reaction: &Reaction<T>, nu: &KernelField<T>, damping: Damping<T>) -> Result<KernelField<T>> {
    let mut r = reaction.apply_field(nu)?;
    if damping.alpha == T::zero() {
        return Ok(r);
    }
    r.add_scaled(damping.alpha, nu)?;
    let n_mass = r.n_mass();
    let scale = T::lit(1e-12) * (damping.alpha * nu.norm()).max(T::min_positive_value());
    if let Some(i) = r.values().iter().position(|&v| v < -scale) {
        return Err(Error::Config(format!(
            "positivity damping alpha = {} too small: bracket is {} at site {}, mass bin {}",
            damping.alpha,
            r.values()[i],
            i / n_mass,
            i % n_mass
        )));
    }
    Ok(r)
}

/// `P_{k dt} mu0` damped by `e^{-alpha k dt}` for `k = 0..=n`.
fn transported<T: Real>(cache: &TransportCache<T>, mu0: &KernelField<T>, n: usize, damping: Damping<T>) -> Result<Vec<KernelField<T>>> {
    let dt = cache.step();
    (0..=n)
        .into_par_iter()
        .map(|j| {
            if j == 0 {
                return Ok(mu0.clone());
            }
            let mut out = KernelField::zeros(mu0.grid().clone(), mu0.base().clone());
            cache.operator(j)?.apply_add(mu0, damping.decay(T::from_usize_lossy(j) * dt), &mut out)?;
            Ok(out)
        })
        .collect()
}

/// One application of the (optionally damped) mild map on a segment.
fn mild_map<T: Real>(
    cache: &TransportCache<T>,
    transport: &[KernelField<T>],
    current: &Trajectory<T>,
    reaction: &Reaction<T>,
    damping: Damping<T>,
) -> Result<Trajectory<T>> {
    let n = current.len() - 1;
    let dt = cache.step();
    let brackets: Vec<KernelField<T>> = current.fields[..n]
        .par_iter()
        .map(|nu| bracket(reaction, nu, damping))
        .collect::<Result<_>>()?;
    let fields: Vec<KernelField<T>> = (0..=n)
        .into_par_iter()
        .map(|j| {
            let mut out = transport[j].clone();
            for (i, b) in brackets.iter().enumerate().take(j) {
                let lag = j - i;
                let coef = dt * damping.decay(T::from_usize_lossy(lag) * dt);
                cache.operator(lag)?.apply_add(b, coef, &mut out)?;
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(Trajectory { times: current.times.clone(), fields })
}

/// `F(current)`: transport of `mu0` plus the left-rectangle reaction integral.
pub fn picard_step<T: Real>(
    current: &Trajectory<T>,
    mu0: &KernelField<T>,
    model: &DynamicsModel<T>,
    reaction: &Reaction<T>,
    cfg: &SolverConfig<T>,
) -> Result<Trajectory<T>> {
    cfg.validate()?;
    let n = current.len() - 1;
    if n == 0 {
        return Ok(Trajectory { times: current.times.clone(), fields: vec![mu0.clone()] });
    }
    let cache = TransportCache::build(model, mu0.grid(), mu0.base(), cfg.dt_quad, n, &cfg.mc)?;
    let none = Damping { alpha: T::zero() };
    let transport = transported(&cache, mu0, n, none)?;
    mild_map(&cache, &transport, current, reaction, none)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRecord<T> {
    pub segment: usize,
    pub sweep: usize,
    pub delta: T,
    /// `delta_k / delta_{k-1}`, from the second sweep on.
    pub rho: Option<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentRecord<T> {
    pub start: T,
    pub end: T,
    pub sweeps: usize,
    pub last_rho: Option<T>,
    /// `||mu - F(mu)||` re-evaluated after convergence.
    pub residual: T,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport<T> {
    pub mode: SolverMode,
    /// Contraction estimate `2 M (C/2 + m)(||mu0|| + 1)`.
    pub lipschitz_estimate: T,
    /// Segment length chosen before any halving.
    pub initial_segment: T,
    /// Number of horizon halvings performed.
    pub depth: usize,
    pub alpha: T,
    pub sweeps: Vec<SweepRecord<T>>,
    pub segments: Vec<SegmentRecord<T>>,
}

impl<T: Real> ConvergenceReport<T> {
    pub fn max_residual(&self) -> T {
        self.segments.iter().map(|s| s.residual).fold(T::zero(), |a, b| a.max(b))
    }

    /// Segment containing time `t` (the first one ending at or after it).
    pub fn segment_at(&self, t: T) -> Option<&SegmentRecord<T>> {
        let tol = T::lit(1e-9);
        self.segments.iter().find(|s| t <= s.end + tol)
    }

    /// `(sweep, delta_norm, contraction_rho)` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("segment,sweep,delta_norm,contraction_rho\n");
        for r in &self.sweeps {
            let rho = r.rho.map_or_else(|| "nan".to_string(), |v| format!("{:.16e}", v.as_f64()));
            out.push_str(&format!("{},{},{:.16e},{}\n", r.segment, r.sweep, r.delta.as_f64(), rho));
        }
        out
    }
}

fn model_constants<T: Real>(base: &BaseMeasure<T>, reaction: &Reaction<T>) -> Result<(T, T, T)> {
    let m_bound = reaction.bound_m();
    let c = if m_bound == T::zero() { base.conv_constant().unwrap_or(T::zero()) } else { base.require_constant()? };
    Ok((m_bound, c, base.total_mass()))
}

/// Default damping from the comparison curve: the worst per-bin loss rate along the bound, with 10% headroom.
pub fn default_alpha<T: Real>(mu0: &KernelField<T>, model: &DynamicsModel<T>, reaction: &Reaction<T>, horizon: T) -> Result<T> {
    if reaction.is_zero() {
        return Ok(T::zero());
    }
    let (m_bound, c, m) = model_constants(mu0.base(), reaction)?;
    let z0 = mu0.norm();
    let mode = if reaction.multi.is_some() { CurveMode::Multi } else { CurveMode::Quadratic };
    let curve = BoundCurve::new(model.eps_floor, m_bound, c, m, z0, mode);
    let zmax = curve.max_on(horizon);
    if !zmax.is_finite() {
        return Err(Error::Precondition("comparison curve blows up before the horizon; set positivity_alpha explicitly".into()));
    }
    let mut rate = m_bound * m * zmax;
    if reaction.scat.is_some() {
        rate += T::lit(2.0) * m_bound * m * zmax;
    }
    if let Some(k) = &reaction.multi {
        // K_n loss rate at a bin is at most M (m z)^{n-1} / (n-1)!
        let mut term = m * zmax;
        for order in 3..=k.n_max() {
            term = term * m * zmax / T::from_usize_lossy(order - 1);
            rate += k.bound_m() * term;
        }
    }
    if let Some(f) = &reaction.frag {
        rate += f.sup_rate();
    }
    Ok(T::lit(1.1) * rate)
}

/// Solves the mild equation on `[0, horizon]`.
pub fn solve<T: Real>(
    mu0: &KernelField<T>,
    model: &DynamicsModel<T>,
    reaction: &Reaction<T>,
    cfg: &SolverConfig<T>,
    horizon: T,
) -> Result<(Trajectory<T>, ConvergenceReport<T>)> {
    solve_damped(mu0, model, reaction, cfg, horizon, T::zero())
}

/// Solves with the damped map `e^{-alpha t} P_t mu0 + int e^{-alpha(t-s)} P_{t-s}(R(nu) + alpha nu) ds`,
/// whose iterates stay nonnegative once `alpha` dominates the loss rate.
pub fn solve_positive<T: Real>(
    mu0: &KernelField<T>,
    model: &DynamicsModel<T>,
    reaction: &Reaction<T>,
    cfg: &SolverConfig<T>,
    horizon: T,
) -> Result<(Trajectory<T>, ConvergenceReport<T>)> {
    if let Some((i, v)) = mu0.values().iter().enumerate().find(|(_, v)| **v < T::zero()) {
        return Err(Error::Precondition(format!(
            "initial data must be nonnegative, found {v} at site {}, mass bin {}",
            i / mu0.n_mass(),
            i % mu0.n_mass()
        )));
    }
    let alpha = match cfg.positivity_alpha {
        Some(a) => a,
        None => default_alpha(mu0, model, reaction, horizon)?,
    };
    solve_damped(mu0, model, reaction, cfg, horizon, alpha)
}

fn solve_damped<T: Real>(
    mu0: &KernelField<T>,
    model: &DynamicsModel<T>,
    reaction: &Reaction<T>,
    cfg: &SolverConfig<T>,
    horizon: T,
    alpha: T,
) -> Result<(Trajectory<T>, ConvergenceReport<T>)> {
    cfg.validate()?;
    reaction.validate(mu0.base())?;
    let total = cfg.n_steps(horizon)?;
    let dt = cfg.dt_quad;
    let damping = Damping { alpha };
    let (m_bound, c, m) = model_constants(mu0.base(), reaction)?;
    let lip = T::lit(2.0) * m_bound * (c / T::lit(2.0) + m) * (mu0.norm() + T::one());
    let mut seg_steps = match (cfg.mode, cfg.segment_steps) {
        (SolverMode::StepwiseMild, _) => total.max(1),
        (_, Some(s)) => s,
        (_, None) if lip == T::zero() => total.max(1),
        (_, None) => {
            let t_loc = horizon.min(T::one() / (T::lit(2.0) * lip));
            (t_loc / dt).floor().to_usize().unwrap_or(1).max(1)
        }
    }
    .min(total.max(1));
    let mut report = ConvergenceReport {
        mode: cfg.mode,
        lipschitz_estimate: lip,
        initial_segment: T::from_usize_lossy(seg_steps) * dt,
        depth: 0,
        alpha,
        sweeps: Vec::new(),
        segments: Vec::new(),
    };
    let mut times = vec![T::zero()];
    let mut fields = vec![mu0.clone()];
    if total == 0 {
        return Ok((Trajectory { times, fields }, report));
    }
    let cache = TransportCache::build(model, mu0.grid(), mu0.base(), dt, seg_steps.min(total), &cfg.mc)?;

    if cfg.mode == SolverMode::StepwiseMild {
        let step = cache.operator(1)?;
        let decay = damping.decay(dt);
        let mut cur = mu0.clone();
        for j in 0..total {
            let mut inner = cur.clone();
            inner.add_scaled(dt, &bracket(reaction, &cur, damping)?)?;
            let mut next = KernelField::zeros(mu0.grid().clone(), mu0.base().clone());
            step.apply_add(&inner, decay, &mut next)?;
            times.push(T::from_usize_lossy(j + 1) * dt);
            fields.push(next.clone());
            cur = next;
        }
        report.segments.push(SegmentRecord { start: T::zero(), end: horizon, sweeps: 0, last_rho: None, residual: T::zero() });
        return Ok((Trajectory { times, fields }, report));
    }

    let mut done = 0usize;
    let mut segment = 0usize;
    while done < total {
        let len = seg_steps.min(total - done);
        let start = T::from_usize_lossy(done) * dt;
        let start_field = fields.last().expect("non-empty").clone();
        match picard_segment(&cache, &start_field, start, len, reaction, cfg, damping, segment)? {
            SegmentOutcome::Converged { traj, sweeps, records } => {
                let residual = mild_map(&cache, &transported(&cache, &start_field, len, damping)?, &traj, reaction, damping)?.distance(&traj)?;
                let last_rho = records.last().and_then(|r| r.rho);
                report.sweeps.extend(records);
                report.segments.push(SegmentRecord {
                    start,
                    end: T::from_usize_lossy(done + len) * dt,
                    sweeps,
                    last_rho,
                    residual,
                });
                for j in 1..=len {
                    times.push(T::from_usize_lossy(done + j) * dt);
                }
                fields.extend(traj.fields.into_iter().skip(1));
                done += len;
                segment += 1;
            }
            SegmentOutcome::Stalled { rho } => {
                report.depth += 1;
                if report.depth > MAX_CONTINUATION_DEPTH || len == 1 {
                    return Err(Error::NonConvergence { rho: rho.as_f64(), depth: report.depth });
                }
                seg_steps = (len / 2).max(1);
            }
        }
    }
    Ok((Trajectory { times, fields }, report))
}

enum SegmentOutcome<T> {
    Converged { traj: Trajectory<T>, sweeps: usize, records: Vec<SweepRecord<T>> },
    Stalled { rho: T },
}

#[allow(clippy::too_many_arguments)]
fn picard_segment<T: Real>(
    cache: &TransportCache<T>,
    start_field: &KernelField<T>,
    start: T,
    len: usize,
    reaction: &Reaction<T>,
    cfg: &SolverConfig<T>,
    damping: Damping<T>,
    segment: usize,
) -> Result<SegmentOutcome<T>> {
    let dt = cache.step();
    let transport = transported(cache, start_field, len, damping)?;
    // F(0) is the transported initial data
    let times = (0..=len).map(|j| start + T::from_usize_lossy(j) * dt).collect();
    let mut current = Trajectory { times, fields: transport.clone() };
    let mut records = Vec::new();
    let mut prev_delta: Option<T> = None;
    for sweep in 1..=cfg.max_sweeps {
        let next = mild_map(cache, &transport, &current, reaction, damping)?;
        let delta = next.distance(&current)?;
        let rho = prev_delta.map(|p| if p > T::zero() { delta / p } else { T::zero() });
        records.push(SweepRecord { segment, sweep, delta, rho });
        current = next;
        if delta <= cfg.picard_tol {
            return Ok(SegmentOutcome::Converged { traj: current, sweeps: sweep, records });
        }
        if let Some(r) = rho {
            if r >= T::one() {
                return Ok(SegmentOutcome::Stalled { rho: r });
            }
        }
        prev_delta = Some(delta);
    }
    let rho = records.last().and_then(|r| r.rho).unwrap_or(T::infinity());
    Ok(SegmentOutcome::Stalled { rho })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveMode {
    #[default]
    Quadratic,
    Multi,
}

/// Scalar comparison curve dominating `||mu_t||`.
///
/// Quadratic: `z' = -eps z + M (C/2 + m) z^2`, in closed form.
/// Multi: `z' = -eps z + M (e^{Cz} - 1 - Cz) + z (e^{mz} - 1)`, by RK4.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundCurve<T> {
    pub eps: T,
    pub m_bound: T,
    pub c: T,
    pub mass: T,
    pub z0: T,
    pub mode: CurveMode,
}

/// `eps / (M (C/2 + m))`, infinite without coagulation.
pub fn global_threshold<T: Real>(eps: T, m_bound: T, c: T, mass: T) -> T {
    let a = m_bound * (c / T::lit(2.0) + mass);
    if a == T::zero() {
        T::infinity()
    } else {
        eps / a
    }
}

impl<T: Real> BoundCurve<T> {
    pub fn new(eps: T, m_bound: T, c: T, mass: T, z0: T, mode: CurveMode) -> Self {
        Self { eps, m_bound, c, mass, z0, mode }
    }

    fn coefficient(&self) -> T {
        self.m_bound * (self.c / T::lit(2.0) + self.mass)
    }

    pub fn threshold(&self) -> T {
        global_threshold(self.eps, self.m_bound, self.c, self.mass)
    }

    pub fn rhs(&self, z: T) -> T {
        match self.mode {
            CurveMode::Quadratic => -self.eps * z + self.coefficient() * z * z,
            CurveMode::Multi => {
                let cz = self.c * z;
                -self.eps * z + self.m_bound * (cz.exp_m1() - cz) + z * (self.mass * z).exp_m1()
            }
        }
    }

    /// Step used for the multi curve.
    pub fn rk4_step(&self) -> T {
        T::lit(1e-3) * T::one().min(T::one() / self.eps)
    }

    /// Blow-up time, if the curve has one (quadratic: exact; multi: first RK4 overflow).
    pub fn horizon(&self) -> Option<T> {
        let a = self.coefficient();
        match self.mode {
            CurveMode::Quadratic => {
                if self.z0 <= T::zero() || a == T::zero() {
                    return None;
                }
                let az = a * self.z0;
                if self.eps == T::zero() {
                    return Some(T::one() / az);
                }
                if az <= self.eps {
                    return None;
                }
                Some((az / (az - self.eps)).ln() / self.eps)
            }
            CurveMode::Multi => None,
        }
    }

    pub fn eval(&self, t: T) -> T {
        if self.z0 == T::zero() {
            return T::zero();
        }
        match self.mode {
            CurveMode::Quadratic => {
                if let Some(h) = self.horizon() {
                    if t >= h {
                        return T::infinity();
                    }
                }
                let a = self.coefficient();
                if self.eps == T::zero() {
                    return self.z0 / (T::one() - a * self.z0 * t);
                }
                self.eps / (a + (self.eps - a * self.z0) / self.z0 * (self.eps * t).exp())
            }
            CurveMode::Multi => self.integrate_rk4(t, self.rk4_step()),
        }
    }

    /// Classic RK4 on the curve's ODE up to `t`; infinity once it overflows.
    pub fn integrate_rk4(&self, t: T, step: T) -> T {
        let n = (t / step).ceil().to_usize().unwrap_or(0).max(1);
        let h = t / T::from_usize_lossy(n);
        let mut z = self.z0;
        let half = T::lit(0.5);
        for _ in 0..n {
            let k1 = self.rhs(z);
            let k2 = self.rhs(z + half * h * k1);
            let k3 = self.rhs(z + half * h * k2);
            let k4 = self.rhs(z + h * k3);
            z += h / T::lit(6.0) * (k1 + T::lit(2.0) * k2 + T::lit(2.0) * k3 + k4);
            if !z.is_finite() || z > T::lit(1e12) {
                return T::infinity();
            }
        }
        z
    }

    /// `max z(t)` over `[0, horizon]`, sampled at the RK4 step.
    pub fn max_on(&self, horizon: T) -> T {
        let n = (horizon / self.rk4_step()).ceil().to_usize().unwrap_or(0).clamp(1, 100_000);
        (0..=n)
            .map(|k| self.eval(horizon * T::from_usize_lossy(k) / T::from_usize_lossy(n)))
            .fold(self.z0, |a, b| a.max(b))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundRow<T> {
    pub t: T,
    pub norm: T,
    pub z: T,
    pub margin: T,
    /// False for times at or beyond the curve's blow-up, which are not compared.
    pub compared: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport<T> {
    pub rows: Vec<BoundRow<T>>,
    pub horizon: Option<T>,
    pub worst_margin: T,
    pub pass: bool,
}

impl<T: Real> BoundReport<T> {
    /// `(t, norm, z_bound, margin, pass)` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,norm,z_bound,margin,pass\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:.16e},{:.16e},{:.16e},{:.16e},{}\n",
                r.t.as_f64(),
                r.norm.as_f64(),
                r.z.as_f64(),
                r.margin.as_f64(),
                if !r.compared { "skipped" } else if r.pass { "PASS" } else { "FAIL" }
            ));
        }
        out
    }
}

/// Checks `||mu_{t_j}|| <= z(t_j)(1 + mc_margin) + allowance` at every time before blow-up.
pub fn validate_bound<T: Real>(traj: &Trajectory<T>, curve: &BoundCurve<T>, mc_margin: T, allowance: T) -> BoundReport<T> {
    let horizon = curve.horizon();
    let mut rows = Vec::with_capacity(traj.len());
    let mut worst = T::infinity();
    for (&t, f) in traj.times.iter().zip(&traj.fields) {
        let norm = f.norm();
        let z = curve.eval(t);
        let compared = z.is_finite();
        let margin = if compared { z * (T::one() + mc_margin) + allowance - norm } else { T::infinity() };
        if compared {
            worst = worst.min(margin);
        }
        rows.push(BoundRow { t, norm, z, margin, compared, pass: !compared || margin >= T::zero() });
    }
    let pass = rows.iter().all(|r| r.pass);
    BoundReport { rows, horizon, worst_margin: worst, pass }
}

/// Standard error of `P_{t_j} mu0` at its arg-max node, for each time.
pub fn transport_std_err<T: Real>(mu0: &KernelField<T>, model: &DynamicsModel<T>, mc: &McConfig<T>, times: &[T]) -> Result<Vec<T>> {
    times
        .iter()
        .map(|&t| {
            let est = apply_semigroup_with_stats(model, mu0, t, mc)?;
            let (s, m) = est.field.arg_max();
            Ok(est.std_err_at(s, m))
        })
        .collect()
}

/// RK4 trajectory of the spatially homogeneous system `c' = R(c)`.
pub fn reference_homogeneous_solve<T: Real>(
    c0: &[T],
    reaction: &Reaction<T>,
    base: &Arc<BaseMeasure<T>>,
    horizon: T,
    dt: T,
) -> Result<(Vec<T>, Vec<Vec<T>>)> {
    if !(dt > T::zero()) || !(horizon >= T::zero()) {
        return Err(Error::Config(format!("need dt > 0 and horizon >= 0, got {dt} and {horizon}")));
    }
    reaction.validate(base)?;
    let n = (horizon / dt - T::lit(1e-9)).ceil().to_usize().unwrap_or(0);
    let h = if n == 0 { T::zero() } else { horizon / T::from_usize_lossy(n) };
    let rhs = |c: &[T]| reaction.apply_density(c, base);
    let axpy = |c: &[T], a: T, k: &[T]| -> Vec<T> { c.iter().zip(k).map(|(&x, &y)| x + a * y).collect() };
    let half = T::lit(0.5);
    let mut times = vec![T::zero()];
    let mut states = vec![c0.to_vec()];
    let mut c = c0.to_vec();
    for step in 0..n {
        let k1 = rhs(&c)?;
        let k2 = rhs(&axpy(&c, half * h, &k1))?;
        let k3 = rhs(&axpy(&c, half * h, &k2))?;
        let k4 = rhs(&axpy(&c, h, &k3))?;
        for b in 0..c.len() {
            c[b] += h / T::lit(6.0) * (k1[b] + T::lit(2.0) * (k2[b] + k3[b]) + k4[b]);
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::Unstable(format!("homogeneous RK4 diverged at step {}; reduce dt", step + 1)));
        }
        times.push(T::from_usize_lossy(step + 1) * h);
        states.push(c.clone());
    }
    Ok((times, states))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{DriftFamily, SigmaFamily};
    use crate::kernel_field::{ExtensionPolicy, SpatialGrid};
    use crate::mass_measure::{make_power_law_base, MassGrid};
    use crate::reaction::{CoagKernel, Overflow};
    use crate::rng::aux_stream;
    use rand::Rng;

    fn still(dim: usize) -> DynamicsModel<f64> {
        DynamicsModel::new(dim, SigmaFamily::Zero, DriftFamily::Zero, 0.0, (0.0, 0.0)).unwrap()
    }

    fn radial(eps: f64) -> DynamicsModel<f64> {
        DynamicsModel::new(1, SigmaFamily::Isotropic { scale: 0.3 }, DriftFamily::Radial { eps, center: vec![0.5] }, eps, (0.09, 0.09)).unwrap()
    }

    fn setup(n_x: usize, n_mass: usize) -> (Arc<SpatialGrid<f64>>, Arc<BaseMeasure<f64>>) {
        (
            Arc::new(SpatialGrid::cube(1, 1.0, n_x, ExtensionPolicy::Clamp).unwrap()),
            Arc::new(make_power_law_base(n_mass, 2.0).unwrap().certify().unwrap()),
        )
    }

    fn random_mu0(g: &Arc<SpatialGrid<f64>>, b: &Arc<BaseMeasure<f64>>, scale: f64, seed: u64) -> KernelField<f64> {
        let mut rng = aux_stream(seed, 7);
        KernelField::from_fn(g.clone(), b.clone(), |_, _| scale * rng.random::<f64>()).unwrap()
    }

    #[test]
    fn quadratic_curve_example() {
        let c = BoundCurve::new(1.0, 1.0, 2.0, 1.0, 0.25, CurveMode::Quadratic);
        assert_eq!(c.threshold(), 0.5);
        for t in [0.0, 0.3, 1.0, 2.5] {
            let oracle = 1.0 / (2.0 + 2.0 * f64::exp(t));
            assert!((c.eval(t) - oracle).abs() < 1e-15);
            assert!((c.integrate_rk4(t, 1e-3) - oracle).abs() < 1e-8);
        }
        assert!((c.eval(1.0) - 0.13447).abs() < 1e-5);
        assert_eq!(BoundCurve::new(1.0, 1.0, 2.0, 1.0, 0.0, CurveMode::Quadratic).eval(3.0), 0.0);
        assert_eq!(c.horizon(), None);
    }

    #[test]
    fn curve_pole_location() {
        let c = BoundCurve::new(1.0, 1.0, 2.0, 1.0, 1.0, CurveMode::Quadratic);
        let pole = c.horizon().unwrap();
        assert!((pole - 2.0f64.ln()).abs() < 1e-15);
        assert!(c.eval(pole * 0.999) > 100.0);
        assert!(c.eval(pole).is_infinite());
        // RK4 follows the closed form up to near the pole
        assert!((c.integrate_rk4(0.5 * pole, 1e-4) - c.eval(0.5 * pole)).abs() < 1e-9);
    }

    #[test]
    fn multi_curve_bracketed() {
        let z0 = 0.01;
        let c = BoundCurve::new(1.0, 1.0, 2.0, 1.0, z0, CurveMode::Multi);
        for t in [0.5f64, 1.0, 3.0] {
            let z = c.eval(t);
            assert!(z >= (-t).exp() * z0);
            assert!(z <= z0);
        }
    }

    #[test]
    fn trivial_grid_returns_initial_data() {
        let (g, b) = setup(4, 3);
        let mu0 = random_mu0(&g, &b, 0.1, 1);
        let traj = Trajectory { times: vec![0.0], fields: vec![KernelField::zeros(g.clone(), b.clone())] };
        let cfg = SolverConfig::new(0.1, McConfig::new(4, 0.01, 0));
        let rx = Reaction::coagulation(CoagKernel::constant(3, 1.0).unwrap(), Overflow::Drop);
        let out = picard_step(&traj, &mu0, &radial(1.0), &rx, &cfg).unwrap();
        assert_eq!(out.fields, vec![mu0]);
    }

    #[test]
    fn first_step_from_zero_is_transport_and_second_adds_one_correction() {
        let (g, b) = setup(6, 3);
        let mu0 = random_mu0(&g, &b, 0.2, 2);
        let model = radial(1.0);
        let cfg = SolverConfig::new(0.1, McConfig::new(8, 0.01, 5));
        let rx = Reaction::coagulation(CoagKernel::constant(3, 1.0).unwrap(), Overflow::Drop);
        let zero = Trajectory::zeros_like(&mu0, 0.0, 0.1, 1);
        let one = picard_step(&zero, &mu0, &model, &rx, &cfg).unwrap();
        let p1 = crate::feynman_kac::apply_semigroup(&model, &mu0, 0.1, &cfg.mc).unwrap();
        assert_eq!(one.fields[0], mu0);
        assert!(one.fields[1].distance(&p1).unwrap() < 1e-15);
        // two nodes: F(nu)_1 = P_dt mu0 + dt P_dt R(nu_0)
        let two = picard_step(&one, &mu0, &model, &rx, &cfg).unwrap();
        let r0 = rx.apply_field(&mu0).unwrap();
        let pr = crate::feynman_kac::apply_semigroup(&model, &r0, 0.1, &cfg.mc).unwrap();
        let expected = KernelField::axpy(0.1, &pr, &p1).unwrap();
        assert!(two.fields[1].distance(&expected).unwrap() < 1e-15);
    }

    #[test]
    fn zero_kernel_is_pure_transport() {
        let (g, b) = setup(6, 3);
        let mu0 = random_mu0(&g, &b, 0.2, 3);
        let model = radial(1.0);
        let cfg = SolverConfig::new(0.1, McConfig::new(8, 0.01, 5));
        let rx = Reaction::coagulation(CoagKernel::constant(3, 0.0).unwrap(), Overflow::Drop);
        let (traj, report) = solve(&mu0, &model, &rx, &cfg, 0.5).unwrap();
        assert_eq!(report.segments.len(), 1);
        assert_eq!(report.segments[0].sweeps, 1);
        for (t, f) in traj.times.iter().zip(&traj.fields) {
            let p = crate::feynman_kac::apply_semigroup(&model, &mu0, *t, &cfg.mc).unwrap();
            assert!(f.distance(&p).unwrap() < 1e-14);
        }
        let (pos, _) = solve_positive(&mu0, &model, &rx, &cfg, 0.5).unwrap();
        assert_eq!(pos, traj);
    }

    #[test]
    fn homogeneous_reference_examples() {
        let base = Arc::new(BaseMeasure::new(MassGrid::new(4, 1.0).unwrap(), vec![1.0; 4]).unwrap());
        let c0 = vec![0.5, 0.0, 0.0, 0.0];
        let none = Reaction::coagulation(CoagKernel::constant(4, 0.0).unwrap(), Overflow::Drop);
        let (_, s) = reference_homogeneous_solve(&c0, &none, &base, 1.0, 0.1).unwrap();
        assert!(s.iter().all(|c| *c == c0));
        let rx = Reaction::coagulation(CoagKernel::constant(4, 1.0).unwrap(), Overflow::Drop);
        let (t, s) = reference_homogeneous_solve(&c0, &rx, &base, 1e-4, 1e-5).unwrap();
        let slope: f64 = s.last().unwrap()[1] / t.last().unwrap();
        assert!((slope - 0.125).abs() < 1e-4);
    }

    #[test]
    fn homogeneous_rk4_self_convergence() {
        let base = Arc::new(make_power_law_base::<f64>(6, 2.0).unwrap());
        let mut rng = aux_stream(11, 0);
        let k = CoagKernel::from_fn(6, |_, _| rng.random::<f64>()).unwrap();
        let rx = Reaction::coagulation(k, Overflow::AbsorbTop);
        let c0: Vec<f64> = (0..6).map(|_| rng.random()).collect();
        let end = |dt: f64| reference_homogeneous_solve(&c0, &rx, &base, 1.0, dt).unwrap().1.pop().unwrap();
        let (a, b, c) = (end(0.1), end(0.05), end(0.025));
        let e1 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let e2 = b.iter().zip(&c).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!((e1 / e2 - 16.0).abs() < 2.0, "ratio {}", e1 / e2);
    }

    #[test]
    fn stepwise_matches_homogeneous_reference() {
        let (g, b) = setup(2, 8);
        let rx = Reaction::coagulation(CoagKernel::constant(8, 1.0).unwrap(), Overflow::Drop);
        let c0: Vec<f64> = (0..8).map(|k| 0.3 / (1.0 + k as f64)).collect();
        let mu0 = KernelField::from_fn(g.clone(), b.clone(), |_, m| c0[m]).unwrap();
        let mut cfg = SolverConfig::new(1e-3, McConfig::new(1, 1e-3, 0));
        cfg.mode = SolverMode::StepwiseMild;
        let (traj, _) = solve(&mu0, &still(1), &rx, &cfg, 1.0).unwrap();
        let (_, refs) = reference_homogeneous_solve(&c0, &rx, &b, 1.0, 1e-3).unwrap();
        let last = traj.last();
        let err = (0..8).map(|m| (last.get(0, m) - refs.last().unwrap()[m]).abs()).fold(0.0, f64::max);
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn picard_matches_reference_and_contracts() {
        let (g, b) = setup(2, 6);
        let rx = Reaction::coagulation(CoagKernel::constant(6, 1.0).unwrap(), Overflow::AbsorbTop);
        let c0: Vec<f64> = (0..6).map(|k| 0.2 / (1.0 + k as f64)).collect();
        let mu0 = KernelField::from_fn(g.clone(), b.clone(), |_, m| c0[m]).unwrap();
        let cfg = SolverConfig::new(0.01, McConfig::new(1, 0.01, 0));
        let (traj, report) = solve(&mu0, &still(1), &rx, &cfg, 1.0).unwrap();
        assert!(report.max_residual() <= cfg.picard_tol);
        assert!(report.sweeps.iter().filter_map(|r| r.rho).all(|r| r < 1.0));
        let (_, refs) = reference_homogeneous_solve(&c0, &rx, &b, 1.0, 1e-3).unwrap();
        let err = (0..6).map(|m| (traj.last().get(1, m) - refs.last().unwrap()[m]).abs()).fold(0.0, f64::max);
        assert!(err < 5e-3, "{err}");
    }

    #[test]
    fn positivity_scheme_stays_nonnegative() {
        let (g, b) = setup(8, 4);
        let model = radial(1.0);
        let rx = Reaction::coagulation(CoagKernel::constant(4, 1.0).unwrap(), Overflow::Drop);
        let base = b.clone();
        let thr = global_threshold(1.0, 1.0, base.conv_constant().unwrap(), base.total_mass());
        let mu0 = random_mu0(&g, &b, 0.5 * thr, 4);
        let cfg = SolverConfig::new(0.05, McConfig::new(16, 0.01, 3));
        let (traj, report) = solve_positive(&mu0, &model, &rx, &cfg, 0.5).unwrap();
        assert!(report.alpha > 0.0);
        assert!(traj.min_entry() >= -1e-10);
        let (plain, _) = solve(&mu0, &model, &rx, &cfg, 0.5).unwrap();
        assert!(traj.distance(&plain).unwrap() < 0.05 * mu0.norm());
        let mut neg = mu0.clone();
        neg.values_mut()[0] = -1.0;
        assert!(matches!(solve_positive(&neg, &model, &rx, &cfg, 0.5), Err(Error::Precondition(_))));
        let mut tiny = cfg.clone();
        tiny.positivity_alpha = Some(1e-6);
        let spiky = random_mu0(&g, &b, 50.0, 5);
        assert!(matches!(solve_positive(&spiky, &model, &rx, &tiny, 0.05), Err(Error::Config(_))));
    }

    #[test]
    fn bound_validation_examples() {
        let (g, b) = setup(4, 3);
        let zero = KernelField::zeros(g.clone(), b.clone());
        let traj = Trajectory { times: vec![0.0, 1.0], fields: vec![zero.clone(), zero.clone()] };
        let curve = BoundCurve::new(1.0, 1.0, 2.0, 1.0, 0.0, CurveMode::Quadratic);
        assert!(validate_bound(&traj, &curve, 0.0, 0.0).pass);

        // no coagulation, constant divergence: ||mu_t|| = e^{-eps t} ||mu0|| equals the curve
        let mu0 = KernelField::constant(g.clone(), b.clone(), 0.3);
        let model = radial(0.5);
        let rx = Reaction::coagulation(CoagKernel::constant(3, 0.0).unwrap(), Overflow::Drop);
        let cfg = SolverConfig::new(0.1, McConfig::new(8, 0.01, 1));
        let (traj, _) = solve(&mu0, &model, &rx, &cfg, 1.0).unwrap();
        let curve = BoundCurve::new(0.5, 0.0, 2.0, 1.0, 0.3, CurveMode::Quadratic);
        let rep = validate_bound(&traj, &curve, 0.0, 1e-12);
        assert!(rep.pass);
        assert!(rep.worst_margin < 1e-11);

        let blow = BoundCurve::new(1.0, 1.0, 2.0, 1.0, 1.0, CurveMode::Quadratic);
        let times: Vec<f64> = (0..=10).map(|k| k as f64 * 0.1).collect();
        let fields = vec![mu0.clone(); 11];
        let rep = validate_bound(&Trajectory::new(times, fields).unwrap(), &blow, 0.0, 0.0);
        assert_eq!(rep.horizon, Some(2.0f64.ln()));
        assert!(rep.rows.iter().any(|r| !r.compared));
        assert!(rep.rows.iter().filter(|r| r.compared).all(|r| r.t < 2.0f64.ln()));
    }

    #[test]
    fn horizon_must_align_with_grid() {
        let cfg = SolverConfig::new(0.1, McConfig::new(1, 0.01, 0));
        assert_eq!(cfg.n_steps(1.0).unwrap(), 10);
        assert!(cfg.n_steps(1.05).is_err());
    }
}
