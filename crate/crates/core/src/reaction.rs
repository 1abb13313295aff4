//! Mass-space reaction operators acting sitewise on densities `f(y)` w.r.t. `nu_0`.
//!
//! Bins are indexed from 0 but carry mass numbers `1..=n_mass`; two particles in
//! bins `i` and `j` merge into mass number `i + j + 2`, i.e. bin `i + j + 1`.
//! Operators return a [`SiteReaction`] holding the gain and loss densities and
//! the measure that left the grid (so first moments can be checked on the
//! extended range).

use std::sync::Arc;

use num_rational::BigRational;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact;
use crate::kernel_field::KernelField;
use crate::mass_measure::BaseMeasure;
use crate::scalar::Real;

/// Relative tolerance of the fragmentation mass condition.
pub const MASS_CONDITION_TOL: f64 = 1e-10;

/// What happens to coagulation products heavier than the top bin.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Overflow {
    /// Discard them (recorded in [`SiteReaction::overflow`]).
    Drop,
    /// Lump them into the top bin scaled by `(i + j) / n_mass`, keeping the first moment.
    #[default]
    AbsorbTop,
    /// Pairs heavier than the kernel's `y0` do not coagulate; scattering handles them.
    Cutoff,
}

/// Gain and loss densities at one site plus the measure pushed past the top bin.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteReaction<T> {
    pub gain: Vec<T>,
    pub loss: Vec<T>,
    /// `overflow[k]` is the measure (not density) at mass number `n_mass + 1 + k`.
    pub overflow: Vec<T>,
}

impl<T: Real> SiteReaction<T> {
    pub fn zeros(n_mass: usize) -> Self {
        Self { gain: vec![T::zero(); n_mass], loss: vec![T::zero(); n_mass], overflow: Vec::new() }
    }

    pub fn net(&self) -> Vec<T> {
        self.gain.iter().zip(&self.loss).map(|(&g, &l)| g - l).collect()
    }

    fn push_overflow(&mut self, k: usize, v: T) {
        if self.overflow.len() <= k {
            self.overflow.resize(k + 1, T::zero());
        }
        self.overflow[k] += v;
    }

    pub fn accumulate(&mut self, other: &SiteReaction<T>) {
        for (a, &b) in self.gain.iter_mut().zip(&other.gain) {
            *a += b;
        }
        for (a, &b) in self.loss.iter_mut().zip(&other.loss) {
            *a += b;
        }
        for (k, &v) in other.overflow.iter().enumerate() {
            self.push_overflow(k, v);
        }
    }

    /// `sum_z z (gain - loss)_z w_z` plus the mass carried by the overflow.
    pub fn first_moment(&self, base: &BaseMeasure<T>) -> T {
        let n = base.n_mass();
        let mut acc = T::zero();
        for (b, w) in base.weights().iter().enumerate() {
            acc += base.grid().mass(b) * (self.gain[b] - self.loss[b]) * *w;
        }
        for (k, &v) in self.overflow.iter().enumerate() {
            acc += T::from_usize_lossy(n + 1 + k) * base.unit() * v;
        }
        acc
    }

    /// `sum_z (gain + loss)_z z w_z`: the scale against which the moment is compared.
    pub fn moment_scale(&self, base: &BaseMeasure<T>) -> T {
        let n = base.n_mass();
        let mut acc = T::zero();
        for (b, w) in base.weights().iter().enumerate() {
            acc += base.grid().mass(b) * (self.gain[b] + self.loss[b]) * *w;
        }
        for (k, &v) in self.overflow.iter().enumerate() {
            acc += T::from_usize_lossy(n + 1 + k) * base.unit() * v.abs();
        }
        acc
    }

    /// Total variation of the net measure, overflow included.
    pub fn total_variation(&self, base: &BaseMeasure<T>) -> T {
        let mut acc = T::zero();
        for (b, w) in base.weights().iter().enumerate() {
            acc += (self.gain[b] - self.loss[b]).abs() * *w;
        }
        acc + self.overflow.iter().map(|v| v.abs()).sum::<T>()
    }
}

fn check_density<T: Real>(f: &[T], base: &BaseMeasure<T>) -> Result<()> {
    if f.len() != base.n_mass() {
        return Err(Error::Shape(format!("density has {} bins, base measure {}", f.len(), base.n_mass())));
    }
    if let Some(b) = f.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite density at mass bin {b}")));
    }
    Ok(())
}

fn check_table<T: Real>(what: &str, rows: &[Vec<T>], n_rows: usize, n_cols: usize) -> Result<Vec<T>> {
    if rows.len() != n_rows || rows.iter().any(|r| r.len() != n_cols) {
        return Err(Error::Shape(format!("{what} must be {n_rows} x {n_cols}")));
    }
    let flat: Vec<T> = rows.iter().flatten().copied().collect();
    if let Some(v) = flat.iter().find(|v| !(v.is_finite() && **v >= T::zero())) {
        return Err(Error::Config(format!("{what} entries must be finite and nonnegative, found {v}")));
    }
    Ok(flat)
}

/// Symmetric bounded binary kernel `K(y, y')` on the mass bins.
#[derive(Debug, Clone, PartialEq)]
pub struct CoagKernel<T> {
    n: usize,
    table: Vec<T>,
    bound: T,
    cutoff_y0: Option<usize>,
}

impl<T: Real> CoagKernel<T> {
    pub fn new(table: Vec<Vec<T>>) -> Result<Self> {
        let n = table.len();
        if n == 0 {
            return Err(Error::Shape("coagulation kernel table is empty".into()));
        }
        let flat = check_table("coagulation kernel", &table, n, n)?;
        for i in 0..n {
            for j in 0..i {
                if flat[i * n + j] != flat[j * n + i] {
                    return Err(Error::Config(format!("coagulation kernel is not symmetric at ({i}, {j})")));
                }
            }
        }
        let bound = flat.iter().fold(T::zero(), |a, &b| a.max(b));
        Ok(Self { n, table: flat, bound, cutoff_y0: None })
    }

    pub fn constant(n: usize, value: T) -> Result<Self> {
        Self::new(vec![vec![value; n]; n])
    }

    /// Builds the table from `k(i, j)` for `i <= j` and mirrors it.
    pub fn from_fn(n: usize, mut k: impl FnMut(usize, usize) -> T) -> Result<Self> {
        let mut table = vec![vec![T::zero(); n]; n];
        for i in 0..n {
            for j in i..n {
                let v = k(i, j);
                table[i][j] = v;
                table[j][i] = v;
            }
        }
        Self::new(table)
    }

    /// Restricts coagulation to products of mass number `<= y0` (use with [`Overflow::Cutoff`]).
    pub fn with_cutoff(mut self, y0: usize) -> Result<Self> {
        if y0 == 0 || y0 > self.n {
            return Err(Error::Config(format!("cutoff y0 must lie in 1..={}, got {y0}", self.n)));
        }
        self.cutoff_y0 = Some(y0);
        Ok(self)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.table[i * self.n + j]
    }

    /// `M`, the largest entry.
    pub fn bound_m(&self) -> T {
        self.bound
    }

    pub fn n_mass(&self) -> usize {
        self.n
    }

    pub fn cutoff_y0(&self) -> Option<usize> {
        self.cutoff_y0
    }

    pub fn is_zero(&self) -> bool {
        self.bound == T::zero()
    }
}

/// Binary coagulation `K+(f, f) - K-(f, f)` at one site.
pub fn coag_apply<T: Real>(kernel: &CoagKernel<T>, f: &[T], base: &BaseMeasure<T>, overflow: Overflow) -> Result<SiteReaction<T>> {
    check_density(f, base)?;
    let n = base.n_mass();
    if kernel.n != n {
        return Err(Error::Shape(format!("kernel has {} bins, base measure {n}", kernel.n)));
    }
    let limit = match overflow {
        Overflow::Cutoff => kernel
            .cutoff_y0
            .ok_or_else(|| Error::Config("cutoff overflow needs a kernel with cutoff_y0".into()))?,
        _ => usize::MAX,
    };
    let w = base.weights();
    let half = T::lit(0.5);
    let mut out = SiteReaction::zeros(n);
    for i in 0..n {
        if f[i] == T::zero() {
            continue;
        }
        let gi = f[i] * w[i];
        for j in 0..n {
            let s = i + j + 2;
            if s > limit {
                continue;
            }
            let k = kernel.get(i, j);
            let gj = f[j] * w[j];
            out.loss[i] += k * f[i] * gj;
            let rate = half * k * gi * gj;
            if s <= n {
                out.gain[s - 1] += rate / w[s - 1];
            } else {
                match overflow {
                    Overflow::AbsorbTop => {
                        out.gain[n - 1] += rate * T::from_usize_lossy(s) / T::from_usize_lossy(n) / w[n - 1];
                    }
                    _ => out.push_overflow(s - n - 1, rate),
                }
            }
        }
    }
    Ok(out)
}

/// Both sides of the total-variation Lipschitz estimate for coagulation.
#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzReport<T> {
    /// `|K(f, f) - K(g, g)|_TV`, overflow measure included.
    pub lhs: T,
    /// `M (|f|_TV + |g|_TV) |f - g|_TV`.
    pub rhs: T,
    /// The same right side with constant `3M/2`, which the gain/loss split always achieves.
    pub rhs_sharp: T,
    pub pass: bool,
    pub pass_sharp: bool,
}

fn tv<T: Real>(f: &[T], base: &BaseMeasure<T>) -> T {
    f.iter().zip(base.weights()).map(|(v, w)| v.abs() * *w).sum()
}

/// Evaluates the Lipschitz estimate for the untruncated operator (no cutoff, products kept off-grid).
pub fn coag_tv_lipschitz_check<T: Real>(kernel: &CoagKernel<T>, f: &[T], g: &[T], base: &BaseMeasure<T>) -> Result<LipschitzReport<T>> {
    let kf = coag_apply(kernel, f, base, Overflow::Drop)?;
    let kg = coag_apply(kernel, g, base, Overflow::Drop)?;
    let mut diff = SiteReaction::zeros(base.n_mass());
    for b in 0..base.n_mass() {
        diff.gain[b] = kf.gain[b] - kg.gain[b];
        diff.loss[b] = kf.loss[b] - kg.loss[b];
    }
    let len = kf.overflow.len().max(kg.overflow.len());
    diff.overflow = (0..len)
        .map(|k| kf.overflow.get(k).copied().unwrap_or(T::zero()) - kg.overflow.get(k).copied().unwrap_or(T::zero()))
        .collect();
    let lhs = diff.total_variation(base);
    let fg: Vec<T> = f.iter().zip(g).map(|(&a, &b)| a - b).collect();
    let rhs = kernel.bound_m() * (tv(f, base) + tv(g, base)) * tv(&fg, base);
    let rhs_sharp = T::lit(1.5) * rhs;
    let slack = T::one() + T::lit(1e-9);
    Ok(LipschitzReport { lhs, rhs, rhs_sharp, pass: lhs <= rhs * slack, pass_sharp: lhs <= rhs_sharp * slack })
}

/// One order `K_n` of the multiple-coagulation family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum NaryKernel<T> {
    Constant { value: T },
    /// `K_n(y_1..y_n) = scale * prod phi(y_i)`.
    Separable { scale: T, factors: Vec<T> },
    /// Dense table; only allowed for `n = 2`.
    Table { table: Vec<Vec<T>> },
}

impl<T: Real> NaryKernel<T> {
    fn sup(&self, order: usize) -> T {
        match self {
            NaryKernel::Constant { value } => *value,
            NaryKernel::Separable { scale, factors } => {
                *scale * factors.iter().fold(T::zero(), |a, &b| a.max(b)).powi(order as i32)
            }
            NaryKernel::Table { table } => table.iter().flatten().fold(T::zero(), |a, &b| a.max(b)),
        }
    }

    fn factors(&self, n: usize) -> (T, Vec<T>) {
        match self {
            NaryKernel::Constant { value } => (*value, vec![T::one(); n]),
            NaryKernel::Separable { scale, factors } => (*scale, factors.clone()),
            NaryKernel::Table { .. } => unreachable!("tables are rejected for orders >= 3"),
        }
    }
}

/// Kernels `K_2, ..., K_{n_max}` sharing the bound `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiCoagKernel<T> {
    n_mass: usize,
    binary: CoagKernel<T>,
    /// `(scale, phi)` for orders 3, 4, ...
    higher: Vec<(T, Vec<T>)>,
    bound: T,
}

impl<T: Real> MultiCoagKernel<T> {
    /// `orders[0]` is `K_2`, `orders[1]` is `K_3`, and so on.
    pub fn new(n_mass: usize, orders: Vec<NaryKernel<T>>) -> Result<Self> {
        if orders.is_empty() {
            return Err(Error::Config("multiple coagulation needs at least K_2".into()));
        }
        let mut bound = T::zero();
        for (idx, k) in orders.iter().enumerate() {
            let order = idx + 2;
            match k {
                NaryKernel::Table { .. } if order >= 3 => {
                    return Err(Error::Unsupported(format!("K_{order} must be constant or separable, not a table")));
                }
                NaryKernel::Separable { factors, .. } if factors.len() != n_mass => {
                    return Err(Error::Shape(format!("K_{order} factors need {n_mass} entries")));
                }
                _ => {}
            }
            let (scale_ok, factors_ok) = match k {
                NaryKernel::Constant { value } => (value.is_finite() && *value >= T::zero(), true),
                NaryKernel::Separable { scale, factors } => {
                    (scale.is_finite() && *scale >= T::zero(), factors.iter().all(|v| v.is_finite() && *v >= T::zero()))
                }
                NaryKernel::Table { .. } => (true, true),
            };
            if !scale_ok || !factors_ok {
                return Err(Error::Config(format!("K_{order} must be finite and nonnegative")));
            }
            bound = bound.max(k.sup(order));
        }
        let binary = match &orders[0] {
            NaryKernel::Table { table } => CoagKernel::new(table.clone())?,
            NaryKernel::Constant { value } => CoagKernel::constant(n_mass, *value)?,
            NaryKernel::Separable { scale, factors } => CoagKernel::from_fn(n_mass, |i, j| *scale * factors[i] * factors[j])?,
        };
        if binary.n_mass() != n_mass {
            return Err(Error::Shape(format!("K_2 has {} bins, expected {n_mass}", binary.n_mass())));
        }
        let higher = orders[1..].iter().map(|k| k.factors(n_mass)).collect();
        Ok(Self { n_mass, binary, higher, bound })
    }

    pub fn n_max(&self) -> usize {
        self.higher.len() + 2
    }

    pub fn bound_m(&self) -> T {
        self.bound
    }

    pub fn binary(&self) -> &CoagKernel<T> {
        &self.binary
    }
}

fn factorial<T: Real>(n: usize) -> T {
    (1..=n).fold(T::one(), |a, k| a * T::from_usize_lossy(k))
}

/// Sum over orders of `K_n+ - K_n-`; the `n = 2` term is exactly [`coag_apply`].
pub fn multi_coag_apply<T: Real>(kernels: &MultiCoagKernel<T>, f: &[T], base: &BaseMeasure<T>, overflow: Overflow) -> Result<SiteReaction<T>> {
    if overflow == Overflow::Cutoff && kernels.n_max() > 2 {
        return Err(Error::Unsupported("mass cutoff is only defined for binary coagulation".into()));
    }
    let mut out = coag_apply(&kernels.binary, f, base, overflow)?;
    let n = base.n_mass();
    if kernels.n_mass != n {
        return Err(Error::Shape(format!("kernels have {} bins, base measure {n}", kernels.n_mass)));
    }
    let w = base.weights();
    for (idx, (scale, phi)) in kernels.higher.iter().enumerate() {
        let order = idx + 3;
        // g indexed by mass number (0 unused)
        let mut g = vec![T::zero(); n + 1];
        for b in 0..n {
            g[b + 1] = f[b] * w[b] * phi[b];
        }
        let mut power = g.clone();
        for _ in 1..order {
            let mut next = vec![T::zero(); power.len() + n];
            for (a, &pa) in power.iter().enumerate() {
                if pa == T::zero() {
                    continue;
                }
                for (b, &gb) in g.iter().enumerate().skip(1) {
                    next[a + b] += pa * gb;
                }
            }
            power = next;
        }
        let gain_scale = *scale / factorial::<T>(order);
        for (s, &p) in power.iter().enumerate().skip(order) {
            if p == T::zero() {
                continue;
            }
            let rate = gain_scale * p;
            if s <= n {
                out.gain[s - 1] += rate / w[s - 1];
            } else if overflow == Overflow::AbsorbTop {
                out.gain[n - 1] += rate * T::from_usize_lossy(s) / T::from_usize_lossy(n) / w[n - 1];
            } else {
                out.push_overflow(s - n - 1, rate);
            }
        }
        let total: T = g.iter().copied().sum();
        let loss_scale = *scale / factorial::<T>(order - 1) * total.powi(order as i32 - 1);
        for b in 0..n {
            out.loss[b] += loss_scale * f[b] * phi[b];
        }
    }
    Ok(out)
}

/// Pass/fail record of a scalar hypothesis `value < bound` (or `<=`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport<T> {
    pub value: T,
    pub bound: T,
    pub pass: bool,
}

/// Linear fragmentation: bin `y` breaks at rate `B(y)` into `F(y; dz) = frag(y; z) nu_0(dz)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Fragmentation<T> {
    n: usize,
    rate: Vec<T>,
    density: Vec<T>,
    sup_rate: T,
    sup_density: T,
}

impl<T: Real> Fragmentation<T> {
    /// `density[y][z]` must vanish for `z >= y`; every bin with positive rate must satisfy
    /// `sum_z z frag(y; z) w_z = y`.
    pub fn new(rate: Vec<T>, density: Vec<Vec<T>>, base: &BaseMeasure<T>) -> Result<Self> {
        let n = base.n_mass();
        if rate.len() != n {
            return Err(Error::Shape(format!("fragmentation rate needs {n} entries")));
        }
        if let Some(v) = rate.iter().find(|v| !(v.is_finite() && **v >= T::zero())) {
            return Err(Error::Config(format!("fragmentation rate must be finite and nonnegative, found {v}")));
        }
        let flat = check_table("fragmentation density", &density, n, n)?;
        let w = base.weights();
        for y in 0..n {
            if let Some(z) = (y..n).find(|&z| flat[y * n + z] != T::zero()) {
                return Err(Error::Config(format!("fragments of bin {y} must be lighter, found mass in bin {z}")));
            }
            if rate[y] == T::zero() {
                continue;
            }
            let mass: T = (0..y).map(|z| base.grid().mass(z) * flat[y * n + z] * w[z]).sum();
            let target = base.grid().mass(y);
            if ((mass - target) / target).abs().as_f64() > MASS_CONDITION_TOL {
                return Err(Error::Config(format!(
                    "fragmentation of bin {y} carries mass {mass}, expected {target}"
                )));
            }
        }
        let sup_rate = rate.iter().fold(T::zero(), |a, &b| a.max(b));
        let sup_density = flat.iter().fold(T::zero(), |a, &b| a.max(b));
        Ok(Self { n, rate, density: flat, sup_rate, sup_density })
    }

    /// Binary splitting with uniform fragment law, `F(k; {j}) = 2/(k-1)` for `j < k`;
    /// the lightest bin has nowhere to go and gets rate 0.
    pub fn uniform_binary(base: &BaseMeasure<T>, rate: T) -> Result<Self> {
        let n = base.n_mass();
        let w = base.weights();
        let mut rates = vec![rate; n];
        rates[0] = T::zero();
        let mut density = vec![vec![T::zero(); n]; n];
        for (y, row) in density.iter_mut().enumerate().skip(1) {
            for (z, slot) in row.iter_mut().enumerate().take(y) {
                *slot = T::lit(2.0) / (T::from_usize_lossy(y) * w[z]);
            }
        }
        Self::new(rates, density, base)
    }

    pub fn rate(&self) -> &[T] {
        &self.rate
    }

    pub fn density(&self, y: usize, z: usize) -> T {
        self.density[y * self.n + z]
    }

    pub fn sup_rate(&self) -> T {
        self.sup_rate
    }

    pub fn sup_density(&self) -> T {
        self.sup_density
    }

    pub fn is_zero(&self) -> bool {
        self.sup_rate == T::zero()
    }

    /// `sup B (1 + sup frag) < eps`.
    pub fn check_rate_condition(&self, eps: T) -> ConditionReport<T> {
        let value = self.sup_rate * (T::one() + self.sup_density);
        ConditionReport { value, bound: eps, pass: value < eps }
    }
}

pub fn fragmentation_apply<T: Real>(frag: &Fragmentation<T>, f: &[T], base: &BaseMeasure<T>) -> Result<SiteReaction<T>> {
    check_density(f, base)?;
    let n = frag.n;
    if n != base.n_mass() {
        return Err(Error::Shape(format!("fragmentation has {n} bins, base measure {}", base.n_mass())));
    }
    let w = base.weights();
    let mut out = SiteReaction::zeros(n);
    for y in 0..n {
        let r = frag.rate[y] * f[y];
        if r == T::zero() {
            continue;
        }
        out.loss[y] += r;
        let m = r * w[y];
        for z in 0..y {
            out.gain[z] += frag.density[y * n + z] * m;
        }
    }
    Ok(out)
}

/// Redistribution law `S(a; z)` of products with mass number `a` in `y0+1..=2 y0` onto bins `z <= y0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scattering<T> {
    y0: usize,
    /// Row `a - y0 - 1`, column `z - 1` (mass numbers).
    table: Vec<T>,
    symmetrize: bool,
    cert_constant: Option<T>,
}

impl<T: Real> Scattering<T> {
    pub fn new(y0: usize, table: Vec<Vec<T>>, base: &BaseMeasure<T>) -> Result<Self> {
        if y0 == 0 || y0 > base.n_mass() {
            return Err(Error::Config(format!("scattering y0 must lie in 1..={}, got {y0}", base.n_mass())));
        }
        let table = check_table("scattering table", &table, y0, y0)?;
        Ok(Self { y0, table, symmetrize: false, cert_constant: None })
    }

    /// `S(a; .) = delta_{floor(a/2)} + delta_{ceil(a/2)}`.
    pub fn half_split(y0: usize, base: &BaseMeasure<T>) -> Result<Self> {
        let mut table = vec![vec![T::zero(); y0]; y0];
        for (r, row) in table.iter_mut().enumerate() {
            let a = y0 + 1 + r;
            row[a / 2 - 1] += T::one();
            row[a.div_ceil(2) - 1] += T::one();
        }
        Self::new(y0, table, base)
    }

    /// `S(a; {z}) = 2a / (y0 (y0 + 1))` for every `z <= y0`.
    pub fn uniform(y0: usize, base: &BaseMeasure<T>) -> Result<Self> {
        let denom = T::from_usize_lossy(y0 * (y0 + 1));
        let table = (0..y0)
            .map(|r| vec![T::from_usize_lossy(2 * (y0 + 1 + r)) / denom; y0])
            .collect();
        Self::new(y0, table, base)
    }

    /// Halve the pair rate, matching the symmetric convention of binary coagulation.
    pub fn symmetrized(mut self, on: bool) -> Self {
        self.symmetrize = on;
        self
    }

    pub fn with_declared_constant(mut self, c: T) -> Self {
        self.cert_constant = Some(c);
        self
    }

    pub fn y0(&self) -> usize {
        self.y0
    }

    pub fn is_symmetrized(&self) -> bool {
        self.symmetrize
    }

    pub fn declared_constant(&self) -> Option<T> {
        self.cert_constant
    }

    /// `S(a; z)` for mass numbers `a in y0+1..=2 y0`, `z in 1..=y0`.
    #[inline]
    pub fn get(&self, a: usize, z: usize) -> T {
        self.table[(a - self.y0 - 1) * self.y0 + z - 1]
    }

    /// Largest relative defect of `sum_z z S(a; z) = a`.
    pub fn mass_defect(&self) -> T {
        (self.y0 + 1..=2 * self.y0)
            .map(|a| {
                let m: T = (1..=self.y0).map(|z| T::from_usize_lossy(z) * self.get(a, z)).sum();
                ((m - T::from_usize_lossy(a)) / T::from_usize_lossy(a)).abs()
            })
            .fold(T::zero(), |x, y| x.max(y))
    }
}

/// Collisions of pairs below `y0` whose product exceeds `y0`, redistributed by `S`.
pub fn scattering_apply<T: Real>(scat: &Scattering<T>, kernel: &CoagKernel<T>, f: &[T], base: &BaseMeasure<T>) -> Result<SiteReaction<T>> {
    check_density(f, base)?;
    if kernel.cutoff_y0 != Some(scat.y0) {
        return Err(Error::Precondition(format!(
            "scattering with y0 = {} needs a kernel cut off at the same mass, got {:?}",
            scat.y0, kernel.cutoff_y0
        )));
    }
    if kernel.n != base.n_mass() {
        return Err(Error::Shape(format!("kernel has {} bins, base measure {}", kernel.n, base.n_mass())));
    }
    let y0 = scat.y0;
    let w = base.weights();
    let factor = if scat.symmetrize { T::lit(0.5) } else { T::one() };
    let mut out = SiteReaction::zeros(base.n_mass());
    for i in 0..y0 {
        if f[i] == T::zero() {
            continue;
        }
        for j in (y0 - i - 1)..y0 {
            let a = i + j + 2;
            if a <= y0 {
                continue;
            }
            let k = factor * kernel.get(i, j);
            out.loss[i] += k * f[i] * f[j] * w[j];
            out.loss[j] += k * f[i] * w[i] * f[j];
            let rate = k * f[i] * w[i] * f[j] * w[j];
            for z in 1..=y0 {
                let s = scat.get(a, z);
                if s != T::zero() {
                    out.gain[z - 1] += rate * s / w[z - 1];
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScatteringCertificate<T> {
    pub constant_exact: BigRational,
    /// Smallest `T` dominating the exact constant.
    pub constant: T,
    pub arg_max_bin: Option<usize>,
    pub declared: Option<T>,
    /// True when no constant was declared or the declared one dominates.
    pub pass: bool,
}

/// Exact `max_z sum_{i, j <= y0 < i + j} S(i + j; z) w_i w_j / w_z`.
pub fn certify_scattering<T: Real>(scat: &Scattering<T>, base: &BaseMeasure<T>) -> Result<ScatteringCertificate<T>> {
    let y0 = scat.y0;
    let w = exact::to_rationals(&base.weights()[..y0])?;
    // pair weight mass per product a
    let mut pairs = vec![exact::zero(); 2 * y0 + 1];
    for i in 1..=y0 {
        for j in 1..=y0 {
            if i + j > y0 {
                pairs[i + j] = &pairs[i + j] + &w[i - 1] * &w[j - 1];
            }
        }
    }
    let mut best = exact::zero();
    let mut arg = None;
    for z in 1..=y0 {
        let mut acc = exact::zero();
        for (a, p) in pairs.iter().enumerate().skip(y0 + 1) {
            acc += exact::to_rational(scat.get(a, z))? * p;
        }
        let r = acc / &w[z - 1];
        if arg.is_none() || r > best {
            best = r;
            arg = Some(z - 1);
        }
    }
    let constant = exact::round_up(&best)?;
    let pass = match scat.cert_constant {
        None => true,
        Some(c) => exact::to_rational(c)? >= best,
    };
    Ok(ScatteringCertificate { constant_exact: best, constant, arg_max_bin: arg, declared: scat.cert_constant, pass })
}

/// The full reaction term `R(f)` at one site: coagulation (binary or multiple),
/// optional fragmentation and optional scattering.
#[derive(Debug, Clone, PartialEq)]
pub struct Reaction<T> {
    pub coag: Option<CoagKernel<T>>,
    pub multi: Option<MultiCoagKernel<T>>,
    pub frag: Option<Fragmentation<T>>,
    pub scat: Option<Scattering<T>>,
    pub overflow: Overflow,
}

impl<T: Real> Reaction<T> {
    pub fn none() -> Self {
        Self { coag: None, multi: None, frag: None, scat: None, overflow: Overflow::default() }
    }

    pub fn coagulation(kernel: CoagKernel<T>, overflow: Overflow) -> Self {
        Self { coag: Some(kernel), overflow, ..Self::none() }
    }

    pub fn validate(&self, base: &BaseMeasure<T>) -> Result<()> {
        if self.coag.is_some() && self.multi.is_some() {
            return Err(Error::Config("configure either binary or multiple coagulation, not both".into()));
        }
        if let Some(s) = &self.scat {
            let k = self
                .coag
                .as_ref()
                .ok_or_else(|| Error::Config("scattering needs a binary coagulation kernel".into()))?;
            if k.cutoff_y0 != Some(s.y0) || self.overflow != Overflow::Cutoff {
                return Err(Error::Config("scattering needs cutoff overflow with the kernel's y0 equal to the scattering y0".into()));
            }
        }
        let n = base.n_mass();
        if self.coag.as_ref().is_some_and(|k| k.n != n) || self.multi.as_ref().is_some_and(|k| k.n_mass != n) {
            return Err(Error::Shape(format!("kernel size does not match the {n} mass bins")));
        }
        Ok(())
    }

    /// `M`: the largest coagulation rate in use (0 without coagulation).
    pub fn bound_m(&self) -> T {
        let a = self.coag.as_ref().map_or(T::zero(), |k| k.bound_m());
        let b = self.multi.as_ref().map_or(T::zero(), |k| k.bound_m());
        a.max(b)
    }

    pub fn is_zero(&self) -> bool {
        self.coag.as_ref().is_none_or(|k| k.is_zero())
            && self.multi.as_ref().is_none_or(|k| k.bound_m() == T::zero())
            && self.frag.as_ref().is_none_or(|f| f.is_zero())
    }

    pub fn apply_site(&self, f: &[T], base: &BaseMeasure<T>) -> Result<SiteReaction<T>> {
        let mut out = SiteReaction::zeros(base.n_mass());
        if let Some(k) = &self.coag {
            out.accumulate(&coag_apply(k, f, base, self.overflow)?);
            if let Some(s) = &self.scat {
                out.accumulate(&scattering_apply(s, k, f, base)?);
            }
        }
        if let Some(k) = &self.multi {
            out.accumulate(&multi_coag_apply(k, f, base, self.overflow)?);
        }
        if let Some(fr) = &self.frag {
            out.accumulate(&fragmentation_apply(fr, f, base)?);
        }
        Ok(out)
    }

    /// Net density `R(f)` at one site.
    pub fn apply_density(&self, f: &[T], base: &BaseMeasure<T>) -> Result<Vec<T>> {
        Ok(self.apply_site(f, base)?.net())
    }

    /// `R` applied at every site of a field.
    pub fn apply_field(&self, field: &KernelField<T>) -> Result<KernelField<T>> {
        let base = field.base();
        let n = field.n_mass();
        let rows: Vec<Vec<T>> = (0..field.n_sites())
            .into_par_iter()
            .map(|s| self.apply_density(field.site(s), base))
            .collect::<Result<_>>()?;
        debug_assert!(rows.iter().all(|r| r.len() == n));
        KernelField::from_values(field.grid().clone(), base.clone(), rows.into_iter().flatten().collect())
    }
}

/// Binary coagulation kernel families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum CoagSpec<T> {
    Constant {
        value: T,
        #[serde(default)]
        cutoff_y0: Option<usize>,
    },
    Table {
        table: Vec<Vec<T>>,
        #[serde(default)]
        cutoff_y0: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum FragSpec<T> {
    UniformBinary { rate: T },
    Table { rate: Vec<T>, density: Vec<Vec<T>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScatSpec<T> {
    HalfSplit {
        y0: usize,
        #[serde(default)]
        cert_constant: Option<T>,
    },
    Uniform {
        y0: usize,
        #[serde(default)]
        cert_constant: Option<T>,
    },
    Table {
        y0: usize,
        table: Vec<Vec<T>>,
        #[serde(default)]
        cert_constant: Option<T>,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReactionSpec<T> {
    #[serde(default)]
    pub coagulation: Option<CoagSpec<T>>,
    /// `K_2, K_3, ...` for multiple coagulation.
    #[serde(default)]
    pub multi: Option<Vec<NaryKernel<T>>>,
    #[serde(default)]
    pub fragmentation: Option<FragSpec<T>>,
    #[serde(default)]
    pub scattering: Option<ScatSpec<T>>,
    #[serde(default)]
    pub overflow: Overflow,
    #[serde(default)]
    pub symmetrize_scattering: bool,
}

impl<T: Real> ReactionSpec<T> {
    pub fn build(&self, base: &Arc<BaseMeasure<T>>) -> Result<Reaction<T>> {
        let n = base.n_mass();
        let coag = match &self.coagulation {
            None => None,
            Some(spec) => {
                let (k, cutoff) = match spec {
                    CoagSpec::Constant { value, cutoff_y0 } => (CoagKernel::constant(n, *value)?, *cutoff_y0),
                    CoagSpec::Table { table, cutoff_y0 } => (CoagKernel::new(table.clone())?, *cutoff_y0),
                };
                Some(match cutoff {
                    Some(y0) => k.with_cutoff(y0)?,
                    None => k,
                })
            }
        };
        let multi = match &self.multi {
            None => None,
            Some(orders) => Some(MultiCoagKernel::new(n, orders.clone())?),
        };
        let frag = match &self.fragmentation {
            None => None,
            Some(FragSpec::UniformBinary { rate }) => Some(Fragmentation::uniform_binary(base, *rate)?),
            Some(FragSpec::Table { rate, density }) => Some(Fragmentation::new(rate.clone(), density.clone(), base)?),
        };
        let scat = match &self.scattering {
            None => None,
            Some(spec) => {
                let (s, c) = match spec {
                    ScatSpec::HalfSplit { y0, cert_constant } => (Scattering::half_split(*y0, base)?, *cert_constant),
                    ScatSpec::Uniform { y0, cert_constant } => (Scattering::uniform(*y0, base)?, *cert_constant),
                    ScatSpec::Table { y0, table, cert_constant } => (Scattering::new(*y0, table.clone(), base)?, *cert_constant),
                };
                let s = s.symmetrized(self.symmetrize_scattering);
                Some(match c {
                    Some(c) => s.with_declared_constant(c),
                    None => s,
                })
            }
        };
        let r = Reaction { coag, multi, frag, scat, overflow: self.overflow };
        r.validate(base)?;
        Ok(r)
    }
}
