//! Mass densities over a spatial grid: `mu(x; dy) = f(x; y) w(dy)`.
//!
//! Values are stored densely, spatial index outer and mass bin inner. The
//! spatial box is `[0, L)^dim` with `n_x[a]` nodes per axis at `i * h_a`.
//! Points outside the box are handled by the grid's extension policy.

use std::io::{Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::mass_measure::BaseMeasure;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExtensionPolicy {
    /// Project each coordinate into `[0, L - h]`.
    #[default]
    Clamp,
    /// Reduce each coordinate modulo `L`.
    Wrap,
}

impl ExtensionPolicy {
    fn byte(self) -> u8 {
        match self {
            ExtensionPolicy::Clamp => 0,
            ExtensionPolicy::Wrap => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(ExtensionPolicy::Clamp),
            1 => Ok(ExtensionPolicy::Wrap),
            other => Err(Error::Config(format!("unknown extension policy byte {other}"))),
        }
    }
}

/// Interpolation stencil: (site index, multilinear weight) for the 2^dim cell corners.
pub type Stencil<T> = SmallVec<[(usize, T); 8]>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatialGrid<T> {
    pub dim: usize,
    pub extent: T,
    pub n_x: Vec<usize>,
    #[serde(default)]
    pub policy: ExtensionPolicy,
}

impl<T: Real> SpatialGrid<T> {
    pub fn new(dim: usize, extent: T, n_x: Vec<usize>, policy: ExtensionPolicy) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::Config(format!("spatial dimension must be 1, 2 or 3, got {dim}")));
        }
        if n_x.len() != dim {
            return Err(Error::Config(format!("{} axis counts for dimension {dim}", n_x.len())));
        }
        if let Some(&n) = n_x.iter().find(|&&n| n < 2) {
            return Err(Error::Config(format!("each axis needs at least 2 points, got {n}")));
        }
        if !(extent > T::zero()) || !extent.is_finite() {
            return Err(Error::Config(format!("box extent must be positive, got {extent}")));
        }
        Ok(Self { dim, extent, n_x, policy })
    }

    /// Uniform grid with the same point count on every axis.
    pub fn cube(dim: usize, extent: T, n: usize, policy: ExtensionPolicy) -> Result<Self> {
        Self::new(dim, extent, vec![n; dim], policy)
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.dim, self.extent, self.n_x.clone(), self.policy).map(|_| ())
    }

    #[inline]
    pub fn spacing(&self, axis: usize) -> T {
        self.extent / T::from_usize_lossy(self.n_x[axis])
    }

    pub fn n_sites(&self) -> usize {
        self.n_x.iter().product()
    }

    /// Per-axis multi-index of a site (axis 0 outermost).
    pub fn multi_index(&self, mut site: usize) -> SmallVec<[usize; 3]> {
        let mut idx: SmallVec<[usize; 3]> = SmallVec::from_elem(0, self.dim);
        for a in (0..self.dim).rev() {
            idx[a] = site % self.n_x[a];
            site /= self.n_x[a];
        }
        idx
    }

    pub fn linear_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.n_x).fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn coords(&self, site: usize) -> Vec<T> {
        self.multi_index(site)
            .iter()
            .enumerate()
            .map(|(a, &i)| T::from_usize_lossy(i) * self.spacing(a))
            .collect()
    }

    /// Cell corner sites and multilinear weights for an arbitrary point.
    pub fn stencil(&self, point: &[T]) -> Result<Stencil<T>> {
        if point.len() != self.dim {
            return Err(Error::Shape(format!("point of dimension {} on a {}-d grid", point.len(), self.dim)));
        }
        let mut lower: SmallVec<[usize; 3]> = SmallVec::new();
        let mut upper: SmallVec<[usize; 3]> = SmallVec::new();
        let mut frac: SmallVec<[T; 3]> = SmallVec::new();
        for (a, &x) in point.iter().enumerate() {
            if !x.is_finite() {
                return Err(Error::Numeric(format!("evaluation point has non-finite coordinate {x}")));
            }
            let n = self.n_x[a];
            let h = self.spacing(a);
            match self.policy {
                ExtensionPolicy::Clamp => {
                    let top = T::from_usize_lossy(n - 1);
                    let u = (x / h).max(T::zero()).min(top);
                    let i = u.floor().to_usize().unwrap_or(0).min(n - 2);
                    let t = (u - T::from_usize_lossy(i)).max(T::zero()).min(T::one());
                    lower.push(i);
                    upper.push(i + 1);
                    frac.push(t);
                }
                ExtensionPolicy::Wrap => {
                    let l = self.extent;
                    let mut r = x % l;
                    if r < T::zero() {
                        r += l;
                    }
                    let u = r / h;
                    let i = u.floor().to_usize().unwrap_or(0).min(n - 1);
                    let t = (u - T::from_usize_lossy(i)).max(T::zero()).min(T::one());
                    lower.push(i);
                    upper.push((i + 1) % n);
                    frac.push(t);
                }
            }
        }
        let mut out = Stencil::new();
        let mut idx: SmallVec<[usize; 3]> = SmallVec::from_elem(0, self.dim);
        for corner in 0..(1usize << self.dim) {
            let mut weight = T::one();
            for a in 0..self.dim {
                if corner >> (self.dim - 1 - a) & 1 == 1 {
                    idx[a] = upper[a];
                    weight *= frac[a];
                } else {
                    idx[a] = lower[a];
                    weight *= T::one() - frac[a];
                }
            }
            out.push((self.linear_index(&idx), weight));
        }
        Ok(out)
    }
}

/// A density field `f(x; y)` on a spatial grid times the mass bins of a base measure.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelField<T> {
    grid: Arc<SpatialGrid<T>>,
    base: Arc<BaseMeasure<T>>,
    values: Vec<T>,
}

impl<T: Real> KernelField<T> {
    pub fn zeros(grid: Arc<SpatialGrid<T>>, base: Arc<BaseMeasure<T>>) -> Self {
        let len = grid.n_sites() * base.n_mass();
        Self { grid, base, values: vec![T::zero(); len] }
    }

    pub fn constant(grid: Arc<SpatialGrid<T>>, base: Arc<BaseMeasure<T>>, c: T) -> Self {
        let mut f = Self::zeros(grid, base);
        f.values.iter_mut().for_each(|v| *v = c);
        f
    }

    pub fn from_values(grid: Arc<SpatialGrid<T>>, base: Arc<BaseMeasure<T>>, values: Vec<T>) -> Result<Self> {
        let len = grid.n_sites() * base.n_mass();
        if values.len() != len {
            return Err(Error::Shape(format!("{} values for {len} (site, mass) entries", values.len())));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("field value {v}")));
        }
        Ok(Self { grid, base, values })
    }

    /// Builds a field from `g(coords, mass_bin)`.
    pub fn from_fn(grid: Arc<SpatialGrid<T>>, base: Arc<BaseMeasure<T>>, mut g: impl FnMut(&[T], usize) -> T) -> Result<Self> {
        let n_mass = base.n_mass();
        let mut values = Vec::with_capacity(grid.n_sites() * n_mass);
        for site in 0..grid.n_sites() {
            let x = grid.coords(site);
            for m in 0..n_mass {
                values.push(g(&x, m));
            }
        }
        Self::from_values(grid, base, values)
    }

    pub fn grid(&self) -> &Arc<SpatialGrid<T>> {
        &self.grid
    }

    pub fn base(&self) -> &Arc<BaseMeasure<T>> {
        &self.base
    }

    pub fn n_mass(&self) -> usize {
        self.base.n_mass()
    }

    pub fn n_sites(&self) -> usize {
        self.grid.n_sites()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    /// Mass density at one site.
    pub fn site(&self, site: usize) -> &[T] {
        let n = self.n_mass();
        &self.values[site * n..(site + 1) * n]
    }

    pub fn site_mut(&mut self, site: usize) -> &mut [T] {
        let n = self.n_mass();
        &mut self.values[site * n..(site + 1) * n]
    }

    #[inline]
    pub fn get(&self, site: usize, mass_bin: usize) -> T {
        self.values[site * self.n_mass() + mass_bin]
    }

    /// Same grid and base (by value).
    pub fn same_shape(&self, other: &Self) -> bool {
        (Arc::ptr_eq(&self.grid, &other.grid) || self.grid == other.grid)
            && (Arc::ptr_eq(&self.base, &other.base) || self.base == other.base)
    }

    fn check_shape(&self, other: &Self) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape("fields live on different grids or base measures".into()))
        }
    }

    /// Sup over sites and bins of `|f|`.
    pub fn norm(&self) -> T {
        self.values.iter().fold(T::zero(), |acc, v| acc.max(v.abs()))
    }

    /// Site and bin of the largest `|f|` (first one on ties).
    pub fn arg_max(&self) -> (usize, usize) {
        let mut best = T::zero();
        let mut arg = 0;
        for (i, v) in self.values.iter().enumerate() {
            if v.abs() > best {
                best = v.abs();
                arg = i;
            }
        }
        (arg / self.n_mass(), arg % self.n_mass())
    }

    pub fn min_entry(&self) -> T {
        self.values.iter().fold(T::infinity(), |acc, &v| acc.min(v))
    }

    /// Multilinear interpolation in `x` after the extension policy; exact at nodes.
    pub fn eval(&self, point: &[T], mass_bin: usize) -> Result<T> {
        let stencil = self.grid.stencil(point)?;
        Ok(self.eval_stencil(&stencil, mass_bin))
    }

    #[inline]
    pub fn eval_stencil(&self, stencil: &[(usize, T)], mass_bin: usize) -> T {
        let n = self.n_mass();
        let mut acc = T::zero();
        for &(site, w) in stencil {
            if w != T::zero() {
                acc += w * self.values[site * n + mass_bin];
            }
        }
        acc
    }

    /// `alpha * x + y`.
    pub fn axpy(alpha: T, x: &Self, y: &Self) -> Result<Self> {
        x.check_shape(y)?;
        let values = x.values.iter().zip(&y.values).map(|(&a, &b)| alpha * a + b).collect();
        Ok(Self { grid: y.grid.clone(), base: y.base.clone(), values })
    }

    pub fn scale(alpha: T, x: &Self) -> Self {
        Self { grid: x.grid.clone(), base: x.base.clone(), values: x.values.iter().map(|&a| alpha * a).collect() }
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.check_shape(other)?;
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// `||self - other||`.
    pub fn distance(&self, other: &Self) -> Result<T> {
        self.check_shape(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs())))
    }

    /// Largest `|f(x; y) - f(x'; y)|` over node pairs with `|x - x'| <= delta`.
    pub fn equicontinuity_modulus(&self, delta: T) -> T {
        let grid = &self.grid;
        let dim = grid.dim;
        let reach: SmallVec<[isize; 3]> = (0..dim)
            .map(|a| ((delta / grid.spacing(a)) * T::lit(1.0 + 1e-12)).floor().to_isize().unwrap_or(0))
            .collect();
        let slack = delta * T::lit(1e-12);
        let total: usize = reach.iter().map(|&r| (2 * r + 1) as usize).product();
        let mut offsets: Vec<SmallVec<[isize; 3]>> = Vec::new();
        for code in 0..total {
            let mut rest = code;
            let mut off: SmallVec<[isize; 3]> = SmallVec::from_elem(0, dim);
            for a in (0..dim).rev() {
                let width = (2 * reach[a] + 1) as usize;
                off[a] = (rest % width) as isize - reach[a];
                rest /= width;
            }
            let d2 = off.iter().enumerate().fold(T::zero(), |acc, (a, &o)| {
                let s = T::from_isize(o).unwrap() * grid.spacing(a);
                acc + s * s
            });
            if off.iter().any(|&o| o != 0) && d2.sqrt() <= delta + slack {
                offsets.push(off);
            }
        }
        let n_mass = self.n_mass();
        let mut best = T::zero();
        let mut other: SmallVec<[usize; 3]> = SmallVec::from_elem(0, dim);
        for site in 0..grid.n_sites() {
            let idx = grid.multi_index(site);
            'offsets: for off in &offsets {
                for a in 0..dim {
                    let n = grid.n_x[a] as isize;
                    let j = idx[a] as isize + off[a];
                    other[a] = match grid.policy {
                        ExtensionPolicy::Clamp if j < 0 || j >= n => continue 'offsets,
                        ExtensionPolicy::Clamp => j as usize,
                        ExtensionPolicy::Wrap => j.rem_euclid(n) as usize,
                    };
                }
                let s2 = grid.linear_index(&other);
                for m in 0..n_mass {
                    let d = (self.values[site * n_mass + m] - self.values[s2 * n_mass + m]).abs();
                    if d > best {
                        best = d;
                    }
                }
            }
        }
        best
    }

    /// Discrete total variation at a site: `sum_k |f_k| w_k`.
    pub fn site_total_variation(&self, site: usize) -> T {
        self.site(site)
            .iter()
            .zip(self.base.weights())
            .map(|(&f, &w)| f.abs() * w)
            .sum()
    }

    /// `(sum_x sum_k f w, sum_x sum_k mass_k f w)` times the cell volume.
    pub fn moments(&self) -> (T, T) {
        let vol = (0..self.grid.dim).fold(T::one(), |acc, a| acc * self.grid.spacing(a));
        let w = self.base.weights();
        let mut m0 = T::zero();
        let mut m1 = T::zero();
        for site in 0..self.n_sites() {
            for (b, (&f, &wb)) in self.site(site).iter().zip(w).enumerate() {
                m0 += f * wb;
                m1 += self.base.grid().mass(b) * f * wb;
            }
        }
        (m0 * vol, m1 * vol)
    }
}

/// Raw contents of a binary field snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub dim: usize,
    pub n_x: Vec<usize>,
    pub n_mass: usize,
    pub unit: f64,
    pub extent: f64,
    pub policy: ExtensionPolicy,
    pub values: Vec<f64>,
}

/// Little-endian layout: `u32 dim`, `u32 n_x[dim]`, `u32 n_mass`, `f64 unit`,
/// `f64 extent`, `u8 policy`, then `f64` values (site outer, mass inner).
pub fn write_snapshot<T: Real, W: Write>(field: &KernelField<T>, mut out: W) -> Result<()> {
    let grid = field.grid();
    out.write_all(&(grid.dim as u32).to_le_bytes())?;
    for &n in &grid.n_x {
        out.write_all(&(n as u32).to_le_bytes())?;
    }
    out.write_all(&(field.n_mass() as u32).to_le_bytes())?;
    out.write_all(&field.base().unit().as_f64().to_le_bytes())?;
    out.write_all(&grid.extent.as_f64().to_le_bytes())?;
    out.write_all(&[grid.policy.byte()])?;
    for v in field.values() {
        out.write_all(&v.as_f64().to_le_bytes())?;
    }
    Ok(())
}

pub fn read_snapshot<R: Read>(mut input: R) -> Result<Snapshot> {
    fn u32_of<R: Read>(r: &mut R) -> Result<usize> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b) as usize)
    }
    fn f64_of<R: Read>(r: &mut R) -> Result<f64> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
    let dim = u32_of(&mut input)?;
    if !(1..=3).contains(&dim) {
        return Err(Error::Config(format!("snapshot dimension {dim}")));
    }
    let n_x = (0..dim).map(|_| u32_of(&mut input)).collect::<Result<Vec<_>>>()?;
    let n_mass = u32_of(&mut input)?;
    let unit = f64_of(&mut input)?;
    let extent = f64_of(&mut input)?;
    let mut p = [0u8; 1];
    input.read_exact(&mut p)?;
    let policy = ExtensionPolicy::from_byte(p[0])?;
    let len = n_x.iter().product::<usize>() * n_mass;
    let values = (0..len).map(|_| f64_of(&mut input)).collect::<Result<Vec<_>>>()?;
    Ok(Snapshot { dim, n_x, n_mass, unit, extent, policy, values })
}
