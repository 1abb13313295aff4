//! Full-enumeration reference implementations of the reaction operators.
//!
//! Everything here works on measures `g_b = f_b w_b` indexed by mass number and
//! enumerates ordered tuples of particles directly, with no convolution tricks.
#![allow(dead_code)]

use smolux_core::reaction::{Fragmentation, Overflow, Scattering};

/// Gain and loss densities on the grid plus the measure pushed past the top bin
/// (index `k` is mass number `n + 1 + k`).
#[derive(Debug, Clone, PartialEq)]
pub struct Naive {
    pub gain: Vec<f64>,
    pub loss: Vec<f64>,
    pub overflow: Vec<f64>,
}

impl Naive {
    fn new(n: usize) -> Self {
        Self { gain: vec![0.0; n], loss: vec![0.0; n], overflow: Vec::new() }
    }

    /// Deposits a product measure of mass number `s`.
    fn deposit(&mut self, s: usize, measure: f64, w: &[f64], overflow: Overflow) {
        let n = w.len();
        if s <= n {
            self.gain[s - 1] += measure / w[s - 1];
        } else if overflow == Overflow::AbsorbTop {
            self.gain[n - 1] += measure * s as f64 / n as f64 / w[n - 1];
        } else {
            let k = s - n - 1;
            if self.overflow.len() <= k {
                self.overflow.resize(k + 1, 0.0);
            }
            self.overflow[k] += measure;
        }
    }

    fn remove(&mut self, bin: usize, measure: f64, w: &[f64]) {
        self.loss[bin] += measure / w[bin];
    }

    /// `sum_y y (gain - loss) w_y` plus the first moment of the overflow.
    pub fn first_moment(&self, w: &[f64]) -> f64 {
        let n = w.len();
        let on_grid: f64 = (0..n).map(|b| (b + 1) as f64 * (self.gain[b] - self.loss[b]) * w[b]).sum();
        let off: f64 = self.overflow.iter().enumerate().map(|(k, v)| (n + 1 + k) as f64 * v).sum();
        on_grid + off
    }
}

/// Calls `visit` with every ordered `order`-tuple of bin indices.
fn for_each_tuple(n: usize, order: usize, mut visit: impl FnMut(&[usize])) {
    let mut idx = vec![0usize; order];
    loop {
        visit(&idx);
        let mut k = 0;
        loop {
            if k == order {
                return;
            }
            idx[k] += 1;
            if idx[k] < n {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// `order` particles merge at rate `kernel(tuple) * prod g / order!` per ordered tuple.
/// With `cutoff = Some(y0)` tuples whose product exceeds `y0` do not react at all.
pub fn nary(
    order: usize,
    kernel: impl Fn(&[usize]) -> f64,
    f: &[f64],
    w: &[f64],
    overflow: Overflow,
    cutoff: Option<usize>,
) -> Naive {
    let n = w.len();
    let g: Vec<f64> = f.iter().zip(w).map(|(a, b)| a * b).collect();
    let mut out = Naive::new(n);
    let norm = factorial(order);
    for_each_tuple(n, order, |t| {
        let s: usize = t.iter().map(|b| b + 1).sum();
        if cutoff.is_some_and(|y0| s > y0) {
            return;
        }
        let rate = kernel(t) * t.iter().map(|&b| g[b]).product::<f64>() / norm;
        out.deposit(s, rate, w, overflow);
        for &b in t {
            out.remove(b, rate, w);
        }
    });
    out
}

pub fn add(a: &Naive, b: &Naive) -> Naive {
    let len = a.overflow.len().max(b.overflow.len());
    Naive {
        gain: a.gain.iter().zip(&b.gain).map(|(x, y)| x + y).collect(),
        loss: a.loss.iter().zip(&b.loss).map(|(x, y)| x + y).collect(),
        overflow: (0..len)
            .map(|k| a.overflow.get(k).copied().unwrap_or(0.0) + b.overflow.get(k).copied().unwrap_or(0.0))
            .collect(),
    }
}

/// Each particle of bin `y` breaks at rate `B(y)` into fragments with law `frag(y; z) w_z`.
pub fn fragmentation(frag: &Fragmentation<f64>, f: &[f64], w: &[f64]) -> Naive {
    let n = w.len();
    let mut out = Naive::new(n);
    for y in 0..n {
        let events = frag.rate()[y] * f[y] * w[y];
        out.remove(y, events, w);
        for z in 0..n {
            let measure = events * frag.density(y, z) * w[z];
            out.gain[z] += measure / w[z];
        }
    }
    out
}

/// Ordered pairs below `y0` whose product exceeds `y0` collide at rate `factor K g_i g_j`;
/// both partners leave and the product mass `a` is spread by the law `S(a; .)`.
pub fn scattering(scat: &Scattering<f64>, kernel: impl Fn(usize, usize) -> f64, f: &[f64], w: &[f64]) -> Naive {
    let n = w.len();
    let y0 = scat.y0();
    let factor = if scat.is_symmetrized() { 0.5 } else { 1.0 };
    let mut out = Naive::new(n);
    for i in 0..y0 {
        for j in 0..y0 {
            let a = i + j + 2;
            if a <= y0 {
                continue;
            }
            let rate = factor * kernel(i, j) * f[i] * w[i] * f[j] * w[j];
            out.remove(i, rate, w);
            out.remove(j, rate, w);
            for z in 1..=y0 {
                out.gain[z - 1] += rate * scat.get(a, z) / w[z - 1];
            }
        }
    }
    out
}

/// Largest relative entry-wise discrepancy, scaled by the largest entry of the oracle.
pub fn rel_diff(gain: &[f64], loss: &[f64], overflow: &[f64], oracle: &Naive) -> f64 {
    let scale = oracle
        .gain
        .iter()
        .chain(&oracle.loss)
        .chain(&oracle.overflow)
        .fold(0.0f64, |a, b| a.max(b.abs()))
        .max(f64::MIN_POSITIVE);
    let d = |a: &[f64], b: &[f64]| {
        let len = a.len().max(b.len());
        (0..len)
            .map(|k| (a.get(k).copied().unwrap_or(0.0) - b.get(k).copied().unwrap_or(0.0)).abs())
            .fold(0.0f64, f64::max)
    };
    d(gain, &oracle.gain).max(d(loss, &oracle.loss)).max(d(overflow, &oracle.overflow)) / scale
}
