//! Exact rational arithmetic used by the certification routines.
//!
//! Every finite binary float is a dyadic rational, so converting weights to
//! [`BigRational`] loses nothing and lets the convolution inequalities be
//! checked without rounding.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub fn to_rational<T: Real>(x: T) -> Result<BigRational> {
    BigRational::from_float(x.as_f64())
        .ok_or_else(|| Error::Numeric(format!("cannot represent {x} exactly")))
}

pub fn to_rationals<T: Real>(xs: &[T]) -> Result<Vec<BigRational>> {
    xs.iter().map(|&x| to_rational(x)).collect()
}

/// Nearest `T` to an exact rational (round-to-nearest through `f64`).
pub fn to_real<T: Real>(q: &BigRational) -> T {
    T::lit(q.to_f64().unwrap_or(f64::NAN))
}

/// Smallest `T` that is `>= q`.
pub fn round_up<T: Real>(q: &BigRational) -> Result<T> {
    let mut c: T = to_real(q);
    if !c.is_finite() {
        return Err(Error::Numeric(format!("rational {q} overflows the scalar type")));
    }
    while &to_rational(c)? < q {
        c = c.next_up();
    }
    Ok(c)
}

pub fn zero() -> BigRational {
    BigRational::zero()
}

pub fn from_usize(n: usize) -> BigRational {
    BigRational::from_integer(BigInt::from(n))
}
