//! Exact rational arithmetic used for every weight, latency and time value.
//!
//! All cost comparisons in this crate are exact, so nothing here ever rounds.
//! On the wire a rational is a two-element array `[numerator, denominator]`.

use num_integer::Integer;
use num_rational::Ratio;
use num_traits::{One, Signed, Zero};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub type Rational = Ratio<i128>;

pub fn int(n: i128) -> Rational {
    Rational::from_integer(n)
}

pub fn frac(num: i128, den: i128) -> Rational {
    Rational::new(num, den)
}

pub fn zero() -> Rational {
    Rational::zero()
}

pub fn one() -> Rational {
    Rational::one()
}

/// `base^exp` for a non-negative exponent.
pub fn pow(base: Rational, exp: u32) -> Rational {
    (0..exp).fold(one(), |acc, _| acc * base)
}

/// Lossy conversion, only for reporting statistics.
pub fn to_f64(q: &Rational) -> f64 {
    *q.numer() as f64 / *q.denom() as f64
}

/// Builds a rational from a `[num, den]` pair, rejecting zero denominators.
pub fn from_pair(num: i128, den: i128) -> Result<Rational, String> {
    if den == 0 {
        return Err(format!("zero denominator in [{num}, {den}]"));
    }
    Ok(Rational::new(num, den))
}

pub fn to_pair(q: &Rational) -> [i128; 2] {
    [*q.numer(), *q.denom()]
}

/// Human-readable form: `3` or `7/2`.
pub fn display(q: &Rational) -> String {
    if q.denom().is_one() {
        q.numer().to_string()
    } else {
        format!("{}/{}", q.numer(), q.denom())
    }
}

pub fn is_positive(q: &Rational) -> bool {
    q.is_positive()
}

/// Least common multiple of the denominators of `values`.
pub fn common_denominator<'a>(values: impl IntoIterator<Item = &'a Rational>) -> i128 {
    values.into_iter().fold(1i128, |acc, q| acc.lcm(q.denom()))
}

/// Serde adapter for a single rational stored as `[num, den]`.
pub mod pair {
    use super::*;

    pub fn serialize<S: Serializer>(q: &Rational, s: S) -> Result<S::Ok, S::Error> {
        to_pair(q).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Rational, D::Error> {
        // i64 because tagged enums buffer numbers without i128 support
        let [num, den] = <[i64; 2]>::deserialize(d)?;
        from_pair(num.into(), den.into()).map_err(D::Error::custom)
    }
}

/// Serde adapter for `Option<Rational>`.
pub mod opt_pair {
    use super::*;

    pub fn serialize<S: Serializer>(q: &Option<Rational>, s: S) -> Result<S::Ok, S::Error> {
        q.as_ref().map(to_pair).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Rational>, D::Error> {
        match Option::<[i64; 2]>::deserialize(d)? {
            None => Ok(None),
            Some([num, den]) => from_pair(num.into(), den.into()).map(Some).map_err(D::Error::custom),
        }
    }
}
