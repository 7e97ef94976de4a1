//! JSON helpers: complex numbers are written as `{"re": .., "im": ..}`.

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cx {
    pub re: f64,
    pub im: f64,
}

impl From<C64> for Cx {
    fn from(c: C64) -> Self {
        Cx { re: c.re, im: c.im }
    }
}

impl From<Cx> for C64 {
    fn from(c: Cx) -> Self {
        C64::new(c.re, c.im)
    }
}

pub fn to_cx(v: &[C64]) -> Vec<Cx> {
    v.iter().map(|&c| c.into()).collect()
}

pub fn from_cx(v: &[Cx]) -> Vec<C64> {
    v.iter().map(|&c| c.into()).collect()
}

pub mod cvec {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[C64], s: S) -> Result<S::Ok, S::Error> {
        to_cx(v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<C64>, D::Error> {
        Ok(from_cx(&Vec::<Cx>::deserialize(d)?))
    }
}

pub mod cscalar {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &C64, s: S) -> Result<S::Ok, S::Error> {
        Cx::from(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<C64, D::Error> {
        Ok(Cx::deserialize(d)?.into())
    }
}

/// Schema identifier embedded in every report.
pub fn schema_id(kind: &str) -> String {
    format!("thetaflex/{kind}/v1")
}
