//! Active arithmetic precision.
//!
//! All model arithmetic is carried in `f64` registers; in `Fp32` mode every
//! elementary result is rounded through `f32` before it is used again. Since
//! the product or sum of two `f32`-representable values is exact in `f64`,
//! rounding after each step reproduces genuine single-precision arithmetic
//! while keeping a single code path.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp32,
    Fp64,
}

impl Precision {
    /// Round a value to the active precision.
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::Fp64 => x,
            Precision::Fp32 => x as f32 as f64,
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Precision::Fp32 => write!(f, "fp32"),
            Precision::Fp64 => write!(f, "fp64"),
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "fp32" => Ok(Precision::Fp32),
            "fp64" => Ok(Precision::Fp64),
            other => Err(crate::Error::InvalidConfig(format!(
                "unknown precision '{other}' (expected fp32 or fp64)"
            ))),
        }
    }
}
