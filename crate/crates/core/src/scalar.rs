//! Floating point element types a run can be instantiated with.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type of every tensor. Implemented for `f32` and `f64`; the width is
/// chosen once per run.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Payload bytes per element, used for fabric byte accounting.
    const WIDTH_BYTES: usize;
    const NAME: &'static str;

    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("float converts to f64")
    }
}

impl Scalar for f32 {
    const WIDTH_BYTES: usize = 4;
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const WIDTH_BYTES: usize = 8;
    const NAME: &'static str = "f64";
}

/// Runtime selector for the scalar width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarWidth {
    F32,
    F64,
}

impl ScalarWidth {
    pub fn bytes(self) -> usize {
        match self {
            ScalarWidth::F32 => 4,
            ScalarWidth::F64 => 8,
        }
    }
}

impl std::str::FromStr for ScalarWidth {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" | "32" => Ok(ScalarWidth::F32),
            "f64" | "64" => Ok(ScalarWidth::F64),
            other => Err(format!("unknown scalar width `{other}` (expected f32 or f64)")),
        }
    }
}

impl std::fmt::Display for ScalarWidth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScalarWidth::F32 => f.write_str("f32"),
            ScalarWidth::F64 => f.write_str("f64"),
        }
    }
}
