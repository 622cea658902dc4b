//! Switched-system identification for an inertia wheel pendulum with static friction.
//!
//! The crate is organised along the data flow of the identification pipeline:
//!
//! - [`pendulum`]: ground-truth stick/slip dynamics and dataset generation.
//! - [`gmm`]: two-component Gaussian mixture clustering of `(x, u, x')` tuples.
//! - [`tree`]: CART classifier approximating the switching condition.
//! - [`sysid`]: sparse regression of one discrete-time model per class.
//! - [`mhe`]: switched moving horizon estimation on the identified model.

pub mod error;
pub mod gmm;
pub mod mhe;
pub mod pendulum;
pub mod sysid;
pub mod tree;

pub use error::{Error, Result};

use serde::{Deserialize, Serialize};

/// Dynamic regime of the pendulum.
///
/// `C1` is the sticking regime (the wheel is held by static friction),
/// `C2` the sliding regime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Class {
    C1,
    C2,
}

impl Class {
    /// Zero-based index (`C1 → 0`, `C2 → 1`).
    pub fn index(self) -> usize {
        match self {
            Class::C1 => 0,
            Class::C2 => 1,
        }
    }

    pub fn from_index(i: usize) -> Class {
        if i == 0 {
            Class::C1
        } else {
            Class::C2
        }
    }

    pub fn other(self) -> Class {
        match self {
            Class::C1 => Class::C2,
            Class::C2 => Class::C1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Class::C1 => "C1",
            Class::C2 => "C2",
        }
    }
}

impl std::fmt::Display for Class {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Class {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "C1" | "c1" | "1" => Ok(Class::C1),
            "C2" | "c2" | "2" => Ok(Class::C2),
            other => Err(Error::Parse(format!("unknown class label {other:?}"))),
        }
    }
}

/// `sign(v)` with `sign(0) = 0`.
#[inline]
pub fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
