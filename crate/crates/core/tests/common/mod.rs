//! Checks shared by the oracle, invariant and acceptance suites.

#![allow(dead_code)]

/// Returns `Err(message)` from the enclosing function unless `cond` holds.
macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

pub mod invariants;
pub mod oracles;
