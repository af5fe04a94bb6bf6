//! Small unit helpers shared across the crate.
//!
//! All simulated time is carried as [`std::time::Duration`] (integer
//! nanoseconds), so event arithmetic never accumulates floating-point
//! drift. Configs and reports speak f64 seconds at the boundary.

use std::time::Duration;

pub const GIB: u64 = 1 << 30;
pub const MIB: u64 = 1 << 20;

/// Seconds per hour, for rate conversions.
pub const SECS_PER_HOUR: f64 = 3600.0;

/// Converts a duration to fractional seconds for reporting.
pub fn secs_f64(d: Duration) -> f64 {
    d.as_secs_f64()
}

/// Converts fractional seconds to a duration, rejecting negatives and NaN.
pub fn dur_from_secs(secs: f64) -> Duration {
    assert!(
        secs.is_finite() && secs >= 0.0,
        "duration must be finite and non-negative, got {secs}"
    );
    Duration::from_secs_f64(secs)
}

/// Serde adapter: Duration <-> f64 seconds.
pub mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        if !secs.is_finite() || secs < 0.0 {
            return Err(serde::de::Error::custom(format!(
                "duration seconds must be finite and non-negative, got {secs}"
            )));
        }
        Ok(Duration::from_secs_f64(secs))
    }
}
