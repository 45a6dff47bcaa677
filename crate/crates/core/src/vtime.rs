//! Time is tracked as integer nanoseconds everywhere so that simulated
//! runs are exactly reproducible; floating point only appears at the
//! configuration boundary.

/// Nanoseconds since the start of the run (simulation) or process (socket
/// transport).
pub type Nanos = u64;

pub const NANOS_PER_SEC: u64 = 1_000_000_000;

/// Convert a configuration value in seconds to nanoseconds.
pub fn secs(s: f64) -> Nanos {
    (s * NANOS_PER_SEC as f64).round() as Nanos
}

pub fn millis(ms: u64) -> Nanos {
    ms * 1_000_000
}

/// Render nanoseconds as a decimal seconds string with fixed precision,
/// using integer math only (identical output on every platform).
pub fn fmt_secs(ns: Nanos) -> String {
    format!("{}.{:09}", ns / NANOS_PER_SEC, ns % NANOS_PER_SEC)
}

/// Transmission delay of `bytes` at `bandwidth` bytes/second.
pub fn transmit_delay(bytes: u64, bandwidth: u64) -> Nanos {
    if bandwidth == 0 {
        return 0;
    }
    ((bytes as u128 * NANOS_PER_SEC as u128).div_ceil(bandwidth as u128)) as Nanos
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formats_without_float() {
        assert_eq!(fmt_secs(0), "0.000000000");
        assert_eq!(fmt_secs(1_500_000_000), "1.500000000");
        assert_eq!(fmt_secs(secs(0.01)), "0.010000000");
    }

    #[test]
    fn transmit_delay_arithmetic() {
        // 1 MB at 1 MB/s is exactly one second.
        assert_eq!(transmit_delay(1_000_000, 1_000_000), NANOS_PER_SEC);
        assert_eq!(transmit_delay(0, 1_000_000), 0);
    }
}
