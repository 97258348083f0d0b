use serde::Serialize;

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959963984540054;

/// Wilson score interval for `successes` out of `trials` at quantile `z`.
pub fn wilson_interval(successes: usize, trials: usize, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Fraction of safe replicates with its Wilson 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SafetyEstimate {
    pub safe: usize,
    pub trials: usize,
    pub fraction: f64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
}

impl SafetyEstimate {
    pub fn new(safe: usize, trials: usize) -> Self {
        let (wilson_lo, wilson_hi) = wilson_interval(safe, trials, Z_95);
        Self {
            safe,
            trials,
            fraction: if trials == 0 { f64::NAN } else { safe as f64 / trials as f64 },
            wilson_lo,
            wilson_hi,
        }
    }
}
