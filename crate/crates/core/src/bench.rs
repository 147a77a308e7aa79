//! Single-forward-pass latency measurement.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::GeneratorState;
use crate::types::{LatentMap, TensorImage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub size: usize,
    pub reps: usize,
    pub gamma: f64,
    pub timings_ms: Vec<f64>,
    pub median_ms: f64,
    pub p95_ms: f64,
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q / 100.0 * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

impl LatencyReport {
    pub fn from_timings(size: usize, gamma: f64, timings_ms: Vec<f64>) -> Result<Self> {
        if timings_ms.is_empty() {
            return Err(Error::Validation("no timings".into()));
        }
        let mut s = timings_ms.clone();
        s.sort_by(f64::total_cmp);
        Ok(LatencyReport {
            size,
            reps: timings_ms.len(),
            gamma,
            median_ms: median(&s),
            p95_ms: percentile(&s, 95.0),
            timings_ms,
        })
    }
}

/// Times `reps` translations of a `size`x`size` image after one warm-up pass.
pub fn bench(
    state: &GeneratorState,
    size: usize,
    reps: usize,
    gamma: f64,
) -> Result<LatencyReport> {
    if reps < 3 {
        return Err(Error::Validation(format!(
            "reps must be at least 3, got {reps}"
        )));
    }
    let target = state
        .config
        .domains
        .last()
        .ok_or_else(|| Error::Validation("model has no domains".into()))?
        .clone();
    let x = TensorImage::filled(size, size, [0.1, -0.2, 0.3])?;
    x.check_latent_compatible()?;
    let z = LatentMap::seeded_noise(size, size, 0);
    state.translate(&x, &z, gamma, &target)?;
    let mut timings = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        std::hint::black_box(state.translate(&x, &z, gamma, &target)?);
        timings.push(t.elapsed().as_secs_f64() * 1e3);
    }
    LatencyReport::from_timings(size, gamma, timings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorConfig;

    #[test]
    fn report_has_raw_timings_and_ordered_summary() {
        let s = GeneratorState::new_random(GeneratorConfig::tiny()).unwrap();
        let r = bench(&s, 16, 3, 1.0).unwrap();
        assert_eq!(r.timings_ms.len(), 3);
        assert!(r.median_ms <= r.p95_ms);
        assert!(bench(&s, 16, 2, 1.0).is_err());
        assert!(bench(&s, 12, 3, 1.0).is_err());
    }

    #[test]
    fn percentiles() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(median(&v), 2.5);
        assert_eq!(percentile(&v, 95.0), 4.0);
        assert_eq!(percentile(&v, 50.0), 2.0);
        assert_eq!(percentile(&[7.0], 95.0), 7.0);
    }
}
