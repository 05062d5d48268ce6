use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AllanPoint {
    pub tau: f64,
    pub deviation: f64,
}

/// Overlapping Allan deviation of a uniformly sampled sequence.
///
/// Each `tau` is rounded to a whole number of samples `m >= 1`; the record must
/// hold at least two clusters (`2m < n`).
pub fn allan_deviation(samples: &[f64], rate: f64, taus: &[f64]) -> Result<Vec<AllanPoint>> {
    if !(rate > 0.0) {
        return Err(Error::Config(format!("sample rate must be positive, got {rate}")));
    }
    let tau0 = 1.0 / rate;
    let n = samples.len();
    // theta_k: integral of the signal up to sample k
    let mut theta = Vec::with_capacity(n + 1);
    theta.push(0.0);
    let mut acc = 0.0;
    for x in samples {
        acc += x * tau0;
        theta.push(acc);
    }
    let mut out = Vec::with_capacity(taus.len());
    for &tau in taus {
        let m = (tau / tau0).round().max(1.0) as usize;
        let len = theta.len();
        if 2 * m >= n {
            return Err(Error::TauRange(format!(
                "tau {tau} s needs {} samples, record has {n}",
                2 * m
            )));
        }
        let tau_m = m as f64 * tau0;
        let count = len - 2 * m;
        let sum: f64 = (0..count)
            .map(|k| {
                let d = theta[k + 2 * m] - 2.0 * theta[k + m] + theta[k];
                d * d
            })
            .sum();
        let avar = sum / (2.0 * tau_m * tau_m * count as f64);
        out.push(AllanPoint {
            tau: tau_m,
            deviation: avar.max(0.0).sqrt(),
        });
    }
    Ok(out)
}

/// `count` log-spaced taus from `min` to `max` inclusive.
pub fn log_spaced_taus(min: f64, max: f64, count: usize) -> Vec<f64> {
    if count < 2 {
        return vec![min];
    }
    let (a, b) = (min.ln(), max.ln());
    (0..count).map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp()).collect()
}

/// Least-squares slope of `log(deviation)` against `log(tau)`.
pub fn loglog_slope(points: &[AllanPoint]) -> f64 {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.deviation > 0.0)
        .map(|p| (p.tau.ln(), p.deviation.ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_sequence_has_zero_deviation() {
        let pts = allan_deviation(&vec![3.0; 1000], 100.0, &[0.01, 0.1, 1.0]).unwrap();
        assert!(pts.iter().all(|p| p.deviation < 1e-12));
    }

    #[test]
    fn ramp_has_unit_slope() {
        let x: Vec<f64> = (0..5000).map(|i| 0.01 * i as f64 / 100.0).collect();
        let pts = allan_deviation(&x, 100.0, &log_spaced_taus(0.05, 5.0, 10)).unwrap();
        // ADEV of a rate ramp a*t is a*tau/sqrt(2)
        for p in &pts {
            assert!((p.deviation - 0.01 * p.tau / 2f64.sqrt()).abs() < 1e-9);
        }
        assert!((loglog_slope(&pts) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn tau_too_large() {
        assert!(matches!(allan_deviation(&[1.0, 2.0], 100.0, &[0.01]), Err(Error::TauRange(_))));
    }
}
