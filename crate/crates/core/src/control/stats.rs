use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

/// Summary of a latency sample set, in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: u64,
    pub mean_ms: f64,
    /// Half-width of the Student-t 95% confidence interval.
    pub ci95_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

impl LatencyStats {
    pub fn from_micros(samples: &[u64]) -> Self {
        let n = samples.len();
        if n == 0 {
            return LatencyStats::default();
        }
        let ms: Vec<f64> = samples.iter().map(|&s| s as f64 / 1000.0).collect();
        let mean = ms.iter().sum::<f64>() / n as f64;
        let ci = if n < 2 {
            0.0
        } else {
            let var = ms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("df > 0").inverse_cdf(0.975);
            t * (var / n as f64).sqrt()
        };
        LatencyStats {
            count: n as u64,
            mean_ms: mean,
            ci95_ms: ci,
            min_ms: ms.iter().copied().fold(f64::INFINITY, f64::min),
            max_ms: ms.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_samples_have_zero_interval() {
        let s = LatencyStats::from_micros(&[175_000; 100]);
        assert_eq!(s.mean_ms, 175.0);
        assert_eq!(s.ci95_ms, 0.0);
        assert_eq!(s.count, 100);
    }

    #[test]
    fn interval_matches_t_table() {
        // n = 5, sd = 1.5811, t(0.975, 4) = 2.7764
        let s = LatencyStats::from_micros(&[1000, 2000, 3000, 4000, 5000]);
        assert!((s.mean_ms - 3.0).abs() < 1e-12);
        assert!((s.ci95_ms - 2.7764 * 1.581_139 / 5f64.sqrt()).abs() < 1e-3);
    }

    #[test]
    fn empty_is_default() {
        assert_eq!(LatencyStats::from_micros(&[]), LatencyStats::default());
    }
}
