//! Monte Carlo summary statistics: every standard error in the library is a
//! bootstrap over per-path contributions (200 resamples by default), because
//! the sup-type error functionals have no closed-form variance.

use rayon::prelude::*;

use crate::stream::{substream, CH_BOOTSTRAP};

pub const DEFAULT_RESAMPLES: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Bootstrap standard error of the sample mean of `values`.
pub fn bootstrap_se_of_mean(values: &[f64], resamples: usize, seed: u64, tag: u64) -> f64 {
    let reps = bootstrap_means(values, resamples, seed, tag);
    sd(&reps)
}

/// Mean plus bootstrap SE.
pub fn bootstrap_mean(values: &[f64], resamples: usize, seed: u64, tag: u64) -> Estimate {
    Estimate {
        value: mean(values),
        se: bootstrap_se_of_mean(values, resamples, seed, tag),
    }
}

/// Resampled means, one per bootstrap replicate (deterministic in
/// `(seed, tag)` and independent of thread count).
pub fn bootstrap_means(values: &[f64], resamples: usize, seed: u64, tag: u64) -> Vec<f64> {
    let m = values.len();
    (0..resamples)
        .into_par_iter()
        .map(|b| {
            let mut s = substream(seed, b as u64, CH_BOOTSTRAP ^ tag);
            let mut acc = 0.0;
            for _ in 0..m {
                acc += values[s.next_index(m)];
            }
            acc / m as f64
        })
        .collect()
}

pub fn sd(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let v = values.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (values.len() - 1) as f64;
    v.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::substream;

    #[test]
    fn bootstrap_se_tracks_classical_se() {
        let mut s = substream(1, 0, 7);
        let values: Vec<f64> = (0..20_000).map(|_| s.next_normal()).collect();
        let se_boot = bootstrap_se_of_mean(&values, 200, 3, 0);
        let se_classical = sd(&values) / (values.len() as f64).sqrt();
        assert!(
            (se_boot / se_classical - 1.0).abs() < 0.25,
            "boot {se_boot}, classical {se_classical}"
        );
    }

    #[test]
    fn doubling_sample_size_roughly_halves_se() {
        let mut s = substream(2, 0, 7);
        let values: Vec<f64> = (0..40_000).map(|_| s.next_normal()).collect();
        let se_full = bootstrap_se_of_mean(&values, 200, 4, 0);
        let se_half = bootstrap_se_of_mean(&values[..20_000], 200, 4, 1);
        let ratio = se_half / se_full;
        assert!(
            (ratio - std::f64::consts::SQRT_2).abs() < 0.3 * std::f64::consts::SQRT_2,
            "ratio {ratio}"
        );
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let values: Vec<f64> = (0..5000).map(|i| (i as f64).sin()).collect();
        let p1 = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let p4 = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap();
        let a = p1.install(|| bootstrap_means(&values, 64, 9, 2));
        let b = p4.install(|| bootstrap_means(&values, 64, 9, 2));
        assert_eq!(a, b);
    }
}
