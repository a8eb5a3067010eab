//! Two-sample tests, moment comparisons and Monte Carlo intervals.

use serde::{Deserialize, Serialize};

use crate::error::{Result, StosymError};

pub const MIN_KS_SAMPLES: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoSampleResult {
    pub statistic: f64,
    pub threshold: f64,
    pub n1: usize,
    pub n2: usize,
    pub pass: bool,
}

impl TwoSampleResult {
    fn new(statistic: f64, threshold: f64, n1: usize, n2: usize) -> Self {
        Self { statistic, threshold, n1, n2, pass: statistic <= threshold }
    }
}

/// Asymptotic Kolmogorov critical value `c(level) = √(−ln(level/2)/2)`.
pub fn ks_critical(level: f64) -> f64 {
    (-(level / 2.0).ln() / 2.0).sqrt()
}

fn sorted(a: &[f64]) -> Vec<f64> {
    let mut v = a.to_vec();
    v.sort_by(|x, y| x.total_cmp(y));
    v
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(StosymError::InvalidParameter(format!("level {level} not in (0,1)")))
    }
}

/// Largest gap between the two empirical CDFs.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let (a, b) = (sorted(a), sorted(b));
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = if a[i] <= b[j] { a[i] } else { b[j] };
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n1 - j as f64 / n2).abs());
    }
    d
}

pub fn ks_two_sample(a: &[f64], b: &[f64], level: f64) -> Result<TwoSampleResult> {
    check_level(level)?;
    for s in [a, b] {
        if s.len() < MIN_KS_SAMPLES {
            return Err(StosymError::TooFewSamples { need: MIN_KS_SAMPLES, got: s.len() });
        }
    }
    let (n1, n2) = (a.len(), b.len());
    let threshold = ks_critical(level) * ((n1 + n2) as f64 / (n1 as f64 * n2 as f64)).sqrt();
    Ok(TwoSampleResult::new(ks_statistic(a, b), threshold, n1, n2))
}

/// One-sample test against a continuous CDF; `n2` is reported as 0.
pub fn ks_one_sample(a: &[f64], cdf: impl Fn(f64) -> f64, level: f64) -> Result<TwoSampleResult> {
    check_level(level)?;
    if a.len() < MIN_KS_SAMPLES {
        return Err(StosymError::TooFewSamples { need: MIN_KS_SAMPLES, got: a.len() });
    }
    let s = sorted(a);
    let n = s.len() as f64;
    let mut d = 0.0f64;
    for (i, x) in s.iter().enumerate() {
        let f = cdf(*x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    Ok(TwoSampleResult::new(d, ks_critical(level) / n.sqrt(), s.len(), 0))
}

/// Sample mean and its standard error `sd/√n`.
pub fn mc_mean_ci(samples: &[f64]) -> Result<(f64, f64)> {
    let n = samples.len();
    if n < 2 {
        return Err(StosymError::TooFewSamples { need: 2, got: n });
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, (var / n as f64).sqrt()))
}

/// Compares raw moments of the given orders; the statistic is the largest
/// difference measured in pooled standard errors.
pub fn moment_compare(a: &[f64], b: &[f64], orders: &[u32], tol_in_stderr: f64) -> Result<TwoSampleResult> {
    let mut worst = 0.0f64;
    for &p in orders {
        if !(1..=4).contains(&p) {
            return Err(StosymError::InvalidParameter(format!("moment order {p} not in 1..=4")));
        }
        let pa: Vec<f64> = a.iter().map(|x| x.powi(p as i32)).collect();
        let pb: Vec<f64> = b.iter().map(|x| x.powi(p as i32)).collect();
        let (ma, sa) = mc_mean_ci(&pa)?;
        let (mb, sb) = mc_mean_ci(&pb)?;
        let diff = (ma - mb).abs();
        let se = (sa * sa + sb * sb).sqrt();
        let z = if diff == 0.0 {
            0.0
        } else if se == 0.0 {
            f64::INFINITY
        } else {
            diff / se
        };
        worst = worst.max(z);
    }
    Ok(TwoSampleResult::new(worst, tol_in_stderr, a.len(), b.len()))
}

/// Standard normal CDF scaled to variance `var`.
pub fn normal_cdf(var: f64) -> impl Fn(f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    let d = Normal::new(0.0, var.sqrt()).expect("positive variance");
    move |x| d.cdf(x)
}

/// CDF of the standard Cauchy law (characteristic function `e^{−|u|}`).
pub fn cauchy_cdf() -> impl Fn(f64) -> f64 {
    use statrs::distribution::{Cauchy, ContinuousCDF};
    let d = Cauchy::new(0.0, 1.0).expect("valid scale");
    move |x| d.cdf(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(seed: u64, n: usize, shift: f64) -> Vec<f64> {
        let mut r = rng_from_seed(seed);
        (0..n).map(|_| shift + Distribution::<f64>::sample(&StandardNormal, &mut r)).collect::<Vec<f64>>()
    }

    #[test]
    fn identical_samples_pass() {
        let a = normals(1, 200, 0.0);
        let r = ks_two_sample(&a, &a, 0.01).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert!(r.pass);
        assert!(moment_compare(&a, &a, &[1, 2, 3, 4], 4.0).unwrap().pass);
    }

    #[test]
    fn shifted_samples_fail() {
        let a = normals(1, 10_000, 0.0);
        let b = normals(2, 10_000, 3.0);
        assert!(!ks_two_sample(&a, &b, 0.01).unwrap().pass);
        assert!(!moment_compare(&a, &b, &[1], 4.0).unwrap().pass);
    }

    #[test]
    fn too_few_samples() {
        assert!(matches!(ks_two_sample(&[0.0; 10], &[0.0; 100], 0.01), Err(StosymError::TooFewSamples { .. })));
    }

    #[test]
    fn calibration_over_seeds() {
        let passes = (0..100u64)
            .filter(|s| {
                let a = normals(1000 + 2 * s, 10_000, 0.0);
                let b = normals(1001 + 2 * s, 10_000, 0.0);
                ks_two_sample(&a, &b, 0.01).unwrap().pass
            })
            .count();
        assert!(passes >= 95, "{passes}");
        let mpass = (0..100u64)
            .filter(|s| {
                let a = normals(5000 + 2 * s, 2000, 0.0);
                let b = normals(5001 + 2 * s, 2000, 0.0);
                moment_compare(&a, &b, &[1, 2], 4.0).unwrap().pass
            })
            .count();
        assert!(mpass >= 95, "{mpass}");
    }

    #[test]
    fn one_sample_against_normal() {
        let a = normals(9, 5000, 0.0);
        assert!(ks_one_sample(&a, normal_cdf(1.0), 0.01).unwrap().pass);
        assert!(!ks_one_sample(&a, normal_cdf(4.0), 0.01).unwrap().pass);
        assert!((cauchy_cdf()(1.0) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn mean_ci_examples() {
        let (m, se) = mc_mean_ci(&[2.5; 10]).unwrap();
        assert_eq!((m, se), (2.5, 0.0));
        let mut r = rng_from_seed(3);
        let bern: Vec<f64> = (0..10_000).map(|_| if r.random::<bool>() { 1.0 } else { 0.0 }).collect();
        let (m, se) = mc_mean_ci(&bern).unwrap();
        assert!((m - 0.5).abs() <= 4.0 * se);
        let (_, se) = mc_mean_ci(&normals(4, 10_000, 0.0)).unwrap();
        assert!((se - 0.01).abs() < 0.002);
        assert!(mc_mean_ci(&[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn ks_invariant_under_monotone_maps(
            a in proptest::collection::vec(-5.0f64..5.0, 60..120),
            b in proptest::collection::vec(-5.0f64..5.0, 60..120),
        ) {
            let f = |x: f64| x.exp() * 3.0 + 1.0;
            let fa: Vec<f64> = a.iter().map(|&x| f(x)).collect();
            let fb: Vec<f64> = b.iter().map(|&x| f(x)).collect();
            let d1 = ks_two_sample(&a, &b, 0.05).unwrap().statistic;
            let d2 = ks_two_sample(&fa, &fb, 0.05).unwrap().statistic;
            prop_assert!((d1 - d2).abs() < 1e-12);
        }

        #[test]
        fn moment_compare_is_symmetric(
            a in proptest::collection::vec(-5.0f64..5.0, 10..50),
            b in proptest::collection::vec(-5.0f64..5.0, 10..50),
        ) {
            let x = moment_compare(&a, &b, &[1, 2, 3, 4], 4.0).unwrap().statistic;
            let y = moment_compare(&b, &a, &[1, 2, 3, 4], 4.0).unwrap().statistic;
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }
}
