//! Classical and exact tests used by the trace analyses.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::factorial::ln_binomial;

use crate::error::{Error, Result};
use crate::scalar::Real;

fn two_sided_t(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * dist.sf(t.abs())).min(1.0)
}

/// Sample Pearson correlation with a two-sided p-value from Student's t on `n − 2` degrees
/// of freedom.
pub fn pearson<T: Real>(x: &[T], y: &[T]) -> Result<(T, T)> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{} x values vs {} y values", x.len(), y.len())));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::InsufficientData(format!("pearson needs at least 3 pairs, got {n}")));
    }
    let nf = T::lit(n as f64);
    let mx = x.iter().copied().sum::<T>() / nf;
    let my = y.iter().copied().sum::<T>() / nf;
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy = sxy + da * db;
        sxx = sxx + da * da;
        syy = syy + db * db;
    }
    if sxx == T::zero() || syy == T::zero() {
        return Err(Error::ConstantInput);
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).max(-T::one()).min(T::one());
    let r64 = r.as_f64();
    let df = (n - 2) as f64;
    let p = if r64.abs() >= 1.0 { 0.0 } else { two_sided_t(r64 * (df / (1.0 - r64 * r64)).sqrt(), df) };
    Ok((r, T::lit(p)))
}

/// Exact upper tail `P(X ≥ k)` for `X ~ Binomial(n, p0)`, summed in log space.
pub fn binom_test_one_sided(k: u64, n: u64, p0: f64) -> Result<f64> {
    if k > n {
        return Err(Error::Contract(format!("k = {k} exceeds n = {n}")));
    }
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(Error::Contract(format!("p0 = {p0} outside (0, 1)")));
    }
    if k == 0 {
        return Ok(1.0);
    }
    let (lp, lq) = (p0.ln(), (1.0 - p0).ln());
    let terms: Vec<f64> = (k..=n).map(|i| ln_binomial(n, i) + i as f64 * lp + (n - i) as f64 * lq).collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_tail = max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
    Ok(log_tail.exp().min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TTestVariant {
    /// Pooled variance.
    #[default]
    Student,
    /// Unequal variances with Welch–Satterthwaite degrees of freedom.
    Welch,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Two-sided two-sample t-test. Zero spread with equal means gives `(0, 1)`; zero spread
/// with different means is a degenerate separation reported as `(±∞, 0)`.
pub fn t_test_two_sample(a: &[f64], b: &[f64], variant: TTestVariant) -> Result<(f64, f64)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "t-test needs two values per group, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let diff = ma - mb;
    let (se, df) = match variant {
        TTestVariant::Student => {
            let df = na + nb - 2.0;
            let pooled = ((na - 1.0) * va + (nb - 1.0) * vb) / df;
            ((pooled * (1.0 / na + 1.0 / nb)).sqrt(), df)
        }
        TTestVariant::Welch => {
            let (sa, sb) = (va / na, vb / nb);
            let se2 = sa + sb;
            let df = if se2 > 0.0 { se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0)) } else { na + nb - 2.0 };
            (se2.sqrt(), df)
        }
    };
    if se == 0.0 {
        return Ok(if diff == 0.0 { (0.0, 1.0) } else { (diff.signum() * f64::INFINITY, 0.0) });
    }
    let t = diff / se;
    Ok((t, two_sided_t(t, df)))
}

/// Nearest-rank upper quantile: the element at 1-based rank `ceil(q · n)` of the sorted list.
pub fn upper_quantile(xs: &[f64], q: f64) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::InsufficientData("quantile of an empty list".into()));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Contract(format!("quantile level {q} outside (0, 1)")));
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Ok(sorted[rank - 1])
}

#[cfg(test)]
mod unit {
    use super::*;
    use num_bigint::BigUint;
    use proptest::prelude::*;

    /// `P(X ≥ k)` for a fair coin by exact integer summation.
    fn fair_tail_exact(k: u64, n: u64) -> f64 {
        let mut c = BigUint::from(1u32);
        let mut tail = BigUint::from(0u32);
        for i in 0..=n {
            if i >= k {
                tail += &c;
            }
            c = c * BigUint::from(n - i) / BigUint::from(i + 1);
        }
        let total = BigUint::from(1u32) << n;
        // ratio of two big integers via their leading digits
        let shift = total.bits().saturating_sub(60);
        let num = (&tail >> shift).to_u64_digits().first().copied().unwrap_or(0) as f64;
        let den = (&total >> shift).to_u64_digits().first().copied().unwrap_or(0) as f64;
        num / den
    }

    #[test]
    fn binomial_examples() {
        assert!((binom_test_one_sided(4, 4, 0.5).unwrap() - 0.0625).abs() < 1e-12);
        assert!((binom_test_one_sided(30, 60, 0.5).unwrap() - fair_tail_exact(30, 60)).abs() < 1e-12);
        assert!((binom_test_one_sided(30, 60, 0.5).unwrap() - 0.5513).abs() < 1e-3);
        assert!((binom_test_one_sided(37, 60, 0.5).unwrap() - 0.0462).abs() < 5e-4);
        assert_eq!(binom_test_one_sided(0, 9, 0.3).unwrap(), 1.0);
        assert!(binom_test_one_sided(5, 4, 0.5).is_err());
        assert!(binom_test_one_sided(1, 4, 1.0).is_err());
    }

    #[test]
    fn binomial_large_n_in_log_space() {
        let p = binom_test_one_sided(1700, 2318, 0.5).unwrap();
        assert!(p > 0.0 && p < 1e-6);
        for k in [1000u64, 1159, 1200] {
            let exact = fair_tail_exact(k, 2318);
            assert!((binom_test_one_sided(k, 2318, 0.5).unwrap() - exact).abs() < 1e-9);
        }
    }

    #[test]
    fn pearson_examples() {
        let (r, _) = pearson(&[1.0f64, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        let (r, p) = pearson(&[1.0f64, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap();
        // sxy = 1, sxx = syy = 2 → r = 1/2; t = 0.5·sqrt(1/0.75) on 1 df
        assert!((r - 0.5).abs() < 1e-12);
        let t = 0.5f64 * (1.0f64 / 0.75).sqrt();
        let p_cauchy = 1.0 - 2.0 * t.atan() / std::f64::consts::PI;
        assert!((p - p_cauchy).abs() < 1e-9);
        let (r, _) = pearson(&[1.0f64, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
        assert!((r + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_errors() {
        assert!(matches!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::ConstantInput)));
        assert!(matches!(pearson(&[1.0, 2.0], &[1.0, 2.0]), Err(Error::InsufficientData(_))));
        assert!(pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn t_test_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(t_test_two_sample(&a, &a, TTestVariant::Student).unwrap(), (0.0, 1.0));
        let (t, p) = t_test_two_sample(&[0.0; 4], &[1.0; 4], TTestVariant::Student).unwrap();
        assert_eq!(p, 0.0);
        assert!(t.is_infinite() && t < 0.0);
        assert_eq!(t_test_two_sample(&[2.0; 3], &[2.0; 3], TTestVariant::Welch).unwrap(), (0.0, 1.0));

        // pooled variance 5/3, se = sqrt(5/3 · 1/2), t = -1/se on 6 df
        let (t, p) = t_test_two_sample(&a, &[2.0, 3.0, 4.0, 5.0], TTestVariant::Student).unwrap();
        let want_t = -1.0 / (5.0f64 / 3.0 * 0.5).sqrt();
        assert!((t - want_t).abs() < 1e-12);
        assert!((p - 0.315_333_596_201_229_8).abs() < 1e-9);
        let (tw, pw) = t_test_two_sample(&a, &[2.0, 3.0, 4.0, 5.0], TTestVariant::Welch).unwrap();
        assert!((tw - want_t).abs() < 1e-12 && (pw - p).abs() < 1e-9);
        assert!(t_test_two_sample(&[1.0], &a, TTestVariant::Student).is_err());
    }

    #[test]
    fn welch_degrees_of_freedom_differ_from_pooled() {
        let a = [1.0, 1.1, 0.9, 1.0, 1.05];
        let b = [3.0, 7.0, -1.0];
        let (_, ps) = t_test_two_sample(&a, &b, TTestVariant::Student).unwrap();
        let (_, pw) = t_test_two_sample(&a, &b, TTestVariant::Welch).unwrap();
        assert!(pw > ps);
    }

    #[test]
    fn quantile_examples() {
        let xs: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(upper_quantile(&xs, 0.8).unwrap(), 8.0);
        assert_eq!(upper_quantile(&[4.2], 0.3).unwrap(), 4.2);
        assert_eq!(upper_quantile(&[7.0; 5], 0.8).unwrap(), 7.0);
        assert!(upper_quantile(&[], 0.5).is_err());
        assert!(upper_quantile(&xs, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn binomial_decreasing_in_k(n in 1u64..300, p0 in 0.05f64..0.95) {
            let mut prev = binom_test_one_sided(0, n, p0).unwrap();
            prop_assert_eq!(prev, 1.0);
            for k in 1..=n {
                let cur = binom_test_one_sided(k, n, p0).unwrap();
                // saturates at 1 for small k and underflows to 0 for large k
                prop_assert!(cur <= prev * (1.0 + 1e-12));
                prev = cur;
            }
        }

        #[test]
        fn pearson_affine_invariance(xs in prop::collection::vec(-10.0f64..10.0, 3..20), seed in 0u64..100, a in 0.1f64..5.0, b in -5.0f64..5.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let ys: Vec<f64> = xs.iter().map(|x| x + rng.random_range(-3.0..3.0)).collect();
            let Ok((r, _)) = pearson(&xs, &ys) else { return Ok(()) };
            let scaled: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            let flipped: Vec<f64> = xs.iter().map(|x| -a * x + b).collect();
            prop_assert!((pearson(&scaled, &ys).unwrap().0 - r).abs() < 1e-9);
            prop_assert!((pearson(&flipped, &ys).unwrap().0 + r).abs() < 1e-9);
        }

        #[test]
        fn quantile_is_an_element(xs in prop::collection::vec(-100.0f64..100.0, 1..50), q in 0.01f64..0.99) {
            let v = upper_quantile(&xs, q).unwrap();
            prop_assert!(xs.contains(&v));
        }
    }
}
