//! Importance weights, top-weight clipping, reverse ESS, self-normalized
//! estimates and categorical resampling.

use ndarray::{Array2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;

use crate::targets::TargetDensity;
use crate::{Error, Result, Scalar};

/// Fraction of the largest weights clipped before computing ESS.
pub const DEFAULT_CLIP_FRACTION: f64 = 1e-4;

/// Samples with log importance weights `log p̃ - log q` and their
/// self-normalized weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSamples<T> {
    pub points: Array2<T>,
    pub log_weights: Vec<T>,
    normalized: Vec<T>,
}

impl<T: Scalar> WeightedSamples<T> {
    /// Normalizes in log space (max subtraction). Non-finite log-weights
    /// other than `-inf` are rejected.
    pub fn new(points: Array2<T>, log_weights: Vec<T>) -> Result<Self> {
        if points.nrows() != log_weights.len() {
            return Err(Error::DimensionMismatch {
                expected: points.nrows(),
                got: log_weights.len(),
            });
        }
        if let Some((i, &v)) = log_weights
            .iter()
            .enumerate()
            .find(|(_, v)| v.is_nan() || **v == T::infinity())
        {
            return Err(Error::NonFinite {
                what: "log importance weight",
                index: i,
                value: v.as_f64(),
            });
        }
        let normalized = normalize_log_weights(&log_weights);
        Ok(Self {
            points,
            log_weights,
            normalized,
        })
    }

    /// Builds weighted samples from raw (non-negative) weights.
    pub fn from_weights(points: Array2<T>, weights: &[T]) -> Result<Self> {
        let lw = weights.iter().map(|&w| w.ln()).collect();
        Self::new(points, lw)
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    /// Self-normalized weights; all zero when every log-weight is `-inf`.
    pub fn normalized_weights(&self) -> &[T] {
        &self.normalized
    }
}

fn normalize_log_weights<T: Scalar>(lw: &[T]) -> Vec<T> {
    let max = lw.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return vec![T::zero(); lw.len()];
    }
    let w: Vec<T> = lw.iter().map(|&v| (v - max).exp()).collect();
    let total: T = w.iter().copied().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// `log_weights = log p̃(x) - log q(x)`, with the target's regularization.
pub fn importance_weights<T: Scalar>(
    points: Array2<T>,
    log_q: &[T],
    target: &TargetDensity<T>,
) -> Result<WeightedSamples<T>> {
    if points.nrows() != log_q.len() {
        return Err(Error::DimensionMismatch {
            expected: points.nrows(),
            got: log_q.len(),
        });
    }
    if let Some((i, &v)) = log_q.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "proposal log-density",
            index: i,
            value: v.as_f64(),
        });
    }
    let lp = target.log_density_batch(&points);
    let lw = lp.iter().zip(log_q).map(|(&p, &q)| p - q).collect();
    WeightedSamples::new(points, lw)
}

/// Sets the `k = ceil(fraction·N)` largest weights to the smallest weight
/// among them and renormalizes. With `k = 1` this is the identity.
pub fn clip_top_weights<T: Scalar>(ws: &WeightedSamples<T>, fraction: f64) -> WeightedSamples<T> {
    let n = ws.len();
    if n == 0 {
        return ws.clone();
    }
    let k = ((fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    // partial selection of the k largest log-weights
    let pivot = n - k;
    order.select_nth_unstable_by(pivot, |&a, &b| {
        ws.log_weights[a]
            .partial_cmp(&ws.log_weights[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let top = &order[pivot..];
    let floor = top
        .iter()
        .map(|&i| ws.log_weights[i])
        .fold(T::infinity(), T::min);
    let mut lw = ws.log_weights.clone();
    for &i in top {
        lw[i] = floor;
    }
    let normalized = normalize_log_weights(&lw);
    WeightedSamples {
        points: ws.points.clone(),
        log_weights: lw,
        normalized,
    }
}

/// Reverse effective sample size `1 / (N Σ w̄²)` as a fraction of N.
pub fn ess<T: Scalar>(ws: &WeightedSamples<T>) -> T {
    ess_from_normalized(ws.normalized_weights())
}

pub fn ess_from_normalized<T: Scalar>(w: &[T]) -> T {
    let s2: T = w.iter().map(|&v| v * v).sum();
    if s2 == T::zero() {
        return T::zero();
    }
    T::one() / (T::from_usize(w.len()) * s2)
}

/// ESS after clipping the top `fraction` of weights.
pub fn clipped_ess<T: Scalar>(ws: &WeightedSamples<T>, fraction: f64) -> T {
    ess(&clip_top_weights(ws, fraction))
}

/// Self-normalized importance-sampling estimate of `E_p[h]`.
pub fn snis_estimate<T: Scalar, H>(h: H, ws: &WeightedSamples<T>) -> T
where
    H: Fn(&[T]) -> T,
{
    ws.points
        .rows()
        .into_iter()
        .zip(ws.normalized_weights())
        .filter(|(_, &w)| w > T::zero())
        .map(|(r, &w)| w * h(r.as_slice().expect("row-major")))
        .sum()
}

/// Indices of `m` i.i.d. categorical draws with probabilities `w̄`.
pub fn categorical_indices<T: Scalar>(ws: &WeightedSamples<T>, m: usize, seed: u64) -> Result<Vec<usize>> {
    let w: Vec<f64> = ws.normalized_weights().iter().map(|v| v.as_f64()).collect();
    let dist = WeightedIndex::new(&w).map_err(|_| Error::DegenerateWeights)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..m).map(|_| dist.sample(&mut rng)).collect())
}

/// `m` points drawn with replacement proportionally to the normalized weights.
pub fn categorical_resample<T: Scalar>(ws: &WeightedSamples<T>, m: usize, seed: u64) -> Result<Array2<T>> {
    let idx = categorical_indices(ws, m, seed)?;
    Ok(ws.points.select(Axis(0), &idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn pts(n: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, 1), |(i, _)| i as f64)
    }

    #[test]
    fn ess_examples() {
        let u = WeightedSamples::from_weights(pts(10), &[1.0; 10]).unwrap();
        assert_abs_diff_eq!(ess(&u), 1.0, epsilon = 1e-15);
        let mut w = vec![0.0; 100];
        w[0] = 1.0;
        let one = WeightedSamples::from_weights(pts(100), &w).unwrap();
        assert_abs_diff_eq!(ess(&one), 0.01, epsilon = 1e-15);
        let t = WeightedSamples::from_weights(pts(3), &[2.0, 1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(ess(&t), 8.0 / 9.0, epsilon = 1e-15);
    }

    #[test]
    fn clip_k1_is_noop() {
        let w: Vec<f64> = (0..10_000).map(|i| 1.0 + (i % 97) as f64).collect();
        let ws = WeightedSamples::from_weights(pts(10_000), &w).unwrap();
        let c = clip_top_weights(&ws, 1e-4);
        assert_eq!(c.normalized_weights(), ws.normalized_weights());
    }

    #[test]
    fn clip_k3() {
        let mut w = vec![1.0; 30_000];
        w[10] = 5.0;
        w[20] = 7.0;
        w[29_999] = 100.0;
        let ws = WeightedSamples::from_weights(pts(30_000), &w).unwrap();
        let c = clip_top_weights(&ws, 1e-4);
        let lw: Vec<f64> = c.log_weights.iter().map(|v| v.exp()).collect();
        for i in [10, 20, 29_999] {
            assert_abs_diff_eq!(lw[i], 5.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(lw[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn clip_equal_weights_unchanged() {
        let ws = WeightedSamples::from_weights(pts(50_000), &vec![3.0; 50_000]).unwrap();
        assert_eq!(clip_top_weights(&ws, 1e-4).normalized_weights(), ws.normalized_weights());
    }

    #[test]
    fn snis_constant_and_uniform() {
        let ws = WeightedSamples::new(pts(5), vec![0.1, -3.0, 2.0, 0.0, 1.0]).unwrap();
        assert_abs_diff_eq!(snis_estimate(|_| 1.0, &ws), 1.0, epsilon = 1e-15);
        let u = WeightedSamples::new(pts(5), vec![0.0; 5]).unwrap();
        assert_abs_diff_eq!(snis_estimate(|x| x[0], &u), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn resample_degenerate_and_point_mass() {
        let ws = WeightedSamples::from_weights(pts(3), &[1.0, 0.0, 0.0]).unwrap();
        let r = categorical_resample(&ws, 5, 1).unwrap();
        assert!(r.iter().all(|&v| v == 0.0));
        let z = WeightedSamples::from_weights(pts(3), &[0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(categorical_resample(&z, 5, 1), Err(Error::DegenerateWeights)));
    }

    #[test]
    fn resample_uniform_multiplicity() {
        let ws = WeightedSamples::from_weights(pts(10), &[1.0; 10]).unwrap();
        let m = 100_000;
        let idx = categorical_indices(&ws, m, 3).unwrap();
        let mut counts = [0usize; 10];
        idx.iter().for_each(|&i| counts[i] += 1);
        // binomial sd = sqrt(m p (1-p)) ≈ 95
        for c in counts {
            assert!((c as f64 - 10_000.0).abs() < 500.0);
        }
    }

    #[test]
    fn rejects_nan_log_weights() {
        assert!(matches!(
            WeightedSamples::new(pts(2), vec![0.0, f64::NAN]),
            Err(Error::NonFinite { index: 1, .. })
        ));
    }

    proptest! {
        #[test]
        fn ess_scale_invariant(lw in proptest::collection::vec(-30.0f64..30.0, 2..200), c in -50.0f64..50.0) {
            let n = lw.len();
            let a = WeightedSamples::new(pts(n), lw.clone()).unwrap();
            let b = WeightedSamples::new(pts(n), lw.iter().map(|v| v + c).collect()).unwrap();
            prop_assert!((ess(&a) - ess(&b)).abs() < 1e-12);
        }

        #[test]
        fn clipping_never_lowers_ess(lw in proptest::collection::vec(-30.0f64..30.0, 1..500), frac in 0.0f64..0.2) {
            let n = lw.len();
            let a = WeightedSamples::new(pts(n), lw).unwrap();
            prop_assert!(clipped_ess(&a, frac) >= ess(&a) - 1e-12);
        }

        #[test]
        fn wide_log_weights_stay_finite(lw in proptest::collection::vec(-700.0f64..700.0, 1..100)) {
            let n = lw.len();
            let a = WeightedSamples::new(pts(n), lw).unwrap();
            prop_assert!(a.normalized_weights().iter().all(|w| w.is_finite() && *w >= 0.0 && *w <= 1.0));
            let total: f64 = a.normalized_weights().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
