//! Evaluation metrics: NLL, reverse ESS, 2-D histogram KL (plain and
//! reweighted), 1-D energy 2-Wasserstein and quadrature of the model mass.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::flow::FlowModel;
use crate::impsampling::{categorical_indices, clip_top_weights, ess, importance_weights, WeightedSamples};
use crate::scalar::mean_stderr;
use crate::targets::{GmmTarget, TargetDensity};
use crate::{Error, Result, Scalar};

/// Smoothing mass added to every histogram bin.
pub const HIST_SMOOTHING: f64 = 1e-10;

/// Mean of `-log q` over the test points and its standard error.
pub fn nll<T: Scalar>(test_points: ArrayView2<T>, model: &FlowModel<T>) -> Result<(f64, f64)> {
    if test_points.nrows() == 0 {
        return Err(Error::Config("empty test set".into()));
    }
    let lq = model.log_density_batch(test_points)?;
    let neg: Vec<f64> = lq.iter().map(|v| -v.as_f64()).collect();
    Ok(mean_stderr(&neg))
}

/// Draws `n` model samples and returns their importance weights toward
/// `target`, before clipping.
pub fn model_weights<T: Scalar>(
    model: &FlowModel<T>,
    target: &TargetDensity<T>,
    n: usize,
    seed: u64,
) -> Result<WeightedSamples<T>> {
    let (x, lq) = model.sample(n, seed)?;
    importance_weights(x, &lq, target)
}

/// Reverse ESS on `n` fresh model samples after clipping the top `clip`
/// fraction of weights.
pub fn reverse_ess<T: Scalar>(
    model: &FlowModel<T>,
    target: &TargetDensity<T>,
    n: usize,
    seed: u64,
    clip: f64,
) -> Result<f64> {
    let ws = model_weights(model, target, n, seed)?;
    Ok(ess(&clip_top_weights(&ws, clip)).as_f64())
}

struct Grid {
    lo: [f64; 2],
    width: [f64; 2],
    bins: usize,
}

impl Grid {
    fn from_reference<T: Scalar>(pts: ArrayView2<T>, bins: usize) -> Self {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for r in pts.rows() {
            for j in 0..2 {
                lo[j] = lo[j].min(r[j].as_f64());
                hi[j] = hi[j].max(r[j].as_f64());
            }
        }
        let width = [0, 1].map(|j| ((hi[j] - lo[j]) / bins as f64).max(f64::MIN_POSITIVE));
        Self { lo, width, bins }
    }

    fn index(&self, x: f64, y: f64) -> Option<usize> {
        let cell = |v: f64, j: usize| {
            let k = ((v - self.lo[j]) / self.width[j]).floor();
            if k < 0.0 || !k.is_finite() {
                None
            } else if (k as usize) < self.bins {
                Some(k as usize)
            } else if k as usize == self.bins && v <= self.lo[j] + self.width[j] * self.bins as f64 {
                // right edge belongs to the last bin
                Some(self.bins - 1)
            } else {
                None
            }
        };
        Some(cell(x, 0)? * self.bins + cell(y, 1)?)
    }

    fn histogram<T: Scalar>(&self, pts: ArrayView2<T>, weights: Option<&[T]>) -> Vec<f64> {
        // equal weights are plain counts
        let weights = weights.filter(|w| w.iter().any(|&v| v != w[0]));
        let mut h = vec![0.0; self.bins * self.bins];
        let mut total = 0.0;
        for (i, r) in pts.rows().into_iter().enumerate() {
            let w = weights.map_or(1.0, |w| w[i].as_f64());
            total += w;
            if let Some(k) = self.index(r[0].as_f64(), r[1].as_f64()) {
                h[k] += w;
            }
        }
        // mass falling outside the range still counts in the normalization
        if total > 0.0 {
            h.iter_mut().for_each(|v| *v /= total);
        }
        h.iter_mut().for_each(|v| *v += HIST_SMOOTHING);
        let total: f64 = h.iter().sum();
        h.iter_mut().for_each(|v| *v /= total);
        h
    }
}

/// `KL(ref ‖ model)` between smoothed `bins × bins` histograms whose range is
/// the per-axis extent of `ref_points`. Model mass outside the range is lost
/// from the histogram; `weights` (if given) weight the model counts.
pub fn hist_kl_2d<T: Scalar>(
    ref_points: ArrayView2<T>,
    model_points: ArrayView2<T>,
    weights: Option<&[T]>,
    bins: usize,
) -> Result<f64> {
    if ref_points.ncols() != 2 || model_points.ncols() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            got: if ref_points.ncols() != 2 { ref_points.ncols() } else { model_points.ncols() },
        });
    }
    if ref_points.nrows() == 0 || model_points.nrows() == 0 || bins == 0 {
        return Err(Error::Config("histogram KL needs non-empty inputs".into()));
    }
    if let Some(w) = weights {
        if w.len() != model_points.nrows() {
            return Err(Error::DimensionMismatch {
                expected: model_points.nrows(),
                got: w.len(),
            });
        }
    }
    let grid = Grid::from_reference(ref_points, bins);
    let p = grid.histogram(ref_points, None);
    let q = grid.histogram(model_points, weights);
    Ok(p.iter().zip(&q).map(|(&a, &b)| a * (a / b).ln()).sum::<f64>().max(0.0))
}

/// 2-Wasserstein distance between two 1-D empirical distributions via the
/// quantile coupling. For unequal sizes the integral of the squared quantile
/// difference is evaluated exactly over the merged breakpoints.
pub fn energy_w2<T: Scalar>(a: &[T], b: &[T]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Config("energy W2 needs non-empty inputs".into()));
    }
    let sorted = |v: &[T]| {
        let mut s: Vec<f64> = v.iter().map(|x| x.as_f64()).collect();
        s.sort_by(f64::total_cmp);
        s
    };
    let (a, b) = (sorted(a), sorted(b));
    let (n, m) = (a.len(), b.len());
    if n == m {
        let s: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        return Ok((s / n as f64).sqrt());
    }
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0f64;
    let mut acc = 0.0f64;
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        let d = a[i] - b[j];
        acc += (next - u) * d * d;
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    Ok(acc.max(0.0).sqrt())
}

/// Trapezoid quadrature of `exp(log q)` over `[lo, hi]²` with `grid_n`
/// intervals per axis (2-D models only).
pub fn normalization_check<T: Scalar>(model: &FlowModel<T>, lo: f64, hi: f64, grid_n: usize) -> Result<f64> {
    if model.dim() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            got: model.dim(),
        });
    }
    quadrature_2d(lo, hi, grid_n, |pts| {
        Ok(model.log_density_batch(pts.view())?.iter().map(|v| v.as_f64().exp()).collect())
    })
}

/// Trapezoid rule over `[lo, hi]²`; `density` maps a batch of nodes to values.
pub fn quadrature_2d<T: Scalar, F>(lo: f64, hi: f64, grid_n: usize, density: F) -> Result<f64>
where
    F: Fn(&Array2<T>) -> Result<Vec<f64>>,
{
    if grid_n == 0 || hi <= lo {
        return Err(Error::Config("quadrature needs grid_n ≥ 1 and hi > lo".into()));
    }
    let h = (hi - lo) / grid_n as f64;
    let k = grid_n + 1;
    let node = |i: usize| T::lit(lo + h * i as f64);
    let pts = Array2::from_shape_fn((k * k, 2), |(r, c)| if c == 0 { node(r / k) } else { node(r % k) });
    let vals = density(&pts)?;
    let edge = |i: usize| if i == 0 || i == grid_n { 0.5 } else { 1.0 };
    let total: f64 = vals
        .iter()
        .enumerate()
        .map(|(r, v)| edge(r / k) * edge(r % k) * v)
        .sum();
    Ok(total * h * h)
}

/// Metrics of one evaluation, serialized with fixed key names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub nll: f64,
    pub nll_stderr: f64,
    pub ess: f64,
    pub hist_kl: Option<f64>,
    pub hist_kl_rw: Option<f64>,
    pub energy_w2: f64,
    pub n_eval: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_eval: usize,
    pub seed: u64,
    pub clip_fraction: f64,
    pub bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_eval: 1_000_000,
            seed: 0,
            clip_fraction: crate::impsampling::DEFAULT_CLIP_FRACTION,
            bins: 100,
        }
    }
}

/// Full evaluation against an exactly sampleable target: NLL on fresh exact
/// samples, clipped reverse ESS on fresh model samples, histogram KLs (2-D
/// only) and the energy W2 after categorical resampling.
pub fn evaluate<T: Scalar>(
    model: &FlowModel<T>,
    exact: &GmmTarget<T>,
    target: &TargetDensity<T>,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    let test = exact.sample(cfg.n_eval, cfg.seed ^ 0x7465_7374);
    let (nll, nll_stderr) = nll(test.view(), model)?;
    let (x, lq) = model.sample(cfg.n_eval, cfg.seed ^ 0x6d6f_646c)?;
    let ws = importance_weights(x, &lq, target)?;
    let clipped = clip_top_weights(&ws, cfg.clip_fraction);
    let ess_v = ess(&clipped).as_f64();
    let (hist_kl, hist_kl_rw) = if model.dim() == 2 {
        (
            Some(hist_kl_2d(test.view(), ws.points.view(), None, cfg.bins)?),
            Some(hist_kl_2d(
                test.view(),
                ws.points.view(),
                Some(clipped.normalized_weights()),
                cfg.bins,
            )?),
        )
    } else {
        (None, None)
    };
    let ref_energies = target.energies(&test);
    let idx = categorical_indices(&ws, cfg.n_eval, cfg.seed ^ 0x7273_6d70)?;
    let beta = target.beta();
    // log-weights hold log p̃ - log q; energies are recovered without new target calls
    let model_energies: Vec<T> = idx.iter().map(|&i| -(ws.log_weights[i] + lq[i]) / beta).collect();
    let energy_w2 = energy_w2(&ref_energies, &model_energies)?;
    Ok(MetricsReport {
        nll,
        nll_stderr,
        ess: ess_v,
        hist_kl,
        hist_kl_rw,
        energy_w2,
        n_eval: cfg.n_eval,
        seed: cfg.seed,
    })
}
