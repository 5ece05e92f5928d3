//! Training objectives: log importance weights `f^θ`, forward and reverse KL,
//! the log-dispersion family and the combined regularized loss.
//!
//! Every loss is expressed through the per-sample model log-densities so the
//! flow's reverse-mode pass can turn `dL/d log q` into parameter gradients.

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::flow::{standard_normal_draws, FlowModel, SampleGrad};
use crate::scalar::mean_stderr;
use crate::targets::{LogDensity, TargetDensity};
use crate::{Error, Result, Scalar};

/// Weights of the data term and the log-dispersion term, and the dispersion order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_data: f64,
    pub lambda_ld: f64,
    /// Dispersion order; 1 or 2.
    pub p: u32,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::forward_kl()
    }
}

impl LossConfig {
    pub fn forward_kl() -> Self {
        Self {
            lambda_data: 1.0,
            lambda_ld: 0.0,
            p: 1,
        }
    }

    pub fn ldr(lambda_data: f64, lambda_ld: f64, p: u32) -> Self {
        Self {
            lambda_data,
            lambda_ld,
            p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_data >= 0.0 && self.lambda_ld >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.lambda_data == 0.0 && self.lambda_ld == 0.0 {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        if !matches!(self.p, 1 | 2) {
            return Err(Error::Config(format!("dispersion order p={} not in {{1, 2}}", self.p)));
        }
        Ok(())
    }

    pub fn uses_ld(&self) -> bool {
        self.lambda_ld > 0.0
    }
}

/// Points with target energy labels for the log-dispersion term.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceBatch<T> {
    pub points: Array2<T>,
    pub energies: Vec<T>,
    /// Optional non-negative weights summing to one.
    pub weights: Option<Vec<T>>,
}

impl<T: Scalar> ReferenceBatch<T> {
    pub fn new(points: Array2<T>, energies: Vec<T>, weights: Option<Vec<T>>) -> Result<Self> {
        if points.nrows() != energies.len() {
            return Err(Error::DimensionMismatch {
                expected: points.nrows(),
                got: energies.len(),
            });
        }
        if let Some((i, e)) = energies.iter().enumerate().find(|(_, e)| !e.is_finite()) {
            return Err(Error::NonFinite {
                what: "energy label",
                index: i,
                value: e.as_f64(),
            });
        }
        if let Some(w) = &weights {
            validate_weights(w, points.nrows())?;
        }
        Ok(Self {
            points,
            energies,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    fn weights_or_uniform(&self) -> Vec<T> {
        self.weights
            .clone()
            .unwrap_or_else(|| uniform(self.points.nrows()))
    }
}

fn uniform<T: Scalar>(n: usize) -> Vec<T> {
    vec![T::one() / T::from_usize(n.max(1)); n]
}

fn validate_weights<T: Scalar>(w: &[T], n: usize) -> Result<()> {
    if w.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: w.len() });
    }
    if w.iter().any(|&v| !(v >= T::zero()) || !v.is_finite()) {
        return Err(Error::Config("weights must be finite and non-negative".into()));
    }
    let total: T = w.iter().copied().sum();
    if (total - T::one()).abs() > T::lit(1e-9) {
        return Err(Error::Config(format!("weights sum to {total}, expected 1")));
    }
    Ok(())
}

/// `f^θ(x) = -log q(x) + log p̃(x)`; the target's regularization and
/// temperature apply.
pub fn f_theta<T: Scalar>(x: &[T], model: &FlowModel<T>, target: &TargetDensity<T>) -> Result<T> {
    Ok(-model.log_density(x)? + target.log_density(x))
}

/// `f^θ` from precomputed model log-densities and energy labels.
pub fn f_theta_from_labels<T: Scalar>(log_q: &[T], energies: &[T]) -> Vec<T> {
    log_q.iter().zip(energies).map(|(&lq, &e)| -lq - e).collect()
}

fn check_order(p: u32) -> Result<()> {
    if matches!(p, 1 | 2) {
        Ok(())
    } else {
        Err(Error::Config(format!("dispersion order p={p} not in {{1, 2}}")))
    }
}

/// Weighted `p`-th absolute central moment and its gradient with respect to
/// each value. The weighted mean is part of the differentiated expression.
pub fn ld_objective_grad<T: Scalar>(values: &[T], weights: Option<&[T]>, p: u32) -> Result<(T, Vec<T>)> {
    check_order(p)?;
    let n = values.len();
    if n < 2 {
        return Err(Error::UndefinedDispersion(n));
    }
    let owned;
    let w = match weights {
        Some(w) => {
            validate_weights(w, n)?;
            w
        }
        None => {
            owned = uniform(n);
            &owned[..]
        }
    };
    // centred on the first value so that constant inputs give exact zeros
    let origin = values[0];
    let mean: T = values.iter().zip(w).map(|(&v, &wi)| (v - origin) * wi).sum();
    let mut value = T::zero();
    // g_i = d|d_i|^p / d d_i
    let g: Vec<T> = values
        .iter()
        .zip(w)
        .map(|(&v, &wi)| {
            let d = (v - origin) - mean;
            match p {
                1 => {
                    value += wi * d.abs();
                    if d > T::zero() {
                        T::one()
                    } else if d < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                }
                _ => {
                    value += wi * d * d;
                    T::lit(2.0) * d
                }
            }
        })
        .collect();
    let wg: T = g.iter().zip(w).map(|(&gi, &wi)| gi * wi).sum();
    let grad = g.iter().zip(w).map(|(&gi, &wi)| wi * (gi - wg)).collect();
    Ok((value, grad))
}

/// Log-dispersion objective `E_r[|f - E_r f|^p]`.
pub fn ld_objective<T: Scalar>(values: &[T], weights: Option<&[T]>, p: u32) -> Result<T> {
    ld_objective_grad(values, weights, p).map(|(v, _)| v)
}

/// Weighted mean of `-log q` over a batch.
pub fn forward_kl_loss<T: Scalar>(batch: ArrayView2<T>, model: &FlowModel<T>, weights: Option<&[T]>) -> Result<T> {
    if batch.nrows() == 0 {
        return Err(Error::Config("forward KL needs a non-empty batch".into()));
    }
    let lq = model.log_density_batch(batch)?;
    let w = match weights {
        Some(w) => {
            validate_weights(w, lq.len())?;
            w.to_vec()
        }
        None => uniform(lq.len()),
    };
    Ok(-lq.iter().zip(&w).map(|(&l, &wi)| l * wi).sum::<T>())
}

/// Value and parameter gradient of the forward KL loss.
pub fn forward_kl_grad<T: Scalar>(
    batch: ArrayView2<T>,
    model: &FlowModel<T>,
    weights: Option<&[T]>,
) -> Result<(T, Vec<T>)> {
    if batch.nrows() == 0 {
        return Err(Error::Config("forward KL needs a non-empty batch".into()));
    }
    let w = match weights {
        Some(w) => {
            validate_weights(w, batch.nrows())?;
            w.to_vec()
        }
        None => uniform(batch.nrows()),
    };
    model.loss_gradient(batch, |lq| {
        let v = -lq.iter().zip(&w).map(|(&l, &wi)| l * wi).sum::<T>();
        Ok((v, w.iter().map(|&wi| -wi).collect()))
    })
}

/// Monte Carlo reverse-KL estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReverseKl<T> {
    pub value: T,
    pub stderr: T,
    /// Samples dropped because the target log-density was not finite.
    pub excluded: usize,
}

/// Maximum fraction of non-finite target values tolerated by reverse KL.
const MAX_EXCLUDED_FRACTION: f64 = 0.01;

fn reverse_kl_terms<T: Scalar>(
    x: ArrayView2<T>,
    log_q: &[T],
    target: &TargetDensity<T>,
    with_grad: bool,
) -> Result<(Vec<Option<T>>, Array2<T>)> {
    let mut d_x = Array2::zeros(x.raw_dim());
    let mut terms = Vec::with_capacity(log_q.len());
    let mut score = vec![T::zero(); x.ncols()];
    for (i, row) in x.rows().into_iter().enumerate() {
        let xs = row.as_slice().expect("row-major");
        let lp = if with_grad {
            target.log_density_grad(xs, &mut score)
        } else {
            target.log_density(xs)
        };
        if lp.is_finite() && log_q[i].is_finite() && (!with_grad || score.iter().all(|s| s.is_finite())) {
            terms.push(Some(log_q[i] - lp));
            if with_grad {
                d_x.row_mut(i).iter_mut().zip(&score).for_each(|(d, &s)| *d = -s);
            }
        } else {
            terms.push(None);
        }
    }
    let excluded = terms.iter().filter(|t| t.is_none()).count();
    if excluded as f64 > MAX_EXCLUDED_FRACTION * log_q.len() as f64 {
        return Err(Error::Training {
            step: 0,
            reason: format!(
                "reverse KL: {excluded} of {} target log-densities are non-finite",
                log_q.len()
            ),
        });
    }
    Ok((terms, d_x))
}

/// `E_q[log q - log p̃]` from `n` fresh model samples.
pub fn reverse_kl_loss<T: Scalar>(
    model: &FlowModel<T>,
    target: &TargetDensity<T>,
    n: usize,
    seed: u64,
) -> Result<ReverseKl<T>> {
    if n < 2 {
        return Err(Error::Config("reverse KL needs n >= 2".into()));
    }
    let (x, lq) = model.sample(n, seed)?;
    let (terms, _) = reverse_kl_terms(x.view(), &lq, target, false)?;
    let kept: Vec<T> = terms.iter().flatten().copied().collect();
    let (value, stderr) = mean_stderr(&kept);
    Ok(ReverseKl {
        value,
        stderr,
        excluded: n - kept.len(),
    })
}

/// Reparameterised gradient of the reverse KL estimate.
pub fn reverse_kl_grad<T: Scalar>(
    model: &FlowModel<T>,
    target: &TargetDensity<T>,
    n: usize,
    seed: u64,
) -> Result<(T, Vec<T>)> {
    if n < 2 {
        return Err(Error::Config("reverse KL needs n >= 2".into()));
    }
    let z = standard_normal_draws(n, model.dim(), seed);
    model.sample_loss_gradient(z.view(), |x, lq| {
        let (terms, mut d_x) = reverse_kl_terms(x, lq, target, true)?;
        let kept = terms.iter().flatten().count();
        let inv = T::one() / T::from_usize(kept);
        let value = terms.iter().flatten().copied().sum::<T>() * inv;
        d_x.mapv_inplace(|v| v * inv);
        let d_log_q = terms
            .iter()
            .map(|t| if t.is_some() { inv } else { T::zero() })
            .collect();
        Ok(SampleGrad { value, d_x, d_log_q })
    })
}

/// A batch on which the combined loss is evaluated: each point may contribute
/// to the data term, the LD term, or both.
#[derive(Debug, Clone)]
pub struct LossBatch<T> {
    pub points: Array2<T>,
    /// Energy labels; ignored where `ld_weights` is zero.
    pub energies: Vec<T>,
    /// Data-term weights (sum to 1, or all zero when there is no data term).
    pub data_weights: Vec<T>,
    /// LD reference weights (sum to 1 over the reference members).
    pub ld_weights: Vec<T>,
}

impl<T: Scalar> LossBatch<T> {
    /// Data term and LD reference on the same points with uniform weights.
    pub fn shared(points: Array2<T>, energies: Vec<T>) -> Self {
        let n = points.nrows();
        Self {
            points,
            energies,
            data_weights: uniform(n),
            ld_weights: uniform(n),
        }
    }

    /// Separate data points (uniform or weighted) and a labelled reference.
    pub fn split(data: ArrayView2<T>, data_weights: Option<&[T]>, reference: &ReferenceBatch<T>) -> Result<Self> {
        let nd = data.nrows();
        let nr = reference.len();
        if data.ncols() != reference.points.ncols() {
            return Err(Error::DimensionMismatch {
                expected: data.ncols(),
                got: reference.points.ncols(),
            });
        }
        let dw = match data_weights {
            Some(w) => {
                validate_weights(w, nd)?;
                w.to_vec()
            }
            None => uniform(nd),
        };
        let points = concatenate(Axis(0), &[data, reference.points.view()])
            .map_err(|e| Error::Format(e.to_string()))?;
        let mut energies = vec![T::zero(); nd];
        energies.extend_from_slice(&reference.energies);
        let mut data_weights = dw;
        data_weights.extend(std::iter::repeat_n(T::zero(), nr));
        let mut ld_weights = vec![T::zero(); nd];
        ld_weights.extend(reference.weights_or_uniform());
        Ok(Self {
            points,
            energies,
            data_weights,
            ld_weights,
        })
    }
}

/// Value of the combined loss and its two parts (unweighted).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub data: f64,
    pub ld: f64,
}

/// Combined loss from model log-densities; returns `dL/d log q` per point.
pub fn combined_from_log_q<T: Scalar>(
    log_q: &[T],
    batch: &LossBatch<T>,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<T>)> {
    let lam_data = T::lit(cfg.lambda_data);
    let lam_ld = T::lit(cfg.lambda_ld);
    let mut d = vec![T::zero(); log_q.len()];
    let mut data = T::zero();
    if cfg.lambda_data > 0.0 {
        for ((di, &lq), &w) in d.iter_mut().zip(log_q).zip(&batch.data_weights) {
            data -= w * lq;
            *di -= lam_data * w;
        }
    }
    let mut ld = T::zero();
    if cfg.uses_ld() {
        let members: Vec<usize> = (0..log_q.len()).filter(|&i| batch.ld_weights[i] > T::zero()).collect();
        let f: Vec<T> = members.iter().map(|&i| -log_q[i] - batch.energies[i]).collect();
        let w: Vec<T> = members.iter().map(|&i| batch.ld_weights[i]).collect();
        let (v, g) = ld_objective_grad(&f, Some(&w), cfg.p)?;
        ld = v;
        // f = -log q - E
        for (&i, gi) in members.iter().zip(g) {
            d[i] -= lam_ld * gi;
        }
    }
    let total = lam_data * data + lam_ld * ld;
    Ok((
        LossBreakdown {
            total: total.as_f64(),
            data: data.as_f64(),
            ld: ld.as_f64(),
        },
        d,
    ))
}

/// `λ_data · forward KL(data) + λ_LD · LD(f^θ over the reference)`.
pub fn combined_loss<T: Scalar>(
    data: ArrayView2<T>,
    reference: &ReferenceBatch<T>,
    model: &FlowModel<T>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let batch = LossBatch::split(data, None, reference)?;
    let lq = model.log_density_batch(batch.points.view())?;
    combined_from_log_q(&lq, &batch, cfg).map(|(b, _)| b)
}

/// Combined loss value and parameter gradient on a prepared batch.
pub fn combined_loss_grad<T: Scalar>(
    batch: &LossBatch<T>,
    model: &FlowModel<T>,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<T>)> {
    let mut parts = LossBreakdown::default();
    let (_, grad) = model.loss_gradient(batch.points.view(), |lq| {
        let (b, d) = combined_from_log_q(lq, batch, cfg)?;
        parts = b;
        Ok((T::lit(b.total), d))
    })?;
    Ok((parts, grad))
}
