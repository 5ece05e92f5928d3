//! Trust-region annealing along a geometric-tempered path.
//!
//! Every outer step snapshots the current model as the anchor, draws a
//! buffer from it, picks the largest interpolation weight `λ` whose
//! intermediate `q_λ ∝ q_anchor^{1-λ} (p̃^{1/T})^λ` stays within the KL trust
//! region of the anchor, and trains on the buffer weighted toward `q_λ`.

use std::fmt::Write as _;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::flow::FlowModel;
use crate::impsampling::{categorical_indices, ess_from_normalized};
use crate::objectives::{combined_loss_grad, LossBatch, LossBreakdown, LossConfig};
use crate::optim::{clip_grad_norm, cosine_lr, Adam, AdamConfig};
use crate::scalar::logsumexp;
use crate::targets::TargetDensity;
use crate::trainer::EpochSampler;
use crate::{Error, Result, Scalar};

/// Minimum buffer size accepted by the KL estimator.
pub const MIN_KL_POINTS: usize = 100;
/// Buffer ESS below which a run is aborted as collapsed.
pub const MIN_BUFFER_ESS: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnealConfig {
    pub outer_steps: usize,
    pub inner_steps: usize,
    pub buffer_size: usize,
    pub eps_tr: f64,
    pub t_start: f64,
    pub t_end: f64,
    /// Fraction of the outer steps over which the temperature decays.
    pub anneal_fraction: f64,
    pub loss: LossConfig,
    pub lr0: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Train on a categorically resampled buffer instead of weighted losses.
    pub resample_buffer: bool,
    /// Bisection tolerance for `λ`.
    pub lambda_tol: f64,
    pub adam: AdamConfig,
    pub grad_clip: Option<f64>,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        Self {
            outer_steps: 50,
            inner_steps: 400,
            buffer_size: 2000,
            eps_tr: 0.3,
            t_start: 4.0,
            t_end: 1.0,
            anneal_fraction: 0.5,
            loss: LossConfig::ldr(0.5, 1.0, 1),
            lr0: 1e-3,
            batch_size: 1024,
            seed: 0,
            resample_buffer: false,
            lambda_tol: 1e-3,
            adam: AdamConfig::default(),
            grad_clip: None,
        }
    }
}

impl AnnealConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_steps == 0 || self.inner_steps == 0 || self.buffer_size == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "outer_steps, inner_steps, buffer_size and batch_size must be at least 1".into(),
            ));
        }
        if !(self.eps_tr > 0.0) {
            return Err(Error::Config("eps_tr must be positive".into()));
        }
        if !(self.t_start >= self.t_end && self.t_end >= 1.0) {
            return Err(Error::Config("temperatures must satisfy t_start >= t_end >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.anneal_fraction) {
            return Err(Error::Config("anneal_fraction must lie in [0, 1]".into()));
        }
        if !(self.lr0 > 0.0) || !(self.lambda_tol > 0.0) {
            return Err(Error::Config("lr0 and lambda_tol must be positive".into()));
        }
        self.loss.validate()
    }
}

/// `(1-λ) log q_anchor(x) + λ log p̃(x) / T`, unnormalized.
pub fn intermediate_log_density<T: Scalar>(
    x: &[T],
    anchor: &FlowModel<T>,
    target: &TargetDensity<T>,
    lambda: T,
    temperature: T,
) -> Result<T> {
    let lq = anchor.log_density(x)?;
    Ok(mix(lq, crate::targets::LogDensity::log_density(target, x), lambda, temperature))
}

fn mix<T: Scalar>(log_q: T, log_p: T, lambda: T, temperature: T) -> T {
    (T::one() - lambda) * log_q + lambda * log_p / temperature
}

/// Geometric interpolation from `t_start` to `t_end` over
/// `⌊anneal_fraction · K⌋` outer steps, then constant.
pub fn temperature_schedule(i: usize, cfg: &AnnealConfig) -> f64 {
    let n = (cfg.anneal_fraction * cfg.outer_steps as f64).floor() as usize;
    if n == 0 || i >= n {
        return cfg.t_end;
    }
    cfg.t_start * (cfg.t_end / cfg.t_start).powf(i as f64 / n as f64)
}

/// Anchor samples with their anchor and (untempered) target log-densities.
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer<T> {
    pub points: Array2<T>,
    pub log_q_anchor: Vec<T>,
    pub log_target: Vec<T>,
}

impl<T: Scalar> Buffer<T> {
    pub fn new(points: Array2<T>, log_q_anchor: Vec<T>, log_target: Vec<T>) -> Result<Self> {
        let n = points.nrows();
        for len in [log_q_anchor.len(), log_target.len()] {
            if len != n {
                return Err(Error::DimensionMismatch { expected: n, got: len });
            }
        }
        Ok(Self {
            points,
            log_q_anchor,
            log_target,
        })
    }

    /// Draws `n` anchor samples; makes exactly `n` target evaluations.
    pub fn draw(anchor: &FlowModel<T>, target: &TargetDensity<T>, n: usize, seed: u64) -> Result<Self> {
        let (points, log_q_anchor) = anchor.sample(n, seed)?;
        let log_target = target.log_density_batch(&points);
        Self::new(points, log_q_anchor, log_target)
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    /// `r(x) = λ [log p̃(x)/T - log q_anchor(x)]`, the log-ratio `q_λ / q_anchor`
    /// up to normalization.
    pub fn log_ratios(&self, lambda: T, temperature: T) -> Vec<T> {
        self.log_target
            .iter()
            .zip(&self.log_q_anchor)
            .map(|(&lp, &lq)| lambda * (lp / temperature - lq))
            .collect()
    }

    /// Unnormalized `log q_λ` at every buffer point.
    pub fn intermediate(&self, lambda: T, temperature: T) -> Vec<T> {
        self.log_target
            .iter()
            .zip(&self.log_q_anchor)
            .map(|(&lp, &lq)| mix(lq, lp, lambda, temperature))
            .collect()
    }
}

fn normalized_exp<T: Scalar>(r: &[T]) -> Vec<T> {
    let m = r.iter().copied().fold(T::neg_infinity(), T::max);
    let w: Vec<T> = r.iter().map(|&v| (v - m).exp()).collect();
    let s: T = w.iter().copied().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Self-normalized estimate of `KL(q_λ ‖ q_anchor)` from anchor samples:
/// `Σ w̄ r - log( Σ w / N )` with `w = e^r`.
pub fn estimate_kl_step<T: Scalar>(buffer: &Buffer<T>, lambda: T, temperature: T) -> Result<T> {
    if buffer.len() < MIN_KL_POINTS {
        return Err(Error::Unreliable(format!(
            "KL estimate needs at least {MIN_KL_POINTS} buffer points, got {}",
            buffer.len()
        )));
    }
    if lambda == T::zero() {
        return Ok(T::zero());
    }
    let r = buffer.log_ratios(lambda, temperature);
    if let Some(i) = r.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "buffer log-ratio",
            index: i,
            value: r[i].as_f64(),
        });
    }
    let w = normalized_exp(&r);
    let first: T = w.iter().zip(&r).map(|(&a, &b)| a * b).sum();
    Ok(first - (logsumexp(&r) - T::from_usize(r.len()).ln()))
}

/// Largest `λ ∈ [0, 1]` with `estimate_kl_step(λ) ≤ eps_tr`, by bisection to
/// absolute tolerance `tol`.
pub fn adapt_lambda<T: Scalar>(buffer: &Buffer<T>, temperature: T, eps_tr: f64, tol: f64) -> Result<f64> {
    let kl = |l: f64| estimate_kl_step(buffer, T::lit(l), temperature).map(|v| v.as_f64());
    if kl(1.0)? <= eps_tr {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if kl(mid)? <= eps_tr {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// One row of the annealing history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealRecord {
    pub outer_step: usize,
    pub temperature: f64,
    pub lambda: f64,
    pub buffer_ess: f64,
    pub loss_data: f64,
    pub loss_ld: f64,
    /// Cumulative target evaluations.
    pub target_evals: u64,
    /// `KL(q_new ‖ q_anchor)` re-estimated on fresh samples of the new model.
    pub kl_post: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnealHistory {
    pub records: Vec<AnnealRecord>,
}

impl AnnealHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("outer_step,T,lambda,buffer_ess,loss_data,loss_ld,target_evals,kl_post\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.outer_step, r.temperature, r.lambda, r.buffer_ess, r.loss_data, r.loss_ld, r.target_evals, r.kl_post
            );
        }
        s
    }

    /// Largest ex-post KL over all outer steps.
    pub fn max_kl_post(&self) -> f64 {
        self.records.iter().map(|r| r.kl_post).fold(0.0, f64::max)
    }

    pub fn total_target_evals(&self) -> u64 {
        self.records.last().map_or(0, |r| r.target_evals)
    }
}

/// Overrides used by tests and ablations.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AnnealOverrides {
    /// Use this `λ` instead of adapting it.
    pub lambda: Option<f64>,
}

/// Runs the annealing trainer from `model`. Makes exactly
/// `outer_steps · buffer_size` target evaluations.
pub fn anneal_run<T: Scalar>(
    cfg: &AnnealConfig,
    target: &TargetDensity<T>,
    model: FlowModel<T>,
    overrides: AnnealOverrides,
) -> Result<(FlowModel<T>, AnnealHistory)> {
    cfg.validate()?;
    let mut model = model;
    let mut adam = Adam::new(model.n_params(), cfg.adam);
    let mut history = AnnealHistory::default();
    let total_steps = cfg.outer_steps * cfg.inner_steps;
    let mut evals = 0u64;
    for i in 0..cfg.outer_steps {
        let anchor = model.clone();
        let step_seed = cfg.seed.wrapping_add((i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let before = target.evaluations();
        let buffer = Buffer::draw(&anchor, target, cfg.buffer_size, step_seed)?;
        evals += target.evaluations() - before;
        let temp = T::lit(temperature_schedule(i, cfg));
        let lambda = match overrides.lambda {
            Some(l) => l,
            None => adapt_lambda(&buffer, temp, cfg.eps_tr, cfg.lambda_tol)?,
        };
        let lam = T::lit(lambda);
        let w = normalized_exp(&buffer.log_ratios(lam, temp));
        let buffer_ess = ess_from_normalized(&w).as_f64();
        if !(buffer_ess >= MIN_BUFFER_ESS) {
            return Err(Error::Training {
                step: i,
                reason: format!("buffer ESS {buffer_ess:.2e} below {MIN_BUFFER_ESS}: proposal has collapsed"),
            });
        }
        let log_qi = buffer.intermediate(lam, temp);
        // f = -log q_θ + log q_i, so the LD "energy" is -log q_i
        let energies: Vec<T> = log_qi.iter().map(|&v| -v).collect();
        let (points, energies, weights) = if cfg.resample_buffer {
            let ws = crate::impsampling::WeightedSamples::from_weights(buffer.points.clone(), &w)?;
            let idx = categorical_indices(&ws, buffer.len(), step_seed ^ 0x7273)?;
            let e = idx.iter().map(|&k| energies[k]).collect();
            (buffer.points.select(Axis(0), &idx), e, None)
        } else {
            (buffer.points.clone(), energies, Some(w))
        };
        let mut sampler = EpochSampler::new(points.nrows(), cfg.batch_size, step_seed ^ 0x6261);
        let mut parts = LossBreakdown::default();
        for j in 0..cfg.inner_steps {
            let idx = sampler.next_batch();
            let batch = weighted_batch(&points, &energies, weights.as_deref(), &idx);
            let (b, mut grad) = combined_loss_grad(&batch, &model, &cfg.loss).map_err(|e| match e {
                Error::Training { reason, .. } => Error::Training {
                    step: i * cfg.inner_steps + j + 1,
                    reason,
                },
                other => other,
            })?;
            parts = b;
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grad, c);
            }
            let lr = cosine_lr(i * cfg.inner_steps + j, total_steps, cfg.lr0);
            adam.step(model.params_mut().as_mut_slice(), &grad, lr)?;
        }
        let kl_post = kl_between_models(&model, &anchor, cfg.buffer_size, step_seed ^ 0x6b6c)?;
        history.records.push(AnnealRecord {
            outer_step: i,
            temperature: temp.as_f64(),
            lambda,
            buffer_ess,
            loss_data: parts.data,
            loss_ld: parts.ld,
            target_evals: evals,
            kl_post,
        });
    }
    Ok((model, history))
}

fn weighted_batch<T: Scalar>(points: &Array2<T>, energies: &[T], weights: Option<&[T]>, idx: &[usize]) -> LossBatch<T> {
    let pts = points.select(Axis(0), idx);
    let e: Vec<T> = idx.iter().map(|&k| energies[k]).collect();
    let mut batch = LossBatch::shared(pts, e);
    if let Some(w) = weights {
        let raw: Vec<T> = idx.iter().map(|&k| w[k]).collect();
        let s: T = raw.iter().copied().sum();
        if s > T::zero() {
            let wn: Vec<T> = raw.iter().map(|&v| v / s).collect();
            batch.data_weights = wn.clone();
            batch.ld_weights = wn;
        }
    }
    batch
}

/// Monte Carlo `KL(a ‖ b)` from `n` samples of `a`; uses no target calls.
pub fn kl_between_models<T: Scalar>(a: &FlowModel<T>, b: &FlowModel<T>, n: usize, seed: u64) -> Result<f64> {
    let (x, la) = a.sample(n, seed)?;
    let lb = b.log_density_batch(x.view())?;
    Ok(la.iter().zip(&lb).map(|(&p, &q)| (p - q).as_f64()).sum::<f64>() / n as f64)
}
