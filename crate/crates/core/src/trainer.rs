//! Training loops: unbiased-data training, two-stage refinement from biased
//! data, and the LD-only demonstration.

use std::fmt::Write as _;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::flow::FlowModel;
use crate::impsampling::{categorical_indices, clip_top_weights, ess, importance_weights, DEFAULT_CLIP_FRACTION};
use crate::metrics::{hist_kl_2d, nll, normalization_check, reverse_ess};
use crate::objectives::{combined_from_log_q, combined_loss_grad, LossBatch, LossBreakdown, LossConfig};
use crate::optim::{clip_grad_norm, cosine_lr, Adam, AdamConfig};
use crate::targets::{GmmTarget, TargetDensity};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub seed: u64,
    pub loss: LossConfig,
    /// History is recorded every `eval_every` steps and at the last step.
    pub eval_every: usize,
    /// Model samples for the reverse ESS in the history; 0 disables it.
    pub eval_samples: usize,
    pub adam: AdamConfig,
    /// Optional global gradient-norm clip.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch_size: 1024,
            lr0: 1e-3,
            seed: 0,
            loss: LossConfig::forward_kl(),
            eval_every: 500,
            eval_samples: 0,
            adam: AdamConfig::default(),
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be at least 1".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        self.loss.validate()
    }
}

/// One history row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: usize,
    pub train_loss: f64,
    pub loss_data: f64,
    pub loss_ld: f64,
    pub val_nll: Option<f64>,
    pub ess: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub records: Vec<HistoryRecord>,
}

impl RunHistory {
    fn push(&mut self, r: HistoryRecord) {
        debug_assert!(self.records.last().is_none_or(|l| l.step < r.step));
        self.records.push(r);
    }

    pub fn last(&self) -> Option<&HistoryRecord> {
        self.records.last()
    }

    /// Appends another history with its steps offset past this one.
    pub fn extend_after(&mut self, other: RunHistory) {
        let offset = self.records.last().map_or(0, |r| r.step);
        self.records.extend(other.records.into_iter().map(|mut r| {
            r.step += offset;
            r
        }));
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from("step,train_loss,loss_data,loss_ld,val_nll,ess,lr\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.step,
                r.train_loss,
                r.loss_data,
                r.loss_ld,
                opt(r.val_nll),
                opt(r.ess),
                r.lr
            );
        }
        s
    }
}

/// Data used only for monitoring, never for gradients.
#[derive(Clone, Copy, Default)]
pub struct Validation<'a, T: Scalar> {
    pub points: Option<ArrayView2<'a, T>>,
    /// Target for the history's reverse ESS (its evaluations are counted).
    pub target: Option<&'a TargetDensity<T>>,
}

/// Shuffled minibatch indices, reshuffled at every epoch.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    /// Batches have `min(n, batch_size)` indices.
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self {
            order,
            pos: 0,
            batch: batch_size.min(n),
            rng,
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let b = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        b
    }
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::Training { reason, .. } => Error::Training { step, reason },
        other => other,
    }
}

/// Generic optimisation loop: `next_batch` supplies the loss batch of each
/// step; Adam with the cosine schedule updates `model` in place.
pub fn fit<T: Scalar, B>(
    model: &mut FlowModel<T>,
    cfg: &TrainConfig,
    validation: Validation<'_, T>,
    mut next_batch: B,
) -> Result<RunHistory>
where
    B: FnMut(usize) -> Result<LossBatch<T>>,
{
    cfg.validate()?;
    let mut adam = Adam::new(model.n_params(), cfg.adam);
    let mut history = RunHistory::default();
    for t in 0..cfg.steps {
        let batch = next_batch(t)?;
        let (parts, mut grad) = combined_loss_grad(&batch, model, &cfg.loss).map_err(|e| at_step(e, t + 1))?;
        if let Some(c) = cfg.grad_clip {
            clip_grad_norm(&mut grad, c);
        }
        let lr = cosine_lr(t, cfg.steps, cfg.lr0);
        adam.step(model.params_mut().as_mut_slice(), &grad, lr)
            .map_err(|e| at_step(e, t + 1))?;
        let step = t + 1;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            history.push(monitor(model, cfg, &validation, step, parts, lr)?);
        }
    }
    Ok(history)
}

fn monitor<T: Scalar>(
    model: &FlowModel<T>,
    cfg: &TrainConfig,
    v: &Validation<'_, T>,
    step: usize,
    parts: LossBreakdown,
    lr: f64,
) -> Result<HistoryRecord> {
    let val_nll = match v.points {
        Some(p) if p.nrows() > 0 => Some(nll(p, model)?.0),
        _ => None,
    };
    let ess = match v.target {
        Some(t) if cfg.eval_samples > 0 => Some(reverse_ess(
            model,
            t,
            cfg.eval_samples,
            cfg.seed ^ (step as u64).wrapping_mul(0x9e37_79b9),
            DEFAULT_CLIP_FRACTION,
        )?),
        _ => None,
    };
    Ok(HistoryRecord {
        step,
        train_loss: parts.total,
        loss_data: parts.data,
        loss_ld: parts.ld,
        val_nll,
        ess,
        lr,
    })
}

/// Trains on labelled unbiased data, using the same minibatch for the data
/// term and the LD reference. Energies come from the dataset; the target is
/// never called for gradients.
pub fn train_unbiased<T: Scalar>(
    dataset: &LabeledDataset<T>,
    cfg: &TrainConfig,
    mut model: FlowModel<T>,
    validation: Validation<'_, T>,
) -> Result<(FlowModel<T>, RunHistory)> {
    check_dataset(dataset, &model, cfg)?;
    let mut sampler = EpochSampler::new(dataset.len(), cfg.batch_size, cfg.seed);
    let history = fit(&mut model, cfg, validation, |_| {
        let b = dataset.select(&sampler.next_batch());
        Ok(LossBatch::shared(b.points, b.energies))
    })?;
    Ok((model, history))
}

fn check_dataset<T: Scalar>(ds: &LabeledDataset<T>, model: &FlowModel<T>, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if ds.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: ds.dim(),
        });
    }
    if ds.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    if cfg.loss.uses_ld() && ds.len() < 2 {
        return Err(Error::Training {
            step: 0,
            reason: "log-dispersion needs at least two reference points".into(),
        });
    }
    Ok(())
}

/// Which points form the LD reference during refinement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LdReferenceMode {
    /// The resampled dataset only.
    IsOnly,
    /// A 50:50 per-batch mixture of the resampled and the biased data.
    Both,
}

/// Outcome of [`refine_biased`].
#[derive(Debug, Clone)]
pub struct Refinement<T> {
    pub stage1: FlowModel<T>,
    pub model: FlowModel<T>,
    pub history: RunHistory,
    /// Clipped ESS of the stage-1 model on the proposals used for resampling.
    pub stage1_ess: f64,
    /// The resampled dataset with its energy labels.
    pub resampled: LabeledDataset<T>,
    /// Target evaluations made by the refinement itself.
    pub target_evals: u64,
}

/// Two-stage refinement: forward KL on biased data, then importance
/// resampling of `m_is` stage-1 samples toward `target` and combined-loss
/// training on the resampled set.
///
/// Exactly `m_is` target evaluations are made: the proposals' log-densities
/// give both the weights and the energy labels of the resampled points.
#[allow(clippy::too_many_arguments)]
pub fn refine_biased<T: Scalar>(
    biased: &LabeledDataset<T>,
    target: &TargetDensity<T>,
    cfg_stage1: &TrainConfig,
    cfg_stage2: &TrainConfig,
    m_is: usize,
    mode: LdReferenceMode,
    model: FlowModel<T>,
    validation: Validation<'_, T>,
) -> Result<Refinement<T>> {
    if m_is < 2 {
        return Err(Error::Config("m_is must be at least 2".into()));
    }
    cfg_stage2.validate()?;
    let (stage1, history) = train_unbiased(biased, cfg_stage1, model, validation)?;
    refine_from_stage1(stage1, history, biased, target, cfg_stage2, m_is, mode, validation)
}

/// Stage 2 of [`refine_biased`] from an already trained stage-1 model, whose
/// history is prepended to the result.
#[allow(clippy::too_many_arguments)]
pub fn refine_from_stage1<T: Scalar>(
    stage1: FlowModel<T>,
    mut history: RunHistory,
    biased: &LabeledDataset<T>,
    target: &TargetDensity<T>,
    cfg_stage2: &TrainConfig,
    m_is: usize,
    mode: LdReferenceMode,
    validation: Validation<'_, T>,
) -> Result<Refinement<T>> {
    if m_is < 2 {
        return Err(Error::Config("m_is must be at least 2".into()));
    }
    cfg_stage2.validate()?;
    let before = target.evaluations();
    let (x, lq) = stage1.sample(m_is, cfg_stage2.seed ^ 0x5354_4731)?;
    let ws = importance_weights(x, &lq, target)?;
    let target_evals = target.evaluations() - before;
    let stage1_ess = ess(&clip_top_weights(&ws, DEFAULT_CLIP_FRACTION)).as_f64();
    if !(stage1_ess >= 1e-4) {
        return Err(Error::Training {
            step: 0,
            reason: format!("stage-1 ESS {stage1_ess:.3e} below 1e-4; refinement aborted"),
        });
    }
    let idx = categorical_indices(&ws, m_is, cfg_stage2.seed ^ 0x5253_4d50)?;
    let energies: Vec<T> = idx.iter().map(|&i| -(ws.log_weights[i] + lq[i])).collect();
    let resampled = LabeledDataset::new(ws.points.select(Axis(0), &idx), energies)?;

    let mut model = stage1.clone();
    let mut is_sampler = EpochSampler::new(resampled.len(), cfg_stage2.batch_size, cfg_stage2.seed);
    let half = (cfg_stage2.batch_size / 2).max(1);
    let mut mix_is = EpochSampler::new(resampled.len(), half, cfg_stage2.seed ^ 1);
    let mut mix_biased = EpochSampler::new(biased.len(), half, cfg_stage2.seed ^ 2);
    let h2 = fit(&mut model, cfg_stage2, validation, |_| {
        let data = resampled.select(&is_sampler.next_batch());
        match mode {
            LdReferenceMode::IsOnly => Ok(LossBatch::shared(data.points, data.energies)),
            LdReferenceMode::Both => {
                let a = resampled.select(&mix_is.next_batch());
                let b = biased.select(&mix_biased.next_batch());
                let points = concatenate(Axis(0), &[a.points.view(), b.points.view()])
                    .map_err(|e| Error::Format(e.to_string()))?;
                let mut energies = a.energies;
                energies.extend(b.energies);
                let reference = crate::objectives::ReferenceBatch::new(points, energies, None)?;
                LossBatch::split(data.points.view(), None, &reference)
            }
        }
    })?;
    history.extend_after(h2);
    Ok(Refinement {
        stage1,
        model,
        history,
        stage1_ess,
        resampled,
        target_evals,
    })
}

/// Rows of `ds` whose nearest GMM mode is in `modes`.
pub fn restrict_to_modes<T: Scalar>(ds: &LabeledDataset<T>, gmm: &GmmTarget<T>, modes: &[usize]) -> LabeledDataset<T> {
    let idx: Vec<usize> = ds
        .points
        .rows()
        .into_iter()
        .enumerate()
        .filter(|(_, r)| modes.contains(&gmm.mode_index(r.as_slice().expect("row-major"))))
        .map(|(i, _)| i)
        .collect();
    ds.select(&idx)
}

/// Results of the LD-only demonstration and its paired combined-loss run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdrOnlyReport {
    /// Final LD loss of the LD-only model over the whole reference.
    pub ld_loss: f64,
    /// NLL of the LD-only model on exact samples from the full target.
    pub nll_full: f64,
    /// NLL on exact samples from the modes the reference covers.
    pub nll_support: f64,
    pub hist_kl: Option<f64>,
    /// Model mass inside `[-3, 3]²` (2-D only).
    pub box_mass: Option<f64>,
    pub combined_ld_loss: f64,
    pub combined_nll_full: f64,
    pub combined_nll_support: f64,
    pub combined_lambda_data: f64,
}

/// Trains pure LD (`lambda_data = 0`) on a reference with restricted support,
/// and the same setup with `combined_lambda_data > 0` for comparison.
pub fn ldr_only_demo<T: Scalar>(
    reference: &LabeledDataset<T>,
    cfg: &TrainConfig,
    combined_lambda_data: f64,
    model: FlowModel<T>,
    exact: &GmmTarget<T>,
    n_eval: usize,
) -> Result<(LdrOnlyReport, FlowModel<T>, RunHistory)> {
    if cfg.loss.lambda_data != 0.0 {
        return Err(Error::Config("the LD-only demo requires lambda_data = 0".into()));
    }
    if !(combined_lambda_data > 0.0) {
        return Err(Error::Config("the comparison run needs lambda_data > 0".into()));
    }
    let (ld_model, history) = train_unbiased(reference, cfg, model.clone(), Validation::default())?;
    let mut cfg2 = cfg.clone();
    cfg2.loss.lambda_data = combined_lambda_data;
    let (cmb_model, _) = train_unbiased(reference, &cfg2, model, Validation::default())?;

    let test = exact.sample(n_eval, cfg.seed ^ 0x7465_7374);
    let modes: Vec<usize> = reference
        .points
        .rows()
        .into_iter()
        .map(|r| exact.mode_index(r.as_slice().expect("row-major")))
        .collect();
    let keep: Vec<usize> = test
        .rows()
        .into_iter()
        .enumerate()
        .filter(|(_, r)| modes.contains(&exact.mode_index(r.as_slice().expect("row-major"))))
        .map(|(i, _)| i)
        .collect();
    let support = test.select(Axis(0), &keep);
    let full_ld = |m: &FlowModel<T>| -> Result<f64> {
        let lq = m.log_density_batch(reference.points.view())?;
        let batch = LossBatch::shared(reference.points.clone(), reference.energies.clone());
        let only_ld = LossConfig::ldr(0.0, 1.0, cfg.loss.p);
        Ok(combined_from_log_q(&lq, &batch, &only_ld)?.0.ld)
    };
    let (hist_kl, box_mass) = if ld_model.dim() == 2 {
        let (xs, _) = ld_model.sample(n_eval, cfg.seed ^ 0x6d6f_646c)?;
        (
            Some(hist_kl_2d(test.view(), xs.view(), None, 100)?),
            Some(normalization_check(&ld_model, -3.0, 3.0, 400)?),
        )
    } else {
        (None, None)
    };
    let report = LdrOnlyReport {
        ld_loss: full_ld(&ld_model)?,
        nll_full: nll(test.view(), &ld_model)?.0,
        nll_support: nll(support.view(), &ld_model)?.0,
        hist_kl,
        box_mass,
        combined_ld_loss: full_ld(&cmb_model)?,
        combined_nll_full: nll(test.view(), &cmb_model)?.0,
        combined_nll_support: nll(support.view(), &cmb_model)?.0,
        combined_lambda_data,
    };
    Ok((report, ld_model, history))
}

/// Convenience: a fresh exact-sample validation set.
pub fn exact_validation_points<T: Scalar>(exact: &GmmTarget<T>, n: usize, seed: u64) -> Array2<T> {
    exact.sample(n, seed ^ 0x7661_6c69)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowConfig;
    use crate::targets::LogDensity;
    use std::sync::Arc;

    fn setup(n: usize) -> (GmmTarget<f64>, TargetDensity<f64>, LabeledDataset<f64>) {
        let g = GmmTarget::new(2);
        let t = TargetDensity::new(Arc::new(g.clone()));
        let ds = LabeledDataset::from_sampler(&g, &t, n, 3);
        (g, t, ds)
    }

    fn small_model() -> FlowModel<f64> {
        FlowModel::new(FlowConfig::new(2).with_layers(4).with_hidden(16), 1).unwrap()
    }

    fn cfg(steps: usize, loss: LossConfig) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 64,
            lr0: 3e-3,
            seed: 11,
            loss,
            eval_every: 10,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn epoch_sampler_covers_each_epoch() {
        let mut s = EpochSampler::new(10, 5, 0);
        let mut seen: Vec<usize> = s.next_batch();
        seen.extend(s.next_batch());
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let mut big = EpochSampler::new(7, 100, 0);
        assert_eq!(big.next_batch().len(), 7);
    }

    #[test]
    fn training_lowers_nll_and_is_deterministic() {
        let (g, t, ds) = setup(256);
        let val = exact_validation_points(&g, 2000, 1);
        let v = Validation {
            points: Some(val.view()),
            target: None,
        };
        let c = cfg(60, LossConfig::ldr(0.5, 1.0, 1));
        let before = t.evaluations();
        let (m1, h1) = train_unbiased(&ds, &c, small_model(), v).unwrap();
        assert_eq!(t.evaluations(), before, "training must not call the target");
        let (m2, h2) = train_unbiased(&ds, &c, small_model(), v).unwrap();
        assert_eq!(m1.params().as_slice(), m2.params().as_slice());
        assert_eq!(h1, h2);
        let first = nll(val.view(), &small_model()).unwrap().0;
        let last = h1.last().unwrap().val_nll.unwrap();
        assert!(last < first, "{first} -> {last}");
        assert_eq!(h1.records.len(), 6);
        assert!(h1.to_csv().starts_with("step,train_loss,loss_data,loss_ld,val_nll,ess,lr\n"));
    }

    #[test]
    fn single_point_dataset_fails_with_ld() {
        let (_, _, ds) = setup(1);
        let e = train_unbiased(&ds, &cfg(5, LossConfig::ldr(0.5, 1.0, 2)), small_model(), Validation::default());
        assert!(matches!(e, Err(Error::Training { .. })));
    }

    #[test]
    fn refinement_counts_exactly_m_is() {
        let g = GmmTarget::new(2);
        let t = TargetDensity::new(Arc::new(g.clone()));
        let biased_sampler = g.biased(vec![0.55, 0.25, 0.15, 0.05]).unwrap();
        let biased = LabeledDataset::from_sampler(&biased_sampler, &t, 200, 5);
        let before = t.evaluations();
        let r = refine_biased(
            &biased,
            &t,
            &cfg(20, LossConfig::forward_kl()),
            &cfg(20, LossConfig::ldr(0.5, 1.0, 1)),
            300,
            LdReferenceMode::Both,
            small_model(),
            Validation::default(),
        )
        .unwrap();
        assert_eq!(t.evaluations() - before, 300);
        assert_eq!(r.target_evals, 300);
        assert_eq!(r.resampled.len(), 300);
        for (row, e) in r.resampled.points.rows().into_iter().zip(&r.resampled.energies) {
            let direct = -g.log_density(row.as_slice().unwrap());
            assert!((direct - e).abs() < 1e-10);
        }
        assert_eq!(r.history.last().unwrap().step, 40);
    }

    #[test]
    fn demo_requires_zero_data_weight() {
        let (g, _, ds) = setup(50);
        let e = ldr_only_demo(&ds, &cfg(2, LossConfig::ldr(0.5, 1.0, 1)), 0.5, small_model(), &g, 100);
        assert!(matches!(e, Err(Error::Config(_))));
    }

    #[test]
    fn restriction_keeps_requested_modes() {
        let (g, _, ds) = setup(400);
        let r = restrict_to_modes(&ds, &g, &[0, 3]);
        assert!(r.len() > 100 && r.len() < 300);
        for row in r.points.rows() {
            assert!(matches!(g.mode_index(row.as_slice().unwrap()), 0 | 3));
        }
    }
}
