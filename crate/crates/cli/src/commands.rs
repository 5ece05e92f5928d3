//! Subcommand implementations.

use std::path::{Path, PathBuf};

use ldr::annealing::{anneal_run, AnnealOverrides};
use ldr::data::LabeledDataset;
use ldr::flow::{Checkpoint, FlowModel};
use ldr::metrics::{evaluate, EvalConfig, MetricsReport};
use ldr::targets::{resolve_target, LogDensity, NamedTarget};
use ldr::trainer::{exact_validation_points, ldr_only_demo, refine_biased, restrict_to_modes, train_unbiased, Validation};
use serde::Serialize;

use crate::config::{self, AnnealRun, DatasetSpec, DemoRun, FlowSpec, RefineRun, TrainRun, Validate};
use crate::run::RunDir;
use crate::CliError;

type Model = FlowModel<f64>;

fn target(name: &str, bias: Option<&[f64]>) -> Result<NamedTarget<f64>, CliError> {
    resolve_target(name, bias).map_err(CliError::from)
}

fn new_model(flow: &FlowSpec, dim: usize, seed: u64) -> Result<Model, CliError> {
    FlowModel::new(flow.to_config(dim), seed).map_err(CliError::from)
}

/// Loads or generates a dataset; returns it with the target evaluations spent.
fn dataset(spec: &DatasetSpec, default_target: &str, seed: u64, dim: usize) -> Result<(LabeledDataset<f64>, u64), CliError> {
    if let Some(path) = &spec.path {
        let ds = LabeledDataset::load_csv(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        if ds.dim() != dim {
            return Err(CliError::config(format!(
                "{} has dimension {}, target has {dim}",
                path.display(),
                ds.dim()
            )));
        }
        return Ok((ds, 0));
    }
    let n = spec
        .n
        .ok_or_else(|| CliError::config("dataset needs either `path` or `n`"))?;
    if n == 0 {
        return Err(CliError::config("dataset n must be at least 1"));
    }
    let name = spec.target.as_deref().unwrap_or(default_target);
    let t = target(name, spec.bias_weights.as_deref())?;
    if t.density.dim() != dim {
        return Err(CliError::config(format!("dataset target {name} has the wrong dimension")));
    }
    let ds = LabeledDataset::from_sampler(&t.sampler, &t.density, n, spec.seed.unwrap_or(1000 + seed));
    Ok((ds, t.density.evaluations()))
}

fn evaluate_into(run: &mut RunDir, model: &Model, t: &NamedTarget<f64>, eval: &EvalConfig) -> Result<MetricsReport, CliError> {
    let before = t.density.evaluations();
    let report = evaluate(model, &t.gmm, &t.density, eval)?;
    run.manifest.target_evals.evaluation += t.density.evaluations() - before;
    run.write_json("metrics", "metrics.json", &report)?;
    Ok(report)
}

fn save_model(run: &mut RunDir, model: &Model, artifact: &str, file: &str) -> Result<(), CliError> {
    let p = run.file(file);
    model.to_checkpoint().save(&p)?;
    run.manifest.artifacts.insert(artifact.into(), file.into());
    Ok(())
}

fn with_run<C, F>(out: &Path, command: &str, name: Option<String>, seed: u64, cfg: &C, body: F) -> Result<(), CliError>
where
    C: Serialize,
    F: FnOnce(&mut RunDir) -> Result<(), CliError>,
{
    let mut run = RunDir::create(out, command, name, seed, cfg)?;
    let outcome = body(&mut run);
    run.finish(&outcome)?;
    outcome
}

pub struct DatasetArgs {
    pub target: String,
    pub n: usize,
    pub seed: u64,
    pub bias_weights: Option<Vec<f64>>,
    pub out: PathBuf,
}

#[derive(Serialize)]
struct DatasetSidecar<'a> {
    target: &'a str,
    n: usize,
    seed: u64,
    dim: usize,
    bias_weights: Option<Vec<f64>>,
    columns: Vec<String>,
    target_evals: u64,
}

pub fn cmd_dataset(args: DatasetArgs) -> Result<(), CliError> {
    if args.n == 0 {
        return Err(CliError::config("n must be at least 1"));
    }
    let seed = config::seed_override()?.unwrap_or(args.seed);
    let t = target(&args.target, args.bias_weights.as_deref())?;
    let ds = LabeledDataset::from_sampler(&t.sampler, &t.density, args.n, seed);
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    ds.save_csv(&args.out)?;
    let dim = ds.dim();
    let sidecar = DatasetSidecar {
        target: &args.target,
        n: args.n,
        seed,
        dim,
        bias_weights: t.bias_weights.clone(),
        columns: (1..=dim).map(|j| format!("x{j}")).chain(["energy".to_string()]).collect(),
        target_evals: t.density.evaluations(),
    };
    let side = args.out.with_extension("json");
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| CliError::failure(e.to_string()))?;
    std::fs::write(&side, text).map_err(|e| CliError::io(&side, e))
}

pub fn cmd_train(config_path: &Path, out: &Path) -> Result<(), CliError> {
    let (mut cfg, _) = config::load::<TrainRun>(config_path)?;
    cfg.train.seed = cfg.seed;
    cfg.validate()?;
    let t = target(&cfg.target, None)?;
    let dim = t.density.dim();
    with_run(out, "train", cfg.name.clone(), cfg.seed, &cfg, |run| {
        let (ds, label_evals) = dataset(&cfg.dataset, &cfg.target, cfg.seed, dim)?;
        run.manifest.target_evals.training += label_evals;
        run.save_manifest()?;
        let val = exact_validation_points(&t.gmm, cfg.validation_n, cfg.seed);
        let before = t.density.evaluations();
        let validation = Validation {
            points: Some(val.view()),
            target: Some(&t.density),
        };
        let model = new_model(&cfg.flow, dim, cfg.seed)?;
        let (model, history) = train_unbiased(&ds, &cfg.train, model, validation)?;
        // history ESS probes are evaluation, not training signal
        run.manifest.target_evals.evaluation += t.density.evaluations() - before;
        save_model(run, &model, "checkpoint", "checkpoint.json")?;
        run.write_text("history", "history.csv", &history.to_csv())?;
        evaluate_into(run, &model, &t, &cfg.eval)?;
        Ok(())
    })
}

pub fn cmd_anneal(config_path: &Path, out: &Path) -> Result<(), CliError> {
    let (mut cfg, _) = config::load::<AnnealRun>(config_path)?;
    cfg.anneal.seed = cfg.seed;
    cfg.validate()?;
    let t = target(&cfg.target, None)?;
    let dim = t.density.dim();
    with_run(out, "anneal", cfg.name.clone(), cfg.seed, &cfg, |run| {
        let model = new_model(&cfg.flow, dim, cfg.seed)?;
        let before = t.density.evaluations();
        let result = anneal_run(&cfg.anneal, &t.density, model, AnnealOverrides::default());
        run.manifest.target_evals.training += t.density.evaluations() - before;
        let (model, history) = result?;
        save_model(run, &model, "checkpoint", "checkpoint.json")?;
        run.write_text("history", "history.csv", &history.to_csv())?;
        evaluate_into(run, &model, &t, &cfg.eval)?;
        Ok(())
    })
}

#[derive(Serialize)]
struct RefineSummary {
    stage1_ess_proposals: f64,
    stage1: MetricsReport,
    m_is: usize,
    refinement_target_evals: u64,
}

pub fn cmd_refine(config_path: &Path, out: &Path) -> Result<(), CliError> {
    let (mut cfg, _) = config::load::<RefineRun>(config_path)?;
    cfg.stage1.seed = cfg.seed;
    cfg.stage2.seed = cfg.seed.wrapping_add(1);
    cfg.validate()?;
    let t = target(&cfg.target, None)?;
    let dim = t.density.dim();
    with_run(out, "refine", cfg.name.clone(), cfg.seed, &cfg, |run| {
        let biased_name = format!("{}-biased", cfg.target);
        let (biased, label_evals) = dataset(&cfg.biased, &biased_name, cfg.seed, dim)?;
        run.manifest.target_evals.training += label_evals;
        let val = exact_validation_points(&t.gmm, cfg.validation_n, cfg.seed);
        let validation = Validation {
            points: Some(val.view()),
            target: None,
        };
        let model = new_model(&cfg.flow, dim, cfg.seed)?;
        let r = refine_biased(
            &biased,
            &t.density,
            &cfg.stage1,
            &cfg.stage2,
            cfg.m_is,
            cfg.ld_reference,
            model,
            validation,
        )?;
        run.manifest.target_evals.training += r.target_evals;
        save_model(run, &r.stage1, "stage1_checkpoint", "stage1_checkpoint.json")?;
        save_model(run, &r.model, "checkpoint", "checkpoint.json")?;
        run.write_text("history", "history.csv", &r.history.to_csv())?;
        let before = t.density.evaluations();
        let stage1 = evaluate(&r.stage1, &t.gmm, &t.density, &cfg.eval)?;
        run.manifest.target_evals.evaluation += t.density.evaluations() - before;
        run.write_json(
            "refinement",
            "refinement.json",
            &RefineSummary {
                stage1_ess_proposals: r.stage1_ess,
                stage1,
                m_is: cfg.m_is,
                refinement_target_evals: r.target_evals,
            },
        )?;
        evaluate_into(run, &r.model, &t, &cfg.eval)?;
        Ok(())
    })
}

pub fn cmd_eval(checkpoint: &Path, target_name: &str, eval: EvalConfig, out: &Path) -> Result<(), CliError> {
    let model: Model = Checkpoint::load(checkpoint)
        .and_then(|c| c.into_model())
        .map_err(|e| CliError::config(format!("{}: {e}", checkpoint.display())))?;
    let t = target(target_name, None)?;
    if t.density.dim() != model.dim() {
        return Err(CliError::config("checkpoint and target dimensions differ"));
    }
    #[derive(Serialize)]
    struct EvalRun<'a> {
        checkpoint: &'a Path,
        target: &'a str,
        eval: EvalConfig,
    }
    let cfg = EvalRun {
        checkpoint,
        target: target_name,
        eval,
    };
    with_run(out, "eval", None, eval.seed, &cfg, |run| {
        evaluate_into(run, &model, &t, &eval)?;
        Ok(())
    })
}

pub fn cmd_demo_ldr_only(config_path: &Path, out: &Path) -> Result<(), CliError> {
    let (mut cfg, _) = config::load::<DemoRun>(config_path)?;
    cfg.train.seed = cfg.seed;
    cfg.validate()?;
    let t = target(&cfg.target, None)?;
    let dim = t.density.dim();
    with_run(out, "demo-ldr-only", cfg.name.clone(), cfg.seed, &cfg, |run| {
        let (ds, label_evals) = dataset(&cfg.dataset, &cfg.target, cfg.seed, dim)?;
        run.manifest.target_evals.training += label_evals;
        let reference = restrict_to_modes(&ds, &t.gmm, &cfg.modes);
        let model = new_model(&cfg.flow, dim, cfg.seed)?;
        let (report, model, history) =
            ldr_only_demo(&reference, &cfg.train, cfg.combined_lambda_data, model, &t.gmm, cfg.n_eval)?;
        save_model(run, &model, "checkpoint", "checkpoint.json")?;
        run.write_text("history", "history.csv", &history.to_csv())?;
        run.write_json("report", "report.json", &report)?;
        Ok(())
    })
}
