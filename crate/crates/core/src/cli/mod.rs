//! The `trajmix` command-line pipeline.
//!
//! `gen-data` → `train --target predictor` → `train --target confidence` →
//! `evaluate`, plus `ablate-all` for the per-child ablation table and
//! `predict` for single samples. Settings come from an optional JSON config
//! file; flags override it. Every random stream is derived from the root
//! `seed`, so a rerun with the same inputs writes byte-identical files.

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::basis::reconstruct;
use crate::basis::CoeffVector;
use crate::confidence::{train_confidence, ConfidenceOptions, ScoreTable, SCORE_HORIZONS_S};
use crate::error::{Error, Result};
use crate::eval::{
    build_report, evaluate_samples, information_gain_samples, variational_metrics, write_report, Interval,
    PredictorMetrics, BOOTSTRAP_RESAMPLES,
};
use crate::gmm::{sample as sample_gmm, GmmParams, RegularizerWeights};
use crate::io::{
    load_checkpoint, parse_inputs, read_dataset, read_text, save_checkpoint, sha256_hex, write_dataset, write_text,
    Checkpoint, CheckpointModel, DatasetHeader, Manifest, ModelKind,
};
use crate::mixture::{mixture_predict, MixtureDecision, MixtureModels, ThresholdConfig};
use crate::net::TrainConfig;
use crate::predictors::{
    train_variational_selected, Architecture, Child, InputFeatures, OdometryExpert, PredictorId, VariationalModel,
    VariationalOptions,
};
use crate::seed::stage_seed;
use crate::simgen::{generate, maneuver_histogram, split, Sample, ScenarioConfig};

/// Environment variable that overrides the report directory.
pub const REPORT_DIR_ENV: &str = "TRAJMIX_REPORT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub dataset: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            dataset: "dataset.jsonl".into(),
            checkpoint_dir: "checkpoints".into(),
            report_dir: "reports".into(),
        }
    }
}

/// Full pipeline configuration. Seeds inside the sections are replaced by
/// streams derived from the root `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub scenario: ScenarioConfig,
    /// Predictor training, confidence training and test fractions.
    pub split_fractions: [f64; 3],
    pub train: TrainConfig,
    pub regularizer: RegularizerWeights,
    pub thresholds: ThresholdConfig,
    pub components: usize,
    pub children: Vec<Child>,
    pub architecture: Architecture,
    pub odometry: OdometryExpert,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: PathsConfig::default(),
            scenario: ScenarioConfig::default(),
            split_fractions: [0.5, 0.3, 0.2],
            train: TrainConfig::default(),
            regularizer: RegularizerWeights::default(),
            thresholds: ThresholdConfig::default(),
            components: 3,
            children: Child::ALL.to_vec(),
            architecture: Architecture::default(),
            odometry: OdometryExpert::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.train.validate()?;
        self.regularizer.validate()?;
        self.thresholds.validate()?;
        if self.components == 0 {
            return Err(Error::InvalidConfig("components must be at least 1".into()));
        }
        if self.children.is_empty() {
            return Err(Error::InvalidConfig("at least one child network is required".into()));
        }
        if !(self.odometry.gmm_std > 0.0) {
            return Err(Error::InvalidConfig("odometry gmm_std must be positive".into()));
        }
        Ok(())
    }

    fn scenario_seeded(&self) -> ScenarioConfig {
        ScenarioConfig {
            seed: stage_seed(self.seed, "gen-data"),
            ..self.scenario.clone()
        }
    }

    fn train_seeded(&self, stage: &str) -> TrainConfig {
        TrainConfig {
            seed: stage_seed(self.seed, stage),
            ..self.train
        }
    }

    fn predictor_path(&self, ablated: Option<Child>) -> PathBuf {
        let name = match ablated {
            None => "predictor.json".to_string(),
            Some(c) => format!("predictor-without-{c}.json"),
        };
        self.paths.checkpoint_dir.join(name)
    }

    fn confidence_path(&self) -> PathBuf {
        self.paths.checkpoint_dir.join("confidence.json")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Target {
    Predictor,
    Confidence,
}

fn parse_child(s: &str) -> std::result::Result<Child, String> {
    s.parse::<Child>().map_err(|e| e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "trajmix", version, about = "Mixture-of-experts vehicle trajectory prediction")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint_dir: Option<PathBuf>,
    #[arg(long, global = true, env = REPORT_DIR_ENV)]
    pub report_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Train the variational predictor or the confidence estimator.
    Train {
        #[arg(long, value_enum)]
        target: Target,
        /// Child network to leave out (dynamics, canbus, imu, scene).
        #[arg(long, value_parser = parse_child)]
        ablate: Option<Child>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Evaluate the mixture on the test split and write reports.
    Evaluate,
    /// Train the full predictor and every single-child ablation.
    AblateAll {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Mixture prediction for every record of an input file.
    Predict {
        #[arg(long)]
        input: PathBuf,
        /// Trajectories drawn from each output mixture.
        #[arg(long, default_value_t = 5)]
        samples: usize,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = read_text(p).map_err(|_| Error::InvalidConfig(format!("cannot read config {}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(p) = &cli.dataset {
        cfg.paths.dataset = p.clone();
    }
    if let Some(p) = &cli.checkpoint_dir {
        cfg.paths.checkpoint_dir = p.clone();
    }
    if let Some(p) = &cli.report_dir {
        cfg.paths.report_dir = p.clone();
    }
    match &cli.command {
        Command::GenData { samples: Some(n) } => cfg.scenario.samples = *n,
        Command::Train {
            epochs, learning_rate, ..
        }
        | Command::AblateAll { epochs, learning_rate } => {
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            if let Some(lr) = learning_rate {
                cfg.train.learning_rate = *lr;
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs one command and returns what it prints on success.
pub fn run(cli: &Cli) -> Result<String> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenData { .. } => cmd_gen_data(&cfg),
        Command::Train { target, ablate, .. } => match target {
            Target::Predictor => cmd_train_predictor(&cfg, *ablate),
            Target::Confidence => {
                if ablate.is_some() {
                    return Err(Error::InvalidConfig("--ablate applies to the predictor target only".into()));
                }
                cmd_train_confidence(&cfg)
            }
        },
        Command::Evaluate => cmd_evaluate(&cfg),
        Command::AblateAll { .. } => cmd_ablate_all(&cfg),
        Command::Predict { input, samples } => cmd_predict(&cfg, input, *samples),
    }
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<String> {
    let scenario = cfg.scenario_seeded();
    let data = generate(&scenario)?;
    write_dataset(&cfg.paths.dataset, &DatasetHeader::new(&scenario, data.len()), &data)?;
    let mut out = format!("wrote {} samples to {}\n", data.len(), cfg.paths.dataset.display());
    for (m, n) in maneuver_histogram(&data) {
        let _ = writeln!(out, "  {:<16} {n}", m.name());
    }
    Ok(out)
}

/// The configured dataset cut into predictor, confidence and test splits.
pub struct Splits {
    pub sha: String,
    pub predictor: Vec<Sample>,
    pub confidence: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let path = &cfg.paths.dataset;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, data) = read_dataset(path)?;
    let (predictor, confidence, test) = split(&data, cfg.split_fractions, stage_seed(cfg.seed, "split"))?;
    Ok(Splits {
        sha: sha256_hex(&bytes),
        predictor,
        confidence,
        test,
    })
}

fn active_children(cfg: &RunConfig, ablated: Option<Child>) -> Result<Vec<Child>> {
    let children: Vec<Child> = cfg.children.iter().copied().filter(|&c| Some(c) != ablated).collect();
    if children.is_empty() {
        return Err(Error::InvalidConfig("ablation leaves no child network".into()));
    }
    Ok(children)
}

fn train_predictor(cfg: &RunConfig, splits: &Splits, ablated: Option<Child>) -> Result<(Checkpoint, String)> {
    let opts = VariationalOptions {
        k: cfg.components,
        children: active_children(cfg, ablated)?,
        arch: cfg.architecture.clone(),
        ..VariationalOptions::default()
    };
    // ablation pairs share one seed so their shared weights start identical
    let train = cfg.train_seeded("train/predictor");
    // the confidence split doubles as held-out data for epoch selection
    let (model, report) =
        train_variational_selected(&splits.predictor, &splits.confidence, &train, &cfg.regularizer, &opts)?;
    let mut log = String::new();
    for (i, (l, v)) in report.epoch_losses.iter().zip(&report.validation_losses).enumerate() {
        let _ = writeln!(log, "epoch {:>4} loss {l:.6} validation nll {v:.6}", i + 1);
    }
    let _ = writeln!(log, "kept epoch {}", report.selected_epoch + 1);
    let manifest = Manifest {
        kind: ModelKind::Predictor,
        children: model.children().to_vec(),
        ablated_child: ablated,
        registry: PredictorId::REGISTRY.to_vec(),
        components: Some(model.k()),
        past_basis: crate::basis::BasisSpec::past(),
        future_basis: model.basis(),
        normalizer: model.stack.normalizer.clone(),
        train,
        regularizer: Some(cfg.regularizer),
        dataset_sha256: splits.sha.clone(),
        epoch_losses: report.epoch_losses,
        validation_losses: report.validation_losses,
        selected_epoch: report.selected_epoch,
    };
    Ok((Checkpoint::new(manifest, CheckpointModel::Predictor(model)), log))
}

pub fn cmd_train_predictor(cfg: &RunConfig, ablated: Option<Child>) -> Result<String> {
    let splits = load_splits(cfg)?;
    let (ck, mut log) = train_predictor(cfg, &splits, ablated)?;
    let path = cfg.predictor_path(ablated);
    save_checkpoint(&path, &ck)?;
    let _ = writeln!(log, "saved {} (children: {:?})", path.display(), ck.manifest.children);
    Ok(log)
}

fn load_variational(path: &Path) -> Result<VariationalModel> {
    load_checkpoint(path)?.into_variational()
}

pub fn cmd_train_confidence(cfg: &RunConfig) -> Result<String> {
    let variational = load_variational(&cfg.predictor_path(None))?;
    let splits = load_splits(cfg)?;
    let table = ScoreTable::compute(&splits.confidence, &variational, &SCORE_HORIZONS_S)?;
    let xs: Vec<&InputFeatures> = splits.confidence.iter().map(|s| &s.features).collect();
    let opts = ConfidenceOptions {
        children: cfg.children.clone(),
        arch: cfg.architecture.clone(),
    };
    let train = cfg.train_seeded("train/confidence");
    let (model, report) = train_confidence(&xs, &table, &train, &opts)?;
    let mut log = String::new();
    for (i, l) in report.epoch_losses.iter().enumerate() {
        let _ = writeln!(log, "epoch {:>4} loss {l:.6}", i + 1);
    }
    let manifest = Manifest {
        kind: ModelKind::Confidence,
        children: model.stack.children.clone(),
        ablated_child: None,
        registry: model.registry.clone(),
        components: None,
        past_basis: crate::basis::BasisSpec::past(),
        future_basis: variational.basis(),
        normalizer: model.stack.normalizer.clone(),
        train,
        regularizer: None,
        dataset_sha256: splits.sha,
        epoch_losses: report.epoch_losses,
        validation_losses: report.validation_losses,
        selected_epoch: report.selected_epoch,
    };
    let path = cfg.confidence_path();
    save_checkpoint(&path, &Checkpoint::new(manifest, CheckpointModel::Confidence(model)))?;
    let _ = writeln!(log, "saved {}", path.display());
    Ok(log)
}

pub fn load_models(cfg: &RunConfig) -> Result<MixtureModels> {
    Ok(MixtureModels {
        variational: load_variational(&cfg.predictor_path(None))?,
        odometry: cfg.odometry,
        confidence: load_checkpoint(&cfg.confidence_path())?.into_confidence()?,
    })
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<String> {
    let models = load_models(cfg)?;
    let splits = load_splits(cfg)?;
    let evals = evaluate_samples(&models, &splits.test)?;
    let (report, log) = build_report(&evals, &cfg.thresholds, stage_seed(cfg.seed, "evaluate"))?;
    write_report(&cfg.paths.report_dir, &report, &log)?;
    let mut out = String::new();
    let h = cfg.thresholds.decision_horizon_s;
    for p in &report.predictors {
        let _ = writeln!(
            out,
            "{:<12} L2@{h}s {:.3} m  RMSE {:.3} m  hard {:.1}%  NLL {:.3}",
            p.predictor.name(),
            p.l2_at_decision_m.mean,
            p.rmse_m.mean,
            100.0 * p.hard_case_fraction,
            p.nll_nats.mean
        );
    }
    let m = &report.mixture;
    let _ = writeln!(
        out,
        "{:<12} L2@{h}s {:.3} m  oracle {:.3} m  regret {:.3} m",
        "mixture", m.l2_at_decision_m.mean, m.oracle_l2_at_decision_m.mean, m.regret_m
    );
    let _ = writeln!(
        out,
        "arbitration accuracy {:.1}%  underestimated {:.1}% of {:.1}% uncertain",
        100.0 * m.arbitration_accuracy.mean,
        100.0 * m.underestimated_fraction,
        100.0 * m.uncertain_fraction
    );
    let _ = writeln!(out, "reports written to {}", cfg.paths.report_dir.display());
    Ok(out)
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub removed: Option<Child>,
    /// Gain of the removed child relative to the full model.
    pub information_gain_nats: Option<Interval>,
    pub metrics: PredictorMetrics,
}

fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "model,information_gain_nats,information_gain_lo,information_gain_hi,rmse_m,l2_at_decision_m,hard_case_fraction,nll_nats\n",
    );
    for r in rows {
        let name = r.removed.map_or("full".to_string(), |c| format!("without-{c}"));
        let (ig, lo, hi) = r
            .information_gain_nats
            .map_or((String::new(), String::new(), String::new()), |i| {
                (i.mean.to_string(), i.lo.to_string(), i.hi.to_string())
            });
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "{name},{ig},{lo},{hi},{},{},{},{}",
            m.rmse_m.mean, m.l2_at_decision_m.mean, m.hard_case_fraction, m.nll_nats.mean
        );
    }
    out
}

pub fn cmd_ablate_all(cfg: &RunConfig) -> Result<String> {
    let splits = load_splits(cfg)?;
    let seed = stage_seed(cfg.seed, "ablate-all");
    let (full_ck, _) = train_predictor(cfg, &splits, None)?;
    save_checkpoint(&cfg.predictor_path(None), &full_ck)?;
    let full = full_ck.into_variational()?;
    let mut rows = vec![AblationRow {
        removed: None,
        information_gain_nats: None,
        metrics: variational_metrics(&full, &splits.test, &cfg.thresholds, seed)?,
    }];
    let mut out = String::new();
    for &child in &cfg.children {
        if cfg.children.len() == 1 {
            break;
        }
        let (ck, _) = train_predictor(cfg, &splits, Some(child))?;
        save_checkpoint(&cfg.predictor_path(Some(child)), &ck)?;
        let without = ck.into_variational()?;
        let gains = information_gain_samples(&splits.test, &full, &without)?;
        let ig = crate::eval::bootstrap_mean(&gains, BOOTSTRAP_RESAMPLES, stage_seed(seed, child.name()))?;
        let _ = writeln!(out, "{:<10} information gain {:.4} nats [{:.4}, {:.4}]", child.name(), ig.mean, ig.lo, ig.hi);
        rows.push(AblationRow {
            removed: Some(child),
            information_gain_nats: Some(ig),
            metrics: variational_metrics(&without, &splits.test, &cfg.thresholds, seed)?,
        });
    }
    let dir = &cfg.paths.report_dir;
    write_text(&dir.join("ablation.json"), &(serde_json::to_string_pretty(&rows)? + "\n"))?;
    write_text(&dir.join("ablation.csv"), &ablation_csv(&rows))?;
    let _ = writeln!(out, "ablation table written to {}", dir.display());
    Ok(out)
}

/// Output record of `predict`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: Option<u64>,
    pub decision: MixtureDecision,
    pub gmm: GmmParams,
    /// Dominant component mean on the future grid, `[t, x, y]` rows.
    pub dominant_trajectory: Vec<[f64; 3]>,
    pub sampled_trajectories: Vec<Vec<[f64; 3]>>,
}

fn rows(t: &crate::basis::TrajectorySegment) -> Vec<[f64; 3]> {
    (0..t.len()).map(|i| [t.times[i], t.xs[i], t.ys[i]]).collect()
}

pub fn predict_records(
    models: &MixtureModels,
    inputs: &[(Option<u64>, InputFeatures)],
    cfg: &RunConfig,
    n_samples: usize,
) -> Result<Vec<PredictionRecord>> {
    let basis = models.variational.basis();
    let grid = basis.future_grid();
    inputs
        .iter()
        .enumerate()
        .map(|(i, (id, x))| {
            let (gmm, decision) = mixture_predict(models, x, &cfg.thresholds)?;
            let dominant = crate::gmm::mean_trajectory(&gmm, gmm.dominant(), &grid)?;
            let draws = sample_gmm(&gmm, n_samples, stage_seed(cfg.seed, &format!("predict/{i}")))?;
            let sampled = draws
                .iter()
                .map(|c| Ok(rows(&reconstruct(&CoeffVector::from_flat(c, basis)?, &grid))))
                .collect::<Result<Vec<_>>>()?;
            Ok(PredictionRecord {
                id: *id,
                decision,
                dominant_trajectory: rows(&dominant),
                sampled_trajectories: sampled,
                gmm,
            })
        })
        .collect()
}

pub fn cmd_predict(cfg: &RunConfig, input: &Path, n_samples: usize) -> Result<String> {
    let models = load_models(cfg)?;
    let inputs = parse_inputs(&read_text(input)?)?;
    let mut out = String::new();
    for r in predict_records(&models, &inputs, cfg, n_samples)? {
        out.push_str(&serde_json::to_string(&r)?);
        out.push('\n');
    }
    Ok(out)
}
