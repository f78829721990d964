//! Command-line interface: data generation, training, tuning, prediction,
//! and the interpretability reports.
//!
//! Commands are deterministic under a fixed `--seed`. Diagnostics go to
//! stderr; prediction data goes to stdout only when `-` is the output path.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use risecast::analysis;
use risecast::artifact;
use risecast::embeddings::Registry;
use risecast::features::{
    build_inference_samples, build_samples, store, synthetic, Dataset, NormStats, Sample,
    PROJECTION_DAYS,
};
use risecast::model::{check_model_gradients, Model};
use risecast::numcore::gradcheck::GradCheckConfig;
use risecast::training::{
    partition, train, train_two_step, tune::tune, Hyperparams, SplitSpec, TrainReport,
};

#[derive(Parser)]
#[command(
    name = "risecast",
    version,
    about = "Forecast weekly case-growth ranges per county from heterogeneous feature groups"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// JSON run configuration; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for all randomness.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic county universe from a spec file.
    GenData {
        /// Universe spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        /// Output universe directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Two-step training with fixed hyperparameters.
    Train {
        #[arg(long)]
        universe: PathBuf,
        /// Output model artifact path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        embed_dim: Option<usize>,
        #[arg(long)]
        snn_depth: Option<usize>,
        #[arg(long)]
        snn_width: Option<usize>,
        #[arg(long)]
        dropout: Option<f64>,
        #[arg(long)]
        lambda_ce: Option<f64>,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Bayesian hyperparameter search, then two-step training of the best
    /// configuration.
    Tune {
        #[arg(long)]
        universe: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of tuning trials.
        #[arg(long)]
        budget: Option<usize>,
        /// Where to write the per-trial CSV (default: tune_trials.csv next
        /// to the artifact).
        #[arg(long)]
        trials_out: Option<PathBuf>,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Predict class distributions for counties and dates.
    Predict {
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long)]
        universe: PathBuf,
        /// Output CSV path, or `-` for stdout.
        #[arg(long, default_value = "-")]
        out: String,
        /// Comma-separated county ids (default: all).
        #[arg(long)]
        counties: Option<String>,
        /// First label date (default: earliest with full history).
        #[arg(long)]
        from: Option<NaiveDate>,
        /// Last label date (default: projection interval past the data end).
        #[arg(long)]
        to: Option<NaiveDate>,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Permutation feature importance report.
    Importance {
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long)]
        universe: PathBuf,
        /// Report directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        repeats: Option<usize>,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Past-day (time step) importance report.
    Timesteps {
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long)]
        universe: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        repeats: Option<usize>,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Pairwise interaction-magnitude report.
    Interactions {
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long)]
        universe: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Finite-difference check of the full model gradients on a toy
    /// universe.
    CheckGrads {
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        #[command(flatten)]
        common: CommonOpts,
    },
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    seed: u64,
    percentiles: Vec<f64>,
    split_fractions: [f64; 3],
    /// Explicit date ranges override the fractions.
    split_dates: Option<SplitSpec>,
    hyperparams: Hyperparams,
    tune_budget: usize,
    /// Shuffle repeats for the randomization analyses.
    repeats: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            percentiles: vec![0.33, 0.67, 0.90],
            split_fractions: [0.68, 0.12, 0.20],
            split_dates: None,
            hyperparams: Hyperparams::default(),
            tune_budget: 30,
            repeats: 5,
        }
    }
}

impl RunConfig {
    fn load(common: &CommonOpts) -> anyhow::Result<RunConfig> {
        let mut cfg = match &common.config {
            Some(path) => {
                let raw = fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str(&raw)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        let sum: f64 = cfg.split_fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            bail!("split fractions must sum to 1, got {:?}", cfg.split_fractions);
        }
        Ok(cfg)
    }

    fn split_for(&self, dataset: &Dataset) -> anyhow::Result<SplitSpec> {
        match self.split_dates {
            Some(spec) => {
                spec.validate()?;
                Ok(spec)
            }
            None => {
                let dates = dataset.label_dates();
                let [t, v, e] = self.split_fractions;
                Ok(SplitSpec::from_fractions(&dates, (t, v, e))?)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Helpers
// ---------------------------------------------------------------------------

fn registry_diff(model: &Registry, universe: &Registry) -> Option<String> {
    if model == universe {
        return None;
    }
    let mut lines = Vec::new();
    if model.window != universe.window {
        lines.push(format!(
            "window: model {} vs universe {}",
            model.window, universe.window
        ));
    }
    if model.counties != universe.counties {
        lines.push(format!(
            "counties: model has {} ({:?}...), universe has {} ({:?}...)",
            model.counties.len(),
            model.counties.first(),
            universe.counties.len(),
            universe.counties.first()
        ));
    }
    for g in &model.groups {
        match universe.groups.iter().find(|u| u.name == g.name) {
            None => lines.push(format!("group {:?}: missing from universe", g.name)),
            Some(u) if u != g => lines.push(format!(
                "group {:?}: model ({:?}, {} features) vs universe ({:?}, {} features)",
                g.name,
                g.kind,
                g.feature_count(),
                u.kind,
                u.feature_count()
            )),
            _ => {}
        }
    }
    for u in &universe.groups {
        if !model.groups.iter().any(|g| g.name == u.name) {
            lines.push(format!("group {:?}: missing from model", u.name));
        }
    }
    if lines.is_empty() {
        lines.push("group order differs".to_string());
    }
    Some(lines.join("\n"))
}

fn load_compatible(
    artifact_path: &Path,
    universe_path: &Path,
) -> anyhow::Result<(artifact::LoadedArtifact, store::Universe)> {
    let loaded = artifact::load(artifact_path)
        .with_context(|| format!("loading artifact {}", artifact_path.display()))?;
    let universe = store::read_universe(universe_path)
        .with_context(|| format!("reading universe {}", universe_path.display()))?;
    if let Some(diff) = registry_diff(&loaded.model.config.registry, &universe.registry) {
        bail!("artifact and universe registries differ:\n{diff}");
    }
    Ok((loaded, universe))
}

fn labeled_dataset(
    universe: &store::Universe,
    loaded: &artifact::LoadedArtifact,
) -> anyhow::Result<Dataset> {
    let mut dataset = build_samples(universe, &universe.registry, &loaded.percentiles)?;
    dataset.reassign_classes(&loaded.model.boundaries);
    Ok(dataset)
}

fn analysis_eval_set<'d>(
    dataset: &'d Dataset,
    cfg: &RunConfig,
) -> anyhow::Result<Vec<&'d Sample>> {
    let split = cfg.split_for(dataset)?;
    let indices = partition(dataset, &split)?;
    let train_samples: Vec<&Sample> =
        indices.train.iter().map(|&i| &dataset.samples[i]).collect();
    Ok(analysis::analysis_subset(&train_samples, cfg.seed))
}

#[derive(Serialize)]
struct TrainSummary<'r> {
    step1: &'r TrainReport,
    final_epochs: usize,
    final_train_loss: Vec<f64>,
    test_accuracy: f64,
}

fn run_two_step_training(
    dataset: &Dataset,
    split: &SplitSpec,
    hp: &Hyperparams,
    seed: u64,
    out: &Path,
    percentiles: &[f64],
) -> anyhow::Result<()> {
    if hp.learning_rate == 0.0 {
        eprintln!("warning: learning rate is 0; parameters will not move");
    }
    let step1 = train(dataset, split, hp, seed)?;
    eprintln!(
        "step 1: best epoch {} of {} (validation accuracy {:.4})",
        step1.report.best_epoch, hp.epochs_max, step1.report.best_val_accuracy
    );
    let final_run = train_two_step(dataset, split, hp, step1.report.best_epoch, seed)?;

    let indices = partition(dataset, split)?;
    let test_samples: Vec<&Sample> = indices.test.iter().map(|&i| &dataset.samples[i]).collect();
    let test_accuracy = final_run.model.accuracy(&test_samples)?;
    eprintln!(
        "step 2: retrained on train+val for {} epochs; test accuracy {:.4}",
        final_run.epochs_run, test_accuracy
    );

    artifact::save(&final_run.model, hp, percentiles, out)?;
    eprintln!("artifact written to {}", out.display());

    let report_path = out.with_extension("report.json");
    let summary = TrainSummary {
        step1: &step1.report,
        final_epochs: final_run.epochs_run,
        final_train_loss: final_run.epoch_train_loss.clone(),
        test_accuracy,
    };
    fs::write(
        &report_path,
        serde_json::to_string_pretty(&summary)? + "\n",
    )
    .with_context(|| format!("writing {}", report_path.display()))?;
    eprintln!("training report written to {}", report_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_gen_data(spec_path: &Path, out: &Path, common: &CommonOpts) -> anyhow::Result<()> {
    let raw = fs::read_to_string(spec_path)
        .with_context(|| format!("reading spec {}", spec_path.display()))?;
    let mut spec: synthetic::SyntheticUniverseSpec = serde_json::from_str(&raw)
        .with_context(|| format!("parsing spec {}", spec_path.display()))?;
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    let universe = synthetic::generate(&spec)?;
    store::write_universe(out, &universe)?;
    eprintln!(
        "universe {:?}: {} counties, {} days from {}, {} feature groups -> {}",
        spec.name,
        universe.registry.county_count(),
        universe.num_days,
        universe.start_date,
        universe.registry.groups.len(),
        out.display()
    );
    Ok(())
}

struct TrainOverrides {
    learning_rate: Option<f64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    embed_dim: Option<usize>,
    snn_depth: Option<usize>,
    snn_width: Option<usize>,
    dropout: Option<f64>,
    lambda_ce: Option<f64>,
}

impl TrainOverrides {
    fn apply(&self, mut hp: Hyperparams) -> Hyperparams {
        if let Some(v) = self.learning_rate {
            hp.learning_rate = v;
        }
        if let Some(v) = self.epochs {
            hp.epochs_max = v;
        }
        if let Some(v) = self.batch_size {
            hp.batch_size = v;
        }
        if let Some(v) = self.embed_dim {
            hp.embed_dim = v;
        }
        if let Some(v) = self.snn_depth {
            hp.snn_depth = v;
        }
        if let Some(v) = self.snn_width {
            hp.snn_width = v;
        }
        if let Some(v) = self.dropout {
            hp.dropout_rate = v;
        }
        if let Some(v) = self.lambda_ce {
            hp.lambda_ce = v;
        }
        hp
    }
}

fn cmd_train(
    universe_path: &Path,
    out: &Path,
    overrides: &TrainOverrides,
    common: &CommonOpts,
) -> anyhow::Result<()> {
    let cfg = RunConfig::load(common)?;
    let hp = overrides.apply(cfg.hyperparams.clone());

    let universe = store::read_universe(universe_path)?;
    let dataset = build_samples(&universe, &universe.registry, &cfg.percentiles)?;
    eprintln!(
        "dataset: {} samples, boundaries {:?} ({} label dates dropped for history)",
        dataset.samples.len(),
        dataset.boundaries.thresholds(),
        dataset.dropped_label_dates
    );
    let split = cfg.split_for(&dataset)?;
    run_two_step_training(&dataset, &split, &hp, cfg.seed, out, &cfg.percentiles)
}

fn cmd_tune(
    universe_path: &Path,
    out: &Path,
    budget: Option<usize>,
    trials_out: Option<PathBuf>,
    common: &CommonOpts,
) -> anyhow::Result<()> {
    let cfg = RunConfig::load(common)?;
    let budget = budget.unwrap_or(cfg.tune_budget);
    let universe = store::read_universe(universe_path)?;
    let dataset = build_samples(&universe, &universe.registry, &cfg.percentiles)?;
    let split = cfg.split_for(&dataset)?;

    let space = risecast::training::tune::SearchSpace::default();
    let outcome = tune(&dataset, &split, &cfg.hyperparams, &space, budget, cfg.seed)?;
    eprintln!(
        "tuning: best validation accuracy {:.4} (best epoch {})",
        outcome.best_score, outcome.best_epochs
    );

    let trials_path = trials_out.unwrap_or_else(|| {
        out.parent()
            .unwrap_or_else(|| Path::new("."))
            .join("tune_trials.csv")
    });
    let mut csv = String::from(
        "trial,embed_dim,snn_depth,snn_width,dropout_rate,learning_rate,lambda_ce,val_accuracy,best_epoch\n",
    );
    for t in &outcome.trials {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            t.index,
            t.hp.embed_dim,
            t.hp.snn_depth,
            t.hp.snn_width,
            t.hp.dropout_rate,
            t.hp.learning_rate,
            t.hp.lambda_ce,
            t.score.map(|s| s.to_string()).unwrap_or_default(),
            t.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
        ));
    }
    fs::write(&trials_path, csv)
        .with_context(|| format!("writing {}", trials_path.display()))?;
    eprintln!("trial log written to {}", trials_path.display());

    run_two_step_training(
        &dataset,
        &split,
        &outcome.best_hp,
        cfg.seed,
        out,
        &cfg.percentiles,
    )
}

fn cmd_predict(
    artifact_path: &Path,
    universe_path: &Path,
    out: &str,
    counties: Option<&str>,
    from: Option<NaiveDate>,
    to: Option<NaiveDate>,
) -> anyhow::Result<()> {
    let (loaded, universe) = load_compatible(artifact_path, universe_path)?;
    let registry = &universe.registry;

    let counties: Vec<String> = match counties {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
        None => registry.counties.clone(),
    };
    let earliest = universe.start_date
        + chrono::Days::new((registry.window + PROJECTION_DAYS - 1) as u64);
    let latest = universe.start_date
        + chrono::Days::new((universe.num_days - 1 + PROJECTION_DAYS) as u64);
    let from = from.unwrap_or(earliest);
    let to = to.unwrap_or(latest);
    if from > to {
        bail!("--from {from} is after --to {to}");
    }
    let mut dates = Vec::new();
    let mut d = from;
    while d <= to {
        dates.push(d);
        d = d + chrono::Days::new(1);
    }

    let (samples, skipped) = build_inference_samples(&universe, registry, &counties, &dates)?;
    if skipped > 0 {
        eprintln!("warning: {skipped} (county, date) rows omitted for missing history");
    }
    if samples.is_empty() {
        bail!("no predictable (county, date) pairs in the requested range");
    }
    let refs: Vec<&Sample> = samples.iter().collect();
    let predictions = loaded.model.predict(&refs)?;

    let n_classes = loaded.model.boundaries.num_classes();
    let mut csv = String::from("county,date");
    for k in 0..n_classes {
        csv.push_str(&format!(",prob_class_{k}"));
    }
    csv.push_str(",predicted_class,range\n");
    for (sample, pred) in samples.iter().zip(&predictions) {
        csv.push_str(&format!("{},{}", sample.county, sample.label_date));
        for p in &pred.class_probs {
            csv.push_str(&format!(",{p}"));
        }
        csv.push_str(&format!(
            ",{},\"{}\"\n",
            pred.predicted_class,
            loaded.model.boundaries.range_label(pred.predicted_class)
        ));
    }

    if out == "-" {
        print!("{csv}");
    } else {
        fs::write(out, csv).with_context(|| format!("writing {out}"))?;
        eprintln!("{} predictions written to {out}", predictions.len());
    }
    Ok(())
}

fn cmd_importance(
    artifact_path: &Path,
    universe_path: &Path,
    out: &Path,
    repeats: Option<usize>,
    common: &CommonOpts,
) -> anyhow::Result<()> {
    let cfg = RunConfig::load(common)?;
    let (loaded, universe) = load_compatible(artifact_path, universe_path)?;
    let dataset = labeled_dataset(&universe, &loaded)?;
    let eval_set = analysis_eval_set(&dataset, &cfg)?;
    let repeats = repeats.unwrap_or(cfg.repeats);
    let report = analysis::permutation_importance(&loaded.model, &eval_set, cfg.seed, repeats)?;
    let paths = analysis::emit_importance(&report, out)?;
    for p in &paths {
        eprintln!("wrote {}", p.display());
    }
    for e in report.entries.iter().take(5) {
        eprintln!("  {}.{}: drop {:+.4}", e.group, e.feature, e.accuracy_drop);
    }
    Ok(())
}

fn cmd_timesteps(
    artifact_path: &Path,
    universe_path: &Path,
    out: &Path,
    repeats: Option<usize>,
    common: &CommonOpts,
) -> anyhow::Result<()> {
    let cfg = RunConfig::load(common)?;
    let (loaded, universe) = load_compatible(artifact_path, universe_path)?;
    let dataset = labeled_dataset(&universe, &loaded)?;
    let eval_set = analysis_eval_set(&dataset, &cfg)?;
    let repeats = repeats.unwrap_or(cfg.repeats);
    let report = analysis::timestep_importance(&loaded.model, &eval_set, cfg.seed, repeats)?;
    let paths = analysis::emit_timesteps(&report, out)?;
    for p in &paths {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_interactions(
    artifact_path: &Path,
    universe_path: &Path,
    out: &Path,
    common: &CommonOpts,
) -> anyhow::Result<()> {
    let cfg = RunConfig::load(common)?;
    let (loaded, universe) = load_compatible(artifact_path, universe_path)?;
    let dataset = labeled_dataset(&universe, &loaded)?;
    let eval_set = analysis_eval_set(&dataset, &cfg)?;
    let matrix = analysis::interaction_magnitudes(&loaded.model, &eval_set)?;
    let paths = analysis::emit_interactions(&matrix, out)?;
    for p in &paths {
        eprintln!("wrote {}", p.display());
    }
    if let Some((i, j, v)) = matrix.ranked_pairs().first() {
        eprintln!(
            "  strongest pair: {} x {} ({:.4})",
            matrix.groups[*i], matrix.groups[*j], v
        );
    }
    Ok(())
}

fn cmd_check_grads(tolerance: f64, common: &CommonOpts) -> anyhow::Result<()> {
    let cfg = RunConfig::load(common)?;
    let spec = synthetic::SyntheticUniverseSpec {
        name: "gradcheck".into(),
        counties: 6,
        start_date: NaiveDate::from_ymd_opt(2020, 4, 5).unwrap(),
        days: 24,
        seed: cfg.seed,
        window: 13,
        census_features: 3,
        vulnerability_features: 2,
        distancing_features: 2,
        visitation_features: 2,
        mobility_features: 1,
        grid_cells: 3,
        recipe: synthetic::Recipe::MainEffect {
            group: "visitation".into(),
            feature: 0,
        },
        noise_scale: 0.3,
        regime_days: 10,
    };
    let universe = synthetic::generate(&spec)?;
    let dataset = build_samples(&universe, &universe.registry, &[0.33, 0.67, 0.90])?;
    let hp = Hyperparams {
        embed_dim: 8,
        snn_depth: 1,
        snn_width: 16,
        dropout_rate: 0.0,
        ..Hyperparams::default()
    };
    let refs: Vec<&Sample> = dataset.samples.iter().take(8).collect();
    let normalization = NormStats::fit(&universe.registry, &refs)?;
    let config = hp.model_config(
        universe.registry.clone(),
        dataset.boundaries.num_classifiers(),
    );
    let mut model = Model::new(config, dataset.boundaries.clone(), normalization, cfg.seed)?;

    let toy: Vec<&Sample> = refs[..4].to_vec();
    let report = check_model_gradients(&mut model, &toy, &GradCheckConfig::default())?;
    eprintln!(
        "{:<24} {:>14} {:>14} {:>14}",
        "parameter", "max rel err", "analytic", "numeric"
    );
    for p in &report.params {
        eprintln!(
            "{:<24} {:>14.3e} {:>14.6} {:>14.6}",
            p.name, p.max_rel_err, p.analytic_at_worst, p.numeric_at_worst
        );
    }
    eprintln!(
        "max relative error: {:.3e} (tolerance {tolerance:.1e})",
        report.max_rel_err
    );
    if !report.passes(tolerance) {
        return Err(anyhow!(
            "gradient check failed: {:.3e} >= {tolerance:.1e}",
            report.max_rel_err
        ));
    }
    eprintln!("gradient check passed");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData { spec, out, common } => cmd_gen_data(spec, out, common),
        Command::Train {
            universe,
            out,
            learning_rate,
            epochs,
            batch_size,
            embed_dim,
            snn_depth,
            snn_width,
            dropout,
            lambda_ce,
            common,
        } => cmd_train(
            universe,
            out,
            &TrainOverrides {
                learning_rate: *learning_rate,
                epochs: *epochs,
                batch_size: *batch_size,
                embed_dim: *embed_dim,
                snn_depth: *snn_depth,
                snn_width: *snn_width,
                dropout: *dropout,
                lambda_ce: *lambda_ce,
            },
            common,
        ),
        Command::Tune {
            universe,
            out,
            budget,
            trials_out,
            common,
        } => cmd_tune(universe, out, *budget, trials_out.clone(), common),
        Command::Predict {
            artifact,
            universe,
            out,
            counties,
            from,
            to,
            common: _,
        } => cmd_predict(artifact, universe, out, counties.as_deref(), *from, *to),
        Command::Importance {
            artifact,
            universe,
            out,
            repeats,
            common,
        } => cmd_importance(artifact, universe, out, *repeats, common),
        Command::Timesteps {
            artifact,
            universe,
            out,
            repeats,
            common,
        } => cmd_timesteps(artifact, universe, out, *repeats, common),
        Command::Interactions {
            artifact,
            universe,
            out,
            common,
        } => cmd_interactions(artifact, universe, out, common),
        Command::CheckGrads { tolerance, common } => cmd_check_grads(*tolerance, common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
