//! Subcommand implementations.
//!
//! Output files:
//! - `train`: `checkpoint.json`, `train_log.csv` (one row per epoch: epoch,
//!   supervised_loss, recourse_loss, validation_f1, validation_threshold),
//!   `manifest.json`.
//! - `calibrate`: the updated checkpoint, with `policy` and `calibration`
//!   filled in.
//! - `recourse`: CSV with one row per requested instance, in request order:
//!   id, row, algorithm, valid, post_score, then `<feature>`, `<feature>_new`
//!   and `<feature>_delta` for every encoded column in raw units.
//! - `evaluate`: one JSON metrics record.
//! - `sweep`: `sweep_rows.csv` (value, seed, then every flat metric),
//!   `sweep_summary.csv` (value, then `<metric>_mean` and `<metric>_se`), `sweep.json`,
//!   `manifest.json`.
//!
//! Nothing written here carries a timestamp, so reruns are byte-identical.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use recourse_core::action::ActionSet;
use recourse_core::calibration::{apply_policy, validation_f1, CalibrationResult, ThresholdPolicy};
use recourse_core::checkpoint::{Checkpoint, DataSource};
use recourse_core::data::{load_dataset, DatasetBundle, Split};
use recourse_core::eval::{
    self, distribution_probe, evaluate as evaluate_metrics, model_brittleness, recourse_disparity, recourse_robustness,
    split_recourse, DisparityReport, Fraction, MetricsReport, NoiseModel, ProbeReport, SweepAxis, SweepSpec,
};
use recourse_core::recourse::{
    apply_action, compute_recourse, instance_seed, GradientDescentOptions, RecourseAlgorithm, RecourseOptions,
};
use recourse_core::train::{epochs_csv, train as train_model, TrainConfig};
use recourse_core::{synth, Error};

use crate::{
    AxisArg, CalibrateArgs, DataArgs, EvaluateArgs, PolicyArg, RecourseArgs, SearchArgs, SweepArgs, SynthArgs,
    TrainArgs, TrainingArgs,
};

#[derive(Serialize)]
struct Manifest<'a, T: Serialize> {
    command: &'a str,
    version: &'a str,
    settings: T,
    outputs: Vec<String>,
}

fn write_manifest<T: Serialize>(dir: &Path, command: &str, settings: T, outputs: &[&str]) -> Result<()> {
    let m = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        settings,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    write_json(&dir.join("manifest.json"), &m)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    fs::write(path, text)
        .map_err(Error::from)
        .with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(Error::from)
        .with_context(|| format!("creating {}", dir.display()))
}

fn canonical(path: &Path) -> Result<PathBuf> {
    fs::canonicalize(path)
        .map_err(Error::from)
        .with_context(|| format!("reading {}", path.display()))
}

fn load(config: &Path, csv: &Path, split_seed: u64) -> Result<DatasetBundle> {
    load_dataset(config, csv, split_seed)
        .with_context(|| format!("loading {} with {}", csv.display(), config.display()))
}

fn search_options(s: &SearchArgs) -> RecourseOptions {
    RecourseOptions {
        gradient_descent: GradientDescentOptions {
            lambda0: s.gd_lambda0,
            step_size: s.gd_step_size,
            steps: s.gd_steps,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn train_config(t: &TrainingArgs) -> TrainConfig {
    let base = if t.small {
        TrainConfig::small_dataset()
    } else {
        TrainConfig::default()
    };
    TrainConfig {
        learning_rate: t.learning_rate,
        batch_size: t.batch_size.unwrap_or(base.batch_size),
        epochs: t.epochs.unwrap_or(base.epochs),
        lambda: t.lambda,
        seed: t.seed,
        dropout: t.dropout,
        ..base
    }
}

/// Dataset and action set a checkpoint was trained on.
fn restore(ck: &Checkpoint) -> Result<(DatasetBundle, ActionSet)> {
    let bundle = load(&ck.data.config, &ck.data.csv, ck.data.split_seed)?;
    let aset = ActionSet::for_bundle(&bundle, Some(ck.delta_max))?;
    if ck.params.architecture.input_dim != bundle.dim() {
        return Err(Error::Shape {
            context: "checkpoint input width",
            expected: bundle.dim(),
            actual: ck.params.architecture.input_dim,
        }
        .into());
    }
    Ok((bundle, aset))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let ds = synth::by_name(&a.dataset, a.rows, a.seed)?;
    create_dir(&a.out)?;
    let toml_path = a.out.join(format!("{}.toml", a.dataset));
    let csv_path = a.out.join(format!("{}.csv", a.dataset));
    fs::write(&toml_path, ds.config_toml()?).map_err(Error::from)?;
    fs::write(&csv_path, &ds.csv).map_err(Error::from)?;
    println!("{}\n{}", toml_path.display(), csv_path.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSettings<'a> {
    data: &'a DataSource,
    train: &'a TrainConfig,
    delta_max: f64,
}

pub fn train(a: TrainArgs) -> Result<()> {
    let cfg = train_config(&a.training);
    let data = DataSource {
        config: canonical(&a.data.config)?,
        csv: canonical(&a.data.data)?,
        split_seed: a.training.split_seed.unwrap_or(a.training.seed),
    };
    let bundle = load(&data.config, &data.csv, data.split_seed)?;
    let aset = ActionSet::for_bundle(&bundle, a.training.delta_max)?;
    let delta_max = a.training.delta_max.unwrap_or(bundle.delta_max);
    log::info!(
        "training on {} rows, dim {}, lambda {}",
        bundle.count(Split::Train),
        bundle.dim(),
        cfg.lambda
    );
    let run = train_model(&bundle, &aset, &cfg)?;
    let best = &run.epochs[run.best_epoch];
    let mut ck = Checkpoint::new(run.params, cfg, delta_max, data, run.best_epoch, run.epochs.clone());
    ck.policy = Some(ThresholdPolicy::F1Max);

    create_dir(&a.out)?;
    ck.save(&a.out.join("checkpoint.json"))?;
    fs::write(a.out.join("train_log.csv"), epochs_csv(&run.epochs)?).map_err(Error::from)?;
    let settings = TrainSettings {
        data: &ck.data,
        train: &ck.train,
        delta_max,
    };
    write_manifest(&a.out, "train", settings, &["checkpoint.json", "train_log.csv"])?;
    println!(
        "best epoch {} of {}: validation F1 {:.4} at threshold {:.4}",
        run.best_epoch + 1,
        run.epochs.len(),
        best.validation_f1,
        best.validation_threshold
    );
    Ok(())
}

fn policy_from_args(a: &CalibrateArgs) -> Result<ThresholdPolicy> {
    let pac = || -> Result<(f64, f64)> {
        match (a.epsilon, a.alpha) {
            (Some(e), Some(al)) => Ok((e, al)),
            _ => Err(Error::Config("--epsilon and --alpha are required for this threshold policy".into()).into()),
        }
    };
    Ok(match a.threshold_policy {
        PolicyArg::F1Max => ThresholdPolicy::F1Max,
        PolicyArg::Pare => {
            let (epsilon, alpha) = pac()?;
            ThresholdPolicy::Pare { epsilon, alpha }
        }
        PolicyArg::PareThenF1 => {
            let (epsilon, alpha) = pac()?;
            ThresholdPolicy::PareThenF1 {
                epsilon,
                alpha,
                increments: a.increments,
            }
        }
        PolicyArg::Fixed => ThresholdPolicy::Fixed {
            threshold: a
                .threshold
                .ok_or_else(|| Error::Config("--threshold is required for the fixed policy".into()))?,
        },
    })
}

pub fn calibrate(a: CalibrateArgs) -> Result<()> {
    let policy = policy_from_args(&a)?;
    let mut ck = load_checkpoint(&a.checkpoint)?;
    let (bundle, aset) = restore(&ck)?;
    if matches!(policy, ThresholdPolicy::F1Max) {
        // Back to the threshold chosen during training.
        ck.params.threshold = ck
            .epochs
            .get(ck.best_epoch)
            .map_or(ck.params.threshold, |e| e.validation_threshold);
    }
    let cert = apply_policy(
        &mut ck.params,
        &bundle,
        &aset,
        policy,
        a.algorithm,
        &search_options(&a.search),
        a.seed,
    )?;
    ck.policy = Some(policy);
    ck.calibration = cert.clone();
    let out = a.out.as_ref().unwrap_or(&a.checkpoint);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    ck.save(out)?;
    print_calibration(ck.params.threshold, validation_f1(&ck.params, &bundle), cert.as_ref());
    Ok(())
}

fn print_calibration(threshold: f64, f1: f64, cert: Option<&CalibrationResult>) {
    println!("threshold {threshold:.6} (validation F1 {f1:.4})");
    if let Some(c) = cert {
        println!(
            "recourse bound tau {:.6}, k* {} of n {} (epsilon {}, alpha {})",
            c.tau, c.k_star, c.n, c.epsilon, c.alpha
        );
    }
}

fn read_ids(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path)
        .map_err(Error::from)
        .with_context(|| format!("reading {}", path.display()))?;
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .enumerate()
        .map(|(i, t)| {
            t.parse::<usize>().map_err(|e| {
                Error::Parse {
                    row: i,
                    column: "id".into(),
                    message: format!("{t:?}: {e}"),
                }
                .into()
            })
        })
        .collect()
}

pub fn recourse(a: RecourseArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let (bundle, aset) = restore(&ck)?;
    let split: Split = a.split.into();
    let view = bundle.view(split);
    let ids = match &a.ids_file {
        Some(p) => read_ids(p)?,
        None if a.ids.is_empty() => (0..view.len()).collect(),
        None => a.ids.clone(),
    };
    if let Some(&bad) = ids.iter().find(|&&i| i >= view.len()) {
        bail!(Error::Bounds(format!(
            "id {bad} is outside the {split:?} split of {} rows",
            view.len()
        )));
    }
    let opts = search_options(&a.search);
    // Same per-instance seeds as a whole-split run, so rows match regardless of which ids are asked for.
    let results: Vec<_> = ids
        .par_iter()
        .map(|&id| {
            compute_recourse(
                a.algorithm,
                &ck.params,
                &aset,
                view.x[id],
                &opts,
                instance_seed(a.seed, id),
            )
        })
        .collect::<recourse_core::Result<_>>()?;

    let mut header = vec![
        "id".to_string(),
        "row".into(),
        "algorithm".into(),
        "valid".into(),
        "post_score".into(),
    ];
    for c in &bundle.columns {
        header.push(c.name.clone());
        header.push(format!("{}_new", c.name));
        header.push(format!("{}_delta", c.name));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).map_err(Error::from)?;
    for (&id, r) in ids.iter().zip(&results) {
        let x = view.x[id];
        let raw = bundle.destandardize(x);
        let raw_new = bundle.destandardize(&apply_action(x, &r.delta));
        let mut rec = vec![
            id.to_string(),
            view.rows[id].to_string(),
            r.algorithm.tag().to_string(),
            r.valid.to_string(),
            r.post_score.to_string(),
        ];
        for (c, d) in r.delta.iter().enumerate() {
            rec.push(raw[c].to_string());
            rec.push(raw_new[c].to_string());
            rec.push(bundle.destandardize_delta(c, *d).to_string());
        }
        w.write_record(&rec).map_err(Error::from)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    match &a.out {
        Some(p) => fs::write(p, bytes)
            .map_err(Error::from)
            .with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().write_all(&bytes).map_err(Error::from)?,
    }
    Ok(())
}

#[derive(Serialize)]
struct NoiseChecks {
    noise: NoiseModel,
    /// Per algorithm: negatives whose recourse survives the noise.
    recourse_robustness: Vec<(RecourseAlgorithm, Fraction)>,
    /// Instances whose prediction survives the noise.
    model_brittleness: Fraction,
}

#[derive(Serialize)]
struct EvaluationRecord {
    split: Split,
    policy: Option<ThresholdPolicy>,
    calibration: Option<CalibrationResult>,
    metrics: MetricsReport,
    noise: NoiseChecks,
    disparity: Option<Vec<DisparityReport>>,
    probe: Option<ProbeReport>,
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let (bundle, aset) = restore(&ck)?;
    let split: Split = a.split.into();
    if bundle.count(split) == 0 {
        bail!(Error::Config(format!("the {split:?} split is empty")));
    }
    let algorithms = if a.algorithm.is_empty() {
        RecourseAlgorithm::ALL.to_vec()
    } else {
        a.algorithm.clone()
    };
    let opts = search_options(&a.search);
    let params = &ck.params;
    let metrics = evaluate_metrics(params, &aset, &bundle, split, &algorithms, &opts, a.seed)?;

    let noise = NoiseModel {
        scale: a.noise,
        scale_is_variance: a.noise_is_variance,
    };
    let mut robustness = Vec::new();
    for &alg in &algorithms {
        robustness.push((
            alg,
            recourse_robustness(params, &aset, &bundle, split, alg, &opts, noise, a.seed)?,
        ));
    }
    let brittleness = model_brittleness(params, &aset, &bundle, split, noise, a.seed)?;

    let disparity = match bundle.group_column() {
        Some(_) => Some(
            algorithms
                .iter()
                .map(|&alg| recourse_disparity(params, &aset, &bundle, split, alg, &opts, a.target_precision, a.seed))
                .collect::<recourse_core::Result<Vec<_>>>()?,
        ),
        None => None,
    };

    let probe = if a.probe {
        Some(probe_split(&ck, &aset, &bundle, split, &opts, a.seed)?)
    } else {
        None
    };

    let record = EvaluationRecord {
        split,
        policy: ck.policy,
        calibration: ck.calibration.clone(),
        metrics,
        noise: NoiseChecks {
            noise,
            recourse_robustness: robustness,
            model_brittleness: brittleness,
        },
        disparity,
        probe,
    };
    match &a.out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            write_json(p, &record)?;
        }
        None => println!("{}", serde_json::to_string_pretty(&record).map_err(Error::from)?),
    }
    Ok(())
}

/// Gradient-descent recourse points of the split's negatives against the split's inputs.
fn probe_split(
    ck: &Checkpoint,
    aset: &ActionSet,
    bundle: &DatasetBundle,
    split: Split,
    opts: &RecourseOptions,
    seed: u64,
) -> Result<ProbeReport> {
    let view = bundle.view(split);
    let results = split_recourse(
        &ck.params,
        aset,
        bundle,
        split,
        RecourseAlgorithm::GradientDescent,
        opts,
        seed,
    )?;
    let moved: Vec<Vec<f64>> = view
        .x
        .iter()
        .zip(&results)
        .filter(|(x, r)| !ck.params.predict(x) && r.valid)
        .map(|(x, r)| apply_action(x, &r.delta))
        .collect();
    let originals: Vec<Vec<f64>> = view.x.iter().map(|x| x.to_vec()).collect();
    Ok(distribution_probe(&originals, &moved, seed)?)
}

fn default_values(axis: SweepAxis) -> Vec<f64> {
    match axis {
        SweepAxis::Lambda => (0..=10).map(|i| i as f64 * 0.2).collect(),
        SweepAxis::Threshold => (0..=10).map(|i| i as f64 * 0.1).collect(),
        SweepAxis::DeltaMax => (1..=6).map(|i| i as f64 * 0.25).collect(),
    }
}

#[derive(Serialize)]
struct SweepSettings<'a> {
    config: PathBuf,
    data: PathBuf,
    axis: SweepAxis,
    values: &'a [f64],
    seeds: &'a [u64],
    train: &'a TrainConfig,
    delta_max: Option<f64>,
    algorithms: &'a [RecourseAlgorithm],
    options: &'a RecourseOptions,
    split: Split,
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let axis = match a.axis {
        AxisArg::Lambda => SweepAxis::Lambda,
        AxisArg::Threshold => SweepAxis::Threshold,
        AxisArg::DeltaMax => SweepAxis::DeltaMax,
    };
    let spec = SweepSpec {
        axis,
        values: if a.values.is_empty() {
            default_values(axis)
        } else {
            a.values.clone()
        },
        seeds: a.seeds.clone(),
        train: train_config(&a.training),
        algorithms: if a.algorithm.is_empty() {
            RecourseAlgorithm::ALL.to_vec()
        } else {
            a.algorithm.clone()
        },
        options: search_options(&a.search),
        split: a.split.into(),
    };
    let DataArgs { config, data } = &a.data;
    let (config, data) = (canonical(config)?, canonical(data)?);
    let delta_max = a.training.delta_max;
    let table = eval::sweep(&spec, |seed| {
        let mut b = load_dataset(&config, &data, seed)?;
        if let Some(d) = delta_max {
            b.delta_max = d;
        }
        Ok(b)
    })?;

    create_dir(&a.out)?;
    fs::write(a.out.join("sweep_rows.csv"), table.rows_csv()?).map_err(Error::from)?;
    fs::write(a.out.join("sweep_summary.csv"), table.summary_csv()?).map_err(Error::from)?;
    write_json(&a.out.join("sweep.json"), &table)?;
    let settings = SweepSettings {
        config,
        data,
        axis,
        values: &spec.values,
        seeds: &spec.seeds,
        train: &spec.train,
        delta_max,
        algorithms: &spec.algorithms,
        options: &spec.options,
        split: spec.split,
    };
    write_manifest(
        &a.out,
        "sweep",
        settings,
        &["sweep_rows.csv", "sweep_summary.csv", "sweep.json"],
    )?;
    println!("{} rows written to {}", table.rows.len(), a.out.display());
    Ok(())
}
