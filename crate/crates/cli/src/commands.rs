use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stenosis_core::container::{read_json, write_atomic, write_json, Container};
use stenosis_core::dataset::{
    build_corpus, read_phantom_dataset, read_sequence_dataset, write_phantom_dataset,
    write_sequence_dataset,
};
use stenosis_core::evaluation::{
    aggregate_folds, compute_metrics, table_row, ConfusionCounts, MetricsReport, ToleranceRule,
    TABLE_HEADER,
};
use stenosis_core::phantom::{generate_dataset, MprImage};
use stenosis_core::sampling::build_sequences;
use stenosis_core::training::{
    predict_centerline, read_cross_validation_manifest, run_cross_validation, score_predictions,
    write_cross_validation, CrossValidationManifest, CV_MANIFEST_FILE,
};
use stenosis_core::{CheckpointF32, MprImageF32};

use crate::config::RunConfig;
use crate::render::{render_curves, render_prediction};
use crate::{CliError, Command, Common, SamplingFlags, TrainFlags};

pub const METHOD_NAME: &str = "cnn-transformer";
const METRICS_JSON: &str = "metrics.json";
const METRICS_CSV: &str = "metrics.csv";

pub fn run(common: Common, command: Command) -> Result<(), CliError> {
    let mut config = RunConfig::load(common.config.as_deref())?;
    if let Some(jobs) = common.jobs {
        config.training.jobs = jobs;
    }
    let out = common.out.as_deref();
    match command {
        Command::Phantom { count } => {
            if let Some(c) = count {
                config.phantom.recipe.count = c;
            }
            config.finalize(common.seed)?;
            phantom(&config, out)
        }
        Command::Build { dataset, sampling } => {
            apply_sampling_flags(&mut config, &sampling);
            config.finalize(common.seed)?;
            build(&config, &dataset, out)
        }
        Command::Train { sequences, flags } => {
            apply_train_flags(&mut config, &flags);
            config.finalize(common.seed)?;
            train(config, &sequences, out)
        }
        Command::Evaluate {
            run,
            sequences,
            tolerance,
        } => evaluate(&run, sequences.as_deref(), tolerance, out),
        Command::Predict {
            checkpoint,
            image,
            stride,
            tolerance,
            plot,
        } => {
            if let Some(s) = stride {
                config.sampling.stride = s;
            }
            config.finalize(common.seed)?;
            predict(&config, &checkpoint, &image, tolerance, plot, out)
        }
        Command::Report { run, plot } => report(&run, plot, out),
    }
}

fn apply_sampling_flags(config: &mut RunConfig, f: &SamplingFlags) {
    let s = &mut config.sampling;
    if let Some(v) = f.stride {
        s.stride = v;
    }
    if let Some(v) = f.cube_side {
        s.cube_side = v;
    }
    if let Some(v) = f.max_seq_len {
        s.max_seq_len = v;
    }
    if let Some(v) = f.jitter {
        s.jitter_max = v;
    }
    if f.rotate {
        s.rotate = true;
    }
    if f.no_rotate {
        s.rotate = false;
    }
    if f.balance {
        s.balance_trim = true;
    }
    if f.no_balance {
        s.balance_trim = false;
    }
}

fn apply_train_flags(config: &mut RunConfig, f: &TrainFlags) {
    let t = &mut config.training;
    if let Some(v) = f.epochs {
        t.epochs = v;
    }
    if let Some(v) = f.folds {
        t.folds = v;
    }
    if let Some(v) = f.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = f.batch_size {
        t.batch_size = v;
    }
    if f.online_augmentation {
        t.online_augmentation = true;
    }
    if let Some(v) = f.encoders {
        config.model.num_encoders = v;
    }
}

fn absolute(path: &Path) -> String {
    std::path::absolute(path)
        .unwrap_or_else(|_| path.to_path_buf())
        .display()
        .to_string()
}

/// Directory of a run given the directory or a file inside it.
fn run_dir(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    }
}

fn phantom(config: &RunConfig, out: Option<&Path>) -> Result<(), CliError> {
    let dir = config.output_dir(out)?;
    let images = generate_dataset::<f32>(&config.phantom_configs()?)?;
    let root_seed = config.seed.unwrap_or(config.phantom.recipe.seed);
    let manifest = write_phantom_dataset(&dir, &images, root_seed)?;
    config.write_effective(&dir)?;
    println!(
        "wrote {} phantom images to {} (positive voxel fraction {:.4})",
        manifest.images.len(),
        dir.display(),
        manifest.positive_fraction()
    );
    Ok(())
}

fn build(config: &RunConfig, dataset: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let dir = config.output_dir(out)?;
    let (_, images) = read_phantom_dataset::<f32>(dataset)?;
    let corpus = build_corpus(&images, &config.sampling)?;
    let manifest = write_sequence_dataset(&dir, &corpus, &config.sampling, &absolute(dataset))?;
    config.write_effective(&dir)?;
    let eval: usize = manifest.entries.iter().map(|e| e.eval_sequences).sum();
    println!(
        "{} training sequences with {} positive centers from {} centerlines; {} evaluation sequences",
        manifest.train_sequences(),
        manifest.train_positive_centers(),
        manifest.entries.len(),
        eval
    );
    Ok(())
}

fn train(mut config: RunConfig, sequences: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let dir = config.output_dir(out)?;
    let (manifest, corpus) = read_sequence_dataset::<f32>(sequences)?;
    config.model.cube_side = manifest.sampling.cube_side;
    config.model.max_seq_len = manifest.sampling.max_seq_len;
    config
        .model
        .validate()
        .map_err(|e| CliError::Config(format!("model: {e}")))?;

    let images: Option<HashMap<String, MprImageF32>> = if config.training.online_augmentation {
        let (_, imgs) = read_phantom_dataset::<f32>(Path::new(&manifest.source_dataset))?;
        Some(imgs.into_iter().map(|i| (i.id.clone(), i)).collect())
    } else {
        None
    };
    let cv = run_cross_validation(
        &corpus,
        images.as_ref(),
        Some(&manifest.sampling),
        &config.model,
        &config.training,
    )?;
    write_cross_validation(&dir, &cv, &config.model, &config.training, &absolute(sequences))?;
    config.write_effective(&dir)?;

    for fold in &cv.folds {
        match &fold.training {
            Ok(t) => println!(
                "fold {}: best epoch {} ({:?} {:.4})",
                fold.split.fold, t.best_epoch, config.training.selection_metric, t.best_selection
            ),
            Err(e) => println!("fold {}: failed: {e}", fold.split.fold),
        }
    }
    if let Ok(agg) = aggregate_folds(&cv.fold_counts()) {
        println!("{TABLE_HEADER}");
        println!("{}", table_row(METHOD_NAME, &agg.pooled));
    }
    match cv.failures() {
        0 => Ok(()),
        n => Err(CliError::Runtime(format!(
            "{n} of {} folds failed; see {}",
            cv.folds.len(),
            dir.join(CV_MANIFEST_FILE).display()
        ))),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub status: String,
    pub counts: Option<ConfusionCounts>,
    pub report: Option<MetricsReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub tolerance: usize,
    pub pooled: Option<MetricsReport>,
    pub folds: Vec<FoldMetrics>,
}

fn evaluation_csv(report: &EvaluationReport) -> String {
    let mut csv = format!("{TABLE_HEADER}\n");
    if let Some(p) = &report.pooled {
        let _ = writeln!(csv, "{}", table_row(METHOD_NAME, p));
    }
    for f in &report.folds {
        if let Some(r) = &f.report {
            let _ = writeln!(csv, "{}", table_row(&format!("{METHOD_NAME} fold {}", f.fold), r));
        }
    }
    csv
}

fn evaluate(
    run: &Path,
    sequences: Option<&Path>,
    tolerance: Option<usize>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let manifest = read_cross_validation_manifest(run)?;
    let dir = run_dir(run);
    let seq_path = sequences.map_or_else(|| PathBuf::from(&manifest.sequence_dataset), Path::to_path_buf);
    let (_, corpus) = read_sequence_dataset::<f32>(&seq_path)?;
    let by_id: HashMap<&str, _> = corpus.iter().map(|c| (c.id.as_str(), c)).collect();
    let rule = ToleranceRule {
        tolerance: tolerance.unwrap_or(manifest.training.tolerance),
        ..ToleranceRule::default()
    };

    let mut folds = Vec::with_capacity(manifest.folds.len());
    for record in &manifest.folds {
        let Some(file) = &record.checkpoint else {
            folds.push(FoldMetrics {
                fold: record.fold,
                status: record.status.clone(),
                counts: None,
                report: None,
            });
            continue;
        };
        let ckpt = CheckpointF32::load(&dir.join(file))?;
        let mut counts = ConfusionCounts::default();
        for id in &record.test {
            let cl = by_id.get(id.as_str()).ok_or_else(|| {
                CliError::Runtime(format!("centerline {id} is missing from {}", seq_path.display()))
            })?;
            let predictions = predict_centerline(&cl.eval, &ckpt.params, &ckpt.config)?;
            counts += score_predictions(&predictions, &cl.truth, rule)?;
        }
        folds.push(FoldMetrics {
            fold: record.fold,
            status: record.status.clone(),
            counts: Some(counts),
            report: compute_metrics(counts).ok(),
        });
    }
    let counts: Vec<ConfusionCounts> = folds.iter().filter_map(|f| f.counts).collect();
    let report = EvaluationReport {
        tolerance: rule.tolerance,
        pooled: aggregate_folds(&counts).ok().map(|a| a.pooled),
        folds,
    };

    let out_dir = out.map_or_else(|| dir.clone(), Path::to_path_buf);
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    write_json(&out_dir.join(METRICS_JSON), &report)?;
    let csv = evaluation_csv(&report);
    write_atomic(&out_dir.join(METRICS_CSV), csv.as_bytes())?;
    print!("{csv}");
    if report.pooled.is_none() {
        return Err(CliError::Runtime("no fold produced test predictions".into()));
    }
    Ok(())
}

fn predict(
    config: &RunConfig,
    checkpoint: &Path,
    image_path: &Path,
    tolerance: Option<usize>,
    plot: bool,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let dir = config.output_dir(out)?;
    let ckpt = CheckpointF32::load(checkpoint)?;
    let image: MprImageF32 = MprImage::from_container(&Container::load(image_path)?)?;
    let mut sampling = config.sampling.evaluation_view();
    sampling.cube_side = ckpt.config.cube_side;
    sampling.max_seq_len = ckpt.config.max_seq_len;
    sampling
        .validate()
        .map_err(|e| CliError::Config(format!("checkpoint and sampling are incompatible: {e}")))?;
    let sequences = build_sequences(&image, &sampling)?;
    let predictions = predict_centerline(&sequences, &ckpt.params, &ckpt.config)?;

    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    let mut csv = String::from("center,p_non_significant,p_significant,predicted,annotated\n");
    let (mut centers, mut labels) = (Vec::new(), Vec::new());
    for p in &predictions {
        for ((row, &c), label) in p.probabilities.iter().zip(&p.center_indices).zip(p.predicted_labels()) {
            let _ = writeln!(
                csv,
                "{c},{:.6},{:.6},{},{}",
                row[0],
                row[1],
                u8::from(label),
                u8::from(image.labels[c])
            );
            centers.push(c);
            labels.push(label);
        }
    }
    write_atomic(&dir.join("predictions.csv"), csv.as_bytes())?;
    if plot {
        render_prediction(&image, &centers, &labels, &dir.join("predictions.png"))?;
    }

    let rule = ToleranceRule {
        tolerance: tolerance.unwrap_or(config.training.tolerance),
        ..ToleranceRule::default()
    };
    let counts = score_predictions(&predictions, &image.labels, rule)?;
    println!(
        "{}: {} centers, {} predicted significant, {} annotated significant",
        image.id,
        centers.len(),
        labels.iter().filter(|&&l| l).count(),
        centers.iter().filter(|&&c| image.labels[c]).count()
    );
    if let Ok(r) = compute_metrics(counts) {
        println!("{TABLE_HEADER}");
        println!("{}", table_row(&image.id, &r));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CurvePoint {
    epoch: usize,
    train_loss: f64,
    selection: f64,
}

fn read_log(path: &Path) -> Result<Vec<CurvePoint>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    let bad = |line: &str| CliError::Runtime(format!("{}: malformed row `{line}`", path.display()));
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|line| {
            let cols: Vec<&str> = line.split(',').collect();
            let num = |i: usize| cols.get(i).and_then(|v| v.parse::<f64>().ok()).ok_or_else(|| bad(line));
            Ok(CurvePoint {
                epoch: num(0)? as usize,
                train_loss: num(1)?,
                selection: num(5)?,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct RunReport<'a> {
    manifest: &'a CrossValidationManifest,
    metrics: &'a EvaluationReport,
    curves: Vec<Vec<CurvePoint>>,
}

fn metric_cells(r: &MetricsReport) -> String {
    r.columns()
        .iter()
        .map(|v| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}")))
        .collect::<Vec<_>>()
        .join(" | ")
}

fn report(run: &Path, plot: bool, out: Option<&Path>) -> Result<(), CliError> {
    let manifest = read_cross_validation_manifest(run)?;
    let dir = run_dir(run);
    let metrics_path = dir.join(METRICS_JSON);
    // Falls back to the counts recorded at training time.
    let metrics: EvaluationReport = if metrics_path.exists() {
        read_json(&metrics_path)?
    } else {
        let folds: Vec<FoldMetrics> = manifest
            .folds
            .iter()
            .map(|f| FoldMetrics {
                fold: f.fold,
                status: f.status.clone(),
                counts: f.test_counts,
                report: f.test_counts.and_then(|c| compute_metrics(c).ok()),
            })
            .collect();
        let counts: Vec<ConfusionCounts> = folds.iter().filter_map(|f| f.counts).collect();
        EvaluationReport {
            tolerance: manifest.training.tolerance,
            pooled: aggregate_folds(&counts).ok().map(|a| a.pooled),
            folds,
        }
    };
    let curves: Vec<Vec<CurvePoint>> = manifest
        .folds
        .iter()
        .map(|f| f.log.as_ref().map_or(Ok(Vec::new()), |l| read_log(&dir.join(l))))
        .collect::<Result<_, _>>()?;

    let t = &manifest.training;
    let mut md = String::from("# Cross-validation report\n\n");
    let _ = writeln!(
        md,
        "- sequence dataset: `{}`\n- root seed: {}\n- folds: {} (validation fraction {})\n- epochs: {}, batch size {}, learning rate {}, optimizer {:?}\n- encoders: {}, heads: {}, cube side: {}, max sequence length: {}\n- matching tolerance: {} voxels\n",
        manifest.sequence_dataset,
        manifest.seed,
        t.folds,
        t.val_fraction,
        t.epochs,
        t.batch_size,
        t.learning_rate,
        t.optimizer,
        manifest.model.num_encoders,
        manifest.model.num_heads,
        manifest.model.cube_side,
        manifest.model.max_seq_len,
        metrics.tolerance
    );
    md.push_str("## Test metrics\n\n| Method | ACC | Sens | Spec | PPV | NPV | F1 | MCC |\n|---|---|---|---|---|---|---|---|\n");
    if let Some(p) = &metrics.pooled {
        let _ = writeln!(md, "| {METHOD_NAME} (pooled) | {} |", metric_cells(p));
    }
    for f in &metrics.folds {
        match &f.report {
            Some(r) => {
                let _ = writeln!(md, "| fold {} | {} |", f.fold, metric_cells(r));
            }
            None => {
                let _ = writeln!(md, "| fold {} ({}) | NA | NA | NA | NA | NA | NA | NA |", f.fold, f.status);
            }
        }
    }
    md.push_str("\n## Training\n\n| Fold | Status | Best epoch | Best selection | First loss | Last loss |\n|---|---|---|---|---|---|\n");
    for (f, curve) in manifest.folds.iter().zip(&curves) {
        let loss = |p: Option<&CurvePoint>| p.map_or_else(|| "NA".to_string(), |p| format!("{:.4}", p.train_loss));
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} |",
            f.fold,
            f.status,
            f.best_epoch.map_or_else(|| "NA".to_string(), |e| e.to_string()),
            f.best_selection.map_or_else(|| "NA".to_string(), |s| format!("{s:.4}")),
            loss(curve.first()),
            loss(curve.last())
        );
        if let Some(e) = &f.error {
            let _ = writeln!(md, "\nFold {} failed: {e}\n", f.fold);
        }
    }

    let out_dir = out.map_or_else(|| dir.clone(), Path::to_path_buf);
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    if plot {
        let losses: Vec<Vec<f64>> = curves.iter().map(|c| c.iter().map(|p| p.train_loss).collect()).collect();
        render_curves(&losses, &out_dir.join("curves.png"))?;
        md.push_str("\n![training loss per fold](curves.png)\n");
    }
    write_atomic(&out_dir.join("report.md"), md.as_bytes())?;
    write_json(
        &out_dir.join("report.json"),
        &RunReport {
            manifest: &manifest,
            metrics: &metrics,
            curves,
        },
    )?;
    println!("report written to {}", out_dir.join("report.md").display());
    Ok(())
}
