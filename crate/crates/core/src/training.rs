//! Centerline-level cross-validation, mini-batch training and
//! best-on-validation checkpoint selection.
//!
//! Every split, shuffle and initialization derives from `TrainConfig::seed`,
//! and batch gradients are reduced in sequence order, so a run is
//! reproducible regardless of the thread count.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{write_atomic, write_json};
use crate::dataset::CenterlineSequences;
use crate::error::{Error, Result};
use crate::evaluation::{
    compute_metrics, tolerant_confusion, ConfusionCounts, MetricsReport, ToleranceRule,
};
use crate::model::{model_forward, model_gradients, Checkpoint, ModelConfig, ModelParams, PredictionSequence, LOG_FLOOR};
use crate::phantom::MprImage;
use crate::sampling::{build_sequences, stream_seed, SamplingConfig, VolumeSequence};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    SgdMomentum,
    /// Adaptive moment estimation.
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    /// `total / (2 * count)` per class on the training split.
    #[default]
    InverseFrequency,
    Fixed([f64; 2]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    #[default]
    Mcc,
    F1,
    Acc,
}

impl SelectionMetric {
    /// Undefined metrics count as 0.
    pub fn value(self, report: &MetricsReport) -> f64 {
        match self {
            SelectionMetric::Mcc => report.mcc_or_zero(),
            SelectionMetric::F1 => report.f1.unwrap_or(0.0),
            SelectionMetric::Acc => report.acc.unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub folds: usize,
    pub val_fraction: f64,
    /// Sequences per gradient step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub momentum: f64,
    pub class_weights: ClassWeighting,
    pub selection_metric: SelectionMetric,
    /// Tolerance of the validation and test matching rule, in voxels.
    pub tolerance: usize,
    pub seed: u64,
    /// Rescale each batch gradient to at most this global norm.
    pub clip_norm: Option<f64>,
    /// Redraw augmentation every epoch instead of using the stored view.
    pub online_augmentation: bool,
    /// Standardize cube intensities with training-split statistics.
    pub normalize_inputs: bool,
    /// Worker threads for folds and batch gradients.
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            folds: 10,
            val_fraction: 0.1,
            batch_size: 8,
            learning_rate: 1e-4,
            optimizer: Optimizer::Adam,
            momentum: 0.9,
            class_weights: ClassWeighting::InverseFrequency,
            selection_metric: SelectionMetric::Mcc,
            tolerance: crate::evaluation::DEFAULT_TOLERANCE,
            seed: 0,
            clip_norm: None,
            online_augmentation: false,
            normalize_inputs: true,
            jobs: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::config(format!("folds must be at least 2, got {}", self.folds)));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config(format!(
                "val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if let ClassWeighting::Fixed(w) = self.class_weights {
            if w.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                return Err(Error::config(format!("class_weights must be positive, got {w:?}")));
            }
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config(format!("clip_norm must be positive, got {c}")));
            }
        }
        if self.jobs == 0 {
            return Err(Error::config("jobs must be at least 1"));
        }
        Ok(())
    }

    pub fn tolerance_rule(&self) -> ToleranceRule {
        ToleranceRule {
            tolerance: self.tolerance,
            ..ToleranceRule::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    pub folds: Vec<FoldSplit>,
}

impl FoldPlan {
    /// Checks that test sets partition `ids` and splits never share an id.
    pub fn check(&self, ids: &[String]) -> Result<()> {
        let all: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
        let mut tested = BTreeSet::new();
        for f in &self.folds {
            for id in &f.test {
                if !tested.insert(id.as_str()) {
                    return Err(Error::Domain(format!("{id} is tested in two folds")));
                }
            }
            let mut seen = BTreeSet::new();
            for id in f.train.iter().chain(&f.validation).chain(&f.test) {
                if !seen.insert(id.as_str()) {
                    return Err(Error::Domain(format!("{id} appears twice in fold {}", f.fold)));
                }
                if !all.contains(id.as_str()) {
                    return Err(Error::Domain(format!("{id} is not a known centerline")));
                }
            }
            if seen.len() != all.len() {
                return Err(Error::Domain(format!("fold {} does not cover every centerline", f.fold)));
            }
        }
        if tested != all {
            return Err(Error::Domain("test folds do not cover every centerline".to_string()));
        }
        Ok(())
    }
}

/// Assigns whole centerlines to test folds of near-equal size and draws the
/// validation set from each fold's remaining pool.
pub fn split_folds(ids: &[String], folds: usize, val_fraction: f64, seed: u64) -> Result<FoldPlan> {
    if folds < 2 {
        return Err(Error::config(format!("folds must be at least 2, got {folds}")));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::config(format!("val_fraction must lie in (0, 1), got {val_fraction}")));
    }
    let mut sorted: Vec<String> = ids.to_vec();
    sorted.sort();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::config("centerline ids must be unique"));
    }
    // Each fold keeps at least one training and one validation centerline.
    let needed = folds.max(3);
    if sorted.len() < needed {
        return Err(Error::config(format!(
            "{} centerlines cannot be split into {folds} folds",
            sorted.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);

    let n = sorted.len();
    let (base, extra) = (n / folds, n % folds);
    let mut bounds = Vec::with_capacity(folds + 1);
    bounds.push(0);
    for k in 0..folds {
        bounds.push(bounds[k] + base + usize::from(k < extra));
    }

    let splits = (0..folds)
        .map(|k| {
            let test = sorted[bounds[k]..bounds[k + 1]].to_vec();
            let pool: Vec<String> = sorted[..bounds[k]]
                .iter()
                .chain(&sorted[bounds[k + 1]..])
                .cloned()
                .collect();
            let n_val = ((pool.len() as f64 * val_fraction).round() as usize).clamp(1, pool.len() - 1);
            FoldSplit {
                fold: k,
                validation: pool[..n_val].to_vec(),
                train: pool[n_val..].to_vec(),
                test,
            }
        })
        .collect();
    Ok(FoldPlan { seed, folds: splits })
}

/// Mean over valid positions of `w_y * -ln(max(p_y, 1e-12))`; zero when no
/// position is valid.
pub fn loss(
    probabilities: &ArrayView2<f64>,
    labels: &[bool],
    mask: Option<&[bool]>,
    class_weights: [f64; 2],
) -> Result<f64> {
    if probabilities.nrows() != labels.len() || mask.is_some_and(|m| m.len() != labels.len()) {
        return Err(Error::shape(format!(
            "{} probability rows for {} labels",
            probabilities.nrows(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let class = label as usize;
        total += class_weights[class] * -probabilities[[i, class]].max(LOG_FLOOR).ln();
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Inverse class frequency; unit weights unless both classes occur.
pub fn inverse_frequency_weights(labels: impl IntoIterator<Item = bool>) -> [f64; 2] {
    let mut counts = [0usize; 2];
    for l in labels {
        counts[l as usize] += 1;
    }
    if counts.contains(&0) {
        return [1.0, 1.0];
    }
    let total = (counts[0] + counts[1]) as f64;
    counts.map(|c| total / (2.0 * c as f64))
}

/// Optimizer state for one parameter set.
pub struct OptimizerState<T> {
    kind: Optimizer,
    momentum: T,
    first: ModelParams<T>,
    second: Option<ModelParams<T>>,
    steps: i32,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl<T: Scalar> OptimizerState<T> {
    pub fn new(kind: Optimizer, momentum: f64, params: &ModelParams<T>) -> Self {
        OptimizerState {
            kind,
            momentum: T::lit(momentum),
            first: params.zeros_like(),
            second: (kind == Optimizer::Adam).then(|| params.zeros_like()),
            steps: 0,
        }
    }

    /// One descent step. A zero learning rate leaves `params` bit-identical.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>, lr: f64) {
        self.steps += 1;
        let lr = T::lit(lr);
        let tensors = params
            .named_tensors_mut()
            .into_iter()
            .zip(grads.named_tensors())
            .zip(self.first.named_tensors_mut());
        match self.kind {
            Optimizer::SgdMomentum => {
                let mu = self.momentum;
                for (((_, mut p), (_, g)), (_, mut v)) in tensors {
                    ndarray::Zip::from(&mut p).and(&g).and(&mut v).for_each(|p, &g, v| {
                        *v = mu * *v + g;
                        *p -= lr * *v;
                    });
                }
            }
            Optimizer::Adam => {
                let (b1, b2) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2));
                let c1 = T::one() - b1.powi(self.steps);
                let c2 = T::one() - b2.powi(self.steps);
                let eps = T::lit(ADAM_EPS);
                let second = self.second.as_mut().expect("adam keeps second moments");
                for ((((_, mut p), (_, g)), (_, mut m)), (_, mut v)) in
                    tensors.zip(second.named_tensors_mut())
                {
                    ndarray::Zip::from(&mut p)
                        .and(&g)
                        .and(&mut m)
                        .and(&mut v)
                        .for_each(|p, &g, m, v| {
                            *m = b1 * *m + (T::one() - b1) * g;
                            *v = b2 * *v + (T::one() - b2) * g * g;
                            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                        });
                }
            }
        }
    }
}

/// Loss and gradients of a batch, computed per sequence (possibly in
/// parallel) and reduced in batch order.
fn batch_gradients<T: Scalar>(
    batch: &[&VolumeSequence<T>],
    params: &ModelParams<T>,
    config: &ModelConfig,
    class_weights: [f64; 2],
) -> Result<(f64, ModelParams<T>)> {
    let parts: Vec<_> = batch
        .par_iter()
        .map(|seq| model_gradients(std::slice::from_ref(*seq), params, config, class_weights))
        .collect::<Result<_>>()?;
    let positions: usize = parts.iter().map(|g| g.positions).sum();
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    for part in &parts {
        let share = part.positions as f64 / positions as f64;
        grads.add_scaled(&part.grads, T::lit(share));
        loss += part.loss.as_f64() * share;
    }
    Ok((loss, grads))
}

/// Arg-max labels for every center of a centerline, in center order.
pub fn predict_centerline<T: Scalar>(
    sequences: &[VolumeSequence<T>],
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<Vec<PredictionSequence>> {
    sequences
        .iter()
        .map(|s| model_forward(s, params, config))
        .collect()
}

/// Tolerant confusion counts of predictions against an annotation track.
pub fn score_predictions(
    predictions: &[PredictionSequence],
    truth: &[bool],
    rule: ToleranceRule,
) -> Result<ConfusionCounts> {
    let mut counts = ConfusionCounts::default();
    for p in predictions {
        counts += tolerant_confusion(&p.predicted_labels(), &p.center_indices, truth, rule)?;
    }
    Ok(counts)
}

/// Tolerant counts and the unweighted mean NLL over every center.
fn evaluate_centerlines<T: Scalar>(
    centerlines: &[&CenterlineSequences<T>],
    params: &ModelParams<T>,
    config: &ModelConfig,
    rule: ToleranceRule,
) -> Result<(ConfusionCounts, f64)> {
    let scored: Vec<(ConfusionCounts, f64, usize)> = centerlines
        .par_iter()
        .map(|cl| {
            let predictions = predict_centerline(&cl.eval, params, config)?;
            let (mut nll, mut n) = (0.0, 0usize);
            for (p, s) in predictions.iter().zip(&cl.eval) {
                for (row, &label) in p.probabilities.iter().zip(&s.labels) {
                    nll -= row[usize::from(label)].max(LOG_FLOOR).ln();
                    n += 1;
                }
            }
            Ok((score_predictions(&predictions, &cl.truth, rule)?, nll, n))
        })
        .collect::<Result<_>>()?;
    let (mut counts, mut nll, mut n) = (ConfusionCounts::default(), 0.0, 0usize);
    for (c, l, k) in scored {
        counts += c;
        nll += l;
        n += k;
    }
    Ok((counts, if n == 0 { 0.0 } else { nll / n as f64 }))
}

/// Mean and standard deviation of every voxel of every cube.
pub fn intensity_statistics<'a, T: Scalar>(
    sequences: impl IntoIterator<Item = &'a VolumeSequence<T>>,
) -> (f64, f64) {
    let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
    for seq in sequences {
        for cube in &seq.cubes {
            for &v in cube {
                let v = v.as_f64();
                sum += v;
                sq += v * v;
                n += 1;
            }
        }
    }
    if n == 0 {
        return (0.0, 1.0);
    }
    let mean = sum / n as f64;
    let std = (sq / n as f64 - mean * mean).max(0.0).sqrt();
    (mean, if std > 0.0 { std } else { 1.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: Option<f64>,
    pub val_f1: Option<f64>,
    pub val_mcc: Option<f64>,
    /// Value of the selection metric (undefined counts as 0).
    pub selection: f64,
    /// Unweighted mean NLL on validation centers; breaks selection ties.
    pub val_loss: f64,
    pub val_counts: ConfusionCounts,
}

pub const LOG_HEADER: &str = "epoch,train_loss,val_acc,val_f1,val_mcc,selection,val_loss,tp,fp,tn,fn";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

pub fn log_to_csv(log: &[EpochRecord]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in log {
        let c = r.val_counts;
        let _ = writeln!(
            out,
            "{},{:.6},{},{},{},{:.6},{:.6},{},{},{},{}",
            r.epoch,
            r.train_loss,
            opt(r.val_acc),
            opt(r.val_f1),
            opt(r.val_mcc),
            r.selection,
            r.val_loss,
            c.tp,
            c.fp,
            c.tn,
            c.fn_
        );
    }
    out
}

/// Result of training one fold.
#[derive(Debug, Clone)]
pub struct FoldTraining<T> {
    pub checkpoint: Checkpoint<T>,
    /// 1-based epoch of the selected checkpoint.
    pub best_epoch: usize,
    pub best_selection: f64,
    pub log: Vec<EpochRecord>,
}

/// Everything `train_fold` needs besides the configs.
pub struct FoldInputs<'a, T> {
    pub train: Vec<&'a CenterlineSequences<T>>,
    pub validation: Vec<&'a CenterlineSequences<T>>,
    /// Source images for online augmentation, keyed by id.
    pub images: Option<&'a HashMap<String, MprImage<T>>>,
    pub sampling: Option<&'a SamplingConfig>,
    pub seed: u64,
}

fn epoch_sequences<'a, T: Scalar>(
    inputs: &FoldInputs<'a, T>,
    online: bool,
    epoch: usize,
    storage: &'a mut Vec<VolumeSequence<T>>,
) -> Result<Vec<&'a VolumeSequence<T>>> {
    if !online {
        return Ok(inputs.train.iter().flat_map(|cl| cl.train.iter()).collect());
    }
    let (images, sampling) = inputs
        .images
        .zip(inputs.sampling)
        .ok_or_else(|| Error::config("online augmentation needs the source images"))?;
    let mut config = sampling.clone();
    config.seed = stream_seed(sampling.seed, &format!("epoch{epoch}"));
    storage.clear();
    for cl in &inputs.train {
        let image = images
            .get(&cl.id)
            .ok_or_else(|| Error::config(format!("no source image for {}", cl.id)))?;
        storage.extend(build_sequences(image, &config)?);
    }
    Ok(storage.iter().collect())
}

/// Trains one fold for `train_config.epochs` epochs and returns the
/// checkpoint with the best validation metric. Ties go to the lower
/// validation loss, then to the earlier epoch.
pub fn train_fold<T: Scalar>(
    inputs: &FoldInputs<'_, T>,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<FoldTraining<T>> {
    train_config.validate()?;
    if inputs.train.is_empty() || inputs.validation.is_empty() {
        return Err(Error::config("a fold needs training and validation centerlines"));
    }
    let mut config = model_config.clone();
    if train_config.normalize_inputs {
        let (mean, std) = intensity_statistics(inputs.train.iter().flat_map(|cl| cl.train.iter()));
        config.input_mean = mean;
        config.input_std = std;
    }
    config.validate()?;
    let class_weights = match train_config.class_weights {
        ClassWeighting::Fixed(w) => w,
        ClassWeighting::InverseFrequency => inverse_frequency_weights(
            inputs
                .train
                .iter()
                .flat_map(|cl| cl.train.iter().flat_map(|s| s.labels.iter().copied())),
        ),
    };

    let mut params = ModelParams::<T>::init(&config, inputs.seed)?;
    let mut optimizer = OptimizerState::new(train_config.optimizer, train_config.momentum, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(inputs.seed ^ 0x5eed_5eed);
    let rule = train_config.tolerance_rule();
    let mut log = Vec::with_capacity(train_config.epochs);
    let mut best: Option<(usize, f64, f64, ModelParams<T>)> = None;
    let mut storage = Vec::new();

    for epoch in 1..=train_config.epochs {
        let mut order = epoch_sequences(inputs, train_config.online_augmentation, epoch, &mut storage)?;
        order.shuffle(&mut rng);
        let (mut loss_sum, mut positions) = (0.0, 0usize);
        for (b, batch) in order.chunks(train_config.batch_size).enumerate() {
            let (loss, mut grads) = batch_gradients(batch, &params, &config, class_weights)
                .map_err(|e| Error::NonFinite(format!("epoch {epoch}, batch {b}: {e}")))?;
            if let Some(clip) = train_config.clip_norm {
                let norm = grads.global_norm().as_f64();
                if norm > clip {
                    grads.scale(T::lit(clip / norm));
                }
            }
            optimizer.step(&mut params, &grads, train_config.learning_rate);
            let n: usize = batch.iter().map(|s| s.len()).sum();
            loss_sum += loss * n as f64;
            positions += n;
        }
        if !params.all_finite() {
            return Err(Error::NonFinite(format!("parameters diverged in epoch {epoch}")));
        }
        let (counts, val_loss) = evaluate_centerlines(&inputs.validation, &params, &config, rule)?;
        let report = compute_metrics(counts)?;
        let selection = train_config.selection_metric.value(&report);
        let train_loss = if positions == 0 { 0.0 } else { loss_sum / positions as f64 };
        log::info!(
            "epoch {epoch}/{}: loss {train_loss:.5}, validation {:?} {selection:.4}",
            train_config.epochs,
            train_config.selection_metric
        );
        log.push(EpochRecord {
            epoch,
            train_loss,
            val_acc: report.acc,
            val_f1: report.f1,
            val_mcc: report.mcc,
            selection,
            val_loss,
            val_counts: counts,
        });
        let improves = best
            .as_ref()
            .is_none_or(|b| selection > b.1 || (selection == b.1 && val_loss < b.2));
        if improves {
            best = Some((epoch, selection, val_loss, params.clone()));
        }
    }

    let (best_epoch, best_selection, _, best_params) = best.expect("at least one epoch ran");
    Ok(FoldTraining {
        checkpoint: Checkpoint {
            config,
            params: best_params,
            seed: inputs.seed,
        },
        best_epoch,
        best_selection,
        log,
    })
}

/// Outcome of one fold of a cross-validation run.
#[derive(Debug, Clone)]
pub struct FoldOutcome<T> {
    pub split: FoldSplit,
    /// `Err` carries the failure diagnostic.
    pub training: std::result::Result<FoldTraining<T>, String>,
    pub test_predictions: Vec<PredictionSequence>,
    pub test_counts: Option<ConfusionCounts>,
}

impl<T> FoldOutcome<T> {
    pub fn failed(&self) -> bool {
        self.training.is_err()
    }
}

pub struct CrossValidation<T> {
    pub plan: FoldPlan,
    pub folds: Vec<FoldOutcome<T>>,
}

impl<T> CrossValidation<T> {
    pub fn failures(&self) -> usize {
        self.folds.iter().filter(|f| f.failed()).count()
    }

    /// Raw counts of the folds that finished.
    pub fn fold_counts(&self) -> Vec<ConfusionCounts> {
        self.folds.iter().filter_map(|f| f.test_counts).collect()
    }

    pub fn pooled_predictions(&self) -> impl Iterator<Item = &PredictionSequence> {
        self.folds.iter().flat_map(|f| f.test_predictions.iter())
    }
}

/// Per-fold seed derived from the root seed.
pub fn fold_seed(root: u64, fold: usize) -> u64 {
    stream_seed(root, &format!("fold{fold}"))
}

/// Trains, selects and tests every fold; a failed fold is recorded and the
/// remaining folds still run.
pub fn run_cross_validation<T: Scalar>(
    corpus: &[CenterlineSequences<T>],
    images: Option<&HashMap<String, MprImage<T>>>,
    sampling: Option<&SamplingConfig>,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<CrossValidation<T>> {
    train_config.validate()?;
    model_config.validate()?;
    let ids: Vec<String> = corpus.iter().map(|c| c.id.clone()).collect();
    let plan = split_folds(&ids, train_config.folds, train_config.val_fraction, train_config.seed)?;
    let by_id: HashMap<&str, &CenterlineSequences<T>> =
        corpus.iter().map(|c| (c.id.as_str(), c)).collect();
    let lookup = |names: &[String]| -> Vec<&CenterlineSequences<T>> {
        names.iter().map(|n| by_id[n.as_str()]).collect()
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(train_config.jobs)
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let rule = train_config.tolerance_rule();
    let run_fold = |split: &FoldSplit| -> FoldOutcome<T> {
        log::info!(
            "fold {}: {} train, {} validation, {} test centerlines",
            split.fold,
            split.train.len(),
            split.validation.len(),
            split.test.len()
        );
        let inputs = FoldInputs {
            train: lookup(&split.train),
            validation: lookup(&split.validation),
            images,
            sampling,
            seed: fold_seed(train_config.seed, split.fold),
        };
        let tested = train_fold(&inputs, model_config, train_config).and_then(|training| {
            let mut predictions = Vec::new();
            let mut counts = ConfusionCounts::default();
            for cl in lookup(&split.test) {
                let p = predict_centerline(&cl.eval, &training.checkpoint.params, &training.checkpoint.config)?;
                counts += score_predictions(&p, &cl.truth, rule)?;
                predictions.extend(p);
            }
            Ok((training, predictions, counts))
        });
        match tested {
            Ok((training, test_predictions, counts)) => FoldOutcome {
                split: split.clone(),
                training: Ok(training),
                test_predictions,
                test_counts: Some(counts),
            },
            Err(e) => {
                log::warn!("fold {} failed: {e}", split.fold);
                FoldOutcome {
                    split: split.clone(),
                    training: Err(e.to_string()),
                    test_predictions: Vec::new(),
                    test_counts: None,
                }
            }
        }
    };
    let folds = pool.install(|| plan.folds.par_iter().map(run_fold).collect());
    Ok(CrossValidation { plan, folds })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub fold: usize,
    pub status: String,
    pub error: Option<String>,
    pub checkpoint: Option<String>,
    pub log: Option<String>,
    pub best_epoch: Option<usize>,
    pub best_selection: Option<f64>,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub test_counts: Option<ConfusionCounts>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidationManifest {
    pub version: u32,
    pub kind: String,
    pub seed: u64,
    pub sequence_dataset: String,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub folds: Vec<FoldRecord>,
    /// File holding the pooled test predictions.
    pub predictions: String,
}

pub const CV_MANIFEST_FILE: &str = "cv_manifest.json";
pub const PREDICTIONS_FILE: &str = "test_predictions.json";
const CV_KIND: &str = "cross_validation";

/// Writes checkpoints, per-fold logs, pooled predictions and the manifest.
pub fn write_cross_validation<T: Scalar>(
    dir: &Path,
    cv: &CrossValidation<T>,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    sequence_dataset: &str,
) -> Result<CrossValidationManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut folds = Vec::with_capacity(cv.folds.len());
    for outcome in &cv.folds {
        let k = outcome.split.fold;
        let mut record = FoldRecord {
            fold: k,
            status: "ok".to_string(),
            error: None,
            checkpoint: None,
            log: None,
            best_epoch: None,
            best_selection: None,
            train: outcome.split.train.clone(),
            validation: outcome.split.validation.clone(),
            test: outcome.split.test.clone(),
            test_counts: outcome.test_counts,
        };
        match &outcome.training {
            Ok(t) => {
                let ckpt = format!("fold{k:02}.ckpt");
                let log = format!("fold{k:02}_log.csv");
                t.checkpoint.save(&dir.join(&ckpt))?;
                write_atomic(&dir.join(&log), log_to_csv(&t.log).as_bytes())?;
                record.checkpoint = Some(ckpt);
                record.log = Some(log);
                record.best_epoch = Some(t.best_epoch);
                record.best_selection = Some(t.best_selection);
            }
            Err(e) => {
                record.status = "failed".to_string();
                record.error = Some(e.clone());
            }
        }
        folds.push(record);
    }
    let predictions: Vec<&PredictionSequence> = cv.pooled_predictions().collect();
    write_json(&dir.join(PREDICTIONS_FILE), &predictions)?;
    let manifest = CrossValidationManifest {
        version: crate::dataset::MANIFEST_VERSION,
        kind: CV_KIND.to_string(),
        seed: train_config.seed,
        sequence_dataset: sequence_dataset.to_string(),
        model: model_config.clone(),
        training: train_config.clone(),
        folds,
        predictions: PREDICTIONS_FILE.to_string(),
    };
    write_json(&dir.join(CV_MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_cross_validation_manifest(path: &Path) -> Result<CrossValidationManifest> {
    let path = if path.is_dir() { path.join(CV_MANIFEST_FILE) } else { path.to_path_buf() };
    let manifest: CrossValidationManifest = crate::container::read_json(&path)?;
    if manifest.kind != CV_KIND {
        return Err(Error::Container(format!(
            "{} is a {} manifest, expected {CV_KIND}",
            path.display(),
            manifest.kind
        )));
    }
    Ok(manifest)
}
