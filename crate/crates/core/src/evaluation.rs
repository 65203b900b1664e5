//! Scoring, cross-validation and majority-vote ensembles.
//!
//! `F1_c = 2 TP_c / (2 TP_c + FN_c + FP_c)` with a zero denominator scored as
//! 0, and `F1_avg` is the mean over the Normal, AF and Other classes only.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcompute::Real;
use crate::network::{Model, ModelConfig};
use crate::signal_io::{stratified_partition, Dataset, EcgRecord, Label, SignalError};
use crate::spectrogram::PreprocessConfig;
use crate::training::{predict_probs, train_model, TrainConfig, TrainError, TrainHistory};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Counts indexed `[true][predicted]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; Label::COUNT]; Label::COUNT],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs<I: IntoIterator<Item = (Label, Label)>>(pairs: I) -> Self {
        let mut cm = Self::new();
        for (t, p) in pairs {
            cm.add(t, p);
        }
        cm
    }

    pub fn add(&mut self, truth: Label, predicted: Label) {
        self.counts[truth.index()][predicted.index()] += 1;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (c, o) in row.iter_mut().zip(orow) {
                *c += o;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn true_positives(&self, c: Label) -> u64 {
        self.counts[c.index()][c.index()]
    }

    pub fn false_negatives(&self, c: Label) -> u64 {
        self.row_total(c) - self.true_positives(c)
    }

    pub fn false_positives(&self, c: Label) -> u64 {
        self.counts.iter().map(|row| row[c.index()]).sum::<u64>() - self.true_positives(c)
    }

    pub fn row_total(&self, c: Label) -> u64 {
        self.counts[c.index()].iter().sum()
    }
}

/// Classes averaged by [`f1_avg`].
pub const F1_AVG_CLASSES: [Label; 3] = [Label::Normal, Label::Af, Label::Other];

pub fn f1_class(cm: &ConfusionMatrix, c: Label) -> f64 {
    let tp = cm.true_positives(c);
    let denom = 2 * tp + cm.false_negatives(c) + cm.false_positives(c);
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

pub fn f1_avg(cm: &ConfusionMatrix) -> f64 {
    mean_of_three(F1_AVG_CLASSES.map(|c| f1_class(cm, c)))
}

/// Mean of per-class F1 scores for N, A and O.
pub fn mean_of_three(f1: [f64; 3]) -> f64 {
    f1.iter().sum::<f64>() / 3.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracies {
    /// Recall of each class (0 for classes absent from the ground truth).
    pub per_class: [f64; Label::COUNT],
    pub overall: f64,
}

pub fn accuracies(cm: &ConfusionMatrix) -> Accuracies {
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let trace: u64 = Label::ALL.iter().map(|&c| cm.true_positives(c)).sum();
    Accuracies {
        per_class: Label::ALL.map(|c| ratio(cm.true_positives(c), cm.row_total(c))),
        overall: ratio(trace, cm.total()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub f1: [f64; Label::COUNT],
    pub accuracy: [f64; Label::COUNT],
    pub overall_accuracy: f64,
    pub f1_avg: f64,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        let acc = accuracies(cm);
        MetricsReport {
            f1: Label::ALL.map(|c| f1_class(cm, c)),
            accuracy: acc.per_class,
            overall_accuracy: acc.overall,
            f1_avg: f1_avg(cm),
            confusion: *cm,
        }
    }

    /// Two-row table in percent: accuracy and F1 per class, then overall
    /// accuracy and `F1_avg`.
    pub fn to_table(&self, title: &str) -> String {
        let mut s = format!("{title:<8}{:>8}{:>8}{:>8}{:>8}{:>9}\n", "N", "A", "O", "~", "overall");
        let row = |name: &str, vals: &[f64; 4], overall: f64| {
            let mut r = format!("{name:<8}");
            for v in vals {
                r.push_str(&format!("{:>8.1}", 100.0 * v));
            }
            r.push_str(&format!("{:>9.1}\n", 100.0 * overall));
            r
        };
        s.push_str(&row("acc.", &self.accuracy, self.overall_accuracy));
        s.push_str(&row("F1", &self.f1, self.f1_avg));
        s
    }
}

/// Mean and sample standard deviation of each metric across folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub f1_avg_mean: f64,
    pub f1_avg_sd: f64,
    pub overall_accuracy_mean: f64,
    pub overall_accuracy_sd: f64,
    pub f1_mean: [f64; Label::COUNT],
    pub f1_sd: [f64; Label::COUNT],
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

impl FoldSummary {
    pub fn from_reports(reports: &[MetricsReport]) -> Self {
        let (f1_avg_mean, f1_avg_sd) = mean_sd(&reports.iter().map(|r| r.f1_avg).collect::<Vec<_>>());
        let (overall_accuracy_mean, overall_accuracy_sd) =
            mean_sd(&reports.iter().map(|r| r.overall_accuracy).collect::<Vec<_>>());
        let per = |c: usize| mean_sd(&reports.iter().map(|r| r.f1[c]).collect::<Vec<_>>());
        FoldSummary {
            f1_avg_mean,
            f1_avg_sd,
            overall_accuracy_mean,
            overall_accuracy_sd,
            f1_mean: [0, 1, 2, 3].map(|c| per(c).0),
            f1_sd: [0, 1, 2, 3].map(|c| per(c).1),
        }
    }
}

/// Index of the largest probability; the earlier class wins exact ties.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vote {
    pub label: Label,
    pub votes: Vec<Label>,
    pub summed_probs: [f64; Label::COUNT],
}

/// Plurality of per-model argmax votes. Ties go to the tied class with the
/// largest summed probability, then to the earlier class in N, A, O, ~.
pub fn majority_vote(model_probs: &[Vec<f64>]) -> Vote {
    assert!(!model_probs.is_empty(), "majority vote needs at least one model");
    let votes: Vec<Label> = model_probs
        .iter()
        .map(|p| Label::from_index(argmax(p)).expect("four class probabilities"))
        .collect();
    let mut tally = [0usize; Label::COUNT];
    for v in &votes {
        tally[v.index()] += 1;
    }
    let mut summed = [0.0; Label::COUNT];
    for p in model_probs {
        for (s, v) in summed.iter_mut().zip(p) {
            *s += v;
        }
    }
    let top = *tally.iter().max().unwrap();
    let mut winner: Option<usize> = None;
    for c in 0..Label::COUNT {
        if tally[c] != top {
            continue;
        }
        winner = match winner {
            Some(w) if summed[w] >= summed[c] => Some(w),
            _ => Some(c),
        };
    }
    Vote {
        label: Label::from_index(winner.unwrap()).unwrap(),
        votes,
        summed_probs: summed,
    }
}

/// Seed for job `i` (fold or ensemble member) derived from a base seed.
pub fn job_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs `jobs` closures either in order or on one thread each. Every job is
/// independent and seeded on its own, so both orders give identical results.
fn run_jobs<R: Send, F: Fn(usize) -> R + Sync>(n: usize, parallel: bool, job: F) -> Vec<R> {
    if !parallel {
        return (0..n).map(job).collect();
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..n).map(|i| scope.spawn({
            let job = &job;
            move || job(i)
        })).collect();
        handles.into_iter().map(|h| h.join().expect("training job panicked")).collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutOfFoldPrediction {
    pub id: String,
    pub fold: usize,
    pub truth: Label,
    pub predicted: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub report: MetricsReport,
    pub histories: Vec<TrainHistory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOutcome {
    pub folds: Vec<FoldOutcome>,
    /// All out-of-fold predictions scored together.
    pub pooled: MetricsReport,
    pub summary: FoldSummary,
    pub predictions: Vec<OutOfFoldPrediction>,
}

/// Stratified k-fold cross-validation. In fold `f` a model is trained on the
/// other folds minus their validation subset, early-stopped on that subset,
/// and scored on fold `f`.
pub fn cross_validate<T: Real>(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    dataset: &Dataset,
    k: usize,
    seed: u64,
    parallel: bool,
) -> Result<CvOutcome, EvalError> {
    let folds = stratified_partition(dataset, k, seed)?;
    let outcomes = run_jobs(k, parallel, |f| -> Result<(FoldOutcome, Vec<OutOfFoldPrediction>), EvalError> {
        let train = dataset.subset(&folds.train_ids(f));
        let val = dataset.subset(folds.val_ids(f));
        let test = dataset.subset(&folds.test_ids(f));
        let config = TrainConfig {
            seed: job_seed(train_config.seed, f),
            ..train_config.clone()
        };
        let (mut model, histories) = train_model::<T>(model_config, &train, &val, &config)?;
        let probs = predict_probs(&mut model, &test, &config.preprocess, config.batch_size)?;
        let predictions: Vec<OutOfFoldPrediction> = test
            .iter()
            .zip(&probs)
            .map(|(r, p)| OutOfFoldPrediction {
                id: r.id.clone(),
                fold: f,
                truth: r.label.expect("partitioned records are labeled"),
                predicted: Label::from_index(argmax(p)).expect("class index"),
            })
            .collect();
        let cm = ConfusionMatrix::from_pairs(predictions.iter().map(|p| (p.truth, p.predicted)));
        let outcome = FoldOutcome {
            fold: f,
            n_train: train.len(),
            n_val: val.len(),
            n_test: test.len(),
            report: MetricsReport::from_confusion(&cm),
            histories,
        };
        Ok((outcome, predictions))
    });
    let mut fold_outcomes = Vec::with_capacity(k);
    let mut predictions = Vec::new();
    for o in outcomes {
        let (fold, preds) = o?;
        fold_outcomes.push(fold);
        predictions.extend(preds);
    }
    predictions.sort_by(|a, b| a.id.cmp(&b.id));
    let pooled = MetricsReport::from_confusion(&ConfusionMatrix::from_pairs(
        predictions.iter().map(|p| (p.truth, p.predicted)),
    ));
    let reports: Vec<MetricsReport> = fold_outcomes.iter().map(|f| f.report.clone()).collect();
    Ok(CvOutcome {
        summary: FoldSummary::from_reports(&reports),
        folds: fold_outcomes,
        pooled,
        predictions,
    })
}

/// Number of networks in an ensemble.
pub const ENSEMBLE_SIZE: usize = 5;

#[derive(Debug, Clone)]
pub struct EnsembleMember<T> {
    pub model: Model<T>,
    pub histories: Vec<TrainHistory>,
    pub val_ids: BTreeSet<String>,
    pub train_ids: BTreeSet<String>,
}

/// Splits the labeled records into `members` stratified subsets; member `i`
/// is early-stopped on subset `i` and trained on the rest.
pub fn build_ensemble<T: Real>(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    dataset: &Dataset,
    members: usize,
    seed: u64,
    parallel: bool,
) -> Result<Vec<EnsembleMember<T>>, EvalError> {
    let subsets = stratified_partition(dataset, members, seed)?;
    run_jobs(members, parallel, |i| {
        let val_ids = subsets.test_ids(i);
        let train_ids = subsets.training_portion(i);
        let config = TrainConfig {
            seed: job_seed(train_config.seed, i),
            ..train_config.clone()
        };
        let (model, histories) = train_model::<T>(
            model_config,
            &dataset.subset(&train_ids),
            &dataset.subset(&val_ids),
            &config,
        )?;
        Ok(EnsembleMember {
            model,
            histories,
            val_ids,
            train_ids,
        })
    })
    .into_iter()
    .collect()
}

/// Majority vote of `models` for each record.
pub fn ensemble_predict<T: Real>(
    models: &mut [Model<T>],
    records: &[&EcgRecord],
    preprocess: &PreprocessConfig,
    batch_size: usize,
) -> Result<Vec<Vote>, EvalError> {
    let mut per_model = Vec::with_capacity(models.len());
    for m in models.iter_mut() {
        per_model.push(predict_probs(m, records, preprocess, batch_size)?);
    }
    Ok((0..records.len())
        .map(|r| majority_vote(&per_model.iter().map(|p| p[r].clone()).collect::<Vec<_>>()))
        .collect())
}
