//! Zero-shot accuracy, K sweeps and per-matrix retrieval lists.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use crate::data::{ClassSet, ImageSet};
use crate::error::{check_dim, Error, Result};
use crate::exec::Backend;
use crate::model::{predict_scored, LatentModel};
use crate::pipeline::{evaluate_on_classes, fit_on_classes, ZeroShotData};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassAccuracy {
    pub class_id: String,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

/// Within-class accuracy for every class of `eval_classes`, in that order.
pub fn per_class_breakdown<S: AsRef<str>>(
    predictions: &[S],
    labels: &[S],
    eval_classes: &[S],
) -> Result<Vec<ClassAccuracy>> {
    check_dim(labels.len(), predictions.len())?;
    let slot: HashMap<&str, usize> = eval_classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_ref(), i))
        .collect();
    let mut tally = vec![(0usize, 0usize); eval_classes.len()];
    for (p, l) in predictions.iter().zip(labels) {
        let i = *slot.get(l.as_ref()).ok_or_else(|| {
            Error::validation(format!("label {} is not an evaluation class", l.as_ref()))
        })?;
        tally[i].0 += 1;
        if p.as_ref() == l.as_ref() {
            tally[i].1 += 1;
        }
    }
    eval_classes
        .iter()
        .zip(tally)
        .map(|(c, (n, correct))| {
            if n == 0 {
                return Err(Error::validation(format!(
                    "class {} has no evaluation examples",
                    c.as_ref()
                )));
            }
            Ok(ClassAccuracy {
                class_id: c.as_ref().to_string(),
                n,
                correct,
                accuracy: correct as f64 / n as f64,
            })
        })
        .collect()
}

/// Mean over classes of within-class top-1 accuracy.
pub fn per_class_top1<S: AsRef<str>>(
    predictions: &[S],
    labels: &[S],
    eval_classes: &[S],
) -> Result<f64> {
    let rows = per_class_breakdown(predictions, labels, eval_classes)?;
    Ok(mean_accuracy(&rows))
}

fn mean_accuracy(rows: &[ClassAccuracy]) -> f64 {
    rows.iter().map(|r| r.accuracy).sum::<f64>() / rows.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePrediction {
    pub image_id: String,
    pub true_class: String,
    pub predicted_class: String,
    pub score: f64,
    pub latent_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassAccuracy>,
    pub predictions: Vec<ImagePrediction>,
}

impl ZeroShotReport {
    fn from_predictions(predictions: Vec<ImagePrediction>, classes: &ClassSet) -> Result<Self> {
        let predicted: Vec<&str> = predictions.iter().map(|p| p.predicted_class.as_str()).collect();
        let labels: Vec<&str> = predictions.iter().map(|p| p.true_class.as_str()).collect();
        let ids: Vec<&str> = classes.ids().iter().map(String::as_str).collect();
        let per_class = per_class_breakdown(&predicted, &labels, &ids)?;
        Ok(ZeroShotReport {
            accuracy: mean_accuracy(&per_class),
            per_class,
            predictions,
        })
    }

    pub fn summary(&self) -> String {
        let total: usize = self.per_class.iter().map(|c| c.n).sum();
        format!(
            "average per-class top-1: {:.4} ({} classes, {} images)",
            self.accuracy,
            self.per_class.len(),
            total
        )
    }
}

fn check_unseen(model: &LatentModel, classes: &ClassSet) -> Result<()> {
    let seen: HashSet<&str> = model.meta.train_classes.iter().map(String::as_str).collect();
    match classes.ids().iter().find(|c| seen.contains(c.as_str())) {
        Some(c) => Err(Error::validation(format!(
            "train/test class overlap: {c} was seen during training"
        ))),
        None => Ok(()),
    }
}

pub fn evaluate_zero_shot(
    model: &LatentModel,
    test_images: &ImageSet,
    test_classes: &ClassSet,
) -> Result<ZeroShotReport> {
    evaluate_zero_shot_with(Backend::default(), model, test_images, test_classes)
}

/// Normalize raw test images with the model's statistics and predict among the
/// test classes only.
pub fn evaluate_zero_shot_with(
    backend: Backend,
    model: &LatentModel,
    test_images: &ImageSet,
    test_classes: &ClassSet,
) -> Result<ZeroShotReport> {
    check_unseen(model, test_classes)?;
    check_dim(model.dim_x(), test_images.dim())?;
    check_dim(model.dim_y(), test_classes.dim())?;
    let predictions = backend
        .map(test_images.len(), |n| {
            let x = model.norm_stats.apply_row(test_images.row(n));
            let p = predict_scored(model, x.view(), test_classes)?;
            Ok(ImagePrediction {
                image_id: test_images.ids()[n].clone(),
                true_class: test_images.labels()[n].clone(),
                predicted_class: test_classes.ids()[p.class_index].clone(),
                score: p.choice.score,
                latent_index: p.choice.index,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    ZeroShotReport::from_predictions(predictions, test_classes)
}

/// Average the latent scores of several models, each with its own class
/// embedding source. `class_sets[i]` pairs with `models[i]` and all sets must
/// list the same classes. The reported latent index is the first model's.
pub fn evaluate_late_fusion(
    models: &[LatentModel],
    test_images: &ImageSet,
    class_sets: &[ClassSet],
) -> Result<ZeroShotReport> {
    if models.is_empty() {
        return Err(Error::validation("late fusion needs at least one model"));
    }
    check_dim(models.len(), class_sets.len())?;
    let reference = &class_sets[0];
    if reference.is_empty() {
        return Err(Error::validation("empty candidate set"));
    }
    for (m, cs) in models.iter().zip(class_sets) {
        check_unseen(m, cs)?;
        check_dim(m.dim_x(), test_images.dim())?;
        check_dim(m.dim_y(), cs.dim())?;
        if cs.ids() != reference.ids() {
            return Err(Error::validation("late fusion class sets list different classes"));
        }
    }
    let predictions = Backend::default()
        .map(test_images.len(), |n| {
            let xs: Vec<_> = models
                .iter()
                .map(|m| m.norm_stats.apply_row(test_images.row(n)))
                .collect();
            let mut best: Option<(usize, f64, usize)> = None;
            for c in 0..reference.len() {
                let mut total = 0.0;
                let mut first_index = 0;
                for (i, (m, cs)) in models.iter().zip(class_sets).enumerate() {
                    let choice = m.latent_unchecked(xs[i].view(), cs.row(c));
                    if i == 0 {
                        first_index = choice.index;
                    }
                    total += choice.score;
                }
                let score = total / models.len() as f64;
                if best.is_none_or(|(_, s, _)| score > s) {
                    best = Some((c, score, first_index));
                }
            }
            let (c, score, latent_index) = best.expect("class sets are non-empty");
            ImagePrediction {
                image_id: test_images.ids()[n].clone(),
                true_class: test_images.labels()[n].clone(),
                predicted_class: reference.ids()[c].clone(),
                score,
                latent_index,
            }
        });
    ZeroShotReport::from_predictions(predictions, reference)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub k: usize,
    pub mean_accuracy: f64,
    /// Sample standard deviation over seeds divided by sqrt(seeds); 0 for one seed.
    pub std_error: f64,
    pub accuracies: Vec<f64>,
}

pub fn mean_and_std_error(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Train on train+val classes and test on the test classes for every
/// `(K, seed)` pair, seeds being `base.seed .. base.seed + n_seeds`.
pub fn k_sweep(
    base: &TrainConfig,
    grid: &[usize],
    data: &ZeroShotData,
    n_seeds: usize,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::Config("empty K grid".into()));
    }
    if n_seeds == 0 {
        return Err(Error::Config("need at least one seed".into()));
    }
    base.validate()?;
    let train_ids = data.split.trainval_classes();
    let runs = Backend::default().map(grid.len() * n_seeds, |r| {
        let (k, s) = (grid[r / n_seeds], (r % n_seeds) as u64);
        let config = TrainConfig {
            k,
            seed: base.seed.wrapping_add(s),
            ..base.clone()
        };
        let model = fit_on_classes(&config, None, &data.images, &data.classes, &train_ids)?;
        Ok(evaluate_on_classes(&model, &data.images, &data.classes, &data.split.test_classes)?.accuracy)
    });
    let accs = runs.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(grid
        .iter()
        .enumerate()
        .map(|(g, &k)| {
            let accuracies = accs[g * n_seeds..(g + 1) * n_seeds].to_vec();
            let (mean_accuracy, std_error) = mean_and_std_error(&accuracies);
            SweepRow {
                k,
                mean_accuracy,
                std_error,
                accuracies,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedImage {
    pub image_id: String,
    pub score: f64,
}

/// Group images by the matrix that scores their predicted class, rank each
/// group by that score (descending, ties by image order) and keep `n_top`.
pub fn top_items_per_matrix(
    model: &LatentModel,
    images: &ImageSet,
    classes: &ClassSet,
    n_top: usize,
) -> Result<Vec<Vec<RankedImage>>> {
    let groups = group_by_matrix(model, images, classes)?;
    if n_top == 0 {
        return Err(Error::Config("n_top must be ≥1".into()));
    }
    Ok(groups
        .into_iter()
        .map(|g| g.into_iter().take(n_top).collect())
        .collect())
}

/// Full (untruncated) ranked groups; together they partition `images`.
pub fn group_by_matrix(
    model: &LatentModel,
    images: &ImageSet,
    classes: &ClassSet,
) -> Result<Vec<Vec<RankedImage>>> {
    check_dim(model.dim_x(), images.dim())?;
    let picks = Backend::default()
        .map(images.len(), |n| {
            let x = model.norm_stats.apply_row(images.row(n));
            predict_scored(model, x.view(), classes)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut groups: Vec<Vec<(usize, f64)>> = vec![Vec::new(); model.k()];
    for (n, p) in picks.iter().enumerate() {
        groups[p.choice.index].push((n, p.choice.score));
    }
    Ok(groups
        .into_iter()
        .map(|mut g| {
            g.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            g.into_iter()
                .map(|(n, score)| RankedImage {
                    image_id: images.ids()[n].clone(),
                    score,
                })
                .collect()
        })
        .collect())
}

pub fn per_class_csv(report: &ZeroShotReport) -> String {
    let mut out = String::from("class_id,n,correct,accuracy\n");
    for c in &report.per_class {
        let _ = writeln!(out, "{},{},{},{}", c.class_id, c.n, c.correct, c.accuracy);
    }
    out
}

pub fn predictions_csv(report: &ZeroShotReport) -> String {
    let mut out = String::from("image_id,predicted_class,score,latent_index\n");
    for p in &report.predictions {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            p.image_id, p.predicted_class, p.score, p.latent_index
        );
    }
    out
}

pub fn ksweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("k,mean_accuracy,std_error,n_seeds\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.k,
            r.mean_accuracy,
            r.std_error,
            r.accuracies.len()
        );
    }
    out
}

pub fn matrix_top_csv(groups: &[Vec<RankedImage>]) -> String {
    let mut out = String::from("matrix_index,rank,image_id,score\n");
    for (m, g) in groups.iter().enumerate() {
        for (rank, item) in g.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{}", m, rank + 1, item.image_id, item.score);
        }
    }
    out
}
