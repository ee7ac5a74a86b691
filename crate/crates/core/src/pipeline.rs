//! Glue between raw datasets and the trainer: fit normalization on the classes
//! being trained on, train, and evaluate on a disjoint class set.

use crate::data::{apply_zscore, fit_zscore, ClassSet, ImageSet, ZeroShotSplit};
use crate::error::Result;
use crate::evaluation::{evaluate_zero_shot, ZeroShotReport};
use crate::model::LatentModel;
use crate::selection::{train_with_pruning, PruneConfig};
use crate::trainer::{train, TrainConfig};

/// Raw images, l2-normalized class embeddings and a class split.
#[derive(Debug, Clone)]
pub struct ZeroShotData {
    pub images: ImageSet,
    pub classes: ClassSet,
    pub split: ZeroShotSplit,
}

/// Z-score statistics come from the images of `train_ids` only; the model carries them.
pub fn fit_on_classes<S: AsRef<str>>(
    config: &TrainConfig,
    prune: Option<&PruneConfig>,
    images: &ImageSet,
    classes: &ClassSet,
    train_ids: &[S],
) -> Result<LatentModel> {
    let train_images = images.filter_classes(train_ids);
    let train_classes = classes.subset(train_ids)?;
    let stats = fit_zscore(&train_images, train_ids)?;
    let normalized = apply_zscore(&train_images, &stats)?;
    let mut model = match prune {
        Some(p) => train_with_pruning(p, config, &normalized, &train_classes)?,
        None => train(config, &normalized, &train_classes)?,
    };
    model.norm_stats = stats;
    Ok(model)
}

/// Evaluate on the images of `eval_ids` with only those classes as candidates.
pub fn evaluate_on_classes<S: AsRef<str>>(
    model: &LatentModel,
    images: &ImageSet,
    classes: &ClassSet,
    eval_ids: &[S],
) -> Result<ZeroShotReport> {
    let eval_classes = classes.subset(eval_ids)?;
    let eval_images = images.filter_classes(eval_ids);
    evaluate_zero_shot(model, &eval_images, &eval_classes)
}
