//! Ranking hinge loss over classes and its empirical risk.

use ndarray::{Array2, ArrayView1};
use rand::Rng;

use crate::data::{ClassSet, ImageSet};
use crate::error::{check_dim, Error, Result};
use crate::exec::Backend;
use crate::model::{score_latent, LatentModel};

/// Zero-one label loss between two class IDs.
pub fn delta(a: &str, b: &str) -> f64 {
    if a == b {
        0.0
    } else {
        1.0
    }
}

/// `max(0, Δ + F(x, y_other) − F(x, y_true))`.
pub fn hinge_term(
    model: &LatentModel,
    x: ArrayView1<'_, f64>,
    y_true: ArrayView1<'_, f64>,
    y_other: ArrayView1<'_, f64>,
    same_class: bool,
) -> Result<f64> {
    let margin = if same_class { 0.0 } else { 1.0 };
    let f_true = score_latent(model, x, y_true)?.score;
    let f_other = score_latent(model, x, y_other)?.score;
    Ok((margin + f_other - f_true).max(0.0))
}

fn true_index(classes: &ClassSet, true_class: &str) -> Result<usize> {
    classes
        .index_of(true_class)
        .ok_or_else(|| Error::validation(format!("true class {true_class} not in class set")))
}

/// Sum of hinge terms over every class other than the true one
/// (the true-class term is identically zero).
pub fn example_loss(
    model: &LatentModel,
    x: ArrayView1<'_, f64>,
    true_class: &str,
    classes: &ClassSet,
) -> Result<f64> {
    let t = true_index(classes, true_class)?;
    check_dim(model.dim_x(), x.len())?;
    check_dim(model.dim_y(), classes.dim())?;
    Ok(example_loss_indexed(model, x, t, classes))
}

fn example_loss_indexed(
    model: &LatentModel,
    x: ArrayView1<'_, f64>,
    t: usize,
    classes: &ClassSet,
) -> f64 {
    let f_true = model.latent_unchecked(x, classes.row(t)).score;
    (0..classes.len())
        .filter(|&c| c != t)
        .map(|c| (1.0 + model.latent_unchecked(x, classes.row(c)).score - f_true).max(0.0))
        .sum()
}

/// Subgradient of `example_loss` with respect to every latent matrix.
///
/// Each active hinge term contributes `x yᵀ` to the matrix achieving the wrong
/// class score and `−x y_trueᵀ` to the matrix achieving the true class score.
/// Exact where all argmaxes are unique and no hinge sits at its kink.
pub fn example_loss_subgradient(
    model: &LatentModel,
    x: ArrayView1<'_, f64>,
    true_class: &str,
    classes: &ClassSet,
) -> Result<Vec<Array2<f64>>> {
    let t = true_index(classes, true_class)?;
    check_dim(model.dim_x(), x.len())?;
    check_dim(model.dim_y(), classes.dim())?;
    let mut grads = vec![Array2::<f64>::zeros((model.dim_x(), model.dim_y())); model.k()];
    let y_true = classes.row(t);
    let best_true = model.latent_unchecked(x, y_true);
    for c in (0..classes.len()).filter(|&c| c != t) {
        let y = classes.row(c);
        let best = model.latent_unchecked(x, y);
        if 1.0 + best.score - best_true.score > 0.0 {
            add_outer(&mut grads[best.index], 1.0, x, y);
            add_outer(&mut grads[best_true.index], -1.0, x, y_true);
        }
    }
    Ok(grads)
}

/// `w += scale · x yᵀ`
pub(crate) fn add_outer(
    w: &mut Array2<f64>,
    scale: f64,
    x: ArrayView1<'_, f64>,
    y: ArrayView1<'_, f64>,
) {
    for (mut row, &xi) in w.rows_mut().into_iter().zip(x) {
        row.scaled_add(scale * xi, &y);
    }
}

pub fn empirical_risk(model: &LatentModel, images: &ImageSet, classes: &ClassSet) -> Result<f64> {
    empirical_risk_with(Backend::default(), model, images, classes)
}

/// Mean ranking loss over `images` (already normalized) against `classes`.
pub fn empirical_risk_with(
    backend: Backend,
    model: &LatentModel,
    images: &ImageSet,
    classes: &ClassSet,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::validation("empirical risk of an empty image set"));
    }
    check_dim(model.dim_x(), images.dim())?;
    check_dim(model.dim_y(), classes.dim())?;
    let labels = images.label_indices(classes)?;
    let losses = backend.map(images.len(), |n| {
        example_loss_indexed(model, images.row(n), labels[n], classes)
    });
    // summed in index order so both backends agree bit for bit
    Ok(losses.iter().sum::<f64>() / images.len() as f64)
}

/// Uniform draw from `0..n_classes` excluding `true_index`.
pub fn sample_violator<R: Rng + ?Sized>(
    n_classes: usize,
    true_index: usize,
    rng: &mut R,
) -> Result<usize> {
    if n_classes < 2 {
        return Err(Error::validation(format!(
            "need at least 2 training classes, found {n_classes}"
        )));
    }
    let r = rng.random_range(0..n_classes - 1);
    Ok(if r >= true_index { r + 1 } else { r })
}
