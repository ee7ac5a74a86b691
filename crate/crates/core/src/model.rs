//! Piecewise-linear compatibility model: `F(x, y) = max_i xᵀ W_i y`.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::data::{ClassSet, NormStats};
use crate::error::{check_dim, Error, Result};
use crate::trainer::LossVariant;

/// One pruning decision taken during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    /// Epoch count (1-based) after which the prune ran.
    pub epoch: usize,
    /// Original matrix indices alive before the prune.
    pub candidates: Vec<usize>,
    /// Support count of each candidate over the counting window.
    pub counts: Vec<u64>,
    pub threshold: f64,
    /// Original indices of the matrices kept.
    pub kept: Vec<usize>,
}

/// Provenance stored next to the matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub seed: u64,
    pub epochs: usize,
    pub eta: f64,
    pub loss_variant: LossVariant,
    /// Classes the model was trained on; evaluation refuses to score these as unseen.
    pub train_classes: Vec<String>,
    /// Cumulative support count per surviving matrix.
    pub support_counts: Vec<u64>,
    /// Original index of every surviving matrix (identity unless pruned).
    pub matrix_origin: Vec<usize>,
    pub prune_history: Vec<PruneEvent>,
    /// Free-form settings echoed from the invoking configuration.
    pub settings: BTreeMap<String, String>,
}

impl ModelMeta {
    pub fn new(k: usize) -> Self {
        ModelMeta {
            seed: 0,
            epochs: 0,
            eta: 0.0,
            loss_variant: LossVariant::RankingSampled,
            train_classes: Vec::new(),
            support_counts: vec![0; k],
            matrix_origin: (0..k).collect(),
            prune_history: Vec::new(),
            settings: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentModel {
    matrices: Vec<Array2<f64>>,
    pub norm_stats: NormStats,
    pub meta: ModelMeta,
}

/// Best latent score and the matrix achieving it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredChoice {
    pub score: f64,
    pub index: usize,
}

/// Predicted class for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrediction {
    /// Row of the predicted class in the candidate set.
    pub class_index: usize,
    pub choice: ScoredChoice,
}

impl LatentModel {
    /// Matrices must be non-empty, equally shaped and finite.
    pub fn new(matrices: Vec<Array2<f64>>, norm_stats: NormStats, meta: ModelMeta) -> Result<Self> {
        let first = matrices
            .first()
            .ok_or_else(|| Error::validation("K must be ≥1"))?;
        let shape = first.dim();
        for w in &matrices {
            if w.dim() != shape {
                return Err(Error::validation(format!(
                    "latent matrices differ in shape: {:?} vs {:?}",
                    shape,
                    w.dim()
                )));
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("latent matrix entry".into()));
            }
        }
        check_dim(shape.0, norm_stats.dim())?;
        Ok(LatentModel {
            matrices,
            norm_stats,
            meta,
        })
    }

    pub fn k(&self) -> usize {
        self.matrices.len()
    }

    pub fn dim_x(&self) -> usize {
        self.matrices[0].nrows()
    }

    pub fn dim_y(&self) -> usize {
        self.matrices[0].ncols()
    }

    pub fn matrices(&self) -> &[Array2<f64>] {
        &self.matrices
    }

    pub(crate) fn matrices_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.matrices
    }

    /// Keep only the matrices at `keep` (ascending positions into the current list).
    pub(crate) fn retain_matrices(&mut self, keep: &[usize]) {
        let mut pos = 0;
        self.matrices.retain(|_| {
            let hit = keep.contains(&pos);
            pos += 1;
            hit
        });
        self.meta.support_counts = keep.iter().map(|&i| self.meta.support_counts[i]).collect();
        self.meta.matrix_origin = keep.iter().map(|&i| self.meta.matrix_origin[i]).collect();
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.matrices.iter().any(|w| w.iter().any(|v| !v.is_finite())) {
            Err(Error::NonFinite("latent matrices diverged".into()))
        } else {
            Ok(())
        }
    }

    fn check_xy(&self, x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> Result<()> {
        check_dim(self.dim_x(), x.len())?;
        check_dim(self.dim_y(), y.len())
    }

    pub(crate) fn latent_unchecked(
        &self,
        x: ArrayView1<'_, f64>,
        y: ArrayView1<'_, f64>,
    ) -> ScoredChoice {
        let mut best = ScoredChoice {
            score: f64::NEG_INFINITY,
            index: 0,
        };
        for (i, w) in self.matrices.iter().enumerate() {
            let s = bilinear(x, w, y);
            // strict comparison keeps the lowest index on ties
            if s > best.score || i == 0 {
                best = ScoredChoice { score: s, index: i };
            }
        }
        best
    }
}

/// `xᵀ W y` with no shape validation.
#[inline]
pub(crate) fn bilinear(x: ArrayView1<'_, f64>, w: &Array2<f64>, y: ArrayView1<'_, f64>) -> f64 {
    let mut total = 0.0;
    for (xi, row) in x.iter().zip(w.rows()) {
        if *xi != 0.0 {
            total += xi * row.dot(&y);
        }
    }
    total
}

pub fn score_bilinear(
    x: ArrayView1<'_, f64>,
    w: &Array2<f64>,
    y: ArrayView1<'_, f64>,
) -> Result<f64> {
    check_dim(w.nrows(), x.len())?;
    check_dim(w.ncols(), y.len())?;
    Ok(bilinear(x, w, y))
}

/// Maximum bilinear score over the model's matrices; ties go to the lowest index.
pub fn score_latent(
    model: &LatentModel,
    x: ArrayView1<'_, f64>,
    y: ArrayView1<'_, f64>,
) -> Result<ScoredChoice> {
    model.check_xy(x, y)?;
    Ok(model.latent_unchecked(x, y))
}

/// Best candidate for an already-normalized image. Class ties go to the earliest candidate.
pub fn predict_scored(
    model: &LatentModel,
    x: ArrayView1<'_, f64>,
    candidates: &ClassSet,
) -> Result<ClassPrediction> {
    if candidates.is_empty() {
        return Err(Error::validation("empty candidate set"));
    }
    check_dim(model.dim_x(), x.len())?;
    check_dim(model.dim_y(), candidates.dim())?;
    let mut best: Option<ClassPrediction> = None;
    for c in 0..candidates.len() {
        let choice = model.latent_unchecked(x, candidates.row(c));
        if best.as_ref().is_none_or(|b| choice.score > b.choice.score) {
            best = Some(ClassPrediction {
                class_index: c,
                choice,
            });
        }
    }
    Ok(best.expect("candidates are non-empty"))
}

pub fn predict<'c>(
    model: &LatentModel,
    x: ArrayView1<'_, f64>,
    candidates: &'c ClassSet,
) -> Result<&'c str> {
    let p = predict_scored(model, x, candidates)?;
    Ok(&candidates.ids()[p.class_index])
}

/// Arithmetic mean of `score_latent` over models, each paired with its own class vector.
pub fn score_late_fusion(
    models: &[LatentModel],
    x: ArrayView1<'_, f64>,
    ys: &[ArrayView1<'_, f64>],
) -> Result<f64> {
    if models.is_empty() {
        return Err(Error::validation("late fusion needs at least one model"));
    }
    check_dim(models.len(), ys.len())?;
    let mut total = 0.0;
    for (m, y) in models.iter().zip(ys) {
        total += score_latent(m, x, *y)?.score;
    }
    Ok(total / models.len() as f64)
}
