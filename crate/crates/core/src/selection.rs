//! Choosing the number of latent matrices: grid cross-validation on held-out
//! classes, or a single run that starts large and prunes rarely used matrices.

use std::fmt::Write as _;

use crate::data::{ClassSet, ImageSet, ZeroShotSplit};
use crate::error::{Error, Result};
use crate::exec::Backend;
use crate::model::{LatentModel, PruneEvent};
use crate::pipeline::{evaluate_on_classes, fit_on_classes};
use crate::trainer::{Session, TrainConfig};

/// Candidate K values tried by default.
pub const DEFAULT_GRID: [usize; 5] = [2, 4, 6, 8, 10];

/// How support counts feeding a prune decision are accumulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SupportCounting {
    /// Counts since the previous prune; reset after each prune.
    #[default]
    Window,
    /// Counts since the start of training.
    Cumulative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneConfig {
    pub k_init: usize,
    /// Epochs between prune checks.
    pub prune_period: usize,
    /// A matrix survives if its count is at least this fraction of all counted events.
    pub support_fraction: f64,
    pub counting: SupportCounting,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            k_init: 16,
            prune_period: 5,
            support_fraction: 0.05,
            counting: SupportCounting::Window,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_init == 0 {
            return Err(Error::Config("K must be ≥1".into()));
        }
        if self.prune_period == 0 {
            return Err(Error::Config("prune period must be ≥1".into()));
        }
        if !(self.support_fraction > 0.0 && self.support_fraction < 1.0) {
            return Err(Error::Config("support fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Positions to keep given support counts. Never empty: if every matrix falls
/// below the threshold the first top-supported one survives.
pub fn prune_decision(counts: &[u64], fraction: f64) -> (f64, Vec<usize>) {
    let total: u64 = counts.iter().sum();
    let threshold = fraction * total as f64;
    let mut keep: Vec<usize> = (0..counts.len())
        .filter(|&i| counts[i] as f64 >= threshold)
        .collect();
    if keep.is_empty() {
        let top = (0..counts.len())
            .fold(0, |best, i| if counts[i] > counts[best] { i } else { best });
        keep.push(top);
    }
    (threshold, keep)
}

/// Train with `prune.k_init` matrices, pruning every `prune.prune_period` epochs.
/// `images` must already be normalized; `classes` are the training classes.
pub fn train_with_pruning(
    prune: &PruneConfig,
    base: &TrainConfig,
    images: &ImageSet,
    classes: &ClassSet,
) -> Result<LatentModel> {
    prune.validate()?;
    let config = base.with_k(prune.k_init);
    let mut session = Session::start(&config, images, classes)?;
    let mut window = vec![0u64; prune.k_init];
    for epoch in 1..=config.epochs {
        let counts = session.epoch()?;
        for (w, c) in window.iter_mut().zip(&counts) {
            *w += c;
        }
        if epoch % prune.prune_period != 0 {
            continue;
        }
        let basis = match prune.counting {
            SupportCounting::Window => window.clone(),
            SupportCounting::Cumulative => session.model.meta.support_counts.clone(),
        };
        let (threshold, keep) = prune_decision(&basis, prune.support_fraction);
        let origin = &session.model.meta.matrix_origin;
        let event = PruneEvent {
            epoch,
            candidates: origin.clone(),
            counts: basis,
            threshold,
            kept: keep.iter().map(|&i| origin[i]).collect(),
        };
        session.model.meta.prune_history.push(event);
        if keep.len() < session.model.k() {
            session.model.retain_matrices(&keep);
        }
        window = vec![0; session.model.k()];
    }
    Ok(session.model)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvRow {
    pub k: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub best_k: usize,
    pub table: Vec<CvRow>,
}

/// Pick K on one zero-shot fold: train on `cv_split.train_classes`, score the
/// val classes as the only candidates. Ties go to the smaller K.
pub fn cross_validate_k(
    grid: &[usize],
    base: &TrainConfig,
    images: &ImageSet,
    classes: &ClassSet,
    cv_split: &ZeroShotSplit,
) -> Result<CvResult> {
    cross_validate_k_folds(grid, base, images, classes, std::slice::from_ref(cv_split))
}

/// As [`cross_validate_k`], averaging val accuracy over several folds.
pub fn cross_validate_k_folds(
    grid: &[usize],
    base: &TrainConfig,
    images: &ImageSet,
    classes: &ClassSet,
    folds: &[ZeroShotSplit],
) -> Result<CvResult> {
    if grid.is_empty() {
        return Err(Error::Config("empty K grid".into()));
    }
    if grid.contains(&0) {
        return Err(Error::Config("K must be ≥1".into()));
    }
    if folds.is_empty() {
        return Err(Error::validation("no cross-validation folds"));
    }
    for f in folds {
        f.require_val()?;
    }
    base.validate()?;
    let arms = grid.len() * folds.len();
    let results = Backend::default().map(arms, |a| {
        let (k, fold) = (grid[a / folds.len()], &folds[a % folds.len()]);
        let model = fit_on_classes(&base.with_k(k), None, images, classes, &fold.train_classes)?;
        Ok(evaluate_on_classes(&model, images, classes, &fold.val_classes)?.accuracy)
    });
    let accs = results.into_iter().collect::<Result<Vec<f64>>>()?;
    let table: Vec<CvRow> = grid
        .iter()
        .enumerate()
        .map(|(g, &k)| CvRow {
            k,
            accuracy: accs[g * folds.len()..(g + 1) * folds.len()].iter().sum::<f64>()
                / folds.len() as f64,
        })
        .collect();
    let best_k = best_k(&table);
    Ok(CvResult {
        best_k,
        table,
    })
}

/// Highest accuracy; ties go to the smaller K.
fn best_k(table: &[CvRow]) -> usize {
    table
        .iter()
        .fold(&table[0], |b, r| {
            if r.accuracy > b.accuracy || (r.accuracy == b.accuracy && r.k < b.k) {
                r
            } else {
                b
            }
        })
        .k
}

pub fn cv_table_csv(result: &CvResult) -> String {
    let mut out = String::from("k,val_accuracy\n");
    for r in &result.table {
        let _ = writeln!(out, "{},{}", r.k, r.accuracy);
    }
    out
}

/// One row per (prune check, candidate matrix).
pub fn prune_history_csv(history: &[PruneEvent]) -> String {
    let mut out = String::from("epoch,matrix_index,count,threshold,kept\n");
    for e in history {
        for (m, c) in e.candidates.iter().zip(&e.counts) {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                e.epoch,
                m,
                c,
                e.threshold,
                u8::from(e.kept.contains(m))
            );
        }
    }
    out
}
