//! Stochastic training of the latent model with the ranking hinge loss.
//!
//! Each epoch visits every training example once in a freshly shuffled order,
//! draws one wrong class, and on a margin violation updates the matrices that
//! achieve the wrong-class and true-class scores. Training is strictly
//! sequential; a given config, dataset and seed always yields the same model.

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ClassSet, ImageSet, NormStats};
use crate::error::{check_dim, Error, Result};
use crate::loss::{add_outer, sample_violator};
use crate::model::{bilinear, LatentModel, ModelMeta};

pub const DEFAULT_EPOCHS: usize = 150;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// One uniformly sampled wrong class per example.
    RankingSampled,
    /// The highest-scoring wrong class per example (full pass over classes).
    MaxViolator,
}

impl std::str::FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ranking" | "ranking_sampled" | "ranking-sampled" => Ok(LossVariant::RankingSampled),
            "max_violator" | "max-violator" => Ok(LossVariant::MaxViolator),
            other => Err(Error::Config(format!("unknown loss variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for LossVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossVariant::RankingSampled => "ranking_sampled",
            LossVariant::MaxViolator => "max_violator",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub k: usize,
    pub epochs: usize,
    /// Constant learning rate.
    pub eta: f64,
    pub seed: u64,
    pub loss_variant: LossVariant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 1,
            epochs: DEFAULT_EPOCHS,
            eta: 0.01,
            seed: 0,
            loss_variant: LossVariant::RankingSampled,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("K must be ≥1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be ≥1".into()));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        Ok(())
    }

    pub fn with_k(&self, k: usize) -> Self {
        TrainConfig { k, ..self.clone() }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        TrainConfig {
            seed,
            ..self.clone()
        }
    }
}

/// What one SGD step did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdateEvent {
    pub violated: bool,
    /// Matrix achieving the wrong-class score (set only on violation).
    pub i_star: Option<usize>,
    /// Matrix achieving the true-class score (set only on violation).
    pub j_star: Option<usize>,
    pub updated: Vec<usize>,
}

impl UpdateEvent {
    fn none() -> Self {
        UpdateEvent {
            violated: false,
            i_star: None,
            j_star: None,
            updated: Vec::new(),
        }
    }
}

fn init_matrices(d_x: usize, d_y: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<Array2<f64>> {
    let normal = Normal::new(0.0, 1.0 / (d_x as f64).sqrt()).expect("std is positive");
    (0..k)
        .map(|_| Array2::from_shape_simple_fn((d_x, d_y), || normal.sample(rng)))
        .collect()
}

/// K Gaussian matrices with mean 0 and std `1/sqrt(d_x)`.
pub fn init_model(d_x: usize, d_y: usize, k: usize, seed: u64) -> Result<LatentModel> {
    if d_x == 0 || d_y == 0 || k == 0 {
        return Err(Error::validation(format!(
            "model dimensions must be positive (d_x={d_x}, d_y={d_y}, K={k})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut meta = ModelMeta::new(k);
    meta.seed = seed;
    LatentModel::new(
        init_matrices(d_x, d_y, k, &mut rng),
        NormStats::identity(d_x),
        meta,
    )
}

fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// One margin check and, on violation, one rank-1 update of the responsible matrices.
pub fn sgd_step(
    model: &mut LatentModel,
    x: ArrayView1<'_, f64>,
    y_true: ArrayView1<'_, f64>,
    y_wrong: ArrayView1<'_, f64>,
    eta: f64,
) -> Result<UpdateEvent> {
    check_dim(model.dim_x(), x.len())?;
    check_dim(model.dim_y(), y_true.len())?;
    check_dim(model.dim_y(), y_wrong.len())?;
    if !eta.is_finite()
        || x.iter().chain(y_true).chain(y_wrong).any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite("sgd_step input".into()));
    }
    step_unchecked(model, x, y_true, y_wrong, eta)
}

fn step_unchecked(
    model: &mut LatentModel,
    x: ArrayView1<'_, f64>,
    y_true: ArrayView1<'_, f64>,
    y_wrong: ArrayView1<'_, f64>,
    eta: f64,
) -> Result<UpdateEvent> {
    let wrong: Vec<f64> = model.matrices().iter().map(|w| bilinear(x, w, y_wrong)).collect();
    let truth: Vec<f64> = model.matrices().iter().map(|w| bilinear(x, w, y_true)).collect();
    let i_star = argmax_first(&wrong);
    let j_star = argmax_first(&truth);
    let (f_wrong, f_true) = (wrong[i_star], truth[j_star]);
    if !f_wrong.is_finite() || !f_true.is_finite() {
        return Err(Error::NonFinite("compatibility score".into()));
    }
    if f_wrong + 1.0 <= f_true {
        return Ok(UpdateEvent::none());
    }
    let ws = model.matrices_mut();
    let updated = if i_star == j_star {
        let diff: Array1<f64> = &y_wrong - &y_true;
        add_outer(&mut ws[i_star], -eta, x, diff.view());
        vec![i_star]
    } else {
        add_outer(&mut ws[i_star], -eta, x, y_wrong);
        add_outer(&mut ws[j_star], eta, x, y_true);
        vec![i_star, j_star]
    };
    Ok(UpdateEvent {
        violated: true,
        i_star: Some(i_star),
        j_star: Some(j_star),
        updated,
    })
}

/// Highest-scoring class other than `t`; ties go to the lowest index.
fn max_violator(model: &LatentModel, x: ArrayView1<'_, f64>, classes: &ClassSet, t: usize) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for c in (0..classes.len()).filter(|&c| c != t) {
        let s = model.latent_unchecked(x, classes.row(c)).score;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((c, s));
        }
    }
    best.expect("at least two classes").0
}

/// Training state that survives across epochs: the model, the RNG stream and
/// the resolved label indices.
pub(crate) struct Session<'a> {
    pub model: LatentModel,
    rng: ChaCha8Rng,
    images: &'a ImageSet,
    classes: &'a ClassSet,
    labels: Vec<usize>,
    order: Vec<usize>,
    eta: f64,
    variant: LossVariant,
}

impl<'a> Session<'a> {
    pub fn start(config: &TrainConfig, images: &'a ImageSet, classes: &'a ClassSet) -> Result<Self> {
        config.validate()?;
        if classes.len() < 2 {
            return Err(Error::validation(format!(
                "need at least 2 training classes, found {}",
                classes.len()
            )));
        }
        if images.is_empty() {
            return Err(Error::validation("no training images"));
        }
        let labels = images.label_indices(classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let matrices = init_matrices(images.dim(), classes.dim(), config.k, &mut rng);
        let mut meta = ModelMeta::new(config.k);
        meta.seed = config.seed;
        meta.eta = config.eta;
        meta.loss_variant = config.loss_variant;
        meta.train_classes = classes.ids().to_vec();
        let model = LatentModel::new(matrices, NormStats::identity(images.dim()), meta)?;
        Ok(Session {
            model,
            rng,
            images,
            classes,
            labels,
            order: (0..images.len()).collect(),
            eta: config.eta,
            variant: config.loss_variant,
        })
    }

    /// Run one epoch; returns the per-matrix support counts it produced.
    pub fn epoch(&mut self) -> Result<Vec<u64>> {
        let counts = epoch_inner(
            &mut self.model,
            self.images,
            self.classes,
            &self.labels,
            &mut self.order,
            self.eta,
            self.variant,
            &mut self.rng,
        )?;
        for (acc, c) in self.model.meta.support_counts.iter_mut().zip(&counts) {
            *acc += c;
        }
        self.model.meta.epochs += 1;
        Ok(counts)
    }
}

#[allow(clippy::too_many_arguments)]
fn epoch_inner(
    model: &mut LatentModel,
    images: &ImageSet,
    classes: &ClassSet,
    labels: &[usize],
    order: &mut [usize],
    eta: f64,
    variant: LossVariant,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; model.k()];
    order.shuffle(rng);
    for &n in order.iter() {
        let x = images.row(n);
        let t = labels[n];
        let wrong = match variant {
            LossVariant::RankingSampled => sample_violator(classes.len(), t, rng)?,
            LossVariant::MaxViolator => max_violator(model, x, classes, t),
        };
        let event = step_unchecked(model, x, classes.row(t), classes.row(wrong), eta)?;
        if let Some(j) = event.j_star {
            counts[j] += 1;
        }
    }
    model.check_finite()?;
    Ok(counts)
}

/// One pass over `images` (already normalized) in a shuffled order drawn from `rng`.
/// Returns how often each matrix achieved the true-class score on a violating draw.
pub fn run_epoch(
    model: &mut LatentModel,
    images: &ImageSet,
    classes: &ClassSet,
    eta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<u64>> {
    if classes.len() < 2 {
        return Err(Error::validation("need at least 2 training classes"));
    }
    check_dim(model.dim_x(), images.dim())?;
    check_dim(model.dim_y(), classes.dim())?;
    let labels = images.label_indices(classes)?;
    let mut order: Vec<usize> = (0..images.len()).collect();
    epoch_inner(
        model,
        images,
        classes,
        &labels,
        &mut order,
        eta,
        LossVariant::RankingSampled,
        rng,
    )
}

/// Train on normalized images labelled with `classes` (the training classes only).
/// The returned model carries identity normalization; callers that normalized the
/// images attach their statistics afterwards.
pub fn train(config: &TrainConfig, images: &ImageSet, classes: &ClassSet) -> Result<LatentModel> {
    let mut session = Session::start(config, images, classes)?;
    for _ in 0..config.epochs {
        session.epoch()?;
    }
    Ok(session.model)
}

/// Same loop as [`train`] but each example is paired with its highest-scoring wrong class.
pub fn train_max_violator(
    config: &TrainConfig,
    images: &ImageSet,
    classes: &ClassSet,
) -> Result<LatentModel> {
    let config = TrainConfig {
        loss_variant: LossVariant::MaxViolator,
        ..config.clone()
    };
    train(&config, images, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::empirical_risk;
    use ndarray::array;
    use proptest::prelude::*;

    fn model(ws: Vec<Array2<f64>>) -> LatentModel {
        let (k, d) = (ws.len(), ws[0].nrows());
        LatentModel::new(ws, NormStats::identity(d), ModelMeta::new(k)).unwrap()
    }

    #[test]
    fn init_shapes_and_determinism() {
        let m = init_model(3, 5, 4, 1).unwrap();
        assert_eq!(m.k(), 4);
        assert!(m.matrices().iter().all(|w| w.dim() == (3, 5)));
        assert_eq!(m, init_model(3, 5, 4, 1).unwrap());
        assert_ne!(m, init_model(3, 5, 4, 2).unwrap());
        assert!(init_model(0, 5, 1, 1).is_err());
        assert!(init_model(3, 5, 0, 1).is_err());
    }

    #[test]
    fn init_std_matches_dimension() {
        // 4 x 25 x 1000 = 10^5 entries with std 1/sqrt(4) = 0.5
        let m = init_model(4, 25, 1000, 5).unwrap();
        let vals: Vec<f64> = m.matrices().iter().flat_map(|w| w.iter().copied()).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert_eq!(vals.len(), 100_000);
        assert!((std - 0.5).abs() < 0.01, "std {std}");
        assert!(mean.abs() < 0.01);
    }

    #[test]
    fn satisfied_margin_leaves_model_alone() {
        let mut m = model(vec![Array2::eye(2) * 3.0]);
        let before = m.clone();
        let ev = sgd_step(&mut m, array![1.0, 1.0].view(), array![1.0, 0.0].view(), array![0.0, 1.0 / 3.0].view(), 0.1).unwrap();
        assert!(!ev.violated);
        assert!(ev.updated.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn shared_matrix_branch() {
        let mut m = model(vec![Array2::zeros((2, 2))]);
        let ev = sgd_step(&mut m, array![1.0, 0.0].view(), array![1.0, 0.0].view(), array![0.0, 1.0].view(), 0.1).unwrap();
        assert_eq!((ev.i_star, ev.j_star), (Some(0), Some(0)));
        assert_eq!(ev.updated, vec![0]);
        assert_eq!(m.matrices()[0], array![[0.1, -0.1], [0.0, 0.0]]);
    }

    #[test]
    fn split_matrix_branch() {
        let mut m = model(vec![array![[0.0, 1.0], [0.0, 0.0]], array![[0.5, 0.0], [0.0, 0.0]]]);
        let ev = sgd_step(&mut m, array![1.0, 0.0].view(), array![1.0, 0.0].view(), array![0.0, 1.0].view(), 0.1).unwrap();
        assert_eq!((ev.i_star, ev.j_star), (Some(0), Some(1)));
        assert_eq!(ev.updated, vec![0, 1]);
        assert_eq!(m.matrices()[0], array![[0.0, 0.9], [0.0, 0.0]]);
        assert_eq!(m.matrices()[1], array![[0.6, 0.0], [0.0, 0.0]]);
    }

    #[test]
    fn step_rejects_bad_input() {
        let mut m = model(vec![Array2::zeros((2, 2))]);
        assert!(sgd_step(&mut m, array![1.0].view(), array![1.0, 0.0].view(), array![0.0, 1.0].view(), 0.1).is_err());
        let err = sgd_step(&mut m, array![f64::NAN, 0.0].view(), array![1.0, 0.0].view(), array![0.0, 1.0].view(), 0.1).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    fn toy() -> (ImageSet, ClassSet) {
        let classes = ClassSet::new(vec!["a".into(), "b".into()], array![[1.0, 0.0], [0.0, 1.0]], "").unwrap();
        let images = ImageSet::new(
            (0..6).map(|i| format!("i{i}")).collect(),
            ["a", "a", "a", "b", "b", "b"].iter().map(|s| s.to_string()).collect(),
            array![[1.0, 0.1], [0.9, -0.2], [1.2, 0.0], [-1.0, 0.2], [-0.8, -0.1], [-1.1, 0.0]],
        )
        .unwrap();
        (images, classes)
    }

    #[test]
    fn separable_toy_reaches_zero_risk() {
        let (images, classes) = toy();
        let config = TrainConfig { k: 1, epochs: 150, eta: 0.1, seed: 3, ..Default::default() };
        let m = train(&config, &images, &classes).unwrap();
        assert_eq!(empirical_risk(&m, &images, &classes).unwrap(), 0.0);
        assert_eq!(m.meta.epochs, 150);
        assert_eq!(m.meta.train_classes, ["a", "b"]);
    }

    #[test]
    fn epoch_accounting_and_determinism() {
        let (images, classes) = toy();
        let start = init_model(2, 2, 3, 4).unwrap();
        let mut a = start.clone();
        let mut b = start.clone();
        let ca = run_epoch(&mut a, &images, &classes, 0.1, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let cb = run_epoch(&mut b, &images, &classes, 0.1, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ca, cb);
        assert!(ca.iter().sum::<u64>() <= images.len() as u64);

        // a model that already separates everything by a wide margin never updates
        let mut perfect = model(vec![Array2::eye(2) * 100.0]);
        let before = perfect.clone();
        let counts = run_epoch(&mut perfect, &images, &classes, 0.1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(counts, vec![0]);
        assert_eq!(perfect, before);
    }

    #[test]
    fn config_validation() {
        let (images, classes) = toy();
        for bad in [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { k: 0, ..Default::default() },
            TrainConfig { eta: 0.0, ..Default::default() },
        ] {
            assert!(train(&bad, &images, &classes).is_err());
        }
        assert_eq!("max-violator".parse::<LossVariant>().unwrap(), LossVariant::MaxViolator);
        assert!("hinge".parse::<LossVariant>().is_err());
    }

    #[test]
    fn max_violator_with_two_classes_matches_sampled() {
        let (images, classes) = toy();
        // one epoch: both variants see the same shuffle and the only possible wrong class
        let config = TrainConfig { k: 2, epochs: 1, eta: 0.05, seed: 9, ..Default::default() };
        let sampled = train(&config, &images, &classes).unwrap();
        let mv = train_max_violator(&config, &images, &classes).unwrap();
        assert_eq!(sampled.matrices(), mv.matrices());
        assert_eq!(mv.meta.loss_variant, LossVariant::MaxViolator);
    }

    #[test]
    fn max_violator_picks_highest_wrong_class() {
        let classes = ClassSet::new(
            vec!["t".into(), "a".into(), "b".into(), "c".into()],
            array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8], [-1.0, 0.0]],
            "",
        )
        .unwrap();
        let m = model(vec![Array2::eye(2)]);
        let x = array![0.5, 1.0];
        let c = max_violator(&m, x.view(), &classes, 0);
        let score = |i: usize| bilinear(x.view(), &m.matrices()[0], classes.row(i));
        for other in 1..4 {
            assert!(score(c) >= score(other));
        }
        assert_eq!(c, 2);
    }

    proptest! {
        #[test]
        fn single_matrix_never_splits(seed: u64, vals in proptest::collection::vec(-1.0f64..1.0, 12)) {
            let mut m = init_model(2, 2, 1, seed).unwrap();
            for chunk in vals.chunks(6) {
                let ev = sgd_step(&mut m, ArrayView1::from(&chunk[0..2]), ArrayView1::from(&chunk[2..4]), ArrayView1::from(&chunk[4..6]), 0.1).unwrap();
                if ev.violated { prop_assert_eq!(ev.i_star, ev.j_star); }
                prop_assert!(ev.updated.len() <= 1);
            }
        }
    }
}
