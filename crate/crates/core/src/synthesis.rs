//! Synthetic datasets with planted piecewise-linear structure.
//!
//! Every image is generated from its class embedding by one of `k_star` hidden
//! linear maps, `x = A_g y + noise`, with `g` drawn per image. The maps have
//! orthogonal columns of equal length `sqrt(d_x)`, so `‖A_g y‖` is the same for
//! every unit class vector and the nearest-generator rule
//! `argmin_c min_g ‖x − A_g y_c‖` coincides with the latent bilinear rule
//! `argmax_c max_g xᵀ A_g y_c`. That makes the generating maps a ground-truth
//! latent model.

use std::fmt::Write as _;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{ClassSet, ImageSet, NormStats, ZeroShotSplit};
use crate::error::{check_dim, Error, Result};
use crate::evaluation::per_class_top1;
use crate::model::{LatentModel, ModelMeta};
use crate::pipeline::ZeroShotData;

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSpec {
    pub k_star: usize,
    pub d_x: usize,
    pub d_y: usize,
    /// Seen classes, including the val carve-out.
    pub n_train_classes: usize,
    /// Taken out of the seen classes for model selection.
    pub n_val_classes: usize,
    pub n_test_classes: usize,
    pub images_per_class: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        PlantedSpec {
            k_star: 4,
            d_x: 16,
            d_y: 8,
            n_train_classes: 40,
            n_val_classes: 10,
            n_test_classes: 10,
            images_per_class: 50,
            noise_sigma: 0.5,
            seed: 0,
        }
    }
}

impl PlantedSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.k_star == 0 {
            return bad("k_star must be ≥1");
        }
        if self.d_x == 0 || self.d_y == 0 {
            return bad("dimensions must be ≥1");
        }
        if self.d_x < self.d_y {
            return bad("d_x must be at least d_y for orthogonal generator maps");
        }
        if self.n_train_classes <= self.n_val_classes {
            return bad("val classes must leave at least one train class");
        }
        if self.n_test_classes == 0 || self.images_per_class == 0 {
            return bad("class and image counts must be ≥1");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise sigma must be a finite value ≥0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedTruth {
    /// Generator maps, each `d_x × d_y`.
    pub maps: Vec<Array2<f64>>,
    pub image_ids: Vec<String>,
    /// Generator index of each image, aligned with `image_ids`.
    pub assignment: Vec<usize>,
}

impl PlantedTruth {
    /// The generator maps as a latent model with identity normalization.
    pub fn to_model(&self, train_classes: &[String]) -> Result<LatentModel> {
        let mut meta = ModelMeta::new(self.maps.len());
        meta.train_classes = train_classes.to_vec();
        LatentModel::new(self.maps.clone(), NormStats::identity(self.maps[0].nrows()), meta)
    }

    pub fn assignment_of(&self, image_id: &str) -> Option<usize> {
        self.image_ids
            .iter()
            .position(|id| id == image_id)
            .map(|n| self.assignment[n])
    }
}

#[derive(Debug, Clone)]
pub struct PlantedDataset {
    pub images: ImageSet,
    pub classes: ClassSet,
    pub split: ZeroShotSplit,
    pub truth: PlantedTruth,
}

impl PlantedDataset {
    pub fn zero_shot_data(&self) -> ZeroShotData {
        ZeroShotData {
            images: self.images.clone(),
            classes: self.classes.clone(),
            split: self.split.clone(),
        }
    }
}

fn gaussian_vec(n: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || rng.sample(StandardNormal))
}

/// Gaussian draw with its columns orthonormalized (modified Gram-Schmidt) and scaled.
fn orthogonal_map(d_x: usize, d_y: usize, scale: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut map = Array2::<f64>::zeros((d_x, d_y));
    let mut j = 0;
    while j < d_y {
        let mut v = gaussian_vec(d_x, rng);
        for p in 0..j {
            let q = map.column(p);
            let proj = q.dot(&v);
            v.scaled_add(-proj, &q);
        }
        let norm = v.dot(&v).sqrt();
        if norm < 1e-8 {
            continue;
        }
        map.column_mut(j).assign(&(v / norm));
        j += 1;
    }
    map * scale
}

pub fn generate_planted(spec: &PlantedSpec) -> Result<PlantedDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_classes = spec.n_train_classes + spec.n_test_classes;

    let mut embeddings = Array2::<f64>::zeros((n_classes, spec.d_y));
    for mut row in embeddings.rows_mut() {
        loop {
            let v = gaussian_vec(spec.d_y, &mut rng);
            let norm = v.dot(&v).sqrt();
            if norm > 1e-8 {
                row.assign(&(v / norm));
                break;
            }
        }
    }
    let class_ids: Vec<String> = (0..n_classes).map(|c| format!("c{c:03}")).collect();

    let scale = (spec.d_x as f64).sqrt();
    let maps: Vec<Array2<f64>> = (0..spec.k_star)
        .map(|_| orthogonal_map(spec.d_x, spec.d_y, scale, &mut rng))
        .collect();

    let n_images = n_classes * spec.images_per_class;
    let mut features = Array2::<f64>::zeros((n_images, spec.d_x));
    let mut ids = Vec::with_capacity(n_images);
    let mut labels = Vec::with_capacity(n_images);
    let mut assignment = Vec::with_capacity(n_images);
    for c in 0..n_classes {
        let y = embeddings.row(c);
        for _ in 0..spec.images_per_class {
            let n = ids.len();
            let g = rng.random_range(0..spec.k_star);
            let noise = gaussian_vec(spec.d_x, &mut rng) * spec.noise_sigma;
            features.row_mut(n).assign(&(maps[g].dot(&y) + noise));
            ids.push(format!("img{n:05}"));
            labels.push(class_ids[c].clone());
            assignment.push(g);
        }
    }

    let n_fit = spec.n_train_classes - spec.n_val_classes;
    let split = ZeroShotSplit::new(
        class_ids[..n_fit].to_vec(),
        class_ids[n_fit..spec.n_train_classes].to_vec(),
        class_ids[spec.n_train_classes..].to_vec(),
    )?;
    Ok(PlantedDataset {
        images: ImageSet::new(ids.clone(), labels, features)?,
        classes: ClassSet::new(class_ids, embeddings, "planted")?,
        split,
        truth: PlantedTruth {
            maps,
            image_ids: ids,
            assignment,
        },
    })
}

/// Nearest-generator classification of raw images among `test_classes`,
/// scored as average per-class top-1. Class ties go to the earlier class.
pub fn oracle_accuracy(
    truth: &PlantedTruth,
    test_images: &ImageSet,
    test_classes: &ClassSet,
) -> Result<f64> {
    check_dim(truth.maps[0].nrows(), test_images.dim())?;
    check_dim(truth.maps[0].ncols(), test_classes.dim())?;
    // reconstructions[c][g] = A_g y_c
    let recon: Vec<Vec<Array1<f64>>> = (0..test_classes.len())
        .map(|c| truth.maps.iter().map(|a| a.dot(&test_classes.row(c))).collect())
        .collect();
    let predictions: Vec<&str> = (0..test_images.len())
        .map(|n| {
            let x = test_images.row(n);
            let mut best = (0, f64::INFINITY);
            for (c, per_map) in recon.iter().enumerate() {
                let d = per_map
                    .iter()
                    .map(|r| (&x - r).mapv(|v| v * v).sum())
                    .fold(f64::INFINITY, f64::min);
                if d < best.1 {
                    best = (c, d);
                }
            }
            test_classes.ids()[best.0].as_str()
        })
        .collect();
    let labels: Vec<&str> = test_images.labels().iter().map(String::as_str).collect();
    let ids: Vec<&str> = test_classes.ids().iter().map(String::as_str).collect();
    per_class_top1(&predictions, &labels, &ids)
}

pub fn truth_csv(truth: &PlantedTruth) -> String {
    let mut out = String::from("image_id,planted_index\n");
    for (id, g) in truth.image_ids.iter().zip(&truth.assignment) {
        let _ = writeln!(out, "{id},{g}");
    }
    out
}
