//! Embedding datasets: parsing, validation, normalization, splits and fusion.
//!
//! File formats (UTF-8, comma separated, `.` decimal point, no header):
//!
//! * image features: `image_id,class_id,v1,...,v_dx`
//! * class embeddings: `class_id,v1,...,v_dy`
//! * split: `[train]`, `[val]`, `[test]` sections with one class ID per line

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, Error, Result};

/// Floor applied to per-dimension standard deviations.
pub const EPSILON_FLOOR: f64 = 1e-8;

/// Image feature vectors with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    ids: Vec<String>,
    labels: Vec<String>,
    features: Array2<f64>,
}

impl ImageSet {
    pub fn new(ids: Vec<String>, labels: Vec<String>, features: Array2<f64>) -> Result<Self> {
        if ids.len() != labels.len() || ids.len() != features.nrows() {
            return Err(Error::validation(format!(
                "image set has {} ids, {} labels and {} feature rows",
                ids.len(),
                labels.len(),
                features.nrows()
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::validation(format!("duplicate image {id}")));
            }
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image features".into()));
        }
        Ok(ImageSet {
            ids,
            labels,
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn row(&self, n: usize) -> ArrayView1<'_, f64> {
        self.features.row(n)
    }

    /// Images whose label is in `classes`, in original order.
    pub fn filter_classes<S: AsRef<str>>(&self, classes: &[S]) -> ImageSet {
        let keep: HashSet<&str> = classes.iter().map(AsRef::as_ref).collect();
        let rows: Vec<usize> = (0..self.len())
            .filter(|&n| keep.contains(self.labels[n].as_str()))
            .collect();
        ImageSet {
            ids: rows.iter().map(|&n| self.ids[n].clone()).collect(),
            labels: rows.iter().map(|&n| self.labels[n].clone()).collect(),
            features: self.features.select(Axis(0), &rows),
        }
    }

    /// Every label must name a class in `classes`.
    pub fn check_labels(&self, classes: &ClassSet) -> Result<()> {
        match self.labels.iter().find(|l| classes.index_of(l).is_none()) {
            Some(l) => Err(Error::validation(format!("label {l} not in class set"))),
            None => Ok(()),
        }
    }

    /// Label of every image as an index into `classes`.
    pub fn label_indices(&self, classes: &ClassSet) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .map(|l| {
                classes
                    .index_of(l)
                    .ok_or_else(|| Error::validation(format!("label {l} not in class set")))
            })
            .collect()
    }
}

/// Class embedding vectors keyed by class ID. Row order is file order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSet {
    class_ids: Vec<String>,
    embeddings: Array2<f64>,
    source_tag: String,
    index: HashMap<String, usize>,
}

impl ClassSet {
    pub fn new(class_ids: Vec<String>, embeddings: Array2<f64>, source_tag: &str) -> Result<Self> {
        if class_ids.len() != embeddings.nrows() {
            return Err(Error::validation(format!(
                "class set has {} ids and {} rows",
                class_ids.len(),
                embeddings.nrows()
            )));
        }
        let mut index = HashMap::with_capacity(class_ids.len());
        for (i, id) in class_ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::validation(format!("duplicate class {id}")));
            }
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("class embeddings".into()));
        }
        Ok(ClassSet {
            class_ids,
            embeddings,
            source_tag: source_tag.to_string(),
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn ids(&self) -> &[String] {
        &self.class_ids
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    pub fn with_source_tag(mut self, tag: &str) -> Self {
        self.source_tag = tag.to_string();
        self
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.embeddings.row(i)
    }

    pub fn embedding(&self, id: &str) -> Option<ArrayView1<'_, f64>> {
        self.index_of(id).map(|i| self.embeddings.row(i))
    }

    /// Restrict to `ids`, keeping this set's row order. Unknown IDs are an error.
    pub fn subset<S: AsRef<str>>(&self, ids: &[S]) -> Result<ClassSet> {
        let wanted: HashSet<&str> = ids.iter().map(AsRef::as_ref).collect();
        if let Some(missing) = wanted.iter().find(|id| self.index_of(id).is_none()) {
            return Err(Error::validation(format!("class {missing} not in class set")));
        }
        let rows: Vec<usize> = (0..self.len())
            .filter(|&i| wanted.contains(self.class_ids[i].as_str()))
            .collect();
        ClassSet::new(
            rows.iter().map(|&i| self.class_ids[i].clone()).collect(),
            self.embeddings.select(Axis(0), &rows),
            &self.source_tag,
        )
    }
}

/// Disjoint train/val/test class partitions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ZeroShotSplit {
    pub train_classes: Vec<String>,
    pub val_classes: Vec<String>,
    pub test_classes: Vec<String>,
}

impl ZeroShotSplit {
    /// Validates disjointness and that train and test are non-empty. `val` may be empty.
    pub fn new(train: Vec<String>, val: Vec<String>, test: Vec<String>) -> Result<Self> {
        let mut owner: HashMap<&str, &str> = HashMap::new();
        for (name, part) in [("train", &train), ("val", &val), ("test", &test)] {
            for id in part.iter() {
                if let Some(prev) = owner.insert(id.as_str(), name) {
                    return Err(if prev == name {
                        Error::validation(format!("duplicate class {id} in {name} partition"))
                    } else {
                        Error::validation(format!(
                            "overlapping partitions: class {id} in {prev} and {name}"
                        ))
                    });
                }
            }
        }
        if train.is_empty() {
            return Err(Error::validation("empty train partition"));
        }
        if test.is_empty() {
            return Err(Error::validation("empty test partition"));
        }
        Ok(ZeroShotSplit {
            train_classes: train,
            val_classes: val,
            test_classes: test,
        })
    }

    /// Train and val classes together, train first.
    pub fn trainval_classes(&self) -> Vec<String> {
        self.train_classes
            .iter()
            .chain(&self.val_classes)
            .cloned()
            .collect()
    }

    pub fn require_val(&self) -> Result<()> {
        if self.val_classes.is_empty() {
            Err(Error::validation("empty val partition"))
        } else {
            Ok(())
        }
    }
}

/// Per-dimension z-score statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl NormStats {
    /// Zero mean, unit std: normalization is a no-op.
    pub fn identity(dim: usize) -> Self {
        NormStats {
            mean: Array1::zeros(dim),
            std: Array1::ones(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_row(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        (&x - &self.mean) / &self.std
    }
}

fn parse_value(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok
        .trim()
        .parse()
        .map_err(|_| Error::format(line, format!("non-numeric token {:?}", tok.trim())))?;
    if !v.is_finite() {
        return Err(Error::format(line, format!("non-finite value {:?}", tok.trim())));
    }
    Ok(v)
}

/// Non-blank lines with their 1-based line numbers.
fn numbered_lines<R: BufRead>(reader: R) -> impl Iterator<Item = Result<(usize, String)>> {
    reader
        .lines()
        .enumerate()
        .map(|(i, l)| {
            l.map(|s| (i + 1, s))
                .map_err(|e| Error::io("<stream>", e))
        })
        .filter(|r| !matches!(r, Ok((_, s)) if s.trim().is_empty()))
}

/// Parse `id,[label,]v1,...` rows. `prefix` is the number of leading string fields.
fn parse_rows<R: BufRead>(
    reader: R,
    prefix: usize,
) -> Result<(Vec<Vec<String>>, Array2<f64>)> {
    let mut keys: Vec<Vec<String>> = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    let mut dim: Option<usize> = None;
    for item in numbered_lines(reader) {
        let (line, text) = item?;
        let fields: Vec<&str> = text.trim_end_matches('\r').split(',').collect();
        if fields.len() <= prefix {
            return Err(Error::format(line, "row has no values"));
        }
        let d = fields.len() - prefix;
        match dim {
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err(Error::format(
                    line,
                    format!("ragged row: expected {expected} values, found {d}"),
                ))
            }
            _ => {}
        }
        let mut key = Vec::with_capacity(prefix);
        for f in &fields[..prefix] {
            let f = f.trim();
            if f.is_empty() {
                return Err(Error::format(line, "empty identifier"));
            }
            key.push(f.to_string());
        }
        keys.push(key);
        for tok in &fields[prefix..] {
            values.push(parse_value(tok, line)?);
        }
    }
    let dim = dim.ok_or_else(|| Error::validation("no rows"))?;
    let features = Array2::from_shape_vec((keys.len(), dim), values)
        .expect("row count and dimension were checked while parsing");
    Ok((keys, features))
}

pub fn parse_image_features<R: BufRead>(reader: R) -> Result<ImageSet> {
    let (keys, features) = parse_rows(reader, 2)?;
    let (ids, labels) = keys
        .into_iter()
        .map(|mut k| {
            let label = k.pop().unwrap();
            (k.pop().unwrap(), label)
        })
        .unzip();
    ImageSet::new(ids, labels, features)
}

pub fn parse_class_embeddings<R: BufRead>(reader: R) -> Result<ClassSet> {
    let (keys, embeddings) = parse_rows(reader, 1)?;
    let ids = keys.into_iter().map(|mut k| k.pop().unwrap()).collect();
    ClassSet::new(ids, embeddings, "")
}

pub fn parse_split<R: BufRead>(reader: R) -> Result<ZeroShotSplit> {
    let mut parts: [Vec<String>; 3] = Default::default();
    let mut current: Option<usize> = None;
    for item in numbered_lines(reader) {
        let (line, text) = item?;
        let text = text.trim();
        if let Some(name) = text.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            current = Some(match name.trim() {
                "train" => 0,
                "val" => 1,
                "test" => 2,
                other => return Err(Error::format(line, format!("unknown section [{other}]"))),
            });
        } else {
            let part = current
                .ok_or_else(|| Error::format(line, "class ID outside of any section"))?;
            parts[part].push(text.to_string());
        }
    }
    let [train, val, test] = parts;
    ZeroShotSplit::new(train, val, test)
}

fn write_row(out: &mut String, keys: &[&str], values: ArrayView1<'_, f64>) {
    for k in keys {
        out.push_str(k);
        out.push(',');
    }
    for (j, v) in values.iter().enumerate() {
        if j > 0 {
            out.push(',');
        }
        // Display for f64 is the shortest string that parses back to the same value.
        let _ = write!(out, "{v}");
    }
    out.push('\n');
}

pub fn image_features_to_string(images: &ImageSet) -> String {
    let mut out = String::new();
    for n in 0..images.len() {
        write_row(
            &mut out,
            &[&images.ids[n], &images.labels[n]],
            images.features.row(n),
        );
    }
    out
}

pub fn class_embeddings_to_string(classes: &ClassSet) -> String {
    let mut out = String::new();
    for i in 0..classes.len() {
        write_row(&mut out, &[&classes.class_ids[i]], classes.embeddings.row(i));
    }
    out
}

pub fn split_to_string(split: &ZeroShotSplit) -> String {
    let mut out = String::new();
    for (name, part) in [
        ("train", &split.train_classes),
        ("val", &split.val_classes),
        ("test", &split.test_classes),
    ] {
        let _ = writeln!(out, "[{name}]");
        for id in part {
            let _ = writeln!(out, "{id}");
        }
    }
    out
}

pub fn write_image_features<W: Write>(mut w: W, images: &ImageSet) -> std::io::Result<()> {
    w.write_all(image_features_to_string(images).as_bytes())
}

pub fn write_class_embeddings<W: Write>(mut w: W, classes: &ClassSet) -> std::io::Result<()> {
    w.write_all(class_embeddings_to_string(classes).as_bytes())
}

pub fn write_split<W: Write>(mut w: W, split: &ZeroShotSplit) -> std::io::Result<()> {
    w.write_all(split_to_string(split).as_bytes())
}

/// Population mean and std over images labelled with one of `train_classes`.
pub fn fit_zscore<S: AsRef<str>>(images: &ImageSet, train_classes: &[S]) -> Result<NormStats> {
    let train = images.filter_classes(train_classes);
    if train.len() < 2 {
        return Err(Error::validation(format!(
            "z-score needs at least 2 training images, found {}",
            train.len()
        )));
    }
    let n = train.len() as f64;
    let mean = train.features.sum_axis(Axis(0)) / n;
    let mut var = Array1::<f64>::zeros(train.dim());
    for row in train.features.rows() {
        for ((acc, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            *acc += (v - m) * (v - m);
        }
    }
    let std = var.mapv(|s| (s / n).sqrt().max(EPSILON_FLOOR));
    Ok(NormStats { mean, std })
}

pub fn apply_zscore(images: &ImageSet, stats: &NormStats) -> Result<ImageSet> {
    check_dim(stats.dim(), images.dim())?;
    let features = (&images.features - &stats.mean) / &stats.std;
    Ok(ImageSet {
        ids: images.ids.clone(),
        labels: images.labels.clone(),
        features,
    })
}

pub fn l2_normalize_classes(classes: &ClassSet) -> Result<ClassSet> {
    let mut embeddings = classes.embeddings.clone();
    for (i, mut row) in embeddings.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::validation(format!(
                "class {} has a zero embedding",
                classes.class_ids[i]
            )));
        }
        row /= norm;
    }
    Ok(ClassSet {
        embeddings,
        ..classes.clone()
    })
}

/// Seeded random class partitions with fixed partition sizes.
pub fn make_random_splits(
    classes: &ClassSet,
    counts: (usize, usize, usize),
    seed: u64,
    n_splits: usize,
) -> Result<Vec<ZeroShotSplit>> {
    let (n_train, n_val, n_test) = counts;
    if n_train + n_val + n_test > classes.len() {
        return Err(Error::validation(format!(
            "split counts {n_train}+{n_val}+{n_test} exceed {} classes",
            classes.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = classes.class_ids.clone();
    (0..n_splits)
        .map(|_| {
            ids.shuffle(&mut rng);
            ZeroShotSplit::new(
                ids[..n_train].to_vec(),
                ids[n_train..n_train + n_val].to_vec(),
                ids[n_train + n_val..n_train + n_val + n_test].to_vec(),
            )
        })
        .collect()
}

/// Concatenate per-class embeddings from several sources, in source order.
/// Inputs are expected to be individually l2-normalized; the result is not renormalized.
pub fn fuse_early(sources: &[ClassSet]) -> Result<ClassSet> {
    let first = sources
        .first()
        .ok_or_else(|| Error::validation("no class embedding sources to fuse"))?;
    for s in &sources[1..] {
        let same = s.len() == first.len() && first.class_ids.iter().all(|id| s.index_of(id).is_some());
        if !same {
            let missing = first
                .class_ids
                .iter()
                .find(|id| s.index_of(id).is_none())
                .or_else(|| s.class_ids.iter().find(|id| first.index_of(id).is_none()));
            return Err(Error::validation(format!(
                "class sets differ between sources {} and {} (class {})",
                first.source_tag,
                s.source_tag,
                missing.map(String::as_str).unwrap_or("?")
            )));
        }
    }
    let total: usize = sources.iter().map(ClassSet::dim).sum();
    let mut embeddings = Array2::<f64>::zeros((first.len(), total));
    for (i, id) in first.class_ids.iter().enumerate() {
        let mut col = 0;
        for s in sources {
            let src = s.embedding(id).expect("class sets checked above");
            embeddings
                .row_mut(i)
                .slice_mut(ndarray::s![col..col + s.dim()])
                .assign(&src);
            col += s.dim();
        }
    }
    let tag = sources
        .iter()
        .map(ClassSet::source_tag)
        .collect::<Vec<_>>()
        .join("+");
    ClassSet::new(first.class_ids.clone(), embeddings, &tag)
}
