//! Matrices, datasets and corpora.
//!
//! All matrices are stored features-by-samples: column `k` is sample `k`.

pub mod corpus;
pub mod dmt;
pub mod synth;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub use corpus::{MultiModalCorpus, Pairing, RawCorpus, RawModality};
pub use dmt::{load_matrix, store_matrix};
pub use synth::{synth_corpus, synth_raw, synth_with_queries, SynthConfig};

/// Dense `d × n` real feature matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix(DMatrix<f64>);

impl FeatureMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::Invalid(format!(
                "feature matrix must be non-empty, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn samples(&self) -> usize {
        self.0.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }
}

/// Binary `c × n` label matrix; every sample carries at least one label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix(DMatrix<f64>);

impl LabelMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(Error::Invalid("label matrix has no classes".into()));
        }
        if let Some(v) = values.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Invalid(format!("label entry {v} is not 0 or 1")));
        }
        for (k, col) in values.column_iter().enumerate() {
            if col.iter().all(|&v| v == 0.0) {
                return Err(Error::Invalid(format!("sample {k} has no label")));
            }
        }
        Ok(Self(values))
    }

    pub fn classes(&self) -> usize {
        self.0.nrows()
    }

    pub fn samples(&self) -> usize {
        self.0.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Labels scaled so every column has unit Euclidean norm.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedLabelMatrix(DMatrix<f64>);

impl NormalizedLabelMatrix {
    pub fn values(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// `+1` where the sample carries the label, `-1` elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexMatrix(DMatrix<f64>);

impl IndexMatrix {
    pub fn values(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// One modality's training data. Features are stored centered; the removed
/// mean is kept for centering queries later.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityDataset {
    features: FeatureMatrix,
    labels: LabelMatrix,
    centering_mean: DVector<f64>,
}

impl ModalityDataset {
    /// Centers `features` and pairs them with `labels`.
    pub fn from_raw(features: FeatureMatrix, labels: LabelMatrix) -> Result<Self> {
        if features.samples() != labels.samples() {
            return Err(Error::Shape(format!(
                "{} feature columns but {} label columns",
                features.samples(),
                labels.samples()
            )));
        }
        let (features, centering_mean) = zero_center(&features);
        Ok(Self {
            features,
            labels,
            centering_mean,
        })
    }

    pub fn features(&self) -> &FeatureMatrix {
        &self.features
    }

    pub fn labels(&self) -> &LabelMatrix {
        &self.labels
    }

    pub fn centering_mean(&self) -> &DVector<f64> {
        &self.centering_mean
    }

    pub fn samples(&self) -> usize {
        self.features.samples()
    }

    pub fn dim(&self) -> usize {
        self.features.dim()
    }

    /// Features with the centering mean added back.
    pub fn raw_features(&self) -> DMatrix<f64> {
        let mut x = self.features.values().clone();
        for mut col in x.column_iter_mut() {
            col += &self.centering_mean;
        }
        x
    }

    pub(crate) fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            features: FeatureMatrix(self.features.values().select_columns(perm)),
            labels: LabelMatrix(self.labels.values().select_columns(perm)),
            centering_mean: self.centering_mean.clone(),
        }
    }
}

/// Row means of `x` (the mean sample).
pub fn sample_mean(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.ncols() as f64;
    x.column_sum() / n
}

/// Subtracts the mean sample from every column.
pub fn zero_center(x: &FeatureMatrix) -> (FeatureMatrix, DVector<f64>) {
    let mean = sample_mean(x.values());
    let mut centered = x.values().clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    (FeatureMatrix(centered), mean)
}

pub fn normalize_labels(labels: &LabelMatrix) -> NormalizedLabelMatrix {
    let mut out = labels.values().clone();
    for mut col in out.column_iter_mut() {
        let norm = col.norm();
        col /= norm;
    }
    NormalizedLabelMatrix(out)
}

/// Cosine similarity of two label columns.
pub fn cosine_similarity(lu: &[f64], lk: &[f64]) -> Result<f64> {
    if lu.len() != lk.len() {
        return Err(Error::Shape(format!(
            "label columns of length {} and {}",
            lu.len(),
            lk.len()
        )));
    }
    let nu = lu.iter().map(|v| v * v).sum::<f64>();
    let nk = lk.iter().map(|v| v * v).sum::<f64>();
    if nu == 0.0 || nk == 0.0 {
        return Err(Error::Invalid("zero label column".into()));
    }
    let dot: f64 = lu.iter().zip(lk).map(|(a, b)| a * b).sum();
    Ok(dot / (nu * nk).sqrt())
}

pub fn index_matrix(labels: &LabelMatrix) -> IndexMatrix {
    IndexMatrix(labels.values().map(|v| if v == 1.0 { 1.0 } else { -1.0 }))
}
