//! Seeded synthetic multi-label corpora.
//!
//! Every modality gets its own class prototypes, drawn from a standard normal
//! in that modality's feature space. A sample takes one primary class
//! (classes are dealt round-robin, then shuffled), plus each other class
//! independently with probability `multilabel_p`. Its features are the
//! primary prototype plus isotropic Gaussian noise of scale `noise`.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::corpus::{MultiModalCorpus, Pairing, RawCorpus, RawModality};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    /// Samples per modality.
    pub sizes: Vec<usize>,
    /// Feature dimension per modality.
    pub dims: Vec<usize>,
    pub noise: f64,
    pub multilabel_p: f64,
    pub seed: u64,
    /// Share one label draw across modalities so sample `k` is the same
    /// object everywhere. Requires equal sizes.
    pub paired: bool,
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Invalid(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.sizes.len() < 2 {
            return Err(Error::Invalid("need at least 2 modalities".into()));
        }
        if self.sizes.len() != self.dims.len() {
            return Err(Error::Invalid(format!(
                "{} sizes but {} dims",
                self.sizes.len(),
                self.dims.len()
            )));
        }
        if let Some(&n) = self.sizes.iter().find(|&&n| n < self.classes) {
            return Err(Error::Invalid(format!(
                "modality size {n} is smaller than the class count {}",
                self.classes
            )));
        }
        if self.dims.contains(&0) {
            return Err(Error::Invalid("feature dimension must be positive".into()));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Invalid(format!("noise {} must be >= 0", self.noise)));
        }
        if !(0.0..=1.0).contains(&self.multilabel_p) {
            return Err(Error::Invalid(format!(
                "multilabel_p {} is not a probability",
                self.multilabel_p
            )));
        }
        if self.paired && self.sizes.iter().any(|&n| n != self.sizes[0]) {
            return Err(Error::Invalid("paired corpus needs equal sizes".into()));
        }
        Ok(())
    }
}

fn draw_labels(rng: &mut ChaCha8Rng, classes: usize, n: usize, p: f64) -> (Vec<usize>, DMatrix<f64>) {
    let mut primary: Vec<usize> = (0..n).map(|k| k % classes).collect();
    primary.shuffle(rng);
    let mut labels = DMatrix::zeros(classes, n);
    for (k, &cls) in primary.iter().enumerate() {
        for j in 0..classes {
            // Draw for every class, so the stream does not depend on `cls`.
            let extra = rng.random::<f64>() < p;
            if j == cls || extra {
                labels[(j, k)] = 1.0;
            }
        }
    }
    (primary, labels)
}

/// Generates the raw (uncentered) corpus.
pub fn synth_raw(cfg: &SynthConfig) -> Result<RawCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prototypes: Vec<DMatrix<f64>> = cfg
        .dims
        .iter()
        .map(|&d| DMatrix::from_fn(d, cfg.classes, |_, _| rng.sample(StandardNormal)))
        .collect();

    let shared = cfg
        .paired
        .then(|| draw_labels(&mut rng, cfg.classes, cfg.sizes[0], cfg.multilabel_p));

    let mut modalities = Vec::with_capacity(cfg.sizes.len());
    for (i, (&n, &d)) in cfg.sizes.iter().zip(&cfg.dims).enumerate() {
        let (primary, labels) = match &shared {
            Some(drawn) => drawn.clone(),
            None => draw_labels(&mut rng, cfg.classes, n, cfg.multilabel_p),
        };
        let mut x = DMatrix::zeros(d, n);
        for (k, &cls) in primary.iter().enumerate() {
            for f in 0..d {
                let eps: f64 = rng.sample(StandardNormal);
                x[(f, k)] = prototypes[i][(f, cls)] + cfg.noise * eps;
            }
        }
        modalities.push(RawModality::new(x, labels)?);
    }
    let pairing = if cfg.paired {
        Pairing::Paired
    } else {
        Pairing::Unpaired
    };
    RawCorpus::new(modalities, pairing)
}

/// Generates a centered training corpus.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<MultiModalCorpus> {
    synth_raw(cfg)?.center()
}

/// Generates `cfg.sizes[i] + queries` samples per modality from the same
/// prototypes and splits off the last `queries` columns as a held-out query
/// corpus.
pub fn synth_with_queries(cfg: &SynthConfig, queries: usize) -> Result<(RawCorpus, RawCorpus)> {
    cfg.validate()?;
    if queries == 0 {
        return Err(Error::Invalid("query count must be positive".into()));
    }
    let mut full_cfg = cfg.clone();
    full_cfg.sizes = cfg.sizes.iter().map(|n| n + queries).collect();
    let full = synth_raw(&full_cfg)?;

    let mut train = Vec::new();
    let mut query = Vec::new();
    for (m, &n) in full.modalities.iter().zip(&cfg.sizes) {
        let x = m.features.values();
        let l = m.labels.values();
        let total = x.ncols();
        train.push(RawModality::new(
            x.columns(0, n).into_owned(),
            l.columns(0, n).into_owned(),
        )?);
        query.push(RawModality::new(
            x.columns(n, total - n).into_owned(),
            l.columns(n, total - n).into_owned(),
        )?);
    }
    Ok((
        RawCorpus::new(train, full.pairing)?,
        RawCorpus::new(query, full.pairing)?,
    ))
}
