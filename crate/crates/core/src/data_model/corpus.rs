//! Multi-modal corpora and their on-disk directory layout.
//!
//! ```text
//! corpus.kv      modalities=<m>, paired=<true|false>
//! m1/X.dmt       raw features, d1 × n1
//! m1/L.dmt       labels, c × n1
//! m2/...
//! ```

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{dmt, FeatureMatrix, LabelMatrix, ModalityDataset};
use crate::error::{Error, Result};
use crate::kv::KeyValues;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pairing {
    /// Sample `k` of every modality describes the same object.
    Paired,
    /// No cross-modal alignment; sizes may differ.
    Unpaired,
}

impl Pairing {
    pub fn is_paired(self) -> bool {
        self == Pairing::Paired
    }
}

/// Uncentered modality data as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawModality {
    pub features: FeatureMatrix,
    pub labels: LabelMatrix,
}

impl RawModality {
    pub fn new(features: DMatrix<f64>, labels: DMatrix<f64>) -> Result<Self> {
        let features = FeatureMatrix::new(features)?;
        let labels = LabelMatrix::new(labels)?;
        if features.samples() != labels.samples() {
            return Err(Error::Shape(format!(
                "{} feature columns but {} label columns",
                features.samples(),
                labels.samples()
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn samples(&self) -> usize {
        self.features.samples()
    }
}

fn check_modalities<'a>(
    pairing: Pairing,
    mut shapes: impl ExactSizeIterator<Item = (usize, usize)> + 'a,
) -> Result<()> {
    let m = shapes.len();
    if m < 2 {
        return Err(Error::Invalid(format!("a corpus needs at least 2 modalities, got {m}")));
    }
    let (n0, c0) = shapes.next().expect("non-empty");
    for (i, (n, c)) in shapes.enumerate() {
        if c != c0 {
            return Err(Error::Shape(format!(
                "modality {} has {c} classes, modality 1 has {c0}",
                i + 2
            )));
        }
        if pairing.is_paired() && n != n0 {
            return Err(Error::Shape(format!(
                "paired corpus but modality {} has {n} samples, modality 1 has {n0}",
                i + 2
            )));
        }
    }
    Ok(())
}

fn permutations(sizes: &[usize], seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sizes
        .iter()
        .map(|&n| {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            perm
        })
        .collect()
}

/// Raw (uncentered) corpus, the unit of corpus I/O.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCorpus {
    pub modalities: Vec<RawModality>,
    pub pairing: Pairing,
}

impl RawCorpus {
    pub fn new(modalities: Vec<RawModality>, pairing: Pairing) -> Result<Self> {
        check_modalities(
            pairing,
            modalities.iter().map(|m| (m.samples(), m.labels.classes())),
        )?;
        Ok(Self {
            modalities,
            pairing,
        })
    }

    pub fn classes(&self) -> usize {
        self.modalities[0].labels.classes()
    }

    /// Centers every modality, giving the training view.
    pub fn center(&self) -> Result<MultiModalCorpus> {
        let modalities = self
            .modalities
            .iter()
            .map(|m| ModalityDataset::from_raw(m.features.clone(), m.labels.clone()))
            .collect::<Result<Vec<_>>>()?;
        MultiModalCorpus::new(modalities, self.pairing)
    }

    /// Independently permutes each modality's samples; see
    /// [`MultiModalCorpus::shuffle_unpaired`].
    pub fn shuffle_unpaired(&self, seed: u64) -> RawCorpus {
        let sizes: Vec<usize> = self.modalities.iter().map(RawModality::samples).collect();
        let modalities = self
            .modalities
            .iter()
            .zip(permutations(&sizes, seed))
            .map(|(m, perm)| RawModality {
                features: FeatureMatrix(m.features.values().select_columns(&perm)),
                labels: LabelMatrix(m.labels.values().select_columns(&perm)),
            })
            .collect();
        RawCorpus {
            modalities,
            pairing: Pairing::Unpaired,
        }
    }

    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for (i, m) in self.modalities.iter().enumerate() {
            let sub = dir.join(format!("m{}", i + 1));
            fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            dmt::store_matrix(sub.join("X.dmt"), m.features.values())?;
            dmt::store_matrix(sub.join("L.dmt"), m.labels.values())?;
        }
        let mut kv = KeyValues::new();
        kv.set("modalities", self.modalities.len());
        kv.set("paired", self.pairing.is_paired());
        kv.store(dir.join("corpus.kv"))
    }

    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let kv = KeyValues::load(dir.join("corpus.kv"))?;
        let m: usize = kv.parse_value("modalities")?;
        let paired: bool = kv.parse_value("paired")?;
        let modalities = (1..=m)
            .map(|i| {
                let sub = dir.join(format!("m{i}"));
                RawModality::new(
                    dmt::load_matrix(sub.join("X.dmt"))?,
                    dmt::load_matrix(sub.join("L.dmt"))?,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let pairing = if paired {
            Pairing::Paired
        } else {
            Pairing::Unpaired
        };
        Self::new(modalities, pairing)
    }
}

/// Centered multi-modal training corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalCorpus {
    modalities: Vec<ModalityDataset>,
    pairing: Pairing,
}

impl MultiModalCorpus {
    pub fn new(modalities: Vec<ModalityDataset>, pairing: Pairing) -> Result<Self> {
        check_modalities(
            pairing,
            modalities.iter().map(|m| (m.samples(), m.labels().classes())),
        )?;
        Ok(Self {
            modalities,
            pairing,
        })
    }

    pub fn modalities(&self) -> &[ModalityDataset] {
        &self.modalities
    }

    pub fn modality(&self, i: usize) -> Result<&ModalityDataset> {
        self.modalities.get(i).ok_or(Error::UnknownModality(i))
    }

    pub fn pairing(&self) -> Pairing {
        self.pairing
    }

    pub fn classes(&self) -> usize {
        self.modalities[0].labels().classes()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.modalities.iter().map(ModalityDataset::samples).collect()
    }

    /// Permutes each modality's columns with an independent seeded
    /// permutation, moving features and labels together, and marks the
    /// corpus unpaired.
    pub fn shuffle_unpaired(&self, seed: u64) -> MultiModalCorpus {
        let modalities = self
            .modalities
            .iter()
            .zip(permutations(&self.sizes(), seed))
            .map(|(m, perm)| m.permuted(&perm))
            .collect();
        MultiModalCorpus {
            modalities,
            pairing: Pairing::Unpaired,
        }
    }

    /// Rebuilds the raw corpus by adding each modality's mean back.
    pub fn to_raw(&self) -> RawCorpus {
        RawCorpus {
            modalities: self
                .modalities
                .iter()
                .map(|m| RawModality {
                    features: FeatureMatrix(m.raw_features()),
                    labels: m.labels().clone(),
                })
                .collect(),
            pairing: self.pairing,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{synth_corpus, SynthConfig};

    fn small() -> MultiModalCorpus {
        synth_corpus(&SynthConfig {
            classes: 3,
            sizes: vec![12, 12],
            dims: vec![4, 5],
            noise: 0.5,
            multilabel_p: 0.2,
            seed: 11,
            paired: true,
        })
        .unwrap()
    }

    fn column_pairs(m: &ModalityDataset) -> Vec<Vec<u64>> {
        let mut pairs: Vec<Vec<u64>> = (0..m.samples())
            .map(|k| {
                m.features()
                    .values()
                    .column(k)
                    .iter()
                    .chain(m.labels().values().column(k).iter())
                    .map(|v| v.to_bits())
                    .collect()
            })
            .collect();
        pairs.sort();
        pairs
    }

    #[test]
    fn shuffle_preserves_feature_label_pairs() {
        let corpus = small();
        let shuffled = corpus.shuffle_unpaired(5);
        assert_eq!(shuffled.pairing(), Pairing::Unpaired);
        for (a, b) in corpus.modalities().iter().zip(shuffled.modalities()) {
            assert_eq!(column_pairs(a), column_pairs(b));
        }
        assert_ne!(corpus.modalities()[0], shuffled.modalities()[0]);
    }

    #[test]
    fn shuffle_is_deterministic() {
        let corpus = small();
        assert_eq!(corpus.shuffle_unpaired(9), corpus.shuffle_unpaired(9));
        assert_ne!(corpus.shuffle_unpaired(9), corpus.shuffle_unpaired(10));
    }

    #[test]
    fn directory_round_trip() {
        let raw = small().to_raw();
        let dir = tempfile::tempdir().unwrap();
        raw.write_dir(dir.path()).unwrap();
        let back = RawCorpus::read_dir(dir.path()).unwrap();
        assert_eq!(back, raw);
    }

    #[test]
    fn paired_corpus_requires_equal_sizes() {
        let mk = |n: usize| {
            RawModality::new(DMatrix::from_element(2, n, 1.0), DMatrix::from_element(2, n, 1.0))
                .unwrap()
        };
        assert!(RawCorpus::new(vec![mk(3), mk(4)], Pairing::Paired).is_err());
        assert!(RawCorpus::new(vec![mk(3), mk(4)], Pairing::Unpaired).is_ok());
        assert!(RawCorpus::new(vec![mk(3)], Pairing::Unpaired).is_err());
    }
}
