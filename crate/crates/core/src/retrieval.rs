//! Query encoding and Hamming ranking.

use nalgebra::DMatrix;

use crate::code_learning::sign;
use crate::error::{Error, Result};
use crate::function_learning::FeatureMap;

/// `sgn(F φ(x))` for every column of `raw` (uncentered query features).
pub fn encode(f: &DMatrix<f64>, map: &FeatureMap, raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if f.ncols() != map.output_dim() {
        return Err(Error::Shape(format!(
            "hash function expects {} mapped features, feature map yields {}",
            f.ncols(),
            map.output_dim()
        )));
    }
    let phi = map.map_raw(raw)?;
    Ok((f * phi).map(sign))
}

/// Hamming distance between two ±1 code columns.
pub fn hamming(a: &[f64], b: &[f64]) -> Result<u32> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("codes of length {} and {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).filter(|(x, y)| (**x > 0.0) != (**y > 0.0)).count() as u32)
}

/// Bit-packed sign codes: bit set ⇔ code entry `+1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedCodes {
    bits: usize,
    words: usize,
    storage: Vec<u64>,
}

fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

fn pack_into(col: impl Iterator<Item = f64>, out: &mut [u64]) {
    for (bit, v) in col.enumerate() {
        if v > 0.0 {
            out[bit / 64] |= 1u64 << (bit % 64);
        }
    }
}

impl PackedCodes {
    /// Packs the columns of an `r × n` sign matrix.
    pub fn from_signs(codes: &DMatrix<f64>) -> Self {
        let bits = codes.nrows();
        let words = words_for(bits);
        let mut storage = vec![0u64; words * codes.ncols()];
        for (k, col) in codes.column_iter().enumerate() {
            pack_into(col.iter().copied(), &mut storage[k * words..(k + 1) * words]);
        }
        Self {
            bits,
            words,
            storage,
        }
    }

    pub fn len(&self) -> usize {
        self.storage.len().checked_div(self.words).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn code(&self, k: usize) -> &[u64] {
        &self.storage[k * self.words..(k + 1) * self.words]
    }

    pub fn unpack(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.bits, self.len(), |bit, k| {
            if self.code(k)[bit / 64] >> (bit % 64) & 1 == 1 {
                1.0
            } else {
                -1.0
            }
        })
    }

    /// Packs a single ±1 column with this database's width.
    pub fn pack_query(&self, code: &[f64]) -> Result<Vec<u64>> {
        if code.len() != self.bits {
            return Err(Error::Shape(format!(
                "query code has {} bits, database {}",
                code.len(),
                self.bits
            )));
        }
        let mut out = vec![0u64; self.words];
        pack_into(code.iter().copied(), &mut out);
        Ok(out)
    }
}

pub fn hamming_packed(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Full ranking of the database for one query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedList {
    pub query_id: usize,
    /// `(database index, distance)`, by distance then index.
    pub entries: Vec<(usize, u32)>,
}

impl RankedList {
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|&(i, _)| i)
    }
}

/// Ranks every database code by Hamming distance to `query`. Ties keep
/// database order, since the buckets are filled in index order.
pub fn rank(query_id: usize, query: &[f64], db: &PackedCodes) -> Result<RankedList> {
    let q = db.pack_query(query)?;
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); db.bits() + 1];
    for k in 0..db.len() {
        buckets[hamming_packed(&q, db.code(k)) as usize].push(k);
    }
    let entries = buckets
        .into_iter()
        .enumerate()
        .flat_map(|(d, idx)| idx.into_iter().map(move |k| (k, d as u32)))
        .collect();
    Ok(RankedList { query_id, entries })
}
