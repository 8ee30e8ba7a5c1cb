//! Retrieval quality: relevance, AP/MAP and precision–recall curves.
//!
//! A database item is relevant to a query when they share at least one label.
//! AP over the top `K` is `(1/N) Σ_{k≤K} P(k)·rel(k)`, where `N` counts every
//! relevant item in the database and `P(k)` is precision at cutoff `k`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::data_model::dmt;
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::retrieval::{rank, PackedCodes, RankedList};

/// Recall levels of the pooled PR curve: 0.05, 0.10, ..., 1.0.
pub fn recall_grid() -> Vec<f64> {
    (1..=20).map(|i| i as f64 / 20.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    /// Image queries (modality 1) against the text database (modality 2).
    ImageToText,
    /// Text queries (modality 2) against the image database (modality 1).
    TextToImage,
}

impl Task {
    pub const BOTH: [Task; 2] = [Task::ImageToText, Task::TextToImage];

    /// Zero-based (query, database) modality indices.
    pub fn modalities(self) -> (usize, usize) {
        match self {
            Task::ImageToText => (0, 1),
            Task::TextToImage => (1, 0),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Task::ImageToText => "i2t",
            Task::TextToImage => "t2i",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "i2t" => Ok(Task::ImageToText),
            "t2i" => Ok(Task::TextToImage),
            _ => Err(Error::Invalid(format!("unknown task {s:?}"))),
        }
    }
}

/// Query × database relevance, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelevanceJudgment {
    queries: usize,
    database: usize,
    rel: Vec<bool>,
}

impl RelevanceJudgment {
    pub fn row(&self, q: usize) -> &[bool] {
        &self.rel[q * self.database..(q + 1) * self.database]
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn database(&self) -> usize {
        self.database
    }
}

/// `rel(q, t) = (Lq[:, q] · Ldb[:, t] > 0)`.
pub fn relevance(query_labels: &DMatrix<f64>, db_labels: &DMatrix<f64>) -> Result<RelevanceJudgment> {
    if query_labels.nrows() != db_labels.nrows() {
        return Err(Error::Shape(format!(
            "query labels have {} classes, database labels {}",
            query_labels.nrows(),
            db_labels.nrows()
        )));
    }
    let database = db_labels.ncols();
    let mut rel = Vec::with_capacity(query_labels.ncols() * database);
    for q in query_labels.column_iter() {
        rel.extend(db_labels.tr_mul(&q).iter().map(|&s| s > 0.0));
    }
    Ok(RelevanceJudgment {
        queries: query_labels.ncols(),
        database,
        rel,
    })
}

/// Average precision over the top `cutoff` entries of `ranking`.
/// Zero when nothing relevant appears there.
pub fn average_precision(ranking: &RankedList, rel: &[bool], cutoff: usize) -> Result<f64> {
    if ranking.entries.is_empty() {
        return Err(Error::Invalid("empty ranking".into()));
    }
    if rel.len() != ranking.entries.len() {
        return Err(Error::Shape(format!(
            "ranking has {} entries, relevance row {}",
            ranking.entries.len(),
            rel.len()
        )));
    }
    if cutoff == 0 || cutoff > ranking.entries.len() {
        return Err(Error::Invalid(format!(
            "cutoff {cutoff} must be in 1..={}",
            ranking.entries.len()
        )));
    }
    let total = rel.iter().filter(|&&r| r).count();
    if total == 0 {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (pos, idx) in ranking.indices().take(cutoff).enumerate() {
        if rel[idx] {
            hits += 1;
            acc += hits as f64 / (pos + 1) as f64;
        }
    }
    Ok(acc / total as f64)
}

pub fn mean_average_precision(aps: &[f64]) -> Result<f64> {
    if aps.is_empty() {
        return Err(Error::Invalid("MAP over zero queries".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// One `(recall, precision)` point per relevant item along the ranking.
pub fn pr_curve(ranking: &RankedList, rel: &[bool]) -> Result<Vec<(f64, f64)>> {
    if rel.len() != ranking.entries.len() {
        return Err(Error::Shape(format!(
            "ranking has {} entries, relevance row {}",
            ranking.entries.len(),
            rel.len()
        )));
    }
    let total = rel.iter().filter(|&&r| r).count();
    if total == 0 {
        return Err(Error::Invalid("PR curve needs at least one relevant item".into()));
    }
    let mut hits = 0usize;
    let mut out = Vec::with_capacity(total);
    for (pos, idx) in ranking.indices().enumerate() {
        if rel[idx] {
            hits += 1;
            out.push((hits as f64 / total as f64, hits as f64 / (pos + 1) as f64));
        }
    }
    Ok(out)
}

/// Precision of a PR curve at `recall`, linearly interpolated between
/// neighbouring points and held flat before the first one.
pub fn interpolate_precision(curve: &[(f64, f64)], recall: f64) -> f64 {
    let first = curve[0];
    if recall <= first.0 {
        return first.1;
    }
    for w in curve.windows(2) {
        let (r0, p0) = w[0];
        let (r1, p1) = w[1];
        if recall <= r1 {
            return p0 + (p1 - p0) * (recall - r0) / (r1 - r0);
        }
    }
    curve[curve.len() - 1].1
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub task: Task,
    pub map: f64,
    /// Per-query AP; `None` for queries without any relevant item.
    pub aps: Vec<Option<f64>>,
    /// Pooled `(recall, precision)` on [`recall_grid`].
    pub pr_points: Vec<(f64, f64)>,
    pub cutoff: usize,
    pub queries_excluded: usize,
    /// Wall-clock seconds per phase. Not serialized.
    pub timing: Vec<(String, f64)>,
}

impl EvalReport {
    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("task", self.task);
        kv.set("map", format!("{:?}", self.map));
        kv.set("K", self.cutoff);
        kv.set("queries", self.aps.len());
        kv.set("queries_excluded", self.queries_excluded);
        kv
    }

    pub fn pr_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.pr_points.len(), 2, |i, j| {
            if j == 0 {
                self.pr_points[i].0
            } else {
                self.pr_points[i].1
            }
        })
    }

    /// Writes `report_<task>.kv` and `pr_<task>.dmt` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.to_key_values()
            .store(dir.join(format!("report_{}.kv", self.task)))?;
        dmt::store_matrix(dir.join(format!("pr_{}.dmt", self.task)), &self.pr_matrix())
    }
}

/// Scores `query_codes` (r × q) against `db_codes` (r × n).
pub fn evaluate(
    query_codes: &DMatrix<f64>,
    db_codes: &DMatrix<f64>,
    query_labels: &DMatrix<f64>,
    db_labels: &DMatrix<f64>,
    task: Task,
    cutoff: Option<usize>,
) -> Result<EvalReport> {
    if query_codes.nrows() != db_codes.nrows() {
        return Err(Error::Shape(format!(
            "query codes have {} bits, database codes {}",
            query_codes.nrows(),
            db_codes.nrows()
        )));
    }
    if query_codes.ncols() != query_labels.ncols() || db_codes.ncols() != db_labels.ncols() {
        return Err(Error::Shape("codes and labels disagree on sample counts".into()));
    }
    let cutoff = cutoff.unwrap_or(db_codes.ncols());
    let db = PackedCodes::from_signs(db_codes);
    let rel = relevance(query_labels, db_labels)?;

    let per_query = (0..query_codes.ncols())
        .into_par_iter()
        .map(|q| -> Result<Option<(f64, Vec<(f64, f64)>)>> {
            let row = rel.row(q);
            if !row.iter().any(|&r| r) {
                return Ok(None);
            }
            let code: Vec<f64> = query_codes.column(q).iter().copied().collect();
            let ranking = rank(q, &code, &db)?;
            let ap = average_precision(&ranking, row, cutoff)?;
            Ok(Some((ap, pr_curve(&ranking, row)?)))
        })
        .collect::<Result<Vec<_>>>()?;

    let grid = recall_grid();
    let mut pooled = vec![0.0; grid.len()];
    let mut aps = Vec::with_capacity(per_query.len());
    let mut included = Vec::new();
    for entry in &per_query {
        match entry {
            Some((ap, curve)) => {
                aps.push(Some(*ap));
                included.push(*ap);
                for (slot, &g) in pooled.iter_mut().zip(&grid) {
                    *slot += interpolate_precision(curve, g);
                }
            }
            None => aps.push(None),
        }
    }
    let map = mean_average_precision(&included)?;
    let count = included.len() as f64;
    let pr_points = grid.iter().zip(pooled).map(|(&g, p)| (g, p / count)).collect();
    Ok(EvalReport {
        task,
        map,
        queries_excluded: aps.len() - included.len(),
        aps,
        pr_points,
        cutoff,
        timing: Vec::new(),
    })
}
