//! End-to-end training, model persistence, cross-modal querying, ablations
//! and the scaling probe.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::code_learning::{self, Hyperparams, ObjectiveTerms};
use crate::data_model::{dmt, synth_corpus, MultiModalCorpus, RawCorpus, SynthConfig};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport, Task};
use crate::function_learning::{self, FeatureMap, FunctionOptions, KernelMap};
use crate::kv::KeyValues;
use crate::retrieval::encode;

pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    /// Drops intra-modal similarity preservation.
    NoIntra,
    /// Drops inter-modal similarity preservation.
    NoInter,
    /// Uses centered raw features instead of the anchor kernel.
    NoKernel,
    /// Freezes both margin matrices at zero.
    NoMargin,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoIntra,
        Variant::NoInter,
        Variant::NoKernel,
        Variant::NoMargin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoIntra => "no_intra",
            Variant::NoInter => "no_inter",
            Variant::NoKernel => "no_kernel",
            Variant::NoMargin => "no_margin",
        }
    }

    pub fn terms(self) -> ObjectiveTerms {
        ObjectiveTerms {
            intra: self != Variant::NoIntra,
            inter: self != Variant::NoInter,
            margins: self != Variant::NoMargin,
        }
    }

    pub fn function_options(self) -> FunctionOptions {
        FunctionOptions {
            kernel: self != Variant::NoKernel,
            margins: self != Variant::NoMargin,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown variant {s:?}")))
    }
}

/// Per-modality part of a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelModality {
    pub map: FeatureMap,
    /// Hash function, `r × k`.
    pub f: DMatrix<f64>,
    /// Database codes, `r × n`.
    pub codes: DMatrix<f64>,
    /// Database labels, `c × n`.
    pub labels: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub step1_trace: Vec<f64>,
    pub step2_traces: Vec<Vec<f64>>,
    /// Largest entry of any step-one margin matrix.
    pub step1_max_margin: f64,
    /// Largest entry of each modality's step-two margin matrix.
    pub step2_max_margin: Vec<f64>,
}

impl Provenance {
    pub fn step1_iters(&self) -> usize {
        self.step1_trace.len().saturating_sub(1)
    }

    pub fn step1_objective(&self) -> f64 {
        self.step1_trace.last().copied().unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub hyperparams: Hyperparams,
    pub variant: Variant,
    pub modalities: Vec<ModelModality>,
    pub provenance: Provenance,
}

/// Wall-clock seconds of the two training steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainTiming {
    pub codes: f64,
    pub functions: f64,
}

impl TrainTiming {
    pub fn total(&self) -> f64 {
        self.codes + self.functions
    }
}

pub fn train(corpus: &MultiModalCorpus, h: &Hyperparams, variant: Variant) -> Result<TrainedModel> {
    train_timed(corpus, h, variant).map(|(m, _)| m)
}

pub fn train_timed(corpus: &MultiModalCorpus, h: &Hyperparams, variant: Variant) -> Result<(TrainedModel, TrainTiming)> {
    let t0 = Instant::now();
    let codes = code_learning::train_codes(corpus, h, variant.terms())?;
    let t1 = Instant::now();
    let b: Vec<DMatrix<f64>> = codes.modalities.iter().map(|m| m.b.clone()).collect();
    let functions = function_learning::train_functions(corpus, &b, h, variant.function_options())?;
    let t2 = Instant::now();

    let step1_max_margin = codes
        .modalities
        .iter()
        .map(|m| m.e.max())
        .fold(0.0, f64::max);
    let provenance = Provenance {
        step1_trace: codes.objective_trace.clone(),
        step2_traces: functions
            .modalities
            .iter()
            .map(|m| m.objective_trace.clone())
            .collect(),
        step1_max_margin,
        step2_max_margin: functions.modalities.iter().map(|m| m.m.max().max(0.0)).collect(),
    };
    let modalities = functions
        .modalities
        .into_iter()
        .zip(b)
        .zip(corpus.modalities())
        .map(|((fm, codes), data)| ModelModality {
            map: fm.map,
            f: fm.f,
            codes,
            labels: data.labels().values().clone(),
        })
        .collect();
    let model = TrainedModel {
        hyperparams: h.clone(),
        variant,
        modalities,
        provenance,
    };
    let timing = TrainTiming {
        codes: (t1 - t0).as_secs_f64(),
        functions: (t2 - t1).as_secs_f64(),
    };
    Ok((model, timing))
}

impl TrainedModel {
    pub fn modality(&self, i: usize) -> Result<&ModelModality> {
        self.modalities.get(i).ok_or(Error::UnknownModality(i))
    }

    /// Hash codes of raw (uncentered) features from modality `i`.
    pub fn encode(&self, i: usize, raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let m = self.modality(i)?;
        encode(&m.f, &m.map, raw)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let h = &self.hyperparams;
        let mut kv = KeyValues::new();
        kv.set("version", MODEL_VERSION);
        kv.set("bits", h.bits);
        kv.set("modalities", self.modalities.len());
        kv.set("eta", format!("{:?}", h.eta));
        kv.set("lambda", format!("{:?}", h.lambda));
        kv.set("beta", format!("{:?}", h.beta));
        kv.set("anchors", h.anchors);
        kv.set("ridge", format!("{:?}", h.ridge));
        kv.set("seed", h.seed);
        kv.set("variant", self.variant);
        kv.set("kernel_exp", h.kernel_exp);
        kv.set("bandwidth_mode", h.bandwidth_mode);
        kv.set("cross_term", h.cross_term);
        kv.set("max_iters", h.max_iters);
        kv.set("rel_tol", format!("{:?}", h.rel_tol));
        kv.set("rank_tol", format!("{:?}", h.rank_tol));
        kv.set("step1.iters", self.provenance.step1_iters());
        kv.set("step1.objective", format!("{:?}", self.provenance.step1_objective()));
        kv.set("step1.max_margin", format!("{:?}", self.provenance.step1_max_margin));

        for (idx, m) in self.modalities.iter().enumerate() {
            let i = idx + 1;
            let sub = dir.join(format!("m{i}"));
            fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            let bandwidth = match &m.map {
                FeatureMap::Rbf(km) => {
                    dmt::store_matrix(sub.join("anchors.dmt"), &km.anchors)?;
                    km.bandwidth
                }
                FeatureMap::Identity { .. } => 0.0,
            };
            kv.set(format!("m{i}.map"), if bandwidth > 0.0 { "rbf" } else { "identity" });
            kv.set(format!("m{i}.bandwidth"), format!("{bandwidth:?}"));
            kv.set(format!("m{i}.n"), m.codes.ncols());
            kv.set(format!("m{i}.d"), m.map.input_dim());
            kv.set(format!("m{i}.k"), m.map.output_dim());
            let trace = self.provenance.step2_traces.get(idx);
            kv.set(format!("m{i}.step2.iters"), trace.map_or(0, Vec::len));
            kv.set(
                format!("m{i}.step2.objective"),
                format!("{:?}", trace.and_then(|t| t.last().copied()).unwrap_or(f64::NAN)),
            );
            kv.set(
                format!("m{i}.step2.max_margin"),
                format!("{:?}", self.provenance.step2_max_margin.get(idx).copied().unwrap_or(0.0)),
            );
            let mean = m.map.centering_mean();
            dmt::store_matrix(sub.join("F.dmt"), &m.f)?;
            dmt::store_matrix(sub.join("mean.dmt"), &DMatrix::from_column_slice(mean.len(), 1, mean.as_slice()))?;
            dmt::store_matrix(sub.join("B.dmt"), &m.codes)?;
            dmt::store_matrix(sub.join("L.dmt"), &m.labels)?;
        }
        kv.store(dir.join("meta.kv"))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let kv = KeyValues::load(dir.join("meta.kv"))?;
        let version: u32 = kv.parse_value("version")?;
        if version != MODEL_VERSION {
            return Err(Error::KeyValue(format!("unsupported model version {version}")));
        }
        let h = Hyperparams {
            eta: kv.parse_value("eta")?,
            lambda: kv.parse_value("lambda")?,
            beta: kv.parse_value("beta")?,
            bits: kv.parse_value("bits")?,
            max_iters: kv.parse_value("max_iters")?,
            rel_tol: kv.parse_value("rel_tol")?,
            anchors: kv.parse_value("anchors")?,
            ridge: kv.parse_value("ridge")?,
            seed: kv.parse_value("seed")?,
            rank_tol: kv.parse_value("rank_tol")?,
            kernel_exp: kv.require("kernel_exp")?.parse()?,
            bandwidth_mode: kv.require("bandwidth_mode")?.parse()?,
            cross_term: kv.require("cross_term")?.parse()?,
        };
        let variant: Variant = kv.require("variant")?.parse()?;
        let count: usize = kv.parse_value("modalities")?;

        let mut modalities = Vec::with_capacity(count);
        let mut step2_max_margin = Vec::with_capacity(count);
        for i in 1..=count {
            let sub = dir.join(format!("m{i}"));
            let mean = dmt::load_matrix(sub.join("mean.dmt"))?;
            let mean = DVector::from_column_slice(mean.as_slice());
            let map = match kv.require(&format!("m{i}.map"))? {
                "rbf" => FeatureMap::Rbf(KernelMap {
                    anchors: dmt::load_matrix(sub.join("anchors.dmt"))?,
                    bandwidth: kv.parse_value(&format!("m{i}.bandwidth"))?,
                    centering_mean: mean,
                    exponent: h.kernel_exp,
                }),
                "identity" => FeatureMap::Identity { centering_mean: mean },
                other => return Err(Error::KeyValue(format!("unknown feature map {other:?}"))),
            };
            let m = ModelModality {
                map,
                f: dmt::load_matrix(sub.join("F.dmt"))?,
                codes: dmt::load_matrix(sub.join("B.dmt"))?,
                labels: dmt::load_matrix(sub.join("L.dmt"))?,
            };
            check_model_modality(i, &m, &h)?;
            modalities.push(m);
            step2_max_margin.push(kv.parse_value(&format!("m{i}.step2.max_margin"))?);
        }
        Ok(TrainedModel {
            hyperparams: h,
            variant,
            modalities,
            provenance: Provenance {
                // Only summaries are persisted.
                step1_trace: vec![kv.parse_value("step1.objective")?],
                step2_traces: Vec::new(),
                step1_max_margin: kv.parse_value("step1.max_margin")?,
                step2_max_margin,
            },
        })
    }
}

fn check_model_modality(i: usize, m: &ModelModality, h: &Hyperparams) -> Result<()> {
    let bits = h.bits;
    if m.f.nrows() != bits || m.codes.nrows() != bits {
        return Err(Error::Shape(format!("modality {i}: hash function or codes not {bits} bits wide")));
    }
    if m.f.ncols() != m.map.output_dim() {
        return Err(Error::Shape(format!(
            "modality {i}: hash function has {} columns, feature map yields {}",
            m.f.ncols(),
            m.map.output_dim()
        )));
    }
    if m.codes.ncols() != m.labels.ncols() {
        return Err(Error::Shape(format!("modality {i}: codes and labels disagree on n")));
    }
    if let FeatureMap::Rbf(km) = &m.map {
        if km.anchors.nrows() != km.centering_mean.len() {
            return Err(Error::Shape(format!("modality {i}: anchors and mean disagree on d")));
        }
    }
    Ok(())
}

/// Encodes raw query features of `query_modality` and returns them with the
/// database codes of `target_modality`.
pub fn cross_modal_query<'m>(
    model: &'m TrainedModel,
    query_features: &DMatrix<f64>,
    query_modality: usize,
    target_modality: usize,
) -> Result<(DMatrix<f64>, &'m DMatrix<f64>)> {
    if query_modality == target_modality {
        return Err(Error::Invalid(format!(
            "query and target modality are both {}",
            query_modality + 1
        )));
    }
    let target = model.modality(target_modality)?;
    let codes = model.encode(query_modality, query_features)?;
    Ok((codes, &target.codes))
}

/// Runs one retrieval task with queries from a raw query corpus.
pub fn evaluate_task(model: &TrainedModel, queries: &RawCorpus, task: Task, cutoff: Option<usize>) -> Result<EvalReport> {
    let (qi, ti) = task.modalities();
    let q = queries.modalities.get(qi).ok_or(Error::UnknownModality(qi))?;
    let t0 = Instant::now();
    let (codes, db) = cross_modal_query(model, q.features.values(), qi, ti)?;
    let encode_secs = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let mut report = evaluate(&codes, db, q.labels.values(), &model.modality(ti)?.labels, task, cutoff)?;
    report.timing = vec![
        ("encode".into(), encode_secs),
        ("rank".into(), t1.elapsed().as_secs_f64()),
    ];
    Ok(report)
}

/// MAP for both tasks.
pub fn evaluate_both(model: &TrainedModel, queries: &RawCorpus) -> Result<(f64, f64)> {
    Ok((
        evaluate_task(model, queries, Task::ImageToText, None)?.map,
        evaluate_task(model, queries, Task::TextToImage, None)?.map,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub map_i2t: f64,
    pub map_t2i: f64,
}

/// Trains and evaluates every variant with the same hyperparameters and seed.
/// Variants are trained concurrently; rows come back in [`Variant::ALL`] order.
pub fn ablate(corpus: &MultiModalCorpus, queries: &RawCorpus, h: &Hyperparams) -> Result<Vec<AblationRow>> {
    use rayon::prelude::*;
    Variant::ALL
        .par_iter()
        .map(|&variant| {
            let model = train(corpus, h, variant)?;
            let (map_i2t, map_t2i) = evaluate_both(&model, queries)?;
            Ok(AblationRow {
                variant,
                map_i2t,
                map_t2i,
            })
        })
        .collect()
}

/// Corpus shape used by [`scaling_probe`]; each probe row uses `n` samples
/// in every modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingCorpus {
    pub classes: usize,
    pub dims: Vec<usize>,
    pub noise: f64,
    pub multilabel_p: f64,
    pub seed: u64,
}

impl Default for ScalingCorpus {
    fn default() -> Self {
        Self {
            classes: 4,
            dims: vec![32, 48],
            noise: 0.3,
            multilabel_p: 0.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingRow {
    pub n: usize,
    pub timing: TrainTiming,
}

/// Trains on synthetic corpora of increasing size and records wall time.
pub fn scaling_probe(sizes: &[usize], h: &Hyperparams, shape: &ScalingCorpus) -> Result<Vec<ScalingRow>> {
    if sizes.is_empty() || sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invalid("scaling sizes must be non-empty and increasing".into()));
    }
    sizes
        .iter()
        .map(|&n| {
            let corpus = synth_corpus(&SynthConfig {
                classes: shape.classes,
                sizes: vec![n; shape.dims.len()],
                dims: shape.dims.clone(),
                noise: shape.noise,
                multilabel_p: shape.multilabel_p,
                seed: shape.seed,
                paired: false,
            })?;
            let (_, timing) = train_timed(&corpus, h, Variant::Full)?;
            Ok(ScalingRow { n, timing })
        })
        .collect()
}
