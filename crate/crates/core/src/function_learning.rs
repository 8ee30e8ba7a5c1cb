//! Step two: hash-function learning.
//!
//! Each modality's centered features are mapped through an RBF anchor map
//! `Φ` (k × n), and a linear hash function `F` (r × k) is fitted to the
//! step-one codes with adaptive bit margins `M ≥ 0`:
//!
//! ```text
//! min ‖B + B⊙M − FΦ‖² + ridge·‖F‖²   s.t. M ≥ 0
//! ```
//!
//! alternating the ridge normal equations for `F` with the per-entry margin
//! rule for `M`. `ΦΦᵀ + ridge·I` does not change across iterations, so it is
//! factored once per modality.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::code_learning::{increased, relative_change, Hyperparams};
use crate::data_model::MultiModalCorpus;
use crate::error::{Error, Result};

const KERNEL_STREAM: u64 = 0x2545_f491_4f6c_dd1d;

/// Exponent of the anchor kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelExponent {
    /// `exp(−‖x − a‖ / 2δ²)`, unsquared distance.
    Unsquared,
    /// `exp(−‖x − a‖² / 2δ²)`, the usual Gaussian.
    Squared,
}

/// Which (sample, anchor) pairs enter the bandwidth mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BandwidthMode {
    /// All pairs except an anchor paired with itself.
    All,
    /// Only pairs whose sample is not an anchor.
    NonAnchor,
}

impl fmt::Display for KernelExponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelExponent::Unsquared => "unsquared",
            KernelExponent::Squared => "squared",
        })
    }
}

impl FromStr for KernelExponent {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unsquared" => Ok(KernelExponent::Unsquared),
            "squared" => Ok(KernelExponent::Squared),
            _ => Err(Error::Invalid(format!("unknown kernel exponent {s:?}"))),
        }
    }
}

impl fmt::Display for BandwidthMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BandwidthMode::All => "all",
            BandwidthMode::NonAnchor => "non_anchor",
        })
    }
}

impl FromStr for BandwidthMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(BandwidthMode::All),
            "non_anchor" => Ok(BandwidthMode::NonAnchor),
            _ => Err(Error::Invalid(format!("unknown bandwidth mode {s:?}"))),
        }
    }
}

/// RBF anchor map, defined on centered features.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMap {
    /// `d × k`; columns are anchor samples.
    pub anchors: DMatrix<f64>,
    pub bandwidth: f64,
    pub centering_mean: DVector<f64>,
    pub exponent: KernelExponent,
}

/// Euclidean distances between every anchor and every sample, `k × n`.
fn anchor_distances(anchors: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    let k = anchors.ncols();
    let n = x.ncols();
    let mut out = DMatrix::<f64>::zeros(k, n);
    if k == 0 {
        return out;
    }
    out.as_mut_slice()
        .par_chunks_mut(k)
        .enumerate()
        .for_each(|(t, col)| {
            let xt = x.column(t);
            for (j, slot) in col.iter_mut().enumerate() {
                let a = anchors.column(j);
                let mut acc = 0.0;
                for (p, q) in xt.iter().zip(a.iter()) {
                    let d = p - q;
                    acc += d * d;
                }
                *slot = acc.sqrt();
            }
        });
    out
}

fn kernel_from_distances(dist: &DMatrix<f64>, bandwidth: f64, exponent: KernelExponent) -> DMatrix<f64> {
    let scale = 1.0 / (2.0 * bandwidth * bandwidth);
    dist.map(|d| {
        let e = match exponent {
            KernelExponent::Unsquared => d,
            KernelExponent::Squared => d * d,
        };
        // Keep entries strictly positive when the exponent underflows.
        (-e * scale).exp().max(f64::MIN_POSITIVE)
    })
}

impl KernelMap {
    pub fn anchors(&self) -> usize {
        self.anchors.ncols()
    }

    pub fn dim(&self) -> usize {
        self.anchors.nrows()
    }

    /// `Φ` for already-centered features.
    pub fn kernel_features(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.dim() {
            return Err(Error::Shape(format!(
                "features have dimension {}, kernel anchors {}",
                x.nrows(),
                self.dim()
            )));
        }
        Ok(kernel_from_distances(&anchor_distances(&self.anchors, x), self.bandwidth, self.exponent))
    }
}

/// Picks `k` distinct anchors uniformly at random (seeded) and sets the
/// bandwidth to the mean sample–anchor distance.
pub fn fit_kernel(
    x: &DMatrix<f64>,
    centering_mean: &DVector<f64>,
    k: usize,
    seed: u64,
    mode: BandwidthMode,
    exponent: KernelExponent,
) -> Result<KernelMap> {
    fit_kernel_with_features(x, centering_mean, k, seed, mode, exponent).map(|(km, _)| km)
}

/// [`fit_kernel`] that also returns `Φ` of the training data.
pub fn fit_kernel_with_features(
    x: &DMatrix<f64>,
    centering_mean: &DVector<f64>,
    k: usize,
    seed: u64,
    mode: BandwidthMode,
    exponent: KernelExponent,
) -> Result<(KernelMap, DMatrix<f64>)> {
    let n = x.ncols();
    if k == 0 || k > n {
        return Err(Error::Invalid(format!("anchor count {k} must be in 1..={n}")));
    }
    if centering_mean.len() != x.nrows() {
        return Err(Error::Shape(format!(
            "centering mean has length {}, features have dimension {}",
            centering_mean.len(),
            x.nrows()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, n, k).into_vec();
    let anchors = x.select_columns(&picked);
    let dist = anchor_distances(&anchors, x);

    let (sum, count) = match mode {
        // Self pairs contribute a zero distance; only the count needs fixing.
        BandwidthMode::All => (dist.sum(), n * k - k),
        BandwidthMode::NonAnchor => {
            let mut is_anchor = vec![false; n];
            for &a in &picked {
                is_anchor[a] = true;
            }
            let sum: f64 = dist
                .column_iter()
                .zip(&is_anchor)
                .filter(|(_, &anchor)| !anchor)
                .map(|(col, _)| col.sum())
                .sum();
            (sum, (n - k) * k)
        }
    };
    if count == 0 {
        return Err(Error::Invalid(format!(
            "bandwidth undefined: no {mode} sample-anchor pairs with n = {n}, k = {k}"
        )));
    }
    let bandwidth = sum / count as f64;
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::Invalid(format!(
            "kernel bandwidth is {bandwidth}; training samples are identical"
        )));
    }
    let phi = kernel_from_distances(&dist, bandwidth, exponent);
    Ok((
        KernelMap {
            anchors,
            bandwidth,
            centering_mean: centering_mean.clone(),
            exponent,
        },
        phi,
    ))
}

/// How raw features become the design matrix of the hash function.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureMap {
    Rbf(KernelMap),
    /// Centered raw features used directly.
    Identity { centering_mean: DVector<f64> },
}

impl FeatureMap {
    pub fn centering_mean(&self) -> &DVector<f64> {
        match self {
            FeatureMap::Rbf(km) => &km.centering_mean,
            FeatureMap::Identity { centering_mean } => centering_mean,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.centering_mean().len()
    }

    /// Length of a mapped feature vector.
    pub fn output_dim(&self) -> usize {
        match self {
            FeatureMap::Rbf(km) => km.anchors(),
            FeatureMap::Identity { centering_mean } => centering_mean.len(),
        }
    }

    pub fn center(&self, raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mean = self.centering_mean();
        if raw.nrows() != mean.len() {
            return Err(Error::Shape(format!(
                "features have dimension {}, model expects {}",
                raw.nrows(),
                mean.len()
            )));
        }
        let mut x = raw.clone();
        for mut col in x.column_iter_mut() {
            col -= mean;
        }
        Ok(x)
    }

    pub fn map_centered(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            FeatureMap::Rbf(km) => km.kernel_features(x),
            FeatureMap::Identity { centering_mean } => {
                if x.nrows() != centering_mean.len() {
                    return Err(Error::Shape(format!(
                        "features have dimension {}, model expects {}",
                        x.nrows(),
                        centering_mean.len()
                    )));
                }
                Ok(x.clone())
            }
        }
    }

    /// Centers with the training mean, then maps.
    pub fn map_raw(&self, raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.map_centered(&self.center(raw)?)
    }
}

/// Factored ridge normal equations `ΦΦᵀ + ridge·I` for a fixed design `Φ`.
pub struct RidgeSystem<'a> {
    phi: &'a DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl<'a> RidgeSystem<'a> {
    pub fn new(phi: &'a DMatrix<f64>, ridge: f64) -> Result<Self> {
        let k = phi.nrows();
        let mut gram = phi * phi.transpose();
        for j in 0..k {
            gram[(j, j)] += ridge;
        }
        let chol = Cholesky::new(gram).ok_or(Error::Singular)?;
        // Cholesky accepts some numerically singular matrices; reject a
        // vanishing pivot as well.
        let diag = chol.l_dirty().diagonal();
        let max = diag.amax();
        if diag.iter().any(|&d| !(d > max * 1e-12)) {
            return Err(Error::Singular);
        }
        Ok(Self { phi, chol })
    }

    /// `F = T Φᵀ (ΦΦᵀ + ridge·I)⁻¹`.
    pub fn solve(&self, target: &DMatrix<f64>) -> DMatrix<f64> {
        let rhs = self.phi * target.transpose();
        self.chol.solve(&rhs).transpose()
    }
}

fn margin_target(b: &DMatrix<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
    b + b.component_mul(m)
}

fn check_shapes(b: &DMatrix<f64>, m: &DMatrix<f64>, phi: &DMatrix<f64>) -> Result<()> {
    if b.shape() != m.shape() || b.ncols() != phi.ncols() {
        return Err(Error::Shape(format!(
            "B {:?}, M {:?}, Φ {:?}",
            b.shape(),
            m.shape(),
            phi.shape()
        )));
    }
    Ok(())
}

/// `F = (B + B⊙M) Φᵀ (ΦΦᵀ + ridge·I)⁻¹`.
pub fn update_f(b: &DMatrix<f64>, m: &DMatrix<f64>, phi: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    check_shapes(b, m, phi)?;
    if let Some(v) = m.iter().find(|&&v| !(v >= 0.0)) {
        return Err(Error::Invalid(format!("margin entry {v} is negative")));
    }
    Ok(RidgeSystem::new(phi, ridge)?.solve(&margin_target(b, m)))
}

/// `M = max(B ⊙ (FΦ − B), 0)`.
pub fn update_m(b: &DMatrix<f64>, f: &DMatrix<f64>, phi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if f.ncols() != phi.nrows() || b.shape() != (f.nrows(), phi.ncols()) {
        return Err(Error::Shape(format!(
            "B {:?}, F {:?}, Φ {:?}",
            b.shape(),
            f.shape(),
            phi.shape()
        )));
    }
    Ok(update_m_from_prediction(b, &(f * phi)))
}

fn update_m_from_prediction(b: &DMatrix<f64>, pred: &DMatrix<f64>) -> DMatrix<f64> {
    b.zip_map(pred, |b, p| (b * (p - b)).max(0.0))
}

/// `‖B + B⊙M − FΦ‖² + ridge·‖F‖²`, the quantity the alternation decreases.
pub fn step_two_objective(b: &DMatrix<f64>, m: &DMatrix<f64>, f: &DMatrix<f64>, phi: &DMatrix<f64>, ridge: f64) -> f64 {
    (margin_target(b, m) - f * phi).norm_squared() + ridge * f.norm_squared()
}

#[derive(Debug, Clone)]
pub struct FunctionModality {
    pub map: FeatureMap,
    pub f: DMatrix<f64>,
    pub m: DMatrix<f64>,
    /// Design matrix of the training data.
    pub phi: DMatrix<f64>,
    /// Objective after every (F, M) iteration.
    pub objective_trace: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FunctionLearningState {
    pub modalities: Vec<FunctionModality>,
}

/// Step-two switches: kernel map on/off, margins on/off.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FunctionOptions {
    pub kernel: bool,
    pub margins: bool,
}

impl Default for FunctionOptions {
    fn default() -> Self {
        Self {
            kernel: true,
            margins: true,
        }
    }
}

/// Builds the feature map and training design matrix for modality `i`.
pub fn design_matrix(
    corpus: &MultiModalCorpus,
    i: usize,
    h: &Hyperparams,
    kernel: bool,
) -> Result<(FeatureMap, DMatrix<f64>)> {
    let data = corpus.modality(i)?;
    let x = data.features().values();
    if kernel {
        let k = h.anchors.min(data.samples());
        let (km, phi) = fit_kernel_with_features(
            x,
            data.centering_mean(),
            k,
            h.seed ^ KERNEL_STREAM.wrapping_add(i as u64),
            h.bandwidth_mode,
            h.kernel_exp,
        )?;
        Ok((FeatureMap::Rbf(km), phi))
    } else {
        Ok((
            FeatureMap::Identity {
                centering_mean: data.centering_mean().clone(),
            },
            x.clone(),
        ))
    }
}

/// Alternates `F` and `M` updates on a fixed design matrix.
pub fn fit_hash_function(
    b: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    h: &Hyperparams,
    margins: bool,
) -> Result<(DMatrix<f64>, DMatrix<f64>, Vec<f64>)> {
    let mut m = DMatrix::zeros(b.nrows(), b.ncols());
    check_shapes(b, &m, phi)?;
    let system = RidgeSystem::new(phi, h.ridge)?;
    let mut trace = Vec::new();
    let mut f = DMatrix::zeros(b.nrows(), phi.nrows());
    for iter in 1..=h.max_iters {
        f = system.solve(&margin_target(b, &m));
        let pred = &f * phi;
        if margins {
            m = update_m_from_prediction(b, &pred);
        }
        let obj = (margin_target(b, &m) - pred).norm_squared() + h.ridge * f.norm_squared();
        if !obj.is_finite() {
            return Err(Error::NonFinite(format!("step-two objective at iteration {iter}")));
        }
        if let Some(&prev) = trace.last() {
            if increased(prev, obj) {
                return Err(Error::ObjectiveIncreased {
                    stage: "step-two",
                    iteration: iter,
                    previous: prev,
                    current: obj,
                });
            }
            trace.push(obj);
            if relative_change(prev, obj) < h.rel_tol {
                break;
            }
        } else {
            trace.push(obj);
        }
    }
    Ok((f, m, trace))
}

/// Runs step two for every modality. Modalities are independent and are
/// processed in parallel; each one is deterministic under the seed.
pub fn train_functions(
    corpus: &MultiModalCorpus,
    codes: &[DMatrix<f64>],
    h: &Hyperparams,
    options: FunctionOptions,
) -> Result<FunctionLearningState> {
    h.validate()?;
    if codes.len() != corpus.modalities().len() {
        return Err(Error::Shape(format!(
            "{} code matrices for {} modalities",
            codes.len(),
            corpus.modalities().len()
        )));
    }
    let modalities = (0..codes.len())
        .into_par_iter()
        .map(|i| {
            let (map, phi) = design_matrix(corpus, i, h, options.kernel)?;
            let (f, m, objective_trace) = fit_hash_function(&codes[i], &phi, h, options.margins)?;
            Ok(FunctionModality {
                map,
                f,
                m,
                phi,
                objective_trace,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FunctionLearningState { modalities })
}
