//! Step one: hash-code learning.
//!
//! For every modality `i` the trainer keeps a projection `P` (c × r), a latent
//! representation `V` (r × n) with `V Vᵀ = nI` and `V 1 = 0`, codes `B`
//! (r × n, ±1) and non-negative label margins `E` (c × n). Each sweep visits
//! the modalities in order and updates `P`, `V`, `B`, `E` of that modality
//! with closed-form block minimizers of
//!
//! ```text
//! Σᵢ ‖L + R⊙E − P V‖² + η‖B − V‖² + λ‖BᵀV − rS⁽ⁱⁱ⁾‖²  +  β Σ_{i≠j} ‖V⁽ʲ⁾ᵀV⁽ⁱ⁾ − rS⁽ʲⁱ⁾‖²
//! ```
//!
//! with `S⁽ʲⁱ⁾ = L̃⁽ʲ⁾ᵀ L̃⁽ⁱ⁾` on column-normalized labels. Similarity matrices
//! are never formed: every product with `S` is evaluated as `(M L̃ᵀ) L̃`, and
//! the objective is expanded through trace identities into `r × r`, `c × c`
//! and `c × r` pieces. The update schedule is sequential over modalities, so
//! the `V⁽ⁱ⁾` update sees the already-updated `V⁽ʲ⁾` for `j < i`.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data_model::{index_matrix, normalize_labels, MultiModalCorpus};
use crate::error::{Error, Result};
use crate::function_learning::{BandwidthMode, KernelExponent};
use crate::stiefel::{self, CenteredOrthogonalProblem, DEFAULT_RANK_TOL};

/// Relative slack allowed when checking that an objective trace does not increase.
pub const MONOTONE_SLACK: f64 = 1e-9;

const V_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// Coefficient of the inter-modal part of the `V` target.
///
/// The inter-modal sum runs over ordered pairs, so `V⁽ⁱ⁾` appears in two of
/// its terms and the exact block minimizer needs `2βr`. `Single` keeps the
/// single `βr` of the closed form as usually stated; the `V` step is then
/// not an exact minimizer and the objective can creep upwards once the
/// other terms have settled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossTerm {
    Single,
    Exact,
}

impl CrossTerm {
    fn multiplier(self) -> f64 {
        match self {
            CrossTerm::Single => 1.0,
            CrossTerm::Exact => 2.0,
        }
    }
}

impl fmt::Display for CrossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CrossTerm::Single => "single",
            CrossTerm::Exact => "exact",
        })
    }
}

impl FromStr for CrossTerm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(CrossTerm::Single),
            "exact" => Ok(CrossTerm::Exact),
            _ => Err(Error::Invalid(format!("unknown cross term {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    /// Weight of the code/representation quantization term.
    pub eta: f64,
    /// Weight of intra-modal similarity preservation.
    pub lambda: f64,
    /// Weight of inter-modal similarity preservation.
    pub beta: f64,
    /// Code length `r`.
    pub bits: usize,
    pub max_iters: usize,
    pub rel_tol: f64,
    /// Number of RBF anchors `k` (clamped to the modality size).
    pub anchors: usize,
    /// Ridge added to the kernel normal equations.
    pub ridge: f64,
    pub seed: u64,
    pub rank_tol: f64,
    pub kernel_exp: KernelExponent,
    pub bandwidth_mode: BandwidthMode,
    pub cross_term: CrossTerm,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            eta: 1.0,
            lambda: 1e-3,
            beta: 1e-3,
            bits: 16,
            max_iters: 15,
            rel_tol: 1e-5,
            anchors: 1500,
            ridge: 1e-6,
            seed: 0,
            rank_tol: DEFAULT_RANK_TOL,
            kernel_exp: KernelExponent::Unsquared,
            bandwidth_mode: BandwidthMode::All,
            cross_term: CrossTerm::Single,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::Invalid(what));
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return bad(format!("eta must be > 0, got {}", self.eta));
        }
        for (name, v) in [("lambda", self.lambda), ("beta", self.beta), ("ridge", self.ridge)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        if !(self.rel_tol.is_finite() && self.rel_tol >= 0.0) {
            return bad(format!("rel_tol must be >= 0, got {}", self.rel_tol));
        }
        if self.bits < 2 {
            return bad(format!("bits must be >= 2, got {}", self.bits));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be >= 1".into());
        }
        if self.anchors == 0 {
            return bad("anchors must be >= 1".into());
        }
        if !(self.rank_tol.is_finite() && self.rank_tol >= 0.0) {
            return bad(format!("rank_tol must be >= 0, got {}", self.rank_tol));
        }
        Ok(())
    }
}

/// Which objective terms are active. Everything on is the full model; the
/// ablations switch single terms off.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObjectiveTerms {
    pub intra: bool,
    pub inter: bool,
    pub margins: bool,
}

impl Default for ObjectiveTerms {
    fn default() -> Self {
        Self {
            intra: true,
            inter: true,
            margins: true,
        }
    }
}

/// Term weights after applying [`ObjectiveTerms`].
#[derive(Debug, Clone, Copy)]
struct Weights {
    eta: f64,
    lambda: f64,
    beta: f64,
    r: f64,
    /// Multiplier of `β` inside `Z` only.
    cross: f64,
}

impl Weights {
    fn new(h: &Hyperparams, terms: ObjectiveTerms) -> Self {
        Self {
            eta: h.eta,
            lambda: if terms.intra { h.lambda } else { 0.0 },
            beta: if terms.inter { h.beta } else { 0.0 },
            r: h.bits as f64,
            cross: h.cross_term.multiplier(),
        }
    }
}

/// Per-modality step-one variables plus cached label matrices.
#[derive(Debug, Clone)]
pub struct ModalityState {
    pub p: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub e: DMatrix<f64>,
    /// Binary labels `L`.
    pub labels: DMatrix<f64>,
    /// Index matrix `R` (±1).
    pub index: DMatrix<f64>,
    /// Column-normalized labels `L̃`.
    pub normalized: DMatrix<f64>,
}

impl ModalityState {
    pub fn samples(&self) -> usize {
        self.v.ncols()
    }

    /// `L̃ Vᵀ`, the `c × r` summary of this modality used by the
    /// inter-modal terms.
    fn label_projection(&self) -> DMatrix<f64> {
        &self.normalized * self.v.transpose()
    }
}

#[derive(Debug, Clone)]
pub struct CodeLearningState {
    pub modalities: Vec<ModalityState>,
    /// Objective after initialization, then after every sweep.
    pub objective_trace: Vec<f64>,
}

/// Individual objective terms (already weighted).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveBreakdown {
    pub regression: f64,
    pub quantization: f64,
    pub intra: f64,
    pub inter: f64,
}

impl ObjectiveBreakdown {
    pub fn total(&self) -> f64 {
        self.regression + self.quantization + self.intra + self.inter
    }
}

/// Margin-relaxed regression target `L + R ⊙ E`.
pub fn apply_margin(
    labels: &DMatrix<f64>,
    index: &DMatrix<f64>,
    margins: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if labels.shape() != index.shape() || labels.shape() != margins.shape() {
        return Err(Error::Shape(format!(
            "labels {:?}, index {:?}, margins {:?}",
            labels.shape(),
            index.shape(),
            margins.shape()
        )));
    }
    if let Some(e) = margins.iter().find(|&&e| !(e >= 0.0)) {
        return Err(Error::Invalid(format!("margin entry {e} is negative")));
    }
    Ok(labels + index.component_mul(margins))
}

/// `P = (L + R⊙E) Vᵀ / n`; exact under `V Vᵀ = nI`.
pub fn update_p(
    labels: &DMatrix<f64>,
    index: &DMatrix<f64>,
    margins: &DMatrix<f64>,
    v: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if v.ncols() != labels.ncols() {
        return Err(Error::Shape(format!(
            "V has {} columns, labels have {}",
            v.ncols(),
            labels.ncols()
        )));
    }
    let target = apply_margin(labels, index, margins)?;
    Ok(target * v.transpose() / v.ncols() as f64)
}

/// `sgn(x)`: `+1` for positive input, `-1` otherwise (including zero).
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// `B = sgn(ηV + λr (V L̃ᵀ) L̃)`.
pub fn update_b(v: &DMatrix<f64>, normalized: &DMatrix<f64>, eta: f64, lambda: f64, bits: usize) -> DMatrix<f64> {
    let mut arg = v * eta;
    if lambda != 0.0 {
        let vl = v * normalized.transpose();
        arg += (vl * normalized) * (lambda * bits as f64);
    }
    arg.map(sign)
}

/// `E = max(R ⊙ (P V − L), 0)`.
pub fn update_e(
    p: &DMatrix<f64>,
    v: &DMatrix<f64>,
    labels: &DMatrix<f64>,
    index: &DMatrix<f64>,
) -> DMatrix<f64> {
    let h = p * v - labels;
    index.zip_map(&h, |r, h| (r * h).max(0.0))
}

/// Linear target `Z` of the `V⁽ⁱ⁾` subproblem `max tr(Z Vᵀ)`:
///
/// `Z = Pᵀ(L + R⊙E) + ηB + λr B L̃ᵀL̃ + βr Σ_{j≠i} V⁽ʲ⁾L̃⁽ʲ⁾ᵀL̃⁽ⁱ⁾`
///
/// with the last coefficient doubled under [`CrossTerm::Exact`].
pub fn build_z(i: usize, state: &CodeLearningState, h: &Hyperparams, terms: ObjectiveTerms) -> Result<DMatrix<f64>> {
    build_z_weighted(i, &state.modalities, Weights::new(h, terms))
}

fn build_z_weighted(i: usize, mods: &[ModalityState], w: Weights) -> Result<DMatrix<f64>> {
    let st = mods.get(i).ok_or(Error::UnknownModality(i))?;
    let target = apply_margin(&st.labels, &st.index, &st.e)?;
    let mut z = st.p.tr_mul(&target);
    z += &st.b * w.eta;
    if w.lambda != 0.0 {
        let bl = &st.b * st.normalized.transpose();
        z += (bl * &st.normalized) * (w.lambda * w.r);
    }
    if w.beta != 0.0 && mods.len() > 1 {
        let c = st.normalized.nrows();
        let r = st.v.nrows();
        let mut cross = DMatrix::<f64>::zeros(c, r);
        for (j, other) in mods.iter().enumerate() {
            if j != i {
                cross += other.label_projection();
            }
        }
        z += cross.tr_mul(&st.normalized) * (w.cross * w.beta * w.r);
    }
    Ok(z)
}

/// Exact objective value, term by term.
pub fn objective_terms(state: &CodeLearningState, h: &Hyperparams, terms: ObjectiveTerms) -> ObjectiveBreakdown {
    breakdown(&state.modalities, Weights::new(h, terms))
}

pub fn objective(state: &CodeLearningState, h: &Hyperparams, terms: ObjectiveTerms) -> f64 {
    objective_terms(state, h, terms).total()
}

fn breakdown(mods: &[ModalityState], w: Weights) -> ObjectiveBreakdown {
    let mut out = ObjectiveBreakdown {
        regression: 0.0,
        quantization: 0.0,
        intra: 0.0,
        inter: 0.0,
    };
    let r = w.r;
    let vvt: Vec<DMatrix<f64>> = mods.iter().map(|st| &st.v * st.v.transpose()).collect();
    let lv: Vec<DMatrix<f64>> = mods.iter().map(ModalityState::label_projection).collect();
    let gram: Vec<DMatrix<f64>> = mods
        .iter()
        .map(|st| &st.normalized * st.normalized.transpose())
        .collect();

    for (i, st) in mods.iter().enumerate() {
        let target = &st.labels + st.index.component_mul(&st.e);
        out.regression += (target - &st.p * &st.v).norm_squared();
        out.quantization += w.eta * (&st.b - &st.v).norm_squared();
        if w.lambda != 0.0 {
            // ‖BᵀV − rS‖² = tr(VVᵀ BBᵀ) − 2r ⟨L̃Bᵀ, L̃Vᵀ⟩ + r² ‖L̃L̃ᵀ‖²
            let bbt = &st.b * st.b.transpose();
            let lb = &st.normalized * st.b.transpose();
            let val = vvt[i].dot(&bbt) - 2.0 * r * lb.dot(&lv[i]) + r * r * gram[i].norm_squared();
            out.intra += w.lambda * val;
        }
    }
    if w.beta != 0.0 {
        for j in 0..mods.len() {
            for i in 0..mods.len() {
                if i == j {
                    continue;
                }
                // ‖V⁽ʲ⁾ᵀV⁽ⁱ⁾ − rS⁽ʲⁱ⁾‖²
                let val = vvt[j].dot(&vvt[i]) - 2.0 * r * lv[j].dot(&lv[i])
                    + r * r * gram[j].dot(&gram[i]);
                out.inter += w.beta * val;
            }
        }
    }
    out
}

/// Which block was just updated, reported to a training observer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    P,
    V,
    B,
    E,
}

#[derive(Debug, Clone, Copy)]
pub struct CodeEvent<'a> {
    pub sweep: usize,
    pub modality: usize,
    pub block: Block,
    pub state: &'a CodeLearningState,
}

fn check_feasible(corpus: &MultiModalCorpus, bits: usize) -> Result<()> {
    for (i, m) in corpus.modalities().iter().enumerate() {
        if bits + 1 > m.samples() {
            return Err(Error::InfeasibleBits {
                bits,
                modality: i + 1,
                samples: m.samples(),
            });
        }
    }
    Ok(())
}

/// Feasible starting point: zero margins, random signs, `V` solved from a
/// random Gaussian target, `P` from its closed form.
pub fn initialize(corpus: &MultiModalCorpus, h: &Hyperparams) -> Result<CodeLearningState> {
    h.validate()?;
    check_feasible(corpus, h.bits)?;
    let mut rng = ChaCha8Rng::seed_from_u64(h.seed);
    let r = h.bits;
    let mut modalities = Vec::with_capacity(corpus.modalities().len());
    for m in corpus.modalities() {
        let labels = m.labels().values().clone();
        let index = index_matrix(m.labels()).values().clone();
        let normalized = normalize_labels(m.labels()).values().clone();
        let n = m.samples();
        let c = labels.nrows();

        let b = DMatrix::from_fn(r, n, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 });
        let z0 = DMatrix::from_fn(r, n, |_, _| rng.sample(StandardNormal));
        let v = stiefel::solve_centered_orthogonal(CenteredOrthogonalProblem::new(&z0)?, h.rank_tol, rng.random())?.v;
        let e = DMatrix::zeros(c, n);
        let p = update_p(&labels, &index, &e, &v)?;
        modalities.push(ModalityState {
            p,
            v,
            b,
            e,
            labels,
            index,
            normalized,
        });
    }
    Ok(CodeLearningState {
        modalities,
        objective_trace: Vec::new(),
    })
}

pub fn train_codes(corpus: &MultiModalCorpus, h: &Hyperparams, terms: ObjectiveTerms) -> Result<CodeLearningState> {
    train_codes_observed(corpus, h, terms, |_| {})
}

/// `true` when `current` exceeds `previous` beyond the monotone slack.
pub fn increased(previous: f64, current: f64) -> bool {
    current > previous + MONOTONE_SLACK * previous.abs()
}

/// Relative change used by the stopping rule.
pub fn relative_change(previous: f64, current: f64) -> f64 {
    (previous - current).abs() / previous.abs().max(f64::MIN_POSITIVE)
}

/// Runs step one, calling `observe` after every block update.
pub fn train_codes_observed(
    corpus: &MultiModalCorpus,
    h: &Hyperparams,
    terms: ObjectiveTerms,
    mut observe: impl FnMut(CodeEvent<'_>),
) -> Result<CodeLearningState> {
    let mut state = initialize(corpus, h)?;
    let w = Weights::new(h, terms);
    // Separate stream for the random completions inside the V updates.
    let mut rng = ChaCha8Rng::seed_from_u64(h.seed ^ V_STREAM);

    let mut prev = breakdown(&state.modalities, w).total();
    if !prev.is_finite() {
        return Err(Error::NonFinite("initial step-one objective".into()));
    }
    state.objective_trace.push(prev);

    for sweep in 1..=h.max_iters {
        for i in 0..state.modalities.len() {
            {
                let st = &mut state.modalities[i];
                st.p = update_p(&st.labels, &st.index, &st.e, &st.v)?;
            }
            observe(CodeEvent { sweep, modality: i, block: Block::P, state: &state });

            let z = build_z_weighted(i, &state.modalities, w)?;
            let sol = stiefel::solve_centered_orthogonal(CenteredOrthogonalProblem::new(&z)?, h.rank_tol, rng.random())?;
            state.modalities[i].v = sol.v;
            observe(CodeEvent { sweep, modality: i, block: Block::V, state: &state });

            {
                let st = &mut state.modalities[i];
                st.b = update_b(&st.v, &st.normalized, w.eta, w.lambda, h.bits);
            }
            observe(CodeEvent { sweep, modality: i, block: Block::B, state: &state });

            if terms.margins {
                let st = &mut state.modalities[i];
                st.e = update_e(&st.p, &st.v, &st.labels, &st.index);
                observe(CodeEvent { sweep, modality: i, block: Block::E, state: &state });
            }
        }

        let cur = breakdown(&state.modalities, w).total();
        if !cur.is_finite() {
            return Err(Error::NonFinite(format!("step-one objective at sweep {sweep}")));
        }
        if increased(prev, cur) {
            return Err(Error::ObjectiveIncreased {
                stage: "step-one",
                iteration: sweep,
                previous: prev,
                current: cur,
            });
        }
        state.objective_trace.push(cur);
        if relative_change(prev, cur) < h.rel_tol {
            break;
        }
        prev = cur;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{synth_corpus, SynthConfig};
    use crate::stiefel::constraint_residuals;
    use rand::Rng;

    fn small_corpus(sizes: Vec<usize>, seed: u64) -> MultiModalCorpus {
        let dims = vec![5; sizes.len()];
        synth_corpus(&SynthConfig {
            classes: 3,
            sizes,
            dims,
            noise: 0.5,
            multilabel_p: 0.3,
            seed,
            paired: false,
        })
        .unwrap()
    }

    /// A state with nonzero margins and codes unrelated to `V`, so every
    /// term of the objective is exercised.
    fn scrambled_state(sizes: Vec<usize>, h: &Hyperparams, seed: u64) -> CodeLearningState {
        let corpus = small_corpus(sizes, seed);
        let mut state = initialize(&corpus, h).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for st in &mut state.modalities {
            st.e = st.e.map(|_| rng.random::<f64>() * 0.5);
            st.p = st.p.map(|_| rng.sample::<f64, _>(StandardNormal));
        }
        state
    }

    fn tiny_h(bits: usize) -> Hyperparams {
        Hyperparams {
            bits,
            eta: 0.7,
            lambda: 0.05,
            beta: 0.03,
            ..Default::default()
        }
    }

    fn explicit_s(lj: &DMatrix<f64>, li: &DMatrix<f64>) -> DMatrix<f64> {
        let nj = lj.ncols();
        let ni = li.ncols();
        DMatrix::from_fn(nj, ni, |u, k| lj.column(u).dot(&li.column(k)))
    }

    /// Direct evaluation with every similarity matrix materialized.
    fn naive_objective(mods: &[ModalityState], h: &Hyperparams) -> [f64; 4] {
        let r = h.bits as f64;
        let mut out = [0.0; 4];
        for st in mods {
            let t = &st.labels + st.index.component_mul(&st.e);
            out[0] += (t - &st.p * &st.v).norm_squared();
            out[1] += h.eta * (&st.b - &st.v).norm_squared();
            let s = explicit_s(&st.normalized, &st.normalized);
            out[2] += h.lambda * (st.b.transpose() * &st.v - s * r).norm_squared();
        }
        for (j, sj) in mods.iter().enumerate() {
            for (i, si) in mods.iter().enumerate() {
                if i != j {
                    let s = explicit_s(&sj.normalized, &si.normalized);
                    out[3] += h.beta * (sj.v.transpose() * &si.v - s * r).norm_squared();
                }
            }
        }
        out
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn margin_examples() {
        let l = DMatrix::from_column_slice(4, 1, &[0.0, 1.0, 0.0, 1.0]);
        let r = l.map(|v| if v == 1.0 { 1.0 } else { -1.0 });
        let e = DMatrix::from_column_slice(4, 1, &[0.1, 0.2, 0.3, 0.4]);
        let t = apply_margin(&l, &r, &e).unwrap();
        assert_eq!(t.as_slice(), &[-0.1, 1.2, -0.3, 1.4]);
        assert_eq!(apply_margin(&l, &r, &DMatrix::zeros(4, 1)).unwrap(), l);
        assert!(apply_margin(&l, &r, &(-e)).is_err());
        assert!(apply_margin(&l, &r, &DMatrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn update_p_example() {
        let v = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let l = DMatrix::identity(2, 2);
        let r = l.map(|x| if x == 1.0 { 1.0 } else { -1.0 });
        let p = update_p(&l, &r, &DMatrix::zeros(2, 2), &v).unwrap();
        assert_eq!(p.as_slice(), &[0.5, -0.5]);
    }

    #[test]
    fn update_p_matches_least_squares_oracle() {
        let h = tiny_h(4);
        let state = scrambled_state(vec![20, 17], &h, 3);
        for st in &state.modalities {
            let p = update_p(&st.labels, &st.index, &st.e, &st.v).unwrap();
            // Unconstrained least squares for ‖T − PV‖²: P = T Vᵀ (V Vᵀ)⁻¹.
            let t = &st.labels + st.index.component_mul(&st.e);
            let gram = (&st.v * st.v.transpose()).try_inverse().unwrap();
            let oracle = t.clone() * st.v.transpose() * gram;
            assert!((&p - &oracle).norm() <= 1e-8 * oracle.norm());
            let grad = (t - &p * &st.v) * st.v.transpose() * -2.0;
            assert!(grad.amax() < 1e-9 * st.samples() as f64);
        }
    }

    #[test]
    fn z_matches_explicit_similarity_oracle() {
        for cross_term in [CrossTerm::Single, CrossTerm::Exact] {
            let h = Hyperparams { cross_term, ..tiny_h(2) };
            let state = scrambled_state(vec![5, 6], &h, 11);
            let r = h.bits as f64;
            let k = if cross_term == CrossTerm::Exact { 2.0 } else { 1.0 };
            for i in 0..2 {
                let st = &state.modalities[i];
                let other = &state.modalities[1 - i];
                let t = &st.labels + st.index.component_mul(&st.e);
                let oracle = st.p.transpose() * t
                    + &st.b * h.eta
                    + &st.b * explicit_s(&st.normalized, &st.normalized) * (h.lambda * r)
                    + &other.v * explicit_s(&other.normalized, &st.normalized) * (k * h.beta * r);
                let z = build_z(i, &state, &h, ObjectiveTerms::default()).unwrap();
                assert!((&z - &oracle).amax() < 1e-12 * oracle.amax().max(1.0));
            }
        }
    }

    #[test]
    fn z_term_isolation() {
        let h = Hyperparams { eta: 1e-300, lambda: 0.0, beta: 0.0, ..tiny_h(2) };
        let state = scrambled_state(vec![6, 7], &h, 4);
        let st = &state.modalities[0];
        let z = build_z(0, &state, &h, ObjectiveTerms::default()).unwrap();
        let t = &st.labels + st.index.component_mul(&st.e);
        assert!((z - st.p.transpose() * t).amax() < 1e-250);

        // A single modality has no cross term.
        let h = tiny_h(2);
        let mut single = scrambled_state(vec![6, 7], &h, 4);
        single.modalities.truncate(1);
        let with_beta = build_z(0, &single, &h, ObjectiveTerms::default()).unwrap();
        let without = build_z(0, &single, &h, ObjectiveTerms { inter: false, ..Default::default() }).unwrap();
        assert_eq!(with_beta, without);
        assert!(matches!(build_z(3, &single, &h, ObjectiveTerms::default()), Err(Error::UnknownModality(3))));
    }

    #[test]
    fn objective_matches_naive_similarity_oracle() {
        for seed in 0..5 {
            let h = tiny_h(3);
            let state = scrambled_state(vec![6, 6 + seed as usize], &h, seed);
            let parts = objective_terms(&state, &h, ObjectiveTerms::default());
            let naive = naive_objective(&state.modalities, &h);
            let got = [parts.regression, parts.quantization, parts.intra, parts.inter];
            for (g, n) in got.iter().zip(naive) {
                assert!(rel_close(*g, n, 1e-9), "{g} vs {n}");
            }
            let total = objective(&state, &h, ObjectiveTerms::default());
            assert_eq!(total, parts.regression + parts.quantization + parts.intra + parts.inter);
            assert!(total >= 0.0);
        }
    }

    #[test]
    fn disabled_terms_vanish() {
        let h = tiny_h(3);
        let state = scrambled_state(vec![8, 9], &h, 2);
        let parts = objective_terms(
            &state,
            &h,
            ObjectiveTerms {
                intra: false,
                inter: false,
                margins: true,
            },
        );
        assert_eq!(parts.intra, 0.0);
        assert_eq!(parts.inter, 0.0);
        assert!(parts.regression > 0.0 && parts.quantization > 0.0);
    }

    #[test]
    fn update_b_examples() {
        let v = DMatrix::from_row_slice(2, 3, &[0.5, -0.5, 0.0, 1.0, 0.0, -2.0]);
        let l = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]);
        let b = update_b(&v, &l, 1.0, 0.0, 2);
        assert_eq!(b.as_slice(), v.map(sign).as_slice());
        // Zero argument maps to −1.
        assert_eq!(b[(0, 2)], -1.0);
        assert_eq!(b[(1, 1)], -1.0);
        assert_eq!(sign(0.0), -1.0);
        assert_eq!(sign(-0.0), -1.0);
    }

    #[test]
    fn update_b_survives_every_single_flip() {
        for seed in 0..5 {
            let h = Hyperparams { lambda: 0.2, ..tiny_h(3) };
            let mut state = scrambled_state(vec![12 + seed as usize * 7, 10], &h, seed);
            let terms = ObjectiveTerms::default();
            {
                let st = &mut state.modalities[0];
                st.b = update_b(&st.v, &st.normalized, h.eta, h.lambda, h.bits);
            }
            let best = objective(&state, &h, terms);
            let (r, n) = state.modalities[0].b.shape();
            assert!(n <= 50);
            for bit in 0..r {
                for k in 0..n {
                    state.modalities[0].b[(bit, k)] *= -1.0;
                    let flipped = objective(&state, &h, terms);
                    state.modalities[0].b[(bit, k)] *= -1.0;
                    assert!(flipped >= best - 1e-9 * best, "flip ({bit},{k}) lowers {best} to {flipped}");
                }
            }
        }
    }

    #[test]
    fn update_e_examples() {
        let p = DMatrix::from_element(1, 1, 1.0);
        let v = DMatrix::from_row_slice(1, 2, &[0.5, -0.2]);
        let l = DMatrix::zeros(1, 2);
        let r = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let e = update_e(&p, &v, &l, &r);
        assert_eq!(e.as_slice(), &[0.5, 0.2]);
        // Zero residual gives zero margins.
        let e0 = update_e(&p, &v, &v, &r);
        assert_eq!(e0, DMatrix::zeros(1, 2));
    }

    #[test]
    fn update_e_beats_sampled_margins() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..5 {
            let h = tiny_h(3);
            let state = scrambled_state(vec![9, 8], &h, seed);
            let st = &state.modalities[0];
            let e = update_e(&st.p, &st.v, &st.labels, &st.index);
            let hres = &st.p * &st.v - &st.labels;
            for ((&hv, &rv), &ev) in hres.iter().zip(st.index.iter()).zip(e.iter()) {
                assert!(ev >= 0.0);
                let cost = |e: f64| (hv - rv * e).powi(2);
                for _ in 0..100 {
                    let alt = rng.random::<f64>() * 3.0;
                    assert!(cost(ev) <= cost(alt) + 1e-15);
                }
                // Grid oracle.
                let grid_best = (0..=3000).map(|g| cost(g as f64 * 1e-3)).fold(f64::INFINITY, f64::min);
                assert!(cost(ev) <= grid_best + 1e-15);
            }
        }
    }

    /// Replaces one block of modality 0 by its update and checks that random
    /// feasible alternatives for that block never do better.
    #[test]
    fn each_update_is_a_block_minimizer() {
        let h = Hyperparams { cross_term: CrossTerm::Exact, ..tiny_h(3) };
        let terms = ObjectiveTerms::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let state = scrambled_state(vec![14, 11], &h, 8);
        let eval = |s: &CodeLearningState| objective(s, &h, terms);
        let tol = |x: f64| x - 1e-9 * x.abs();

        let mut s = state.clone();
        let st = &mut s.modalities[0];
        st.p = update_p(&st.labels, &st.index, &st.e, &st.v).unwrap();
        let best = eval(&s);
        for _ in 0..100 {
            let mut alt = s.clone();
            let scale = rng.random::<f64>();
            alt.modalities[0].p.iter_mut().for_each(|x| *x += scale * rng.sample::<f64, _>(StandardNormal));
            assert!(eval(&alt) >= tol(best));
        }

        let mut s = state.clone();
        let z = build_z(0, &s, &h, terms).unwrap();
        s.modalities[0].v = stiefel::solve_centered_orthogonal(CenteredOrthogonalProblem::new(&z).unwrap(), h.rank_tol, 1)
            .unwrap()
            .v;
        let best = eval(&s);
        for _ in 0..100 {
            let mut alt = s.clone();
            let zr = DMatrix::from_fn(z.nrows(), z.ncols(), |_, _| rng.sample(StandardNormal));
            alt.modalities[0].v = stiefel::solve_centered_orthogonal(CenteredOrthogonalProblem::new(&zr).unwrap(), h.rank_tol, 2)
                .unwrap()
                .v;
            assert!(eval(&alt) >= tol(best));
        }

        let mut s = state.clone();
        let st = &mut s.modalities[0];
        st.b = update_b(&st.v, &st.normalized, h.eta, h.lambda, h.bits);
        let best = eval(&s);
        for _ in 0..100 {
            let mut alt = s.clone();
            alt.modalities[0].b.iter_mut().for_each(|x| {
                if rng.random::<f64>() < 0.2 {
                    *x = -*x;
                }
            });
            assert!(eval(&alt) >= tol(best));
        }

        let mut s = state;
        let st = &mut s.modalities[0];
        st.e = update_e(&st.p, &st.v, &st.labels, &st.index);
        let best = eval(&s);
        for _ in 0..100 {
            let mut alt = s.clone();
            alt.modalities[0].e.iter_mut().for_each(|x| *x = (*x + 0.3 * rng.sample::<f64, _>(StandardNormal)).max(0.0));
            assert!(eval(&alt) >= tol(best));
        }
    }

    #[test]
    fn training_keeps_invariants_and_decreases() {
        let h = Hyperparams {
            bits: 4,
            cross_term: CrossTerm::Exact,
            ..Default::default()
        };
        let corpus = small_corpus(vec![30, 25], 6);
        let mut checked = 0;
        let state = train_codes_observed(&corpus, &h, ObjectiveTerms::default(), |ev| {
            let st = &ev.state.modalities[ev.modality];
            if ev.block == Block::V {
                let (orth, bal) = constraint_residuals(&st.v);
                let n = st.samples() as f64;
                assert!(orth <= 1e-8 * n && bal <= 1e-8 * (n * 4.0).sqrt());
                checked += 1;
            }
            assert!(st.e.iter().all(|&e| e >= 0.0));
            assert!(st.b.iter().all(|&b| b == 1.0 || b == -1.0));
        })
        .unwrap();
        assert!(checked >= 2);
        let trace = &state.objective_trace;
        assert!(trace.windows(2).all(|w| !increased(w[0], w[1])));
        assert!(trace.last().unwrap() < &trace[0]);
    }

    #[test]
    fn training_is_deterministic() {
        let h = Hyperparams { bits: 4, ..Default::default() };
        let corpus = small_corpus(vec![30, 25], 6);
        let a = train_codes(&corpus, &h, ObjectiveTerms::default()).unwrap();
        let b = train_codes(&corpus, &h, ObjectiveTerms::default()).unwrap();
        for (x, y) in a.modalities.iter().zip(&b.modalities) {
            assert_eq!(x.b, y.b);
            assert_eq!(x.v, y.v);
        }
        assert_eq!(a.objective_trace, b.objective_trace);
    }

    #[test]
    fn frozen_margins_stay_zero() {
        let h = Hyperparams {
            bits: 4,
            cross_term: CrossTerm::Exact,
            ..Default::default()
        };
        let corpus = small_corpus(vec![30, 25], 6);
        let terms = ObjectiveTerms { margins: false, ..Default::default() };
        let state = train_codes(&corpus, &h, terms).unwrap();
        assert!(state.modalities.iter().all(|m| m.e.iter().all(|&e| e == 0.0)));
    }

    #[test]
    fn single_cross_term_can_raise_the_objective() {
        // With the single βr coefficient the V step overshoots; this corpus
        // shows an increase within a few sweeps. The doubled coefficient
        // does not.
        let corpus = small_corpus(vec![30, 25], 6);
        let terms = ObjectiveTerms { margins: false, ..Default::default() };
        let single = Hyperparams { bits: 4, ..Default::default() };
        assert!(matches!(
            train_codes(&corpus, &single, terms),
            Err(Error::ObjectiveIncreased { stage: "step-one", .. })
        ));
        let exact = Hyperparams { cross_term: CrossTerm::Exact, ..single };
        let state = train_codes(&corpus, &exact, terms).unwrap();
        assert!(state.objective_trace.windows(2).all(|w| !increased(w[0], w[1])));
    }

    #[test]
    fn infeasible_code_length_is_rejected() {
        let corpus = small_corpus(vec![6, 9], 1);
        let h = Hyperparams { bits: 6, ..Default::default() };
        match train_codes(&corpus, &h, ObjectiveTerms::default()) {
            Err(Error::InfeasibleBits { bits: 6, modality: 1, samples: 6 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn hyperparams_validation() {
        assert!(Hyperparams::default().validate().is_ok());
        let bad = [
            Hyperparams { eta: 0.0, ..Default::default() },
            Hyperparams { lambda: -1.0, ..Default::default() },
            Hyperparams { beta: f64::NAN, ..Default::default() },
            Hyperparams { bits: 1, ..Default::default() },
            Hyperparams { max_iters: 0, ..Default::default() },
            Hyperparams { anchors: 0, ..Default::default() },
        ];
        for h in bad {
            assert!(h.validate().is_err(), "{h:?}");
        }
        let d = Hyperparams::default();
        assert_eq!((d.eta, d.lambda, d.beta, d.anchors, d.max_iters), (1.0, 1e-3, 1e-3, 1500, 15));
    }

    #[test]
    fn cross_term_names_round_trip() {
        for c in [CrossTerm::Single, CrossTerm::Exact] {
            assert_eq!(c.to_string().parse::<CrossTerm>().unwrap(), c);
        }
        assert!("double".parse::<CrossTerm>().is_err());
    }

    #[test]
    fn monotone_helpers() {
        assert!(!increased(10.0, 10.0 + 1e-9));
        assert!(increased(10.0, 10.1));
        assert!((relative_change(10.0, 9.0) - 0.1).abs() < 1e-15);
    }
}
